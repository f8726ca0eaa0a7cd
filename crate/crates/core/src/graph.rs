//! Matrix-level computation graphs.
//!
//! Model code is written once against [`Graph`]. [`Eager`] evaluates values
//! only and keeps nothing alive; [`Tape`] records every operation so that
//! [`Tape::backward`] can run reverse-mode accumulation to named parameters.

use std::collections::HashMap;

use crate::attention::{multi_head, multi_head_backward, Kernel, NeighborhoodPair, ProjectedTriplet};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// A differentiable operation on `f64` matrices.
pub trait Op {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix>;

    /// Gradient with respect to each input, given the output gradient.
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>>;
}

pub trait Graph {
    type Var: Clone;

    /// A non-trainable input.
    fn constant(&mut self, value: Matrix) -> Self::Var;

    /// A named trainable tensor. Repeated names resolve to the same variable.
    fn param(&mut self, name: &str, value: &Matrix) -> Self::Var;

    fn value<'a>(&'a self, var: &'a Self::Var) -> &'a Matrix;

    fn apply(&mut self, op: Box<dyn Op>, inputs: &[&Self::Var]) -> Result<Self::Var>;

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Box::new(MatMul), &[a, b])
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Box::new(Add), &[a, b])
    }

    fn hconcat(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Box::new(HConcat), &[a, b])
    }

    fn relu(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Box::new(Relu), &[a])
    }

    fn scale(&mut self, a: &Self::Var, factor: f64) -> Result<Self::Var> {
        self.apply(Box::new(Scale(factor)), &[a])
    }

    fn layer_norm(&mut self, x: &Self::Var, gain: &Self::Var, bias: &Self::Var) -> Result<Self::Var> {
        self.apply(Box::new(LayerNorm), &[x, gain, bias])
    }

    fn row_normalize(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Box::new(RowNormalize), &[x])
    }

    fn attention(
        &mut self,
        kind: AttentionKind,
        heads: usize,
        q: &Self::Var,
        k: &Self::Var,
        v: &Self::Var,
    ) -> Result<Self::Var> {
        self.apply(Box::new(Attention { kind, heads }), &[q, k, v])
    }
}

/// Value-only evaluation.
#[derive(Debug, Default)]
pub struct Eager;

impl Graph for Eager {
    type Var = Matrix;

    fn constant(&mut self, value: Matrix) -> Matrix {
        value
    }

    fn param(&mut self, _name: &str, value: &Matrix) -> Matrix {
        value.clone()
    }

    fn value<'a>(&'a self, var: &'a Matrix) -> &'a Matrix {
        var
    }

    fn apply(&mut self, op: Box<dyn Op>, inputs: &[&Matrix]) -> Result<Matrix> {
        op.forward(inputs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TapeVar(usize);

struct Node {
    value: Matrix,
    op: Option<Box<dyn Op>>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Recording graph for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> TapeVar {
        self.nodes.push(node);
        TapeVar(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to every named parameter.
    /// Parameters the loss does not depend on get zero gradients.
    pub fn backward(&self, loss: TapeVar) -> Result<HashMap<String, Matrix>> {
        let out = &self.nodes[loss.0].value;
        if out.shape() != (1, 1) {
            return Err(Error::Shape(format!("backward needs a 1x1 loss, got {:?}", out.shape())));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            // interior gradients are released once propagated
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Matrix> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad)?;
            for (&i, g) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[i].requires_grad {
                    continue;
                }
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(self
            .params
            .iter()
            .map(|(name, &i)| {
                let shape = self.nodes[i].value.shape();
                let g = grads[i].take().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
                (name.clone(), g)
            })
            .collect())
    }
}

impl Graph for Tape {
    type Var = TapeVar;

    fn constant(&mut self, value: Matrix) -> TapeVar {
        self.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            requires_grad: false,
        })
    }

    fn param(&mut self, name: &str, value: &Matrix) -> TapeVar {
        if let Some(&i) = self.params.get(name) {
            return TapeVar(i);
        }
        let var = self.push(Node {
            value: value.clone(),
            op: None,
            inputs: Vec::new(),
            requires_grad: true,
        });
        self.params.insert(name.to_string(), var.0);
        var
    }

    fn value<'a>(&'a self, var: &'a TapeVar) -> &'a Matrix {
        &self.nodes[var.0].value
    }

    fn apply(&mut self, op: Box<dyn Op>, inputs: &[&TapeVar]) -> Result<TapeVar> {
        let values: Vec<&Matrix> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = op.forward(&values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Node {
            value,
            op: Some(op),
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
        }))
    }
}

fn expect_inputs(op: &dyn Op, inputs: &[&Matrix], n: usize) -> Result<()> {
    if inputs.len() == n {
        Ok(())
    } else {
        Err(Error::Shape(format!("{} expects {n} inputs, got {}", op.name(), inputs.len())))
    }
}

pub struct MatMul;

impl Op for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        expect_inputs(self, inputs, 2)?;
        let (a, b) = (inputs[0], inputs[1]);
        if a.cols() != b.rows() {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
        }
        Ok(a.matmul(b))
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>> {
        let (a, b) = (inputs[0], inputs[1]);
        Ok(vec![grad.matmul_t(b), a.t_matmul(grad)])
    }
}

pub struct Add;

impl Op for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        expect_inputs(self, inputs, 2)?;
        if inputs[0].shape() != inputs[1].shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", inputs[0].shape(), inputs[1].shape())));
        }
        Ok(inputs[0].add(inputs[1]))
    }

    fn backward(&self, _inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>> {
        Ok(vec![grad.clone(), grad.clone()])
    }
}

pub struct HConcat;

impl Op for HConcat {
    fn name(&self) -> &'static str {
        "hconcat"
    }

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        expect_inputs(self, inputs, 2)?;
        if inputs[0].rows() != inputs[1].rows() {
            return Err(Error::Shape(format!("hconcat {:?} | {:?}", inputs[0].shape(), inputs[1].shape())));
        }
        Ok(inputs[0].hconcat(inputs[1]))
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>> {
        let split = inputs[0].cols();
        Ok(vec![grad.col_slice(0, split), grad.col_slice(split, grad.cols())])
    }
}

pub struct Relu;

impl Op for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        expect_inputs(self, inputs, 1)?;
        Ok(inputs[0].map(|x| x.max(0.0)))
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>> {
        let x = inputs[0];
        let data = x
            .as_slice()
            .iter()
            .zip(grad.as_slice())
            .map(|(&xi, &g)| if xi > 0.0 { g } else { 0.0 })
            .collect();
        Ok(vec![Matrix::from_vec(x.rows(), x.cols(), data)])
    }
}

pub struct Scale(pub f64);

impl Op for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        expect_inputs(self, inputs, 1)?;
        Ok(inputs[0].scale(self.0))
    }

    fn backward(&self, _inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>> {
        Ok(vec![grad.scale(self.0)])
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row layer normalization with `1×n` gain and bias.
pub struct LayerNorm;

impl LayerNorm {
    fn row_stats(row: &[f64]) -> (f64, f64) {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
    }
}

impl Op for LayerNorm {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        expect_inputs(self, inputs, 3)?;
        let (x, gain, bias) = (inputs[0], inputs[1], inputs[2]);
        if gain.shape() != (1, x.cols()) || bias.shape() != (1, x.cols()) {
            return Err(Error::Shape(format!(
                "layer_norm over {} features with gain {:?} and bias {:?}",
                x.cols(),
                gain.shape(),
                bias.shape()
            )));
        }
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            let (mean, inv_std) = Self::row_stats(row);
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[c] - mean) * inv_std * gain[(0, c)] + bias[(0, c)];
            }
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>> {
        let (x, gain) = (inputs[0], inputs[1]);
        let n = x.cols();
        let mut dx = Matrix::zeros(x.rows(), n);
        let mut dgain = Matrix::zeros(1, n);
        let mut dbias = Matrix::zeros(1, n);
        let mut xhat = vec![0.0; n];
        let mut dxhat = vec![0.0; n];
        for r in 0..x.rows() {
            let row = x.row(r);
            let g = grad.row(r);
            let (mean, inv_std) = Self::row_stats(row);
            for c in 0..n {
                xhat[c] = (row[c] - mean) * inv_std;
                dxhat[c] = g[c] * gain[(0, c)];
                dgain[(0, c)] += g[c] * xhat[c];
                dbias[(0, c)] += g[c];
            }
            let mean_d = dxhat.iter().sum::<f64>() / n as f64;
            let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = inv_std * (dxhat[c] - mean_d - xhat[c] * mean_dx);
            }
        }
        Ok(vec![dx, dgain, dbias])
    }
}

/// Smallest row norm used as a divisor by [`RowNormalize`].
pub const NORM_FLOOR: f64 = 1e-12;

/// Scales each row to unit Euclidean length.
pub struct RowNormalize;

impl Op for RowNormalize {
    fn name(&self) -> &'static str {
        "row_normalize"
    }

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        expect_inputs(self, inputs, 1)?;
        Ok(row_normalized(inputs[0]))
    }

    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>> {
        let x = inputs[0];
        let mut dx = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            let g = grad.row(r);
            let d = dx.row_mut(r);
            if norm > NORM_FLOOR {
                let y = output.row(r);
                let proj: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for c in 0..d.len() {
                    d[c] = (g[c] - y[c] * proj) / norm;
                }
            } else {
                for c in 0..d.len() {
                    d[c] = g[c] / NORM_FLOOR;
                }
            }
        }
        Ok(vec![dx])
    }
}

/// Row-wise L2 normalization shared by the graph op and inference code.
pub fn row_normalized(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

/// Owned attention selector stored on the tape.
#[derive(Debug, Clone)]
pub enum AttentionKind {
    Linear,
    Softmax,
    Pairwise(std::sync::Arc<Vec<NeighborhoodPair>>),
}

impl AttentionKind {
    pub fn kernel(&self) -> Kernel<'_> {
        match self {
            AttentionKind::Linear => Kernel::Linear,
            AttentionKind::Softmax => Kernel::Softmax,
            AttentionKind::Pairwise(pairs) => Kernel::Pairwise(pairs),
        }
    }
}

/// Multi-head attention over `(q, k, v)` inputs.
pub struct Attention {
    pub kind: AttentionKind,
    pub heads: usize,
}

impl Op for Attention {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        expect_inputs(self, inputs, 3)?;
        let t = ProjectedTriplet::new(inputs[0].clone(), inputs[1].clone(), inputs[2].clone())?;
        multi_head(self.kind.kernel(), &t, self.heads)
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>> {
        let t = ProjectedTriplet::new(inputs[0].clone(), inputs[1].clone(), inputs[2].clone())?;
        let g = multi_head_backward(self.kind.kernel(), &t, self.heads, grad)?;
        Ok(vec![g.dq, g.dk, g.dv])
    }
}
