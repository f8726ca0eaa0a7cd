//! Descriptor encoder: input projection, alternating self/cross attention
//! layers, neighborhood hand-off and pairwise neighborhood layers.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::KeypointSet;
use crate::graph::{AttentionKind, Eager, Graph};
use crate::matrix::Matrix;
use crate::neighborhood::{select_neighborhoods, NeighborhoodConfig, Selection};
use crate::weights::{LayerKind, LayerWeights, NetworkWeights};

/// Kernel used by the self and cross layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionVariant {
    #[default]
    Linear,
    /// Quadratic softmax baseline, for benchmarking.
    Softmax,
}

impl AttentionVariant {
    pub fn kind(self) -> AttentionKind {
        match self {
            AttentionVariant::Linear => AttentionKind::Linear,
            AttentionVariant::Softmax => AttentionKind::Softmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Descriptor width `D`.
    pub input_dim: usize,
    /// Encoded width `C′`.
    pub hidden_dim: usize,
    pub heads: usize,
    /// Self/cross loop count.
    pub l1: usize,
    /// Pairwise loop count.
    pub l2: usize,
    /// Reuse one set of self/cross/pair weights across loop iterations.
    pub tie_weights: bool,
    pub attention: AttentionVariant,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_dim: 256,
            hidden_dim: 64,
            heads: 8,
            l1: 4,
            l2: 2,
            tie_weights: false,
            attention: AttentionVariant::Linear,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("input_dim and hidden_dim must be positive".into()));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.l1 == 0 {
            return Err(Error::Config("l1 must be at least 1".into()));
        }
        Ok(())
    }
}

/// Layer parameters registered on a graph.
pub struct LayerVars<V> {
    pub wq: V,
    pub wk: V,
    pub wv: V,
    pub mlp0: V,
    pub mlp1: V,
    pub ln_g: V,
    pub ln_b: V,
    pub input_projection: bool,
}

pub fn register_layer<G: Graph>(g: &mut G, kind: LayerKind, idx: usize, w: &LayerWeights) -> LayerVars<G::Var> {
    let mut p = |t: &str, m: &Matrix| g.param(&format!("layer{idx}.{kind}.{t}"), m);
    LayerVars {
        wq: p("wq", &w.wq),
        wk: p("wk", &w.wk),
        wv: p("wv", &w.wv),
        mlp0: p("mlp0", &w.mlp0),
        mlp1: p("mlp1", &w.mlp1),
        ln_g: p("ln_g", &w.ln_g),
        ln_b: p("ln_b", &w.ln_b),
        input_projection: w.input_projection,
    }
}

/// One encoder block on a graph:
/// `base + W₁·relu(LN(W₀·[base | m]))` with `m = attend(x_q W_Q, x_s W_K, x_s W_V)`.
/// `base` is `x_query`, or `x_query·W_V` for an input-projection layer.
pub fn encoder_layer_on<G: Graph>(
    g: &mut G,
    x_query: &G::Var,
    x_source: &G::Var,
    w: &LayerVars<G::Var>,
    kind: AttentionKind,
    heads: usize,
) -> Result<G::Var> {
    let q = g.matmul(x_query, &w.wq)?;
    let k = g.matmul(x_source, &w.wk)?;
    let v = g.matmul(x_source, &w.wv)?;
    let message = g.attention(kind, heads, &q, &k, &v)?;
    let base = if w.input_projection {
        g.matmul(x_query, &w.wv)?
    } else {
        x_query.clone()
    };
    let cat = g.hconcat(&base, &message)?;
    let h = g.matmul(&cat, &w.mlp0)?;
    let h = g.layer_norm(&h, &w.ln_g, &w.ln_b)?;
    let h = g.relu(&h)?;
    let h = g.matmul(&h, &w.mlp1)?;
    g.add(&base, &h)
}

/// [`encoder_layer_on`] evaluated eagerly.
pub fn encoder_layer(
    x_query: &Matrix,
    x_source: &Matrix,
    w: &LayerWeights,
    kind: AttentionKind,
    heads: usize,
) -> Result<Matrix> {
    let mut g = Eager;
    let vars = register_layer(&mut g, LayerKind::SelfAttention, 0, w);
    encoder_layer_on(&mut g, x_query, x_source, &vars, kind, heads)
}

pub fn self_attention_update(
    xs: &Matrix,
    xt: &Matrix,
    w: &LayerWeights,
    kind: AttentionKind,
    heads: usize,
) -> Result<(Matrix, Matrix)> {
    Ok((
        encoder_layer(xs, xs, w, kind.clone(), heads)?,
        encoder_layer(xt, xt, w, kind, heads)?,
    ))
}

pub fn cross_attention_update(
    xs: &Matrix,
    xt: &Matrix,
    w: &LayerWeights,
    kind: AttentionKind,
    heads: usize,
) -> Result<(Matrix, Matrix)> {
    Ok((
        encoder_layer(xs, xt, w, kind.clone(), heads)?,
        encoder_layer(xt, xs, w, kind, heads)?,
    ))
}

/// Pairwise layer in both directions; target-side queries use the swapped sets.
pub fn pairwise_layer_update(
    xs: &Matrix,
    xt: &Matrix,
    pairs: &[crate::attention::NeighborhoodPair],
    w: &LayerWeights,
    heads: usize,
) -> Result<(Matrix, Matrix)> {
    let (fwd, back) = pair_kinds(pairs);
    Ok((encoder_layer(xs, xt, w, fwd, heads)?, encoder_layer(xt, xs, w, back, heads)?))
}

fn pair_kinds(pairs: &[crate::attention::NeighborhoodPair]) -> (AttentionKind, AttentionKind) {
    let fwd = Arc::new(pairs.to_vec());
    let back = Arc::new(pairs.iter().map(|p| p.swapped()).collect());
    (AttentionKind::Pairwise(fwd), AttentionKind::Pairwise(back))
}

/// Encoder outputs on a graph.
pub struct Encoded<V> {
    /// Row-normalized final descriptors.
    pub xs: V,
    pub xt: V,
    /// Output of the last cross layer, before any pairwise layer.
    pub fs: V,
    pub ft: V,
    /// Neighborhoods used by the pairwise layers (empty when `l2 = 0`).
    pub selection: Selection,
}

/// Evaluated encoder outputs.
#[derive(Debug, Clone)]
pub struct EncodedPair {
    pub xs: Matrix,
    pub xt: Matrix,
    pub fs: Matrix,
    pub ft: Matrix,
    pub selection: Selection,
}

fn check_inputs(source: &KeypointSet, target: &KeypointSet, weights: &NetworkWeights, cfg: &NetworkConfig) -> Result<()> {
    cfg.validate()?;
    for (side, set) in [("source", source), ("target", target)] {
        if set.descriptor_dim() != cfg.input_dim {
            return Err(Error::Shape(format!(
                "{side} descriptors have dimension {}, network expects {}",
                set.descriptor_dim(),
                cfg.input_dim
            )));
        }
    }
    weights.check(cfg)
}

/// Full encoder on a graph. Neighborhood selection reads the values of the
/// last cross layer; the chosen index sets carry no gradient.
pub fn forward_on<G: Graph>(
    g: &mut G,
    source: &KeypointSet,
    target: &KeypointSet,
    weights: &NetworkWeights,
    cfg: &NetworkConfig,
    neigh: &NeighborhoodConfig,
) -> Result<Encoded<G::Var>> {
    check_inputs(source, target, weights, cfg)?;
    let mut xs = g.constant(source.descriptors().clone());
    let mut xt = g.constant(target.descriptors().clone());
    let base = cfg.attention.kind();
    let layer = |g: &mut G, kind: LayerKind, it: usize| {
        let (idx, w) = weights.layer_for(kind, it).expect("layer counts checked");
        register_layer(g, kind, idx, w)
    };

    for it in 0..cfg.l1 {
        let w = layer(g, LayerKind::SelfAttention, it);
        let ns = encoder_layer_on(g, &xs, &xs, &w, base.clone(), cfg.heads)?;
        let nt = encoder_layer_on(g, &xt, &xt, &w, base.clone(), cfg.heads)?;
        (xs, xt) = (ns, nt);
        let w = layer(g, LayerKind::Cross, it);
        let ns = encoder_layer_on(g, &xs, &xt, &w, base.clone(), cfg.heads)?;
        let nt = encoder_layer_on(g, &xt, &xs, &w, base.clone(), cfg.heads)?;
        (xs, xt) = (ns, nt);
    }
    let (fs, ft) = (xs.clone(), xt.clone());

    let selection = if cfg.l2 > 0 {
        select_neighborhoods(g.value(&fs), g.value(&ft), source, target, neigh)?
    } else {
        Selection::default()
    };
    if cfg.l2 > 0 {
        let (fwd, back) = pair_kinds(&selection.pairs());
        for it in 0..cfg.l2 {
            let w = layer(g, LayerKind::Pairwise, it);
            let ns = encoder_layer_on(g, &xs, &xt, &w, fwd.clone(), cfg.heads)?;
            let nt = encoder_layer_on(g, &xt, &xs, &w, back.clone(), cfg.heads)?;
            (xs, xt) = (ns, nt);
        }
    }
    Ok(Encoded {
        xs: g.row_normalize(&xs)?,
        xt: g.row_normalize(&xt)?,
        fs,
        ft,
        selection,
    })
}

pub fn forward(
    source: &KeypointSet,
    target: &KeypointSet,
    weights: &NetworkWeights,
    cfg: &NetworkConfig,
    neigh: &NeighborhoodConfig,
) -> Result<EncodedPair> {
    let e = forward_on(&mut Eager, source, target, weights, cfg, neigh)?;
    Ok(EncodedPair {
        xs: e.xs,
        xt: e.xt,
        fs: e.fs,
        ft: e.ft,
        selection: e.selection,
    })
}
