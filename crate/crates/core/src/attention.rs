//! Attention kernels: linear attention, pairwise neighborhood attention and a
//! softmax reference.
//!
//! Linear attention with the feature map `φ(x) = elu(x) + 1` is evaluated as
//!
//! ```text
//! V'ᵢ = φ(Qᵢ)ᵀ K_v / φ(Qᵢ)ᵀ K_m,   K_v = Σⱼ φ(Kⱼ) Vⱼᵀ,   K_m = Σⱼ φ(Kⱼ)
//! ```
//!
//! so the two key accumulators are built once in `O(M·C'²)` and each query
//! costs `O(C'²)`; no `N×M` buffer exists on this path. Pairwise neighborhood
//! attention restricts both sums to a neighborhood pair and scatters the rows
//! into a zero matrix, summing over pairs.
//!
//! Inputs may be `f32` or `f64`; accumulation is always in `f64`. Rows are
//! evaluated in parallel, each with a fixed summation order, so results do
//! not depend on the thread count.

use rayon::prelude::*;

use crate::counters;
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Real};

/// Query, key and value projections for one attention call.
#[derive(Debug, Clone)]
pub struct ProjectedTriplet<T = f64> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

impl<T: Real> ProjectedTriplet<T> {
    pub fn new(q: Matrix<T>, k: Matrix<T>, v: Matrix<T>) -> Result<Self> {
        if k.rows() != v.rows() {
            return Err(Error::Shape(format!("{} keys but {} values", k.rows(), v.rows())));
        }
        if q.cols() != k.cols() || k.cols() != v.cols() {
            return Err(Error::Shape(format!(
                "projection widths differ: Q {}, K {}, V {}",
                q.cols(),
                k.cols(),
                v.cols()
            )));
        }
        Ok(Self { q, k, v })
    }

    pub fn width(&self) -> usize {
        self.q.cols()
    }

    fn head(&self, start: usize, end: usize) -> Self {
        Self {
            q: self.q.col_slice(start, end),
            k: self.k.col_slice(start, end),
            v: self.v.col_slice(start, end),
        }
    }
}

/// A neighborhood pair: a seed correspondence plus the source and target
/// index sets attention is restricted to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodPair {
    seed: (usize, usize),
    source_set: Vec<usize>,
    target_set: Vec<usize>,
}

impl NeighborhoodPair {
    /// Sets are sorted and deduplicated; both must be non-empty and contain the seed.
    pub fn new(seed: (usize, usize), mut source_set: Vec<usize>, mut target_set: Vec<usize>) -> Result<Self> {
        source_set.sort_unstable();
        source_set.dedup();
        target_set.sort_unstable();
        target_set.dedup();
        if source_set.is_empty() || target_set.is_empty() {
            return Err(Error::InvalidInput("neighborhood index sets must be non-empty".into()));
        }
        if source_set.binary_search(&seed.0).is_err() || target_set.binary_search(&seed.1).is_err() {
            return Err(Error::InvalidInput(format!(
                "seed ({}, {}) is not a member of its own neighborhood",
                seed.0, seed.1
            )));
        }
        Ok(Self {
            seed,
            source_set,
            target_set,
        })
    }

    pub fn seed(&self) -> (usize, usize) {
        self.seed
    }

    pub fn source_set(&self) -> &[usize] {
        &self.source_set
    }

    pub fn target_set(&self) -> &[usize] {
        &self.target_set
    }

    /// The same neighborhood seen from the target image.
    pub fn swapped(&self) -> Self {
        Self {
            seed: (self.seed.1, self.seed.0),
            source_set: self.target_set.clone(),
            target_set: self.source_set.clone(),
        }
    }
}

/// Attention variant applied inside an encoder layer.
#[derive(Debug, Clone, Copy)]
pub enum Kernel<'a> {
    Linear,
    Softmax,
    Pairwise(&'a [NeighborhoodPair]),
}

impl Kernel<'_> {
    pub fn apply<T: Real>(&self, t: &ProjectedTriplet<T>) -> Result<Matrix<T>> {
        match self {
            Kernel::Linear => Ok(linear_attention(t)),
            Kernel::Softmax => Ok(softmax_attention_reference(t)),
            Kernel::Pairwise(pairs) => pairwise_attention(t, pairs),
        }
    }
}

#[inline]
fn phi_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

#[inline]
fn phi_derivative(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Elementwise `elu(x) + 1`; strictly positive.
pub fn phi<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| T::from(phi_scalar(v.to_f64().unwrap())).unwrap())
}

fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().expect("real scalar")
}

fn from_f64<T: Real>(x: f64) -> T {
    T::from(x).expect("representable scalar")
}

/// Key-side accumulators `K_v` (C×C, row-major) and `K_m` (C) over `keys`
/// (all rows when `None`). Returns the multiply count.
fn key_accumulators<T: Real>(k: &Matrix<T>, v: &Matrix<T>, keys: Option<&[usize]>) -> (Vec<f64>, Vec<f64>, u64) {
    let c = k.cols();
    let mut kv = vec![0.0; c * c];
    let mut km = vec![0.0; c];
    let mut phik = vec![0.0; c];
    let mut mults = 0u64;
    let mut absorb = |j: usize| {
        for (p, &x) in phik.iter_mut().zip(k.row(j)) {
            *p = phi_scalar(to_f64(x));
        }
        let vj = v.row(j);
        for a in 0..c {
            km[a] += phik[a];
            let row = &mut kv[a * c..(a + 1) * c];
            for (acc, &vb) in row.iter_mut().zip(vj) {
                *acc += phik[a] * to_f64(vb);
            }
        }
        mults += (c * c) as u64;
    };
    match keys {
        Some(idx) => idx.iter().for_each(|&j| absorb(j)),
        None => (0..k.rows()).for_each(absorb),
    }
    (kv, km, mults)
}

/// One query row against prepared accumulators, written into `out` (f64).
fn query_row(q: &[f64], kv: &[f64], km: &[f64], out: &mut [f64]) {
    let c = km.len();
    let mut den = 0.0;
    out.iter_mut().for_each(|o| *o = 0.0);
    for a in 0..c {
        let pa = phi_scalar(q[a]);
        den += pa * km[a];
        for (o, &s) in out.iter_mut().zip(&kv[a * c..(a + 1) * c]) {
            *o += pa * s;
        }
    }
    out.iter_mut().for_each(|o| *o /= den);
}

/// Linear attention over all keys. With no keys the output is all zeros.
pub fn linear_attention<T: Real>(t: &ProjectedTriplet<T>) -> Matrix<T> {
    let (n, c) = (t.q.rows(), t.width());
    let mut out = Matrix::zeros(n, c);
    if t.k.rows() == 0 || c == 0 {
        return out;
    }
    let (kv, km, mut mults) = key_accumulators(&t.k, &t.v, None);
    out.as_mut_slice()
        .par_chunks_mut(c)
        .enumerate()
        .for_each_init(
            || (vec![0.0; c], vec![0.0; c]),
            |(qrow, acc), (i, o)| {
                for (dst, &x) in qrow.iter_mut().zip(t.q.row(i)) {
                    *dst = to_f64(x);
                }
                query_row(qrow, &kv, &km, acc);
                for (dst, &x) in o.iter_mut().zip(acc.iter()) {
                    *dst = from_f64(x);
                }
            },
        );
    mults += (n * (c * c + 2 * c)) as u64;
    counters::add_multiplies(mults);
    out
}

/// Scaled dot-product softmax attention. Materializes the full `N×M` weight
/// matrix on purpose: it is the quadratic baseline.
pub fn softmax_attention_reference<T: Real>(t: &ProjectedTriplet<T>) -> Matrix<T> {
    let weights = softmax_weights(t);
    let (n, m, c) = (t.q.rows(), t.k.rows(), t.width());
    let mut out = Matrix::zeros(n, c);
    if m == 0 {
        return out;
    }
    out.as_mut_slice().par_chunks_mut(c).enumerate().for_each(|(i, o)| {
        let w = weights.row(i);
        let mut acc = vec![0.0; c];
        for (j, &wij) in w.iter().enumerate() {
            for (a, &x) in acc.iter_mut().zip(t.v.row(j)) {
                *a += wij * to_f64(x);
            }
        }
        for (dst, x) in o.iter_mut().zip(acc) {
            *dst = from_f64(x);
        }
    });
    counters::add_multiplies((n * m * c) as u64);
    out
}

/// Row-stochastic `softmax(QKᵀ/√C)` as an `N×M` matrix.
pub fn softmax_weights<T: Real>(t: &ProjectedTriplet<T>) -> Matrix<f64> {
    let (n, m, c) = (t.q.rows(), t.k.rows(), t.width());
    let mut w = Matrix::zeros(n, m);
    if m == 0 {
        return w;
    }
    let scale = 1.0 / (c.max(1) as f64).sqrt();
    w.as_mut_slice().par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        let qi = t.q.row(i);
        for (j, s) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (&a, &b) in qi.iter().zip(t.k.row(j)) {
                acc += to_f64(a) * to_f64(b);
            }
            *s = acc * scale;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        row.iter_mut().for_each(|s| *s /= total);
    });
    counters::add_multiplies((n * m * c) as u64);
    w
}

fn check_pairs<T: Real>(t: &ProjectedTriplet<T>, pairs: &[NeighborhoodPair]) -> Result<()> {
    let (n, m) = (t.q.rows(), t.k.rows());
    for p in pairs {
        if p.source_set.last().is_some_and(|&i| i >= n) || p.target_set.last().is_some_and(|&j| j >= m) {
            return Err(Error::InvalidInput(format!(
                "neighborhood of seed ({}, {}) indexes past {n} queries / {m} keys",
                p.seed.0, p.seed.1
            )));
        }
    }
    Ok(())
}

/// Pairwise neighborhood attention: linear attention restricted to each pair's
/// index sets, zero outside every source set, summed over pairs.
pub fn pairwise_attention<T: Real>(t: &ProjectedTriplet<T>, pairs: &[NeighborhoodPair]) -> Result<Matrix<T>> {
    check_pairs(t, pairs)?;
    let (n, c) = (t.q.rows(), t.width());
    let contributions: Vec<(Vec<f64>, u64)> = pairs
        .par_iter()
        .map(|p| {
            let (kv, km, mut mults) = key_accumulators(&t.k, &t.v, Some(&p.target_set));
            let mut rows = vec![0.0; p.source_set.len() * c];
            let mut qrow = vec![0.0; c];
            for (slot, &i) in p.source_set.iter().enumerate() {
                for (dst, &x) in qrow.iter_mut().zip(t.q.row(i)) {
                    *dst = to_f64(x);
                }
                query_row(&qrow, &kv, &km, &mut rows[slot * c..(slot + 1) * c]);
            }
            mults += (p.source_set.len() * (c * c + 2 * c)) as u64;
            (rows, mults)
        })
        .collect();

    let mut acc = vec![0.0; n * c];
    let mut mults = 0;
    for (p, (rows, m)) in pairs.iter().zip(contributions) {
        mults += m;
        for (slot, &i) in p.source_set.iter().enumerate() {
            for (dst, &x) in acc[i * c..(i + 1) * c].iter_mut().zip(&rows[slot * c..(slot + 1) * c]) {
                *dst += x;
            }
        }
    }
    counters::add_multiplies(mults);
    Ok(Matrix::from_vec(n, c, acc.into_iter().map(from_f64).collect()))
}

/// Applies `kernel` independently to `heads` contiguous column groups and
/// concatenates the results in order.
pub fn multi_head<T: Real>(kernel: Kernel<'_>, t: &ProjectedTriplet<T>, heads: usize) -> Result<Matrix<T>> {
    let c = t.width();
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {c} is not divisible into {heads} heads")));
    }
    if heads == 1 {
        return kernel.apply(t);
    }
    let d = c / heads;
    let mut out = Matrix::zeros(t.q.rows(), c);
    for h in 0..heads {
        let part = kernel.apply(&t.head(h * d, (h + 1) * d))?;
        out.set_col_slice(h * d, &part);
    }
    Ok(out)
}

/// Gradients of a scalar loss with respect to Q, K and V.
#[derive(Debug, Clone)]
pub struct TripletGrad {
    pub dq: Matrix<f64>,
    pub dk: Matrix<f64>,
    pub dv: Matrix<f64>,
}

/// Reverse pass of restricted linear attention for one key set and a set of
/// query rows, accumulating into `g`.
fn linear_backward_restricted(
    t: &ProjectedTriplet<f64>,
    grad: &Matrix<f64>,
    queries: &[usize],
    keys: &[usize],
    g: &mut TripletGrad,
) {
    let c = t.width();
    let (kv, km, _) = key_accumulators(&t.k, &t.v, Some(keys));
    let mut d_kv = vec![0.0; c * c];
    let mut d_km = vec![0.0; c];
    let mut out = vec![0.0; c];
    let mut phiq = vec![0.0; c];
    for &i in queries {
        let qi = t.q.row(i);
        for (p, &x) in phiq.iter_mut().zip(qi) {
            *p = phi_scalar(x);
        }
        let den: f64 = phiq.iter().zip(&km).map(|(a, b)| a * b).sum();
        query_row(qi, &kv, &km, &mut out);
        let gi = grad.row(i);
        let d_den = -gi.iter().zip(&out).map(|(a, b)| a * b).sum::<f64>() / den;
        let dq = g.dq.row_mut(i);
        for a in 0..c {
            // d φ(Qᵢ)ₐ = Σ_b dnum_b K_v[a][b] + d_den K_m[a],  dnum = Gᵢ / den
            let mut d_phi = d_den * km[a];
            let row = &kv[a * c..(a + 1) * c];
            for (b, &s) in row.iter().enumerate() {
                d_phi += gi[b] / den * s;
            }
            dq[a] += d_phi * phi_derivative(qi[a]);
            d_km[a] += d_den * phiq[a];
            let drow = &mut d_kv[a * c..(a + 1) * c];
            for (b, acc) in drow.iter_mut().enumerate() {
                *acc += phiq[a] * gi[b] / den;
            }
        }
    }
    for &j in keys {
        let kj = t.k.row(j);
        let vj = t.v.row(j);
        let dk = g.dk.row_mut(j);
        for a in 0..c {
            let drow = &d_kv[a * c..(a + 1) * c];
            let d_phik = d_km[a] + drow.iter().zip(vj).map(|(d, v)| d * v).sum::<f64>();
            dk[a] += d_phik * phi_derivative(kj[a]);
        }
        let dv = g.dv.row_mut(j);
        for (b, dvb) in dv.iter_mut().enumerate() {
            let mut acc = 0.0;
            for a in 0..c {
                acc += phi_scalar(kj[a]) * d_kv[a * c + b];
            }
            *dvb += acc;
        }
    }
}

fn zero_grad(t: &ProjectedTriplet<f64>) -> TripletGrad {
    TripletGrad {
        dq: Matrix::zeros(t.q.rows(), t.q.cols()),
        dk: Matrix::zeros(t.k.rows(), t.k.cols()),
        dv: Matrix::zeros(t.v.rows(), t.v.cols()),
    }
}

fn single_head_backward(kernel: Kernel<'_>, t: &ProjectedTriplet<f64>, grad: &Matrix<f64>) -> TripletGrad {
    let mut g = zero_grad(t);
    match kernel {
        Kernel::Linear => {
            if t.k.rows() > 0 {
                let all_q: Vec<usize> = (0..t.q.rows()).collect();
                let all_k: Vec<usize> = (0..t.k.rows()).collect();
                linear_backward_restricted(t, grad, &all_q, &all_k, &mut g);
            }
        }
        Kernel::Pairwise(pairs) => {
            for p in pairs {
                linear_backward_restricted(t, grad, &p.source_set, &p.target_set, &mut g);
            }
        }
        Kernel::Softmax => {
            if t.k.rows() > 0 {
                let w = softmax_weights(t);
                let scale = 1.0 / (t.width() as f64).sqrt();
                g.dv = w.t_matmul(grad);
                let d_w = grad.matmul_t(&t.v);
                let mut d_s = Matrix::zeros(w.rows(), w.cols());
                for i in 0..w.rows() {
                    let inner: f64 = w.row(i).iter().zip(d_w.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..w.cols() {
                        d_s[(i, j)] = w[(i, j)] * (d_w[(i, j)] - inner) * scale;
                    }
                }
                g.dq = d_s.matmul(&t.k);
                g.dk = d_s.t_matmul(&t.q);
            }
        }
    }
    g
}

/// Reverse pass of [`multi_head`] for `f64` inputs.
pub fn multi_head_backward(
    kernel: Kernel<'_>,
    t: &ProjectedTriplet<f64>,
    heads: usize,
    grad: &Matrix<f64>,
) -> Result<TripletGrad> {
    let c = t.width();
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {c} is not divisible into {heads} heads")));
    }
    if let Kernel::Pairwise(pairs) = kernel {
        check_pairs(t, pairs)?;
    }
    let d = c / heads;
    let mut g = zero_grad(t);
    for h in 0..heads {
        let part = single_head_backward(kernel, &t.head(h * d, (h + 1) * d), &grad.col_slice(h * d, (h + 1) * d));
        g.dq.set_col_slice(h * d, &part.dq);
        g.dk.set_col_slice(h * d, &part.dk);
        g.dv.set_col_slice(h * d, &part.dv);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    use crate::rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut r = rng::stream(seed, "attention.test", 0);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut r))
    }

    fn triplet(n: usize, m: usize, c: usize, seed: u64) -> ProjectedTriplet<f64> {
        ProjectedTriplet::new(random(n, c, seed), random(m, c, seed + 1), random(m, c, seed + 2)).unwrap()
    }

    /// Direct per-row evaluation with an explicit loop over keys.
    fn naive_linear(t: &ProjectedTriplet<f64>, rows: &[usize], keys: &[usize]) -> Vec<Vec<f64>> {
        let c = t.width();
        rows.iter()
            .map(|&i| {
                let phiq: Vec<f64> = t.q.row(i).iter().map(|&x| phi_scalar(x)).collect();
                let mut num = vec![0.0; c];
                let mut den = 0.0;
                for &j in keys {
                    let phik: Vec<f64> = t.k.row(j).iter().map(|&x| phi_scalar(x)).collect();
                    let w: f64 = phiq.iter().zip(&phik).map(|(a, b)| a * b).sum();
                    den += w;
                    for (n, &v) in num.iter_mut().zip(t.v.row(j)) {
                        *n += w * v;
                    }
                }
                num.into_iter().map(|x| x / den).collect()
            })
            .collect()
    }

    #[test]
    fn phi_values() {
        let x = Matrix::from_vec(1, 3, vec![0.0, 1.0, -20.0]);
        let y = phi(&x);
        assert_eq!(y[(0, 0)], 1.0);
        assert_eq!(y[(0, 1)], 2.0);
        assert!((y[(0, 2)] - (-20.0f64).exp()).abs() < 1e-20);
        assert!(y[(0, 2)] > 0.0);
    }

    #[test]
    fn single_key_returns_its_value() {
        let t = triplet(5, 1, 4, 10);
        let out = linear_attention(&t);
        for r in out.row_iter() {
            for (a, b) in r.iter().zip(t.v.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let soft = softmax_attention_reference(&t);
        assert!(soft.max_abs_diff(&out) < 1e-12);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut t = triplet(4, 6, 3, 20);
        let k0 = t.k.row(0).to_vec();
        for j in 0..6 {
            t.k.row_mut(j).copy_from_slice(&k0);
        }
        let out = linear_attention(&t);
        for c in 0..3 {
            let mean: f64 = (0..6).map(|j| t.v[(j, c)]).sum::<f64>() / 6.0;
            for i in 0..4 {
                assert!((out[(i, c)] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn streamed_equals_naive() {
        let t = triplet(8, 8, 4, 30);
        let out = linear_attention(&t);
        let all: Vec<usize> = (0..8).collect();
        for (i, row) in naive_linear(&t, &all, &all).iter().enumerate() {
            for (a, b) in out.row(i).iter().zip(row) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn softmax_uniform_for_zero_queries() {
        let mut t = triplet(3, 5, 4, 40);
        t.q = Matrix::zeros(3, 4);
        let out = softmax_attention_reference(&t);
        for c in 0..4 {
            let mean: f64 = (0..5).map(|j| t.v[(j, c)]).sum::<f64>() / 5.0;
            for i in 0..3 {
                assert!((out[(i, c)] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_weights_are_stochastic() {
        let t = triplet(8, 8, 4, 50);
        let w = softmax_weights(&t);
        for r in w.row_iter() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_single_key_and_zero_rows() {
        let t = triplet(6, 6, 4, 60);
        let pair = NeighborhoodPair::new((1, 3), vec![1, 2, 4], vec![3]).unwrap();
        let out = pairwise_attention(&t, &[pair]).unwrap();
        for i in 0..6 {
            if [1, 2, 4].contains(&i) {
                for (a, b) in out.row(i).iter().zip(t.v.row(3)) {
                    assert!((a - b).abs() < 1e-12);
                }
            } else {
                assert!(out.row(i).iter().all(|&x| x == 0.0));
            }
        }
        assert_eq!(pairwise_attention(&t, &[]).unwrap(), Matrix::zeros(6, 4));
    }

    #[test]
    fn pairwise_disjoint_blocks_match_sliced_linear() {
        let t = triplet(16, 16, 4, 70);
        let a = NeighborhoodPair::new((0, 2), vec![0, 3, 5, 9], vec![2, 4, 6]).unwrap();
        let b = NeighborhoodPair::new((10, 12), vec![10, 11, 14], vec![8, 12, 13, 15]).unwrap();
        let out = pairwise_attention(&t, &[a.clone(), b.clone()]).unwrap();
        let mut expected = Matrix::zeros(16, 4);
        for p in [&a, &b] {
            let sub = ProjectedTriplet::new(
                t.q.select_rows(p.source_set()),
                t.k.select_rows(p.target_set()),
                t.v.select_rows(p.target_set()),
            )
            .unwrap();
            let block = linear_attention(&sub);
            for (slot, &i) in p.source_set().iter().enumerate() {
                expected.row_mut(i).copy_from_slice(block.row(slot));
            }
        }
        assert!(out.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn pairwise_rejects_out_of_range() {
        let t = triplet(4, 4, 2, 80);
        let p = NeighborhoodPair::new((0, 9), vec![0], vec![9]).unwrap();
        assert!(pairwise_attention(&t, &[p]).is_err());
    }

    #[test]
    fn neighborhood_requires_seed_membership() {
        assert!(NeighborhoodPair::new((0, 0), vec![1], vec![0]).is_err());
        assert!(NeighborhoodPair::new((0, 0), vec![0], vec![]).is_err());
    }

    #[test]
    fn multi_head_matches_manual_slices() {
        let t = triplet(8, 8, 8, 90);
        let out = multi_head(Kernel::Linear, &t, 4).unwrap();
        let mut manual = Vec::new();
        for h in 0..4 {
            manual.push(linear_attention(&t.head(2 * h, 2 * h + 2)));
        }
        let cat = manual[1..].iter().fold(manual[0].clone(), |acc, m| acc.hconcat(m));
        assert_eq!(out, cat);
        assert_eq!(multi_head(Kernel::Linear, &t, 1).unwrap(), linear_attention(&t));
        let scalar_heads = multi_head(Kernel::Linear, &t, 8).unwrap();
        for h in 0..8 {
            assert_eq!(scalar_heads.col_slice(h, h + 1), linear_attention(&t.head(h, h + 1)));
        }
        assert!(matches!(multi_head(Kernel::Linear, &t, 3), Err(Error::Config(_))));
    }

    #[test]
    fn target_permutation_invariance() {
        let t = triplet(6, 9, 4, 100);
        let perm: Vec<usize> = vec![3, 0, 8, 1, 7, 2, 6, 4, 5];
        let shuffled =
            ProjectedTriplet::new(t.q.clone(), t.k.select_rows(&perm), t.v.select_rows(&perm)).unwrap();
        assert!(linear_attention(&t).max_abs_diff(&linear_attention(&shuffled)) < 1e-12);
    }

    #[test]
    fn linear_counts_and_allocations() {
        let t = triplet(256, 256, 16, 110);
        let (_, counts) = counters::measure(|| linear_attention(&t));
        let bound = 2 * (512 * 256 + 512 * 16);
        assert!(counts.multiplies <= bound as u128, "{} > {bound}", counts.multiplies);
        assert!(counts.max_alloc_elements < 256 * 256);
        let (_, soft) = counters::measure(|| softmax_attention_reference(&t));
        assert!(soft.max_alloc_elements >= 256 * 256);
    }

    /// Loss = Σ G ⊙ out for a fixed random G; central differences on every input.
    fn check_backward(kernel: Kernel<'_>, t: &ProjectedTriplet<f64>, heads: usize) {
        let out = multi_head(kernel, t, heads).unwrap();
        let g_out = random(out.rows(), out.cols(), 999);
        let loss = |t: &ProjectedTriplet<f64>| -> f64 {
            let o = multi_head(kernel, t, heads).unwrap();
            o.as_slice().iter().zip(g_out.as_slice()).map(|(a, b)| a * b).sum()
        };
        let grad = multi_head_backward(kernel, t, heads, &g_out).unwrap();
        let h = 1e-6;
        for which in 0..3 {
            let (rows, cols) = match which {
                0 => t.q.shape(),
                1 => t.k.shape(),
                _ => t.v.shape(),
            };
            for r in 0..rows {
                for c in 0..cols {
                    let mut plus = t.clone();
                    let mut minus = t.clone();
                    let (p, m, analytic) = match which {
                        0 => (&mut plus.q, &mut minus.q, grad.dq[(r, c)]),
                        1 => (&mut plus.k, &mut minus.k, grad.dk[(r, c)]),
                        _ => (&mut plus.v, &mut minus.v, grad.dv[(r, c)]),
                    };
                    p[(r, c)] += h;
                    m[(r, c)] -= h;
                    let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                    assert!(err < 1e-5, "tensor {which} ({r},{c}): fd {numeric} vs {analytic}");
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let t = triplet(5, 7, 4, 120);
        check_backward(Kernel::Linear, &t, 1);
        check_backward(Kernel::Linear, &t, 2);
        check_backward(Kernel::Softmax, &t, 2);
        let pairs = vec![
            NeighborhoodPair::new((0, 1), vec![0, 2, 3], vec![1, 4]).unwrap(),
            NeighborhoodPair::new((3, 6), vec![3, 4], vec![0, 5, 6]).unwrap(),
        ];
        check_backward(Kernel::Pairwise(&pairs), &t, 2);
    }

    #[test]
    fn f32_inputs_accumulate_in_f64() {
        let t = triplet(64, 200, 8, 130);
        let t32 = ProjectedTriplet::new(t.q.cast::<f32>(), t.k.cast::<f32>(), t.v.cast::<f32>()).unwrap();
        let exact = linear_attention(&ProjectedTriplet::new(t32.q.cast::<f64>(), t32.k.cast::<f64>(), t32.v.cast::<f64>()).unwrap());
        let single = linear_attention(&t32).cast::<f64>();
        let scale = exact.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(single.max_abs_diff(&exact) / scale < 1e-6);
    }
}
