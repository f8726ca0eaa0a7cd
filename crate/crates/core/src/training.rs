//! Confidence-weighted triplet loss, its gradient, Adam and a toy training loop.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::encoder::{forward_on, EncodedPair, NetworkConfig};
use crate::error::{Error, Result};
use crate::geometry::{generate_pair, GenNoiseConfig, GroundTruth, SyntheticPair};
use crate::graph::{Eager, Graph, Op, Tape};
use crate::matcher::{evaluate, match_pipeline, FilterConfig, PipelineConfig};
use crate::matrix::{dot, squared_distance, Matrix};
use crate::neighborhood::NeighborhoodConfig;
use crate::rng;
use crate::weights::NetworkWeights;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Positive margin on squared distance.
    pub m_p: f64,
    /// Negative margin on squared distance.
    pub m_n: f64,
    pub learning_rate: f64,
    /// Per-step multiplicative learning-rate decay.
    pub decay: f64,
    /// Treat the confidence weight as a constant during backpropagation.
    pub detach_confidence: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            m_p: 0.2,
            m_n: 1.0,
            learning_rate: 1e-3,
            decay: 0.99992,
            detach_confidence: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.m_p >= 0.0 && self.m_n > self.m_p) {
            return Err(Error::Config(format!(
                "margins must satisfy m_n > m_p >= 0, got m_p={} m_n={}",
                self.m_p, self.m_n
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        Ok(())
    }
}

/// Raw scalar product of two intermediate descriptors.
pub fn confidence(fs: &[f64], ft: &[f64]) -> f64 {
    dot(fs, ft)
}

/// Which side the hardest negative for a correspondence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Negative {
    /// `x̂ˢ_i` against target row `k`.
    Target(usize),
    /// Source row `k` against `x̂ᵗ_j`.
    Source(usize),
}

/// Closest non-corresponding descriptor to either endpoint of `(i, j)`.
/// Ties go to the lower index, and to the target scan over the source scan.
pub fn hardest_negative(xs: &Matrix, xt: &Matrix, (i, j): (usize, usize)) -> Result<(Negative, f64)> {
    if xs.rows() < 2 || xt.rows() < 2 {
        return Err(Error::InvalidInput(format!(
            "negative mining needs at least 2 keypoints per side, got {} and {}",
            xs.rows(),
            xt.rows()
        )));
    }
    let mut best: Option<(Negative, f64)> = None;
    let mut consider = |n: Negative, d: f64| {
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((n, d));
        }
    };
    for k in (0..xt.rows()).filter(|&k| k != j) {
        consider(Negative::Target(k), squared_distance(xs.row(i), xt.row(k)));
    }
    for k in (0..xs.rows()).filter(|&k| k != i) {
        consider(Negative::Source(k), squared_distance(xs.row(k), xt.row(j)));
    }
    Ok(best.expect("both sides have a negative"))
}

/// `[𝓓(x̂ˢ_i, x̂ᵗ_j) − m_p]₊ + [m_n − 𝓓_neg]₊` with squared Euclidean `𝓓`.
pub fn ranking_loss(xs: &Matrix, xt: &Matrix, c: (usize, usize), cfg: &LossConfig) -> Result<f64> {
    let pos = squared_distance(xs.row(c.0), xt.row(c.1));
    let (_, neg) = hardest_negative(xs, xt, c)?;
    Ok((pos - cfg.m_p).max(0.0) + (cfg.m_n - neg).max(0.0))
}

/// Mean over ground-truth pairs of `max(s_c, 0) · ranking_loss(c)`, as a graph op
/// over `(x̂ˢ, x̂ᵗ, f̂ˢ, f̂ᵗ)`.
pub struct TripletLoss {
    pub pairs: Vec<(usize, usize)>,
    pub cfg: LossConfig,
}

struct Term {
    c: (usize, usize),
    weight: f64,
    pos: f64,
    neg: (Negative, f64),
}

impl TripletLoss {
    pub fn new(gt: &GroundTruth, cfg: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        if gt.pairs.is_empty() {
            return Err(Error::InvalidInput("triplet loss needs at least one ground-truth pair".into()));
        }
        Ok(Self {
            pairs: gt.pairs.clone(),
            cfg: cfg.clone(),
        })
    }

    fn terms(&self, inputs: &[&Matrix]) -> Result<Vec<Term>> {
        let (xs, xt, fs, ft) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        if xs.rows() != fs.rows() || xt.rows() != ft.rows() {
            return Err(Error::Shape("final and intermediate descriptors disagree on row counts".into()));
        }
        if let Some(&(i, j)) = self.pairs.iter().find(|&&(i, j)| i >= xs.rows() || j >= xt.rows()) {
            return Err(Error::InvalidInput(format!("ground-truth pair ({i}, {j}) out of range")));
        }
        self.pairs
            .iter()
            .map(|&c| {
                Ok(Term {
                    c,
                    weight: confidence(fs.row(c.0), ft.row(c.1)),
                    pos: squared_distance(xs.row(c.0), xt.row(c.1)),
                    neg: hardest_negative(xs, xt, c)?,
                })
            })
            .collect()
    }

    fn hinges(&self, t: &Term) -> (f64, f64) {
        ((t.pos - self.cfg.m_p).max(0.0), (self.cfg.m_n - t.neg.1).max(0.0))
    }
}

fn add_scaled(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, &xi) in dst.iter_mut().zip(x) {
        *d += a * xi;
    }
}

/// `dst += a·(x − y)`
fn axpy(dst: &mut [f64], a: f64, x: &[f64], y: &[f64]) {
    for ((d, &xi), &yi) in dst.iter_mut().zip(x).zip(y) {
        *d += a * (xi - yi);
    }
}

impl Op for TripletLoss {
    fn name(&self) -> &'static str {
        "triplet_loss"
    }

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        let total: f64 = self
            .terms(inputs)?
            .iter()
            .map(|t| {
                let (p, n) = self.hinges(t);
                t.weight.max(0.0) * (p + n)
            })
            .sum();
        Ok(Matrix::filled(1, 1, total / self.pairs.len() as f64))
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>> {
        let (xs, xt, fs, ft) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let scale = grad[(0, 0)] / self.pairs.len() as f64;
        let mut dxs = Matrix::zeros(xs.rows(), xs.cols());
        let mut dxt = Matrix::zeros(xt.rows(), xt.cols());
        let mut dfs = Matrix::zeros(fs.rows(), fs.cols());
        let mut dft = Matrix::zeros(ft.rows(), ft.cols());
        for t in self.terms(inputs)? {
            let (i, j) = t.c;
            let (p, n) = self.hinges(&t);
            if t.weight > 0.0 && !self.cfg.detach_confidence {
                let g = scale * (p + n);
                add_scaled(dfs.row_mut(i), g, ft.row(j));
                add_scaled(dft.row_mut(j), g, fs.row(i));
            }
            let w = scale * t.weight.max(0.0);
            if w == 0.0 {
                continue;
            }
            if p > 0.0 {
                axpy(dxs.row_mut(i), 2.0 * w, xs.row(i), xt.row(j));
                axpy(dxt.row_mut(j), -2.0 * w, xs.row(i), xt.row(j));
            }
            if n > 0.0 {
                match t.neg.0 {
                    Negative::Target(k) => {
                        axpy(dxs.row_mut(i), -2.0 * w, xs.row(i), xt.row(k));
                        axpy(dxt.row_mut(k), 2.0 * w, xs.row(i), xt.row(k));
                    }
                    Negative::Source(k) => {
                        axpy(dxs.row_mut(k), -2.0 * w, xs.row(k), xt.row(j));
                        axpy(dxt.row_mut(j), 2.0 * w, xs.row(k), xt.row(j));
                    }
                }
            }
        }
        Ok(vec![dxs, dxt, dfs, dft])
    }
}

/// Loss value for already encoded descriptors.
pub fn triplet_loss(enc: &EncodedPair, gt: &GroundTruth, cfg: &LossConfig) -> Result<f64> {
    let op = TripletLoss::new(gt, cfg)?;
    Ok(op.forward(&[&enc.xs, &enc.xt, &enc.fs, &enc.ft])?[(0, 0)])
}

/// One training example.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub source: &'a crate::geometry::KeypointSet,
    pub target: &'a crate::geometry::KeypointSet,
    pub ground_truth: &'a GroundTruth,
}

impl<'a> From<&'a SyntheticPair> for Example<'a> {
    fn from(p: &'a SyntheticPair) -> Self {
        Self {
            source: &p.source,
            target: &p.target,
            ground_truth: &p.ground_truth,
        }
    }
}

fn loss_on<G: Graph>(
    g: &mut G,
    weights: &NetworkWeights,
    ex: &Example<'_>,
    net: &NetworkConfig,
    neigh: &NeighborhoodConfig,
    loss: &LossConfig,
) -> Result<G::Var> {
    let enc = forward_on(g, ex.source, ex.target, weights, net, neigh)?;
    let op = TripletLoss::new(ex.ground_truth, loss)?;
    g.apply(Box::new(op), &[&enc.xs, &enc.xt, &enc.fs, &enc.ft])
}

/// Loss of the full network on one example, without recording gradients.
pub fn loss_value(
    weights: &NetworkWeights,
    ex: &Example<'_>,
    net: &NetworkConfig,
    neigh: &NeighborhoodConfig,
    loss: &LossConfig,
) -> Result<f64> {
    Ok(loss_on(&mut Eager, weights, ex, net, neigh, loss)?[(0, 0)])
}

/// Loss and its exact gradient with respect to every weight tensor.
pub fn loss_gradient(
    weights: &NetworkWeights,
    ex: &Example<'_>,
    net: &NetworkConfig,
    neigh: &NeighborhoodConfig,
    loss: &LossConfig,
) -> Result<(f64, NetworkWeights)> {
    let mut tape = Tape::new();
    let out = loss_on(&mut tape, weights, ex, net, neigh, loss)?;
    let value = tape.value(&out)[(0, 0)];
    let mut named: HashMap<String, Matrix> = tape.backward(out)?;
    let mut grads = weights.zeros_like();
    let names: Vec<String> = weights.named().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(grads.tensors_mut()) {
        if let Some(g) = named.remove(name) {
            *slot = g;
        }
    }
    Ok((value, grads))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: NetworkWeights,
    pub v: NetworkWeights,
    pub t: u64,
}

impl Adam {
    pub fn new(like: &NetworkWeights) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, weights: &mut NetworkWeights, grads: &NetworkWeights, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let params = weights.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(grads.tensors()) {
            let (p, m, v) = (p.as_mut_slice(), m.as_mut_slice(), v.as_mut_slice());
            for k in 0..p.len() {
                let gk = g.as_slice()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }

    /// Moment tensors named `<param>.m` and `<param>.v`, for checkpoint sidecars.
    pub fn named_state(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = self.m.named().into_iter().map(|(n, t)| (format!("{n}.m"), t)).collect();
        out.extend(self.v.named().into_iter().map(|(n, t)| (format!("{n}.v"), t)));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub network: NetworkConfig,
    pub neighborhood: NeighborhoodConfig,
    pub loss: LossConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: NetworkWeights,
    pub optimizer: Adam,
    pub trace: Vec<TraceRow>,
}

/// Adam on one pair per step, visiting the dataset in seeded shuffled epochs.
/// The learning rate at step `t` is `lr · decay^t`.
pub fn train_toy(dataset: &[SyntheticPair], initial: NetworkWeights, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    cfg.loss.validate()?;
    cfg.network.validate()?;
    initial.check(&cfg.network)?;
    let mut weights = initial;
    let mut adam = Adam::new(&weights);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.steps {
        if step % dataset.len() == 0 {
            order = (0..dataset.len()).collect();
            order.shuffle(&mut rng::stream(cfg.seed, "training.order", (step / dataset.len()) as u64));
        }
        let ex = Example::from(&dataset[order[step % dataset.len()]]);
        let (loss, grads) = loss_gradient(&weights, &ex, &cfg.network, &cfg.neighborhood, &cfg.loss)?;
        if !loss.is_finite() || grads.tensors().iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        let lr = cfg.loss.learning_rate * cfg.loss.decay.powi(step as i32);
        adam.step(&mut weights, &grads, lr);
        trace.push(TraceRow { step, loss, lr });
    }
    Ok(TrainOutcome {
        weights,
        optimizer: adam,
        trace,
    })
}

/// Mean loss over `dataset` under `weights`.
pub fn mean_loss(
    weights: &NetworkWeights,
    dataset: &[SyntheticPair],
    net: &NetworkConfig,
    neigh: &NeighborhoodConfig,
    loss: &LossConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for p in dataset {
        total += loss_value(weights, &Example::from(p), net, neigh, loss)?;
    }
    Ok(total / dataset.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Entries compared; every entry is used when the network has fewer.
    pub samples: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            samples: 256,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub within_tolerance: usize,
    pub max_relative_error: f64,
    /// 99th percentile of the relative errors.
    pub p99_relative_error: f64,
    pub loss: f64,
}

impl GradcheckReport {
    pub fn fraction_within(&self) -> f64 {
        self.within_tolerance as f64 / self.checked.max(1) as f64
    }
}

/// Network used for gradient checks: D=8, C′=4, one head, one self/cross loop.
pub fn gradcheck_network() -> NetworkConfig {
    NetworkConfig {
        input_dim: 8,
        hidden_dim: 4,
        heads: 1,
        l1: 1,
        l2: 0,
        ..NetworkConfig::default()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares reverse-mode gradients against central finite differences.
pub fn gradcheck(net: &NetworkConfig, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let noise = GenNoiseConfig {
        descriptor_sigma: 0.3,
        keypoint_jitter: 0.5,
        distractors: 4,
        min_matches: Some(4),
        ..GenNoiseConfig::default()
    };
    let pair = generate_pair(rng::derive_seed(cfg.seed, "gradcheck.pair", 0), 16, (64, 64), net.input_dim, &noise)?;
    let weights = NetworkWeights::init(net, rng::derive_seed(cfg.seed, "gradcheck.weights", 0))?;
    let neigh = NeighborhoodConfig::default();
    let loss_cfg = LossConfig::default();
    let ex = Example::from(&pair);
    let (loss, grads) = loss_gradient(&weights, &ex, net, &neigh, &loss_cfg)?;

    let sizes: Vec<usize> = weights.tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut entries: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(t, &n)| (0..n).map(move |k| (t, k)))
        .collect();
    if cfg.samples < total {
        let mut r = rng::stream(cfg.seed, "gradcheck.sample", 0);
        entries.shuffle(&mut r);
        entries.truncate(cfg.samples);
        entries.sort_unstable();
    }

    let analytic = grads.tensors();
    let mut errors = Vec::with_capacity(entries.len());
    for (t, k) in entries {
        let mut probe = weights.clone();
        let base = weights.tensors()[t].as_slice()[k];
        probe.tensors_mut()[t].as_mut_slice()[k] = base + cfg.step;
        let plus = loss_value(&probe, &ex, net, &neigh, &loss_cfg)?;
        probe.tensors_mut()[t].as_mut_slice()[k] = base - cfg.step;
        let minus = loss_value(&probe, &ex, net, &neigh, &loss_cfg)?;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        errors.push(relative_error(analytic[t].as_slice()[k], numeric));
    }
    let checked = errors.len();
    let within = errors.iter().filter(|&&e| e < cfg.tolerance).count();
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    let p99 = sorted
        .get(((checked as f64 * 0.99).ceil() as usize).saturating_sub(1))
        .copied()
        .unwrap_or(0.0);
    Ok(GradcheckReport {
        checked,
        within_tolerance: within,
        max_relative_error: sorted.last().copied().unwrap_or(0.0),
        p99_relative_error: p99,
        loss,
    })
}

/// Synthetic dataset drawn with per-pair derived seeds.
pub fn synthetic_dataset(
    seed: u64,
    count: usize,
    keypoints: usize,
    dims: (u32, u32),
    descriptor_dim: usize,
    noise: &GenNoiseConfig,
) -> Result<Vec<SyntheticPair>> {
    (0..count)
        .map(|k| generate_pair(rng::derive_seed(seed, "training.dataset", k as u64), keypoints, dims, descriptor_dim, noise))
        .collect()
}

/// Random unit-norm descriptor rows, for loss-only tests.
pub fn random_unit_rows(rows: usize, cols: usize, r: &mut impl Rng) -> Matrix {
    let mut m = Matrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0));
    for i in 0..rows {
        let row = m.row_mut(i);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|x| *x /= n);
    }
    m
}

/// Toy experiment: train on synthetic pairs, then compare the pipeline's
/// held-out precision before and after.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub pairs: usize,
    pub held_out: usize,
    pub keypoints: usize,
    pub image: (u32, u32),
    pub noise: GenNoiseConfig,
    pub train: TrainConfig,
    pub filter: FilterConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            pairs: 200,
            held_out: 20,
            keypoints: 128,
            image: (320, 240),
            noise: GenNoiseConfig {
                descriptor_sigma: 0.1,
                keypoint_jitter: 0.5,
                distractors: 32,
                identity_homography: false,
                min_matches: Some(16),
            },
            train: TrainConfig {
                steps: 300,
                seed: 0,
                network: NetworkConfig {
                    input_dim: 32,
                    hidden_dim: 16,
                    heads: 4,
                    l1: 2,
                    l2: 1,
                    ..NetworkConfig::default()
                },
                neighborhood: NeighborhoodConfig::default(),
                loss: LossConfig {
                    detach_confidence: true,
                    ..LossConfig::default()
                },
            },
            filter: FilterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ToyReport {
    /// Mean loss over the training pairs before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Pooled precision@3px of distance matching on held-out pairs.
    pub initial_precision: f64,
    pub trained_precision: f64,
    pub initial_matches: usize,
    pub trained_matches: usize,
    /// The same after the geometric filter.
    pub initial_filtered_precision: f64,
    pub trained_filtered_precision: f64,
    pub initial_filtered_matches: usize,
    pub trained_filtered_matches: usize,
}

impl ToyReport {
    pub fn loss_ratio(&self) -> f64 {
        self.final_loss / self.initial_loss
    }

    pub fn precision_gain(&self) -> f64 {
        self.trained_precision - self.initial_precision
    }
}

/// Correct matches over all matches (within 3 px) across `data`; zero when
/// nothing is matched. Returns the precision and the total match count.
pub fn pooled_precision(weights: &NetworkWeights, data: &[SyntheticPair], cfg: &PipelineConfig) -> Result<(f64, usize)> {
    let (mut correct, mut total) = (0.0, 0usize);
    for p in data {
        let out = match_pipeline(&p.source, &p.target, weights, cfg)?;
        let m = evaluate(&out.matches, &p.source, &p.target, &p.ground_truth, &p.homography, &[])?;
        correct += m.inlier_ratio * m.num_matches as f64;
        total += m.num_matches;
    }
    Ok((if total == 0 { 0.0 } else { correct / total as f64 }, total))
}

/// Runs the toy experiment from one seed. Training data, held-out data, the
/// initial weights and the visiting order each get their own stream.
pub fn run_toy(cfg: &ToyConfig, seed: u64) -> Result<(TrainOutcome, ToyReport)> {
    let net = &cfg.train.network;
    let dataset = |label: &str, count: usize| {
        synthetic_dataset(rng::derive_seed(seed, label, 0), count, cfg.keypoints, cfg.image, net.input_dim, &cfg.noise)
    };
    let train = dataset("toy.train", cfg.pairs)?;
    let held = dataset("toy.held_out", cfg.held_out)?;
    let initial = NetworkWeights::init(net, rng::derive_seed(seed, "toy.init", 0))?;
    let tc = TrainConfig {
        seed: rng::derive_seed(seed, "toy.order", 0),
        ..cfg.train.clone()
    };
    let pc = PipelineConfig {
        network: net.clone(),
        neighborhood: cfg.train.neighborhood.clone(),
        filter: FilterConfig {
            rng_seed: rng::derive_seed(seed, "toy.filter", 0),
            ..cfg.filter.clone()
        },
        skip_filter: true,
    };
    let fc = PipelineConfig {
        skip_filter: false,
        ..pc.clone()
    };
    let loss = |w: &NetworkWeights| mean_loss(w, &train, net, &cfg.train.neighborhood, &cfg.train.loss);
    let initial_loss = loss(&initial)?;
    let (initial_precision, initial_matches) = pooled_precision(&initial, &held, &pc)?;
    let (initial_filtered_precision, initial_filtered_matches) = pooled_precision(&initial, &held, &fc)?;
    let outcome = train_toy(&train, initial, &tc)?;
    let final_loss = loss(&outcome.weights)?;
    let (trained_precision, trained_matches) = pooled_precision(&outcome.weights, &held, &pc)?;
    let (trained_filtered_precision, trained_filtered_matches) = pooled_precision(&outcome.weights, &held, &fc)?;
    Ok((
        outcome,
        ToyReport {
            initial_loss,
            final_loss,
            initial_precision,
            trained_precision,
            initial_matches,
            trained_matches,
            initial_filtered_precision,
            trained_filtered_precision,
            initial_filtered_matches,
            trained_filtered_matches,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(pairs: &[(usize, usize)], n: usize, m: usize) -> GroundTruth {
        GroundTruth::from_pairs(pairs.to_vec(), n, m).unwrap()
    }

    #[test]
    fn closed_hinges_give_zero() {
        let xs = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let cfg = LossConfig::default();
        // negatives at squared distance 2 ≥ m_n
        assert_eq!(ranking_loss(&xs, &xs, (0, 0), &cfg).unwrap(), 0.0);
    }

    #[test]
    fn hinge_arithmetic() {
        let cfg = LossConfig::default();
        let pos = (cfg.m_p + 0.3f64).sqrt();
        let xs = Matrix::from_rows(&[vec![0.0, 0.0], vec![100.0, 0.0]]);
        // target 0 sits at squared distance m_p + 0.3; target 1 at exactly m_n from source 0
        let xt = Matrix::from_rows(&[vec![pos, 0.0], vec![0.0, 1.0]]);
        let got = ranking_loss(&xs, &xt, (0, 0), &cfg).unwrap();
        assert!((got - 0.3).abs() < 1e-12);
    }

    #[test]
    fn weighted_single_term() {
        let cfg = LossConfig::default();
        let pos = (cfg.m_p + 0.3f64).sqrt();
        let xs = Matrix::from_rows(&[vec![0.0, 0.0], vec![100.0, 0.0]]);
        let xt = Matrix::from_rows(&[vec![pos, 0.0], vec![0.0, 1.0]]);
        let fs = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]]);
        let ft = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let op = TripletLoss::new(&gt(&[(0, 0)], 2, 2), &cfg).unwrap();
        let v = op.forward(&[&xs, &xt, &fs, &ft]).unwrap()[(0, 0)];
        assert!((v - 0.6).abs() < 1e-12);
    }

    #[test]
    fn hardest_negative_is_exhaustive_minimum() {
        let mut r = rng::stream(1, "training.test", 0);
        for _ in 0..20 {
            let n = r.random_range(2..64);
            let m = r.random_range(2..64);
            let xs = random_unit_rows(n, 5, &mut r);
            let xt = random_unit_rows(m, 5, &mut r);
            let c = (r.random_range(0..n), r.random_range(0..m));
            let (which, d) = hardest_negative(&xs, &xt, c).unwrap();
            let mut all: Vec<f64> = (0..m).filter(|&k| k != c.1).map(|k| squared_distance(xs.row(c.0), xt.row(k))).collect();
            all.extend((0..n).filter(|&k| k != c.0).map(|k| squared_distance(xs.row(k), xt.row(c.1))));
            assert_eq!(d, all.iter().copied().fold(f64::INFINITY, f64::min));
            let recomputed = match which {
                Negative::Target(k) => squared_distance(xs.row(c.0), xt.row(k)),
                Negative::Source(k) => squared_distance(xs.row(k), xt.row(c.1)),
            };
            assert_eq!(recomputed, d);
        }
    }

    #[test]
    fn loss_matches_direct_summation() {
        let mut r = rng::stream(2, "training.test", 1);
        let cfg = LossConfig::default();
        let (xs, xt) = (random_unit_rows(8, 4, &mut r), random_unit_rows(8, 4, &mut r));
        let (fs, ft) = (random_unit_rows(8, 4, &mut r), random_unit_rows(8, 4, &mut r));
        let pairs = [(0, 3), (2, 2), (5, 7), (7, 0)];
        let op = TripletLoss::new(&gt(&pairs, 8, 8), &cfg).unwrap();
        let got = op.forward(&[&xs, &xt, &fs, &ft]).unwrap()[(0, 0)];
        let mut want = 0.0;
        for &(i, j) in &pairs {
            let s: f64 = (0..4).map(|a| fs[(i, a)] * ft[(j, a)]).sum();
            let pos: f64 = (0..4).map(|a| (xs[(i, a)] - xt[(j, a)]).powi(2)).sum();
            let mut neg = f64::INFINITY;
            for k in 0..8 {
                if k != j {
                    neg = neg.min((0..4).map(|a| (xs[(i, a)] - xt[(k, a)]).powi(2)).sum());
                }
                if k != i {
                    neg = neg.min((0..4).map(|a| (xs[(k, a)] - xt[(j, a)]).powi(2)).sum());
                }
            }
            want += s.max(0.0) * ((pos - cfg.m_p).max(0.0) + (cfg.m_n - neg).max(0.0));
        }
        assert!((got - want / 4.0).abs() < 1e-12);
        assert!(got >= 0.0);
    }

    #[test]
    fn loss_op_gradient_matches_finite_differences() {
        let mut r = rng::stream(3, "training.test", 2);
        let cfg = LossConfig::default();
        let inputs: Vec<Matrix> = (0..4).map(|_| random_unit_rows(6, 3, &mut r).scale(0.7)).collect();
        let op = TripletLoss::new(&gt(&[(0, 1), (2, 2), (4, 5), (5, 0)], 6, 6), &cfg).unwrap();
        let refs: Vec<&Matrix> = inputs.iter().collect();
        let out = op.forward(&refs).unwrap();
        let grads = op.backward(&refs, &out, &Matrix::filled(1, 1, 1.0)).unwrap();
        let h = 1e-6;
        for t in 0..4 {
            for k in 0..inputs[t].len() {
                let mut p = inputs.clone();
                p[t].as_mut_slice()[k] += h;
                let plus = op.forward(&p.iter().collect::<Vec<_>>()).unwrap()[(0, 0)];
                p[t].as_mut_slice()[k] -= 2.0 * h;
                let minus = op.forward(&p.iter().collect::<Vec<_>>()).unwrap()[(0, 0)];
                let fd = (plus - minus) / (2.0 * h);
                assert!((fd - grads[t].as_slice()[k]).abs() < 1e-6, "input {t} entry {k}: {fd} vs {}", grads[t].as_slice()[k]);
            }
        }
    }

    #[test]
    fn errors_on_degenerate_inputs() {
        let cfg = LossConfig::default();
        let one = Matrix::from_rows(&[vec![1.0, 0.0]]);
        assert!(ranking_loss(&one, &one, (0, 0), &cfg).is_err());
        assert!(TripletLoss::new(&GroundTruth::default(), &cfg).is_err());
    }

    fn tiny_setup() -> (Vec<SyntheticPair>, NetworkConfig, NetworkWeights) {
        let net = gradcheck_network();
        let noise = GenNoiseConfig {
            descriptor_sigma: 0.2,
            distractors: 2,
            min_matches: Some(3),
            ..GenNoiseConfig::default()
        };
        let data = synthetic_dataset(4, 3, 12, (48, 48), 8, &noise).unwrap();
        let w = NetworkWeights::init(&net, 4).unwrap();
        (data, net, w)
    }

    #[test]
    fn loss_scaling_scales_gradient() {
        let (data, net, w) = tiny_setup();
        let neigh = NeighborhoodConfig::default();
        let ex = Example::from(&data[0]);
        let mut tape = Tape::new();
        let l = loss_on(&mut tape, &w, &ex, &net, &neigh, &LossConfig::default()).unwrap();
        let scaled = tape.scale(&l, 3.0).unwrap();
        let g1 = tape.backward(l).unwrap();
        let g3 = tape.backward(scaled).unwrap();
        for (name, g) in &g1 {
            assert!(g.scale(3.0).max_abs_diff(&g3[name]) < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let (data, net, w) = tiny_setup();
        let cfg = TrainConfig {
            steps: 6,
            seed: 1,
            network: net,
            neighborhood: NeighborhoodConfig::default(),
            loss: LossConfig {
                learning_rate: 0.0,
                ..LossConfig::default()
            },
        };
        let out = train_toy(&data, w.clone(), &cfg).unwrap();
        assert_eq!(out.weights, w);
        // both epochs visit the same pairs with the same weights
        let sorted = |rows: &[TraceRow]| {
            let mut v: Vec<f64> = rows.iter().map(|r| r.loss).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        assert_eq!(sorted(&out.trace[..3]), sorted(&out.trace[3..]));
    }

    #[test]
    fn training_is_deterministic() {
        let (data, net, w) = tiny_setup();
        let cfg = TrainConfig {
            steps: 6,
            seed: 2,
            network: net,
            neighborhood: NeighborhoodConfig::default(),
            loss: LossConfig::default(),
        };
        let a = train_toy(&data, w.clone(), &cfg).unwrap();
        let b = train_toy(&data, w, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn gradient_matches_finite_differences_on_tiny_network() {
        let report = gradcheck(&gradcheck_network(), &GradcheckConfig::default()).unwrap();
        assert!(report.checked >= 200);
        assert!(report.fraction_within() >= 0.99, "{report:?}");
    }
}
