//! Timing harness for the scaling claims: medians over repetitions, log-log
//! slopes, and an operation-count audit of the attention kernels.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::attention::{multi_head, pairwise_attention, Kernel, NeighborhoodPair, ProjectedTriplet};
use crate::counters::{self, OpCounts};
use crate::encoder::{encoder_layer, AttentionVariant, NetworkConfig};
use crate::error::{Error, Result};
use crate::geometry::{generate_pair, GenNoiseConfig, KeypointSet, Point};
use crate::matcher::{match_pipeline, PipelineConfig};
use crate::matrix::Matrix;
use crate::rng::stream;
use crate::weights::NetworkWeights;

/// Image size used for generated benchmark inputs.
pub const BENCH_IMAGE: (u32, u32) = (640, 480);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(into = "String")]
pub enum BenchMethod {
    /// Multi-head linear attention kernel, `N` queries against `N` keys.
    LinearAttention,
    /// Multi-head softmax attention kernel (materializes `N×N`).
    SoftmaxAttention,
    /// The input encoder layer (projection, linear attention, message MLP,
    /// residual) with `N` descriptors attending to `N` others.
    LinearForward,
    /// The same layer with softmax attention.
    SoftmaxForward,
    /// Encoder forward, distance matching and filtering end to end.
    Pipeline,
}

impl BenchMethod {
    pub const ALL: [BenchMethod; 5] = [
        BenchMethod::LinearAttention,
        BenchMethod::SoftmaxAttention,
        BenchMethod::LinearForward,
        BenchMethod::SoftmaxForward,
        BenchMethod::Pipeline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::LinearAttention => "linear_attention",
            BenchMethod::SoftmaxAttention => "softmax_attention_reference",
            BenchMethod::LinearForward => "forward_linear",
            BenchMethod::SoftmaxForward => "forward_softmax",
            BenchMethod::Pipeline => "pipeline",
        }
    }
}

impl fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<BenchMethod> for String {
    fn from(m: BenchMethod) -> String {
        m.name().to_string()
    }
}

impl FromStr for BenchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = BenchMethod::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown bench method `{s}` (expected one of {})", known.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub reps: usize,
    pub warmups: usize,
    /// Network shape; the attention kernels use `hidden_dim` and `heads`.
    pub network: NetworkConfig,
    pub seed: u64,
    /// Worker threads for the kernels while timing.
    pub threads: usize,
    /// Samples faster than this are repeated inside one timing window.
    pub min_sample_ms: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![1024, 2048, 4096, 8192],
            reps: 5,
            warmups: 2,
            network: NetworkConfig {
                l1: 1,
                l2: 1,
                ..NetworkConfig::default()
            },
            seed: 0,
            threads: 1,
            min_sample_ms: 1.0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 sizes to fit a slope, got {}",
                self.sizes.len()
            )));
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("bench sizes must be strictly increasing".into()));
        }
        if self.sizes[0] == 0 || self.sizes[self.sizes.len() - 1] < 4 * self.sizes[0] {
            return Err(Error::Config("bench sizes must span at least a 4x range".into()));
        }
        if self.reps < 3 {
            return Err(Error::Config(format!("reps must be at least 3, got {}", self.reps)));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.network.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: BenchMethod,
    pub n: usize,
    pub median_ms: f64,
    pub reps: usize,
    /// Workload executions per timed sample (1 unless the timer was too coarse).
    pub inner: usize,
    #[serde(skip)]
    pub counts: OpCounts,
    pub multiplies: u128,
    pub max_alloc_elements: usize,
    /// Largest pairwise neighborhood (pipeline runs only).
    pub max_neighborhood: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSlope {
    pub method: BenchMethod,
    pub slope: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub slopes: Vec<MethodSlope>,
    pub warnings: Vec<String>,
}

impl BenchReport {
    pub fn slope(&self, method: BenchMethod) -> Option<f64> {
        self.slopes.iter().find(|s| s.method == method).map(|s| s.slope)
    }

    pub fn rows_for(&self, method: BenchMethod) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.method == method)
    }

    /// CSV with header `method,n,median_ms,slope`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "n", "median_ms", "slope"])?;
        for r in &self.rows {
            let slope = self.slope(r.method).unwrap_or(f64::NAN);
            w.serialize((r.method.name(), r.n, r.median_ms, slope))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn fit_slopes(&mut self, methods: &[BenchMethod]) -> Result<()> {
        for &m in methods {
            let pts: Vec<(f64, f64)> = self.rows_for(m).map(|r| (r.n as f64, r.median_ms)).collect();
            let slope = log_log_slope(&pts)?;
            self.slopes.push(MethodSlope { method: m, slope });
        }
        Ok(())
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "slope needs at least 2 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::InvalidInput("log-log fit needs positive sizes and times".into()));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("all sizes are equal".into()));
    }
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    values.sort_by(f64::total_cmp);
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn random_triplet(seed: u64, n: usize, m: usize, width: usize) -> ProjectedTriplet {
    let mut rng = stream(seed, "bench.triplet", n as u64);
    let q = random_matrix(&mut rng, n, width);
    let k = random_matrix(&mut rng, m, width);
    let v = random_matrix(&mut rng, m, width);
    ProjectedTriplet::new(q, k, v).expect("shapes agree")
}

/// Uniform keypoints with unit-norm Gaussian descriptors.
pub fn random_keypoints(seed: u64, label: &str, n: usize, dim: usize) -> KeypointSet {
    let mut rng = stream(seed, label, n as u64);
    let (w, h) = BENCH_IMAGE;
    let points = (0..n)
        .map(|_| Point::new(rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
        .collect();
    let mut d = random_matrix(&mut rng, n, dim);
    for r in 0..n {
        let row = d.row_mut(r);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|x| *x /= norm);
    }
    KeypointSet::new(points, d, w, h).expect("valid benchmark keypoints")
}

type Workload = Box<dyn FnMut() -> Result<Option<usize>>>;

fn workload(method: BenchMethod, n: usize, cfg: &BenchConfig) -> Result<Workload> {
    let net = &cfg.network;
    Ok(match method {
        BenchMethod::LinearAttention | BenchMethod::SoftmaxAttention => {
            let t = random_triplet(cfg.seed, n, n, net.hidden_dim);
            let heads = net.heads;
            Box::new(move || {
                let kernel = if method == BenchMethod::LinearAttention {
                    Kernel::Linear
                } else {
                    Kernel::Softmax
                };
                multi_head(kernel, &t, heads)?;
                Ok(None)
            })
        }
        BenchMethod::LinearForward | BenchMethod::SoftmaxForward => {
            let attention = if method == BenchMethod::LinearForward {
                AttentionVariant::Linear
            } else {
                AttentionVariant::Softmax
            };
            let weights = NetworkWeights::init(net, cfg.seed)?;
            let layer = weights.self_layers[0].clone();
            let s = random_keypoints(cfg.seed, "bench.source", n, net.input_dim);
            let t = random_keypoints(cfg.seed, "bench.target", n, net.input_dim);
            let heads = net.heads;
            Box::new(move || {
                encoder_layer(s.descriptors(), t.descriptors(), &layer, attention.kind(), heads)?;
                Ok(None)
            })
        }
        BenchMethod::Pipeline => {
            let pair = generate_pair(cfg.seed, n, BENCH_IMAGE, net.input_dim, &GenNoiseConfig::default())?;
            let weights = NetworkWeights::init(net, cfg.seed)?;
            let pc = PipelineConfig {
                network: net.clone(),
                ..PipelineConfig::default()
            };
            Box::new(move || {
                let out = match_pipeline(&pair.source, &pair.target, &weights, &pc)?;
                Ok(Some(out.encoder_max_neighborhood))
            })
        }
    })
}

fn run_one(method: BenchMethod, n: usize, cfg: &BenchConfig, warnings: &mut Vec<String>) -> Result<BenchRow> {
    let mut work = workload(method, n, cfg)?;
    let (first, counts) = counters::measure(&mut work);
    first?;
    let mut last = f64::INFINITY;
    for _ in 0..cfg.warmups {
        let t = Instant::now();
        work()?;
        last = t.elapsed().as_secs_f64() * 1e3;
    }
    if cfg.warmups == 0 {
        let t = Instant::now();
        work()?;
        last = t.elapsed().as_secs_f64() * 1e3;
    }
    let mut inner = 1;
    if last < cfg.min_sample_ms {
        inner = (cfg.min_sample_ms / last.max(1e-6)).ceil() as usize;
        warnings.push(format!(
            "{method} at n={n} runs in {last:.3} ms, below the {} ms timer floor; timing {inner} runs per sample",
            cfg.min_sample_ms
        ));
    }
    let mut max_neighborhood = None;
    let mut samples = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        let t = Instant::now();
        for _ in 0..inner {
            max_neighborhood = work()?;
        }
        samples.push(t.elapsed().as_secs_f64() * 1e3 / inner as f64);
    }
    Ok(BenchRow {
        method,
        n,
        median_ms: median(&mut samples),
        reps: cfg.reps,
        inner,
        counts,
        multiplies: counts.multiplies,
        max_alloc_elements: counts.max_alloc_elements,
        max_neighborhood,
    })
}

fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a {threads}-thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Times each method at each size. Counts in each row come from one untimed run
/// on the benchmarking thread.
pub fn bench_methods(methods: &[BenchMethod], cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(Error::Config("no bench methods selected".into()));
    }
    let mut report = with_threads(cfg.threads, || -> Result<BenchReport> {
        let mut report = BenchReport::default();
        for &m in methods {
            for &n in &cfg.sizes {
                let row = run_one(m, n, cfg, &mut report.warnings)?;
                report.rows.push(row);
            }
        }
        Ok(report)
    })??;
    report.fit_slopes(methods)?;
    Ok(report)
}

/// Linear vs softmax attention, as bare kernels or inside an encoder layer.
pub fn bench_attention(methods: &[BenchMethod], cfg: &BenchConfig) -> Result<BenchReport> {
    if let Some(m) = methods.iter().find(|m| **m == BenchMethod::Pipeline) {
        return Err(Error::Config(format!("{m} is timed by bench_pipeline")));
    }
    bench_methods(methods, cfg)
}

/// Encoder forward plus match pipeline end to end; rows carry the largest
/// pairwise neighborhood.
pub fn bench_pipeline(cfg: &BenchConfig) -> Result<BenchReport> {
    bench_methods(&[BenchMethod::Pipeline], cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelAudit {
    pub multiplies: u128,
    pub max_alloc_elements: usize,
    /// Whether some buffer held at least `N·M` elements.
    pub allocates_nm: bool,
}

impl KernelAudit {
    fn from_counts(c: OpCounts, nm: usize) -> Self {
        KernelAudit {
            multiplies: c.multiplies,
            max_alloc_elements: c.max_alloc_elements,
            allocates_nm: c.max_alloc_elements >= nm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub n: usize,
    pub m: usize,
    pub width: usize,
    pub linear: KernelAudit,
    /// `(M + N)·C′² + (M + N)·C′`.
    pub linear_model: u128,
    pub softmax: KernelAudit,
    pub pairwise: KernelAudit,
    /// Sum of source and target set sizes over all neighborhoods.
    pub pairwise_members: usize,
    /// `Σ(|𝒩ᵗ_p|·C′² + |𝒩ˢ_p|·(C′² + 2C′))`.
    pub pairwise_model: u128,
}

impl AuditReport {
    /// Linear multiplies within twice the model and no `N×M` buffer.
    pub fn linear_ok(&self) -> bool {
        self.linear.multiplies <= 2 * self.linear_model && !self.linear.allocates_nm
    }

    pub fn pairwise_ok(&self) -> bool {
        self.pairwise.multiplies == self.pairwise_model && !self.pairwise.allocates_nm
    }
}

/// `count` random neighborhoods over `n` queries and `m` keys, each with
/// `size` distinct members per side.
pub fn random_pairs(seed: u64, n: usize, m: usize, count: usize, size: usize) -> Vec<NeighborhoodPair> {
    let mut rng = stream(seed, "bench.pairs", count as u64);
    (0..count)
        .map(|_| {
            let s = sample(&mut rng, n, size.min(n)).into_vec();
            let t = sample(&mut rng, m, size.min(m)).into_vec();
            NeighborhoodPair::new((s[0], t[0]), s, t).expect("indices in range")
        })
        .collect()
}

/// Counts multiplies and allocations of single-head linear, softmax and pairwise
/// attention on one random `N×M` instance.
pub fn op_counter_audit(n: usize, m: usize, width: usize, seed: u64) -> Result<AuditReport> {
    if n == 0 || m == 0 || width == 0 {
        return Err(Error::InvalidInput("audit needs non-empty inputs".into()));
    }
    let t = random_triplet(seed, n, m, width);
    let pairs = random_pairs(seed, n, m, 8, (n.min(m) / 16).max(1));
    let nm = n * m;
    let (_, lin) = counters::measure(|| multi_head(Kernel::Linear, &t, 1));
    let (_, soft) = counters::measure(|| multi_head(Kernel::Softmax, &t, 1));
    let (out, pw) = counters::measure(|| pairwise_attention(&t, &pairs));
    out?;
    let c = width as u128;
    let pairwise_model = pairs
        .iter()
        .map(|p| p.target_set().len() as u128 * c * c + p.source_set().len() as u128 * (c * c + 2 * c))
        .sum();
    Ok(AuditReport {
        n,
        m,
        width,
        linear: KernelAudit::from_counts(lin, nm),
        linear_model: (n + m) as u128 * (c * c + c),
        softmax: KernelAudit::from_counts(soft, nm),
        pairwise: KernelAudit::from_counts(pw, nm),
        pairwise_members: pairs.iter().map(|p| p.source_set().len() + p.target_set().len()).sum(),
        pairwise_model,
    })
}
