use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use linmatch::bench::{bench_attention, bench_pipeline, op_counter_audit, BenchConfig, BenchMethod};
use linmatch::encoder::NetworkConfig;
use linmatch::geometry::{generate_pair, GenNoiseConfig};
use linmatch::io;
use linmatch::matcher::{evaluate, match_pipeline, FilterConfig, PipelineConfig};
use linmatch::neighborhood::NeighborhoodConfig;
use linmatch::rng::derive_seed;
use linmatch::training::{self, gradcheck_network, run_toy, GradcheckConfig, ToyConfig};
use linmatch::weights::{load_weights, save_weights, write_tensor_file, NetworkWeights};

use crate::config::overlay;
use crate::error::{input, CliError};
use crate::{
    BenchArgs, ConfidenceGradient, Context, EvalArgs, GradcheckArgs, InitArgs, MatchArgs, Precision, SynthArgs, TrainArgs,
};

type CliResult<T = ()> = Result<T, CliError>;

/// Creates the output directory up front so a bad location fails before any work.
fn output_dir(ctx: &Context, command: &str) -> CliResult<PathBuf> {
    let dir = ctx
        .output
        .clone()
        .ok_or_else(|| CliError::Usage(format!("{command} needs an output directory (-o <dir>)")))?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Checks that an output file can be created next to existing files.
fn output_file(path: &Path) -> CliResult<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(CliError::Usage(format!("output directory {} does not exist", parent.display())));
    }
    if path.is_dir() {
        return Err(CliError::Usage(format!("output {} is a directory", path.display())));
    }
    Ok(())
}

fn written<T>(path: &Path, r: linmatch::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    written(path, std::fs::write(path, text).map_err(linmatch::Error::from))
}

/// Writes to `-o` when given, else stdout.
fn emit(ctx: &Context, text: &str) -> CliResult {
    match &ctx.output {
        Some(p) => write_text(p, text),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|()| out.flush())
                .map_err(|e| CliError::Usage(format!("cannot write to stdout: {e}")))
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes") + "\n"
}

#[derive(Serialize)]
struct SynthParams {
    kpts: usize,
    width: u32,
    height: u32,
    dim: usize,
    descriptor_sigma: f64,
    keypoint_jitter: f64,
    distractors: usize,
    identity_homography: bool,
    min_matches: Option<usize>,
}

#[derive(Serialize)]
struct ManifestEntry {
    name: String,
    seed: u64,
    source: String,
    target: String,
    ground_truth: String,
    homography: String,
    num_ground_truth: usize,
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    params: SynthParams,
    pairs: Vec<ManifestEntry>,
}

pub fn synth(ctx: &Context, a: &SynthArgs) -> CliResult {
    let f = &ctx.file.synth;
    let pairs = a.pairs.or(f.pairs).unwrap_or(1);
    let kpts = a.kpts.map(|k| k as usize).or(f.kpts).unwrap_or(512);
    let p = SynthParams {
        kpts,
        width: a.width.or(f.width).unwrap_or(640),
        height: a.height.or(f.height).unwrap_or(480),
        dim: a.dim.or(f.dim).unwrap_or(NetworkConfig::default().input_dim),
        descriptor_sigma: a.sigma.or(f.descriptor_sigma).unwrap_or(0.0),
        keypoint_jitter: a.jitter.or(f.keypoint_jitter).unwrap_or(0.0),
        distractors: a.distractors.or(f.distractors).unwrap_or(0),
        identity_homography: a.identity || f.identity_homography.unwrap_or(false),
        min_matches: a.min_matches.or(f.min_matches),
    };
    if pairs == 0 || p.kpts == 0 || p.dim == 0 || p.width == 0 || p.height == 0 {
        return Err(CliError::Usage("pairs, kpts, dim, width and height must all be positive".into()));
    }
    let noise = GenNoiseConfig {
        descriptor_sigma: p.descriptor_sigma,
        keypoint_jitter: p.keypoint_jitter,
        distractors: p.distractors,
        identity_homography: p.identity_homography,
        min_matches: p.min_matches,
    };
    let dir = output_dir(ctx, "synth")?;
    let width = (pairs - 1).to_string().len().max(3);
    let mut entries = Vec::with_capacity(pairs);
    for k in 0..pairs {
        let seed = derive_seed(ctx.seed, "synth.pair", k as u64);
        let pair = generate_pair(seed, p.kpts, (p.width, p.height), p.dim, &noise).map_err(|e| CliError::Usage(e.to_string()))?;
        let name = format!("pair_{k:0width$}");
        let sub = dir.join(&name);
        written(&sub, std::fs::create_dir_all(&sub).map_err(linmatch::Error::from))?;
        let rel = |f: &str| format!("{name}/{f}");
        written(&sub, io::write_kpds(&sub.join("source.kpds"), &pair.source))?;
        written(&sub, io::write_kpds(&sub.join("target.kpds"), &pair.target))?;
        written(&sub, io::write_ground_truth(&sub.join("gt.csv"), &pair.ground_truth))?;
        written(&sub, io::write_homography(&sub.join("homography.txt"), &pair.homography))?;
        entries.push(ManifestEntry {
            seed,
            source: rel("source.kpds"),
            target: rel("target.kpds"),
            ground_truth: rel("gt.csv"),
            homography: rel("homography.txt"),
            num_ground_truth: pair.ground_truth.pairs.len(),
            name,
        });
    }
    let total: usize = entries.iter().map(|e| e.num_ground_truth).sum();
    let manifest = Manifest {
        seed: ctx.seed,
        params: p,
        pairs: entries,
    };
    write_text(&dir.join("manifest.json"), &to_json(&manifest))?;
    eprintln!(
        "wrote {pairs} pairs to {} ({total} ground-truth correspondences)",
        dir.display()
    );
    Ok(())
}

pub fn init_weights(ctx: &Context, a: &InitArgs) -> CliResult {
    let mut net = NetworkConfig::default();
    a.network.section().or(&ctx.file.network).apply(&mut net);
    let path = ctx
        .output
        .clone()
        .ok_or_else(|| CliError::Usage("init-weights needs an output file (-o <file>)".into()))?;
    output_file(&path)?;
    let w = if a.identity {
        NetworkWeights::identity(&net)?
    } else {
        NetworkWeights::init(&net, derive_seed(ctx.seed, "cli.init", 0))?
    };
    written(&path, save_weights(&path, &w))?;
    eprintln!(
        "wrote {} parameters (D={}, C'={}, L1={}, L2={}) to {}",
        w.parameter_count(),
        net.input_dim,
        net.hidden_dim,
        net.l1,
        net.l2,
        path.display()
    );
    Ok(())
}

fn neighborhood_config(ctx: &Context) -> NeighborhoodConfig {
    let mut n = NeighborhoodConfig::default();
    ctx.file.neighborhood.apply(&mut n);
    n
}

fn filter_config(ctx: &Context) -> FilterConfig {
    let mut f = FilterConfig {
        rng_seed: derive_seed(ctx.seed, "cli.filter", 0),
        ..FilterConfig::default()
    };
    ctx.file.filter.apply(&mut f);
    f
}

pub fn run_match(ctx: &Context, a: &MatchArgs) -> CliResult {
    if let Some(p) = &ctx.output {
        output_file(p)?;
    }
    let source = input(&a.source, "keypoints", io::read_kpds(&a.source))?;
    let target = input(&a.target, "keypoints", io::read_kpds(&a.target))?;
    let mut weights = input(&a.weights, "weights", load_weights(&a.weights))?;
    let (input_dim, hidden_dim) = weights
        .dims()
        .ok_or_else(|| CliError::Data(format!("{}: weights have no layers", a.weights.display())))?;

    // Depths default to what the weight file holds; the config and flags may
    // ask for tied or shallower loops.
    let mut net = NetworkConfig {
        input_dim,
        hidden_dim,
        l1: weights.cross_layers.len(),
        l2: weights.pair_layers.len(),
        ..NetworkConfig::default()
    };
    let f = &ctx.file.network;
    overlay!(net, f; heads, l1, l2, tie_weights, attention);
    overlay!(net, a; heads, l1, l2);
    net.tie_weights |= a.tie_weights;
    if a.skip_pairwise {
        net.l2 = 0;
        weights.pair_layers.clear();
    }
    net.validate()?;
    weights
        .check(&net)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.weights.display())))?;

    let mut neighborhood = neighborhood_config(ctx);
    overlay!(neighborhood, a; theta, lambda, radius);
    let cfg = PipelineConfig {
        network: net,
        neighborhood,
        filter: filter_config(ctx),
        skip_filter: a.no_filter,
    };
    let out = match_pipeline(&source, &target, &weights, &cfg)?;
    let mut csv = Vec::new();
    io::write_matches_to(&mut csv, &out.matches)?;
    emit(ctx, std::str::from_utf8(&csv).expect("csv is utf-8"))?;
    eprintln!(
        "{} matches ({} candidates) between {} and {} keypoints",
        out.matches.len(),
        out.candidates.len(),
        source.len(),
        target.len()
    );
    Ok(())
}

pub fn eval(ctx: &Context, a: &EvalArgs) -> CliResult {
    if let Some(p) = &ctx.output {
        output_file(p)?;
    }
    if a.thresholds.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(CliError::Usage("thresholds must be non-negative numbers".into()));
    }
    let source = input(&a.source, "keypoints", io::read_kpds(&a.source))?;
    let target = input(&a.target, "keypoints", io::read_kpds(&a.target))?;
    let matches = input(&a.matches, "matches", io::read_matches(&a.matches))?;
    let gt = input(
        &a.ground_truth,
        "ground truth",
        io::read_ground_truth(&a.ground_truth, source.len(), target.len()),
    )?;
    let h = input(&a.homography, "homography", io::read_homography(&a.homography))?;
    let m = evaluate(&matches, &source, &target, &gt, &h, &a.thresholds)?;
    emit(ctx, &to_json(&m))?;
    eprintln!(
        "{} matches: precision {:.4}, recall {:.4}, inlier ratio@3px {:.4}",
        m.num_matches, m.precision, m.recall, m.inlier_ratio
    );
    Ok(())
}

pub fn bench(ctx: &Context, a: &BenchArgs) -> CliResult {
    let f = &ctx.file.bench;
    let mut cfg = BenchConfig {
        seed: ctx.seed,
        threads: ctx.threads.unwrap_or(1),
        ..BenchConfig::default()
    };
    overlay!(cfg, f; sizes, reps, warmups, min_sample_ms);
    overlay!(cfg, a; sizes, reps, warmups);
    a.network.section().or(&ctx.file.network).apply(&mut cfg.network);
    cfg.validate()?;

    let dir = match &ctx.output {
        Some(_) => Some(output_dir(ctx, "bench")?),
        None => None,
    };
    let report = if a.pipeline {
        bench_pipeline(&cfg)?
    } else {
        let names = a.methods.clone().or_else(|| f.methods.clone()).unwrap_or_else(|| {
            vec![
                BenchMethod::LinearAttention.name().to_string(),
                BenchMethod::SoftmaxAttention.name().to_string(),
            ]
        });
        let methods = names
            .iter()
            .map(|n| n.parse::<BenchMethod>().map_err(|e| CliError::Usage(e.to_string())))
            .collect::<CliResult<Vec<_>>>()?;
        bench_attention(&methods, &cfg)?
    };
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let csv = report.to_csv()?;
    match dir {
        Some(dir) => {
            let audit = op_counter_audit(256, 256, 16, ctx.seed)?;
            let summary = serde_json::json!({ "report": report, "audit": audit });
            write_text(&dir.join("bench.csv"), &csv)?;
            write_text(&dir.join("bench.json"), &to_json(&summary))?;
        }
        None => emit(ctx, &csv)?,
    }
    for s in &report.slopes {
        eprintln!("{}: log-log slope {:.3}", s.method, s.slope);
    }
    Ok(())
}

pub fn train_toy(ctx: &Context, a: &TrainArgs) -> CliResult {
    let dir = output_dir(ctx, "train-toy")?;
    let f = &ctx.file.toy;
    let mut cfg = ToyConfig::default();
    overlay!(cfg, f; pairs, held_out);
    if let Some(k) = a.kpts.map(|k| k as usize).or(f.kpts) {
        cfg.keypoints = k;
    }
    if let Some(w) = f.width {
        cfg.image.0 = w;
    }
    if let Some(h) = f.height {
        cfg.image.1 = h;
    }
    overlay!(cfg, a; pairs, held_out);
    if let Some(s) = a.steps.or(f.steps) {
        cfg.train.steps = s;
    }
    overlay!(cfg.noise, f; descriptor_sigma, keypoint_jitter, distractors);
    if let Some(m) = f.min_matches {
        cfg.noise.min_matches = Some(m);
    }
    a.network.section().or(&ctx.file.network).apply(&mut cfg.train.network);
    ctx.file.neighborhood.apply(&mut cfg.train.neighborhood);
    ctx.file.loss.apply(&mut cfg.train.loss);
    ctx.file.filter.apply(&mut cfg.filter);
    if let Some(lr) = a.lr {
        cfg.train.loss.learning_rate = lr;
    }
    if let Some(g) = a.confidence_gradient {
        cfg.train.loss.detach_confidence = g == ConfidenceGradient::Detach;
    }
    if cfg.pairs == 0 || cfg.held_out == 0 || cfg.keypoints == 0 {
        return Err(CliError::Usage("pairs, held-out and kpts must be positive".into()));
    }
    cfg.train.network.validate()?;
    cfg.train.loss.validate()?;

    let (outcome, report) = run_toy(&cfg, ctx.seed)?;
    let weights = dir.join("weights.lawt");
    written(&weights, save_weights(&weights, &outcome.weights))?;
    let optimizer = dir.join("optimizer.lawt");
    written(&optimizer, write_tensor_file(&optimizer, &outcome.optimizer.named_state()))?;
    let mut trace = csv_writer();
    for row in &outcome.trace {
        trace.serialize(row).map_err(linmatch::Error::from)?;
    }
    write_text(&dir.join("trace.csv"), &csv_text(trace))?;
    write_text(&dir.join("report.json"), &to_json(&report))?;
    eprintln!(
        "loss {:.4} -> {:.4} (ratio {:.3}); held-out precision@3px {:.1}% -> {:.1}% ({} -> {} matches); after filter {:.1}% -> {:.1}% ({} -> {} matches)",
        report.initial_loss,
        report.final_loss,
        report.loss_ratio(),
        100.0 * report.initial_precision,
        100.0 * report.trained_precision,
        report.initial_matches,
        report.trained_matches,
        100.0 * report.initial_filtered_precision,
        100.0 * report.trained_filtered_precision,
        report.initial_filtered_matches,
        report.trained_filtered_matches
    );
    if a.check && !(report.loss_ratio() <= 0.5 && report.precision_gain() >= 0.2) {
        return Err(CliError::Failed(format!(
            "toy training check failed: loss ratio {:.3} (need <= 0.5), precision gain {:.1} points (need >= 20)",
            report.loss_ratio(),
            100.0 * report.precision_gain()
        )));
    }
    Ok(())
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

fn csv_text(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

pub fn gradcheck(ctx: &Context, a: &GradcheckArgs) -> CliResult {
    if a.precision == Precision::Single {
        return Err(CliError::Usage(
            "gradient checking needs --precision double; single precision cannot resolve a 1e-5 step".into(),
        ));
    }
    if let Some(p) = &ctx.output {
        output_file(p)?;
    }
    let f = &ctx.file.gradcheck;
    let mut cfg = GradcheckConfig {
        seed: ctx.seed,
        ..GradcheckConfig::default()
    };
    overlay!(cfg, f; samples, step, tolerance);
    overlay!(cfg, a; samples, step, tolerance);
    if cfg.samples == 0 || !(cfg.step > 0.0) || !(cfg.tolerance > 0.0) {
        return Err(CliError::Usage("samples, step and tolerance must be positive".into()));
    }
    let report = training::gradcheck(&gradcheck_network(), &cfg)?;
    emit(ctx, &to_json(&report))?;
    eprintln!(
        "max relative error {:.3e}; {}/{} entries within {:e}",
        report.max_relative_error, report.within_tolerance, report.checked, cfg.tolerance
    );
    if report.fraction_within() < 0.99 {
        return Err(CliError::Failed(format!(
            "only {:.1}% of gradient entries are within tolerance (need 99%)",
            100.0 * report.fraction_within()
        )));
    }
    Ok(())
}
