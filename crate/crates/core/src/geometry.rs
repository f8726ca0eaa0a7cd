//! Keypoint sets, homographies and synthetic image pairs with ground truth.
//!
//! Synthetic pairs stand in for real imagery: source keypoints are uniform in
//! the frame, the target side holds their projections under a random
//! homography (optionally jittered) plus independent distractors, and ground
//! truth follows the usual labeling rule: a source/target pair is a match when
//! the two are mutual nearest neighbours under reprojection and closer than
//! [`MATCH_THRESHOLD_PX`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;
use crate::spatial::SpatialGrid;

/// Absolute reprojection threshold (target pixels) for ground-truth matches.
pub const MATCH_THRESHOLD_PX: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance_squared(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn distance(&self, other: &Point) -> f64 {
        self.distance_squared(other).sqrt()
    }
}

/// Keypoints, descriptors and frame size of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    keypoints: Vec<Point>,
    descriptors: Matrix<f64>,
    width: u32,
    height: u32,
}

impl KeypointSet {
    pub fn new(keypoints: Vec<Point>, descriptors: Matrix<f64>, width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!("image dimensions must be positive, got {width}x{height}")));
        }
        if descriptors.cols() == 0 {
            return Err(Error::InvalidInput("descriptor dimension must be at least 1".into()));
        }
        if descriptors.rows() != keypoints.len() {
            return Err(Error::Shape(format!(
                "{} keypoints but {} descriptor rows",
                keypoints.len(),
                descriptors.rows()
            )));
        }
        let (w, h) = (f64::from(width), f64::from(height));
        if let Some((i, p)) = keypoints
            .iter()
            .enumerate()
            .find(|(_, p)| !(p.x >= 0.0 && p.x < w && p.y >= 0.0 && p.y < h))
        {
            return Err(Error::InvalidInput(format!(
                "keypoint {i} at ({}, {}) lies outside the {width}x{height} frame",
                p.x, p.y
            )));
        }
        Ok(Self {
            keypoints,
            descriptors,
            width,
            height,
        })
    }

    pub fn keypoints(&self) -> &[Point] {
        &self.keypoints
    }

    pub fn descriptors(&self) -> &Matrix<f64> {
        &self.descriptors
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Copy with every keypoint shifted by `(dx, dy)` and the frame grown to fit.
    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self> {
        let keypoints: Vec<Point> = self.keypoints.iter().map(|p| Point::new(p.x + dx, p.y + dy)).collect();
        let width = self.width + dx.max(0.0).ceil() as u32;
        let height = self.height + dy.max(0.0).ceil() as u32;
        Self::new(keypoints, self.descriptors.clone(), width, height)
    }
}

/// Ground-truth correspondences between a source and a target keypoint set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    /// `(source, target)` pairs, sorted by source index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatchable_source: Vec<usize>,
    pub unmatchable_target: Vec<usize>,
}

impl GroundTruth {
    /// Builds ground truth from explicit pairs; every other index is unmatchable.
    pub fn from_pairs(mut pairs: Vec<(usize, usize)>, n_source: usize, n_target: usize) -> Result<Self> {
        pairs.sort_unstable();
        let mut src_used = vec![false; n_source];
        let mut tgt_used = vec![false; n_target];
        for &(i, j) in &pairs {
            if i >= n_source || j >= n_target {
                return Err(Error::InvalidInput(format!("ground-truth pair ({i}, {j}) out of range")));
            }
            if src_used[i] || tgt_used[j] {
                return Err(Error::InvalidInput(format!(
                    "ground-truth pair ({i}, {j}) repeats an index"
                )));
            }
            src_used[i] = true;
            tgt_used[j] = true;
        }
        Ok(Self {
            pairs,
            unmatchable_source: (0..n_source).filter(|&i| !src_used[i]).collect(),
            unmatchable_target: (0..n_target).filter(|&j| !tgt_used[j]).collect(),
        })
    }
}

/// Projective transform stored row-major and normalized so `h[2][2] = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [f64; 9],
}

impl Homography {
    pub fn new(m: [f64; 9]) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("homography has non-finite entries".into()));
        }
        if m[8].abs() < 1e-12 {
            return Err(Error::InvalidInput("homography bottom-right entry is zero".into()));
        }
        let s = m[8];
        let h = Self { m: m.map(|v| v / s) };
        if h.determinant().abs() <= 1e-9 {
            return Err(Error::InvalidInput("homography is singular".into()));
        }
        Ok(h)
    }

    pub fn identity() -> Self {
        Self {
            m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0],
        }
    }

    pub fn entries(&self) -> &[f64; 9] {
        &self.m
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    pub fn inverse(&self) -> Self {
        let m = &self.m;
        let det = self.determinant();
        let adj = [
            m[4] * m[8] - m[5] * m[7],
            m[2] * m[7] - m[1] * m[8],
            m[1] * m[5] - m[2] * m[4],
            m[5] * m[6] - m[3] * m[8],
            m[0] * m[8] - m[2] * m[6],
            m[2] * m[3] - m[0] * m[5],
            m[3] * m[7] - m[4] * m[6],
            m[1] * m[6] - m[0] * m[7],
            m[0] * m[4] - m[1] * m[3],
        ];
        let inv = adj.map(|v| v / det);
        let s = inv[8];
        Self { m: inv.map(|v| v / s) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Self {
        let (a, b) = (&self.m, &other.m);
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = (0..3).map(|k| a[r * 3 + k] * b[k * 3 + c]).sum();
            }
        }
        let s = out[8];
        Self { m: out.map(|v| v / s) }
    }

    /// Projects one point; `None` when the homogeneous coordinate vanishes.
    pub fn apply(&self, p: Point) -> Option<Point> {
        let m = &self.m;
        let w = m[6] * p.x + m[7] * p.y + m[8];
        if w.abs() < 1e-12 {
            return None;
        }
        Some(Point::new(
            (m[0] * p.x + m[1] * p.y + m[2]) / w,
            (m[3] * p.x + m[4] * p.y + m[5]) / w,
        ))
    }
}

/// Projects every point; entries whose `w` vanishes come back as `None`.
pub fn apply_homography(h: &Homography, points: &[Point]) -> Vec<Option<Point>> {
    points.iter().map(|&p| h.apply(p)).collect()
}

/// Mutual-nearest labeling of projected source points against target keypoints.
///
/// A pair is ground truth when each is the other's nearest neighbour and the
/// reprojection distance is strictly below [`MATCH_THRESHOLD_PX`]. Projections
/// that fell outside the plane (`None`) are unmatchable.
pub fn label_ground_truth(projected_source: &[Option<Point>], target: &[Point]) -> GroundTruth {
    let radius = MATCH_THRESHOLD_PX;
    let target_grid = SpatialGrid::new(target, radius);
    let placed: Vec<(usize, Point)> = projected_source
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|p| (i, p)))
        .collect();
    let source_points: Vec<Point> = placed.iter().map(|&(_, p)| p).collect();
    let source_grid = SpatialGrid::new(&source_points, radius);

    let mut pairs = Vec::new();
    for &(i, p) in &placed {
        let Some((j, d)) = target_grid.nearest_within(p, radius) else {
            continue;
        };
        if d >= MATCH_THRESHOLD_PX {
            continue;
        }
        let back = source_grid.nearest_within(target[j], radius).map(|(k, _)| placed[k].0);
        if back == Some(i) {
            pairs.push((i, j));
        }
    }
    GroundTruth::from_pairs(pairs, projected_source.len(), target.len())
        .expect("mutual nearest neighbours form a partial bijection")
}

/// Noise and difficulty knobs for [`generate_pair`].
#[derive(Debug, Clone, PartialEq)]
pub struct GenNoiseConfig {
    /// Std-dev of the Gaussian added to target copies of true-pair descriptors.
    pub descriptor_sigma: f64,
    /// Std-dev (pixels) of the jitter added to projected target keypoints.
    pub keypoint_jitter: f64,
    /// Independent target keypoints with unrelated descriptors.
    pub distractors: usize,
    /// Use the identity instead of a random homography.
    pub identity_homography: bool,
    /// Resample until at least this many ground-truth pairs exist (bounded retries).
    pub min_matches: Option<usize>,
}

impl Default for GenNoiseConfig {
    fn default() -> Self {
        Self {
            descriptor_sigma: 0.0,
            keypoint_jitter: 0.0,
            distractors: 0,
            identity_homography: false,
            min_matches: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub source: KeypointSet,
    pub target: KeypointSet,
    pub ground_truth: GroundTruth,
    pub homography: Homography,
}

const MIN_MATCH_RETRIES: u64 = 64;

/// Generates a deterministic synthetic image pair.
///
/// Keypoints and descriptors are rounded to `f32` so that the in-memory pair is
/// exactly what a KPDS file stores.
pub fn generate_pair(
    seed: u64,
    n_keypoints: usize,
    dims: (u32, u32),
    descriptor_dim: usize,
    noise: &GenNoiseConfig,
) -> Result<SyntheticPair> {
    let (width, height) = dims;
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput(format!("image dimensions must be positive, got {width}x{height}")));
    }
    if n_keypoints == 0 {
        return Err(Error::InvalidInput("n_keypoints must be at least 1".into()));
    }
    if descriptor_dim == 0 {
        return Err(Error::InvalidInput("descriptor_dim must be at least 1".into()));
    }
    if !(noise.descriptor_sigma >= 0.0 && noise.keypoint_jitter >= 0.0) {
        return Err(Error::InvalidInput("noise magnitudes must be non-negative".into()));
    }

    let mut last = None;
    for attempt in 0..MIN_MATCH_RETRIES {
        let mut rng = rng::stream(seed, "geometry.pair", attempt);
        let pair = sample_pair(&mut rng, n_keypoints, dims, descriptor_dim, noise)?;
        match noise.min_matches {
            Some(min) if pair.ground_truth.pairs.len() < min => last = Some(pair),
            _ => return Ok(pair),
        }
    }
    Ok(last.expect("at least one attempt was made"))
}

/// Rounds to the nearest `f32` strictly below `limit`.
fn quantize_coord(v: f64, limit: f64) -> f64 {
    let mut q = v as f32;
    while f64::from(q) >= limit {
        q = f32::from_bits(q.to_bits() - 1);
    }
    f64::from(q.max(0.0))
}

fn quantize(v: f64) -> f64 {
    f64::from(v as f32)
}

fn random_descriptor(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Random viewpoint change around the frame centre: rotation ±30°, anisotropic
/// scale 0.7–1.4, shear ±0.2, translation ±15% of the frame.
pub fn sample_homography(rng: &mut impl Rng, width: u32, height: u32) -> Homography {
    let (w, h) = (f64::from(width), f64::from(height));
    loop {
        let angle = rng.random_range(-30.0f64..=30.0).to_radians();
        let sx = rng.random_range(0.7..=1.4);
        let sy = rng.random_range(0.7..=1.4);
        let shear = rng.random_range(-0.2..=0.2);
        let tx = rng.random_range(-0.15..=0.15) * w;
        let ty = rng.random_range(-0.15..=0.15) * h;
        let (c, s) = (angle.cos(), angle.sin());
        // A = R · Sh · S
        let a00 = c * sx;
        let a01 = c * shear * sy - s * sy;
        let a10 = s * sx;
        let a11 = s * shear * sy + c * sy;
        let (cx, cy) = (w / 2.0, h / 2.0);
        let m = [
            a00,
            a01,
            cx + tx - (a00 * cx + a01 * cy),
            a10,
            a11,
            cy + ty - (a10 * cx + a11 * cy),
            0.0,
            0.0,
            1.0,
        ];
        if let Ok(hm) = Homography::new(m) {
            return hm;
        }
    }
}

fn sample_pair(
    rng: &mut ChaCha8Rng,
    n: usize,
    (width, height): (u32, u32),
    dim: usize,
    noise: &GenNoiseConfig,
) -> Result<SyntheticPair> {
    let (w, h) = (f64::from(width), f64::from(height));
    let homography = if noise.identity_homography {
        Homography::identity()
    } else {
        sample_homography(rng, width, height)
    };

    let source_points: Vec<Point> = (0..n)
        .map(|_| {
            Point::new(
                quantize_coord(rng.random_range(0.0..w), w),
                quantize_coord(rng.random_range(0.0..h), h),
            )
        })
        .collect();
    let base: Vec<Vec<f64>> = (0..n).map(|_| random_descriptor(rng, dim)).collect();

    let desc_noise = Normal::new(0.0, noise.descriptor_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let jitter = Normal::new(0.0, noise.keypoint_jitter).map_err(|e| Error::InvalidInput(e.to_string()))?;

    let mut target_points = Vec::with_capacity(n + noise.distractors);
    let mut target_desc: Vec<f64> = Vec::with_capacity((n + noise.distractors) * dim);
    for (p, d) in source_points.iter().zip(&base) {
        // both draws happen for every point so the stream layout never depends on survival
        let jx: f64 = jitter.sample(rng);
        let jy: f64 = jitter.sample(rng);
        let noisy: Vec<f64> = d.iter().map(|&v| quantize(v + desc_noise.sample(rng))).collect();
        let Some(q) = homography.apply(*p) else {
            continue;
        };
        let (x, y) = (q.x + jx, q.y + jy);
        if x >= 0.0 && x < w && y >= 0.0 && y < h {
            target_points.push(Point::new(quantize_coord(x, w), quantize_coord(y, h)));
            target_desc.extend(noisy);
        }
    }
    for _ in 0..noise.distractors {
        target_points.push(Point::new(
            quantize_coord(rng.random_range(0.0..w), w),
            quantize_coord(rng.random_range(0.0..h), h),
        ));
        target_desc.extend(random_descriptor(rng, dim).into_iter().map(quantize));
    }

    let source_desc: Vec<f64> = base.into_iter().flatten().map(quantize).collect();
    let projected = apply_homography(&homography, &source_points);
    let ground_truth = label_ground_truth(&projected, &target_points);
    let m = target_points.len();
    Ok(SyntheticPair {
        source: KeypointSet::new(source_points, Matrix::from_vec(n, dim, source_desc), width, height)?,
        target: KeypointSet::new(target_points, Matrix::from_vec(m, dim, target_desc), width, height)?,
        ground_truth,
        homography,
    })
}
