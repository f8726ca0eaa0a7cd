//! Distance-ratio matching, seed selection and local neighborhood construction.

use rayon::prelude::*;

use crate::attention::NeighborhoodPair;
use crate::error::{Error, Result};
use crate::geometry::{KeypointSet, Point};
use crate::matrix::{squared_distance, Matrix};
use crate::spatial::SpatialGrid;

/// Upper bound for ratio scores. Exact matches (nearest distance 0) and
/// single-candidate searches report this value instead of infinity.
pub const RATIO_SCORE_CAP: f64 = 1e6;

/// Match counts at or above this use grid bucketing for radius searches.
pub const GRID_SEARCH_THRESHOLD: usize = 4000;

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodConfig {
    /// Ratio-test threshold on nearest / second-nearest distance.
    pub theta: f64,
    /// Neighborhood extent as a multiple of the radii.
    pub lambda: f64,
    /// Seed-separation radius; derived from the source frame when unset.
    pub radius: Option<f64>,
    pub radius_source: Option<f64>,
    pub radius_target: Option<f64>,
    /// Neighborhoods with fewer members are discarded.
    pub min_neighborhood: usize,
}

impl Default for NeighborhoodConfig {
    fn default() -> Self {
        Self {
            theta: 1.0,
            lambda: 2.0,
            radius: None,
            radius_source: None,
            radius_target: None,
            min_neighborhood: 1,
        }
    }
}

impl NeighborhoodConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Config(format!("theta must lie in (0, 1], got {}", self.theta)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        for (name, r) in [
            ("radius", self.radius),
            ("radius_source", self.radius_source),
            ("radius_target", self.radius_target),
        ] {
            if let Some(r) = r {
                if !(r > 0.0 && r.is_finite()) {
                    return Err(Error::Config(format!("{name} must be positive, got {r}")));
                }
            }
        }
        Ok(())
    }

    pub fn seed_radius(&self, source: &KeypointSet) -> Result<f64> {
        match self.radius {
            Some(r) => Ok(r),
            None => default_radius(source.width(), source.height()),
        }
    }

    pub fn source_radius(&self, source: &KeypointSet) -> Result<f64> {
        match self.radius_source.or(self.radius) {
            Some(r) => Ok(r),
            None => default_radius(source.width(), source.height()),
        }
    }

    pub fn target_radius(&self, target: &KeypointSet) -> Result<f64> {
        match self.radius_target.or(self.radius) {
            Some(r) => Ok(r),
            None => default_radius(target.width(), target.height()),
        }
    }
}

/// `√(H·W / (100π))`.
pub fn default_radius(width: u32, height: u32) -> Result<f64> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput(format!("image dimensions must be positive, got {width}x{height}")));
    }
    Ok((f64::from(width) * f64::from(height) / (100.0 * std::f64::consts::PI)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioMatch {
    pub source: usize,
    pub target: usize,
    /// Second-nearest over nearest distance; larger is more distinctive.
    pub score: f64,
}

/// Mutual nearest neighbours passing the ratio test, ordered by source index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatioMatchSet {
    pub matches: Vec<RatioMatch>,
}

impl RatioMatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

#[derive(Clone, Copy)]
struct Nearest {
    idx: usize,
    d1: f64,
    d2: f64,
}

fn nearest_two(query: &[f64], pool: &Matrix) -> Option<Nearest> {
    let mut best: Option<Nearest> = None;
    for (j, row) in pool.row_iter().enumerate() {
        let d = squared_distance(query, row);
        match &mut best {
            None => {
                best = Some(Nearest {
                    idx: j,
                    d1: d,
                    d2: f64::INFINITY,
                })
            }
            Some(b) if d < b.d1 => {
                b.d2 = b.d1;
                b.d1 = d;
                b.idx = j;
            }
            Some(b) if d < b.d2 => b.d2 = d,
            _ => {}
        }
    }
    best
}

/// `(distance, index)` ordering used for column minima; ties go to the lower index.
fn better(a: (f64, usize), b: (f64, usize)) -> (f64, usize) {
    if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) {
        b
    } else {
        a
    }
}

pub fn ratio_score(d1: f64, d2: f64) -> f64 {
    if d2.is_infinite() {
        return RATIO_SCORE_CAP;
    }
    if d1 == 0.0 {
        return if d2 == 0.0 { 1.0 } else { RATIO_SCORE_CAP };
    }
    (d2 / d1).min(RATIO_SCORE_CAP)
}

/// Mutual nearest neighbours under Euclidean distance with `d₁/d₂ ≤ θ`.
pub fn ratio_match(xs: &Matrix, xt: &Matrix, theta: f64) -> Result<RatioMatchSet> {
    if xs.cols() != xt.cols() {
        return Err(Error::Shape(format!(
            "descriptor widths differ: source {} vs target {}",
            xs.cols(),
            xt.cols()
        )));
    }
    if xs.rows() == 0 || xt.rows() == 0 {
        return Ok(RatioMatchSet::default());
    }
    let m = xt.rows();
    let row_best: Vec<Nearest> = (0..xs.rows())
        .into_par_iter()
        .map(|i| nearest_two(xs.row(i), xt).expect("target set is non-empty"))
        .collect();
    let col_best: Vec<(f64, usize)> = (0..xs.rows())
        .into_par_iter()
        .fold(
            || vec![(f64::INFINITY, usize::MAX); m],
            |mut acc, i| {
                for (j, slot) in acc.iter_mut().enumerate() {
                    *slot = better(*slot, (squared_distance(xs.row(i), xt.row(j)), i));
                }
                acc
            },
        )
        .reduce(
            || vec![(f64::INFINITY, usize::MAX); m],
            |a, b| a.into_iter().zip(b).map(|(x, y)| better(x, y)).collect(),
        );

    let matches = row_best
        .iter()
        .enumerate()
        .filter_map(|(i, nb)| {
            if col_best[nb.idx].1 != i {
                return None;
            }
            let (d1, d2) = (nb.d1.sqrt(), nb.d2.sqrt());
            let passes = d2.is_infinite() || d1 <= theta * d2;
            passes.then(|| RatioMatch {
                source: i,
                target: nb.idx,
                score: ratio_score(d1, d2),
            })
        })
        .collect();
    Ok(RatioMatchSet { matches })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchStrategy {
    /// Brute force below [`GRID_SEARCH_THRESHOLD`] matches, grid above.
    Auto,
    BruteForce,
    Grid,
}

/// `a` outranks `b`: higher score, or equal score and lower source index.
fn outranks(a: &RatioMatch, b: &RatioMatch) -> bool {
    a.score > b.score || (a.score == b.score && a.source < b.source)
}

/// Indices into `m.matches` of the seeds, ascending by source index.
pub fn select_seeds(m: &RatioMatchSet, source_keypoints: &[Point], radius: f64) -> Vec<usize> {
    select_seeds_with(m, source_keypoints, radius, SearchStrategy::Auto)
}

pub fn select_seeds_with(
    m: &RatioMatchSet,
    source_keypoints: &[Point],
    radius: f64,
    strategy: SearchStrategy,
) -> Vec<usize> {
    let pts: Vec<Point> = m.matches.iter().map(|c| source_keypoints[c.source]).collect();
    let use_grid = match strategy {
        SearchStrategy::Auto => m.len() >= GRID_SEARCH_THRESHOLD,
        SearchStrategy::BruteForce => false,
        SearchStrategy::Grid => true,
    };
    let r2 = radius * radius;
    let grid = use_grid.then(|| SpatialGrid::new(&pts, radius.max(1e-9)));
    let mut seeds: Vec<usize> = (0..m.len())
        .into_par_iter()
        .filter(|&a| {
            let ca = &m.matches[a];
            let beaten = |b: usize| b != a && outranks(&m.matches[b], ca);
            match &grid {
                Some(g) => !g.within(pts[a], radius).into_iter().any(beaten),
                None => !(0..m.len()).any(|b| pts[a].distance_squared(&pts[b]) <= r2 && beaten(b)),
            }
        })
        .collect();
    seeds.sort_by_key(|&a| m.matches[a].source);
    seeds
}

/// A seed match and the matches within `λR_s` / `λR_t` of it on both sides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhood {
    /// Index into the match set.
    pub seed: usize,
    /// Indices into the match set, ascending; always contains `seed`.
    pub members: Vec<usize>,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Per-side keypoint index sets for restricted attention.
    pub fn to_pair(&self, m: &RatioMatchSet) -> NeighborhoodPair {
        let seed = &m.matches[self.seed];
        let source = self.members.iter().map(|&k| m.matches[k].source).collect();
        let target = self.members.iter().map(|&k| m.matches[k].target).collect();
        NeighborhoodPair::new((seed.source, seed.target), source, target)
            .expect("neighborhood members include the seed")
    }
}

pub fn build_neighborhoods(
    seeds: &[usize],
    m: &RatioMatchSet,
    source_keypoints: &[Point],
    target_keypoints: &[Point],
    radius_source: f64,
    radius_target: f64,
    lambda: f64,
) -> Vec<Neighborhood> {
    let src: Vec<Point> = m.matches.iter().map(|c| source_keypoints[c.source]).collect();
    let tgt: Vec<Point> = m.matches.iter().map(|c| target_keypoints[c.target]).collect();
    let rs = lambda * radius_source;
    let rt2 = (lambda * radius_target).powi(2);
    let grid = (m.len() >= GRID_SEARCH_THRESHOLD && rs.is_finite()).then(|| SpatialGrid::new(&src, rs.max(1e-9)));
    seeds
        .par_iter()
        .map(|&p| {
            let candidates: Vec<usize> = match &grid {
                Some(g) => g.within(src[p], rs),
                None => (0..m.len())
                    .filter(|&k| src[k].distance_squared(&src[p]) <= rs * rs)
                    .collect(),
            };
            let members = candidates
                .into_iter()
                .filter(|&k| tgt[k].distance_squared(&tgt[p]) <= rt2)
                .collect();
            Neighborhood { seed: p, members }
        })
        .collect()
}

/// Everything produced by one neighborhood-selection pass.
#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub matches: RatioMatchSet,
    pub seeds: Vec<usize>,
    pub neighborhoods: Vec<Neighborhood>,
}

impl Selection {
    pub fn pairs(&self) -> Vec<NeighborhoodPair> {
        self.neighborhoods.iter().map(|n| n.to_pair(&self.matches)).collect()
    }

    /// Size of the largest neighborhood.
    pub fn max_neighborhood(&self) -> usize {
        self.neighborhoods.iter().map(Neighborhood::len).max().unwrap_or(0)
    }
}

/// Ratio matching, seeding and neighborhood construction on encoded descriptors.
pub fn select_neighborhoods(
    xs: &Matrix,
    xt: &Matrix,
    source: &KeypointSet,
    target: &KeypointSet,
    cfg: &NeighborhoodConfig,
) -> Result<Selection> {
    cfg.validate()?;
    if xs.rows() != source.len() || xt.rows() != target.len() {
        return Err(Error::Shape(format!(
            "encoded rows ({}, {}) do not match keypoint counts ({}, {})",
            xs.rows(),
            xt.rows(),
            source.len(),
            target.len()
        )));
    }
    let matches = ratio_match(xs, xt, cfg.theta)?;
    if matches.is_empty() {
        return Ok(Selection::default());
    }
    let seeds = select_seeds(&matches, source.keypoints(), cfg.seed_radius(source)?);
    let mut neighborhoods = build_neighborhoods(
        &seeds,
        &matches,
        source.keypoints(),
        target.keypoints(),
        cfg.source_radius(source)?,
        cfg.target_radius(target)?,
        cfg.lambda,
    );
    neighborhoods.retain(|n| n.len() >= cfg.min_neighborhood);
    Ok(Selection {
        matches,
        seeds,
        neighborhoods,
    })
}
