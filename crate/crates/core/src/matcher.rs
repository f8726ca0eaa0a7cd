//! Distance matching on encoded descriptors, local affine verification and
//! evaluation against ground truth.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::index;
use rayon::prelude::*;
use serde::ser::{SerializeMap, SerializeStruct};
use serde::{Deserialize, Serialize, Serializer};

use crate::encoder::{forward, NetworkConfig};
use crate::error::{Error, Result};
use crate::geometry::{GroundTruth, Homography, KeypointSet, Point, MATCH_THRESHOLD_PX};
use crate::neighborhood::{select_neighborhoods, NeighborhoodConfig, Selection};
use crate::rng;
use crate::weights::NetworkWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Seed,
    Candidate,
    Verified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    #[serde(rename = "i")]
    pub source: usize,
    #[serde(rename = "j")]
    pub target: usize,
    pub score: f64,
    pub stage: Stage,
}

/// Matches ordered by `(source, target)`, no duplicate pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    /// Sorts and rejects duplicate `(source, target)` pairs.
    pub fn new(mut matches: Vec<Match>) -> Result<Self> {
        matches.sort_by_key(|m| (m.source, m.target));
        if let Some(w) = matches.windows(2).find(|w| (w[0].source, w[0].target) == (w[1].source, w[1].target)) {
            return Err(Error::InvalidInput(format!(
                "duplicate match ({}, {})",
                w[0].source, w[0].target
            )));
        }
        Ok(Self { matches })
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.matches.iter().map(|m| (m.source, m.target)).collect()
    }

    /// Errors if any index is outside the given set sizes.
    pub fn check_bounds(&self, n_source: usize, n_target: usize) -> Result<()> {
        match self.matches.iter().find(|m| m.source >= n_source || m.target >= n_target) {
            Some(m) => Err(Error::InvalidInput(format!(
                "match ({}, {}) out of range for {n_source} source / {n_target} target keypoints",
                m.source, m.target
            ))),
            None => Ok(()),
        }
    }
}

/// What happens to neighborhoods too small for a 3-point affine fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmallNeighborhoods {
    #[default]
    Drop,
    /// Keep the members unverified when the group contains its seed.
    PassThrough,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub ransac_iterations: usize,
    /// Inlier threshold as a fraction of the target radius.
    pub inlier_threshold_factor: f64,
    pub min_inliers: usize,
    pub rng_seed: u64,
    pub small_neighborhoods: SmallNeighborhoods,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            ransac_iterations: 128,
            inlier_threshold_factor: 0.15,
            min_inliers: 6,
            rng_seed: 0,
            small_neighborhoods: SmallNeighborhoods::Drop,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ransac_iterations == 0 {
            return Err(Error::Config("ransac_iterations must be at least 1".into()));
        }
        if !(self.inlier_threshold_factor > 0.0) {
            return Err(Error::Config("inlier_threshold_factor must be positive".into()));
        }
        if self.min_inliers < 3 {
            return Err(Error::Config("min_inliers must be at least 3".into()));
        }
        Ok(())
    }
}

/// Candidate correspondences grouped around one seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateGroup {
    pub seed: (usize, usize),
    /// `(source, target)` pairs, including the seed.
    pub members: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Default)]
pub struct DistanceMatch {
    pub matches: MatchSet,
    pub groups: Vec<CandidateGroup>,
    pub selection: Selection,
}

/// One group per neighborhood, as `(source, target)` pairs.
pub fn candidate_groups(selection: &Selection) -> Vec<CandidateGroup> {
    let m = &selection.matches.matches;
    selection
        .neighborhoods
        .iter()
        .map(|n| CandidateGroup {
            seed: (m[n.seed].source, m[n.seed].target),
            members: n.members.iter().map(|&k| (m[k].source, m[k].target)).collect(),
        })
        .collect()
}

/// Seeds plus every neighborhood member on the final descriptors, scored by ratio.
pub fn distance_match(
    xs: &crate::matrix::Matrix,
    xt: &crate::matrix::Matrix,
    source: &KeypointSet,
    target: &KeypointSet,
    cfg: &NeighborhoodConfig,
) -> Result<DistanceMatch> {
    let selection = select_neighborhoods(xs, xt, source, target, cfg)?;
    let seeds: BTreeSet<usize> = selection.seeds.iter().copied().collect();
    let members: BTreeSet<usize> = selection.neighborhoods.iter().flat_map(|n| n.members.iter().copied()).collect();
    let matches = members
        .into_iter()
        .map(|k| {
            let c = selection.matches.matches[k];
            Match {
                source: c.source,
                target: c.target,
                score: c.score,
                stage: if seeds.contains(&k) { Stage::Seed } else { Stage::Candidate },
            }
        })
        .collect();
    Ok(DistanceMatch {
        matches: MatchSet::new(matches)?,
        groups: candidate_groups(&selection),
        selection,
    })
}

/// 2×3 affine map `[a b c; d e f]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine(pub [f64; 6]);

impl Affine {
    /// Exact fit through three correspondences; `None` when the source points
    /// are (nearly) collinear.
    pub fn from_three(src: [Point; 3], dst: [Point; 3]) -> Option<Self> {
        let [p0, p1, p2] = src;
        let (ux, uy) = (p1.x - p0.x, p1.y - p0.y);
        let (vx, vy) = (p2.x - p0.x, p2.y - p0.y);
        let det = ux * vy - uy * vx;
        let scale = (ux * ux + uy * uy).max(vx * vx + vy * vy);
        if !(det.abs() > 1e-9 * scale.max(1e-12)) {
            return None;
        }
        let solve = |q0: f64, q1: f64, q2: f64| {
            let (du, dv) = (q1 - q0, q2 - q0);
            let a = (du * vy - dv * uy) / det;
            let b = (dv * ux - du * vx) / det;
            (a, b, q0 - a * p0.x - b * p0.y)
        };
        let (a, b, c) = solve(dst[0].x, dst[1].x, dst[2].x);
        let (d, e, f) = solve(dst[0].y, dst[1].y, dst[2].y);
        Some(Self([a, b, c, d, e, f]))
    }

    pub fn apply(&self, p: Point) -> Point {
        let [a, b, c, d, e, f] = self.0;
        Point::new(a * p.x + b * p.y + c, d * p.x + e * p.y + f)
    }
}

/// Best-model inlier indices (into `src`/`dst`) from `iterations` random
/// 3-point samples. Ties keep the earliest model.
pub fn ransac_affine(
    src: &[Point],
    dst: &[Point],
    iterations: usize,
    threshold: f64,
    rng: &mut impl rand::Rng,
) -> Vec<usize> {
    let n = src.len();
    if n < 3 {
        return Vec::new();
    }
    let t2 = threshold * threshold;
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..iterations {
        let s = index::sample(rng, n, 3);
        let pick = |v: &[Point]| [v[s.index(0)], v[s.index(1)], v[s.index(2)]];
        let Some(model) = Affine::from_three(pick(src), pick(dst)) else {
            continue;
        };
        let inliers: Vec<usize> = (0..n)
            .filter(|&k| model.apply(src[k]).distance_squared(&dst[k]) <= t2)
            .collect();
        if inliers.len() > best.len() {
            best = inliers;
        }
    }
    best
}

/// Per-group affine RANSAC without refitting; a match verified in any group
/// survives. Output is a subset of `m`, tagged `verified` unless passed
/// through unverified by [`SmallNeighborhoods::PassThrough`].
pub fn filter_matches(
    m: &MatchSet,
    source: &KeypointSet,
    target: &KeypointSet,
    groups: &[CandidateGroup],
    radius_target: f64,
    cfg: &FilterConfig,
) -> Result<MatchSet> {
    cfg.validate()?;
    m.check_bounds(source.len(), target.len())?;
    let lookup: HashMap<(usize, usize), Match> = m.matches.iter().map(|x| ((x.source, x.target), *x)).collect();
    let threshold = cfg.inlier_threshold_factor * radius_target;
    let (ks, kt) = (source.keypoints(), target.keypoints());

    let kept: Vec<Vec<((usize, usize), bool)>> = groups
        .par_iter()
        .map(|g| {
            let members: Vec<(usize, usize)> = g.members.iter().copied().filter(|p| lookup.contains_key(p)).collect();
            if members.len() < 3 {
                let pass = cfg.small_neighborhoods == SmallNeighborhoods::PassThrough && members.contains(&g.seed);
                return if pass {
                    members.into_iter().map(|p| (p, false)).collect()
                } else {
                    Vec::new()
                };
            }
            let src: Vec<Point> = members.iter().map(|&(i, _)| ks[i]).collect();
            let dst: Vec<Point> = members.iter().map(|&(_, j)| kt[j]).collect();
            let mut r = rng::stream(cfg.rng_seed, "matcher.ransac", g.seed.0 as u64);
            let inliers = ransac_affine(&src, &dst, cfg.ransac_iterations, threshold, &mut r);
            if inliers.len() >= cfg.min_inliers {
                inliers.into_iter().map(|k| (members[k], true)).collect()
            } else {
                Vec::new()
            }
        })
        .collect();

    let mut survivors: BTreeMap<(usize, usize), bool> = BTreeMap::new();
    for (p, verified) in kept.into_iter().flatten() {
        *survivors.entry(p).or_insert(false) |= verified;
    }
    let matches = survivors
        .into_iter()
        .map(|(p, verified)| {
            let mut x = lookup[&p];
            if verified {
                x.stage = Stage::Verified;
            }
            x
        })
        .collect();
    MatchSet::new(matches)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineConfig {
    pub network: NetworkConfig,
    pub neighborhood: NeighborhoodConfig,
    pub filter: FilterConfig,
    /// Stop after distance matching.
    pub skip_filter: bool,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    pub matches: MatchSet,
    /// Distance-matching output before filtering.
    pub candidates: MatchSet,
    /// Largest neighborhood used by the pairwise layers.
    pub encoder_max_neighborhood: usize,
    /// Largest candidate group in distance matching.
    pub max_group: usize,
}

/// Encoder, distance matching and (unless skipped) filtering.
pub fn match_pipeline(
    source: &KeypointSet,
    target: &KeypointSet,
    weights: &NetworkWeights,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    cfg.filter.validate()?;
    let enc = forward(source, target, weights, &cfg.network, &cfg.neighborhood)?;
    let dm = distance_match(&enc.xs, &enc.xt, source, target, &cfg.neighborhood)?;
    let max_group = dm.groups.iter().map(|g| g.members.len()).max().unwrap_or(0);
    let matches = if cfg.skip_filter || dm.matches.is_empty() {
        dm.matches.clone()
    } else {
        let rt = cfg.neighborhood.target_radius(target)?;
        filter_matches(&dm.matches, source, target, &dm.groups, rt, &cfg.filter)?
    };
    Ok(PipelineOutput {
        matches,
        candidates: dm.matches,
        encoder_max_neighborhood: enc.selection.max_neighborhood(),
        max_group,
    })
}

/// Reprojection error of each match under `h` (infinite when the source point
/// maps to infinity).
pub fn reprojection_errors(m: &MatchSet, source: &KeypointSet, target: &KeypointSet, h: &Homography) -> Vec<f64> {
    m.matches
        .iter()
        .map(|x| match h.apply(source.keypoints()[x.source]) {
            Some(p) => p.distance(&target.keypoints()[x.target]),
            None => f64::INFINITY,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// `(threshold px, fraction of matches within it)` in the requested order.
    pub mma: Vec<(f64, f64)>,
    pub precision: f64,
    pub recall: f64,
    pub num_matches: usize,
    /// Fraction of matches within 3 px.
    pub inlier_ratio: f64,
}

impl Metrics {
    pub fn mma_at(&self, threshold: f64) -> Option<f64> {
        self.mma.iter().find(|(t, _)| *t == threshold).map(|&(_, v)| v)
    }
}

struct MmaTable<'a>(&'a [(f64, f64)]);

impl Serialize for MmaTable<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (t, v) in self.0 {
            map.serialize_entry(&t.to_string(), v)?;
        }
        map.end()
    }
}

impl Serialize for Metrics {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("Metrics", 5)?;
        st.serialize_field("mma", &MmaTable(&self.mma))?;
        st.serialize_field("precision", &self.precision)?;
        st.serialize_field("recall", &self.recall)?;
        st.serialize_field("num_matches", &self.num_matches)?;
        st.serialize_field("inlier_ratio", &self.inlier_ratio)?;
        st.end()
    }
}

/// MMA per threshold, precision/recall against `gt`, inlier ratio at 3 px.
/// An empty match set scores 0 everywhere.
pub fn evaluate(
    m: &MatchSet,
    source: &KeypointSet,
    target: &KeypointSet,
    gt: &GroundTruth,
    h: &Homography,
    thresholds: &[f64],
) -> Result<Metrics> {
    m.check_bounds(source.len(), target.len())?;
    let errors = reprojection_errors(m, source, target, h);
    let n = m.len();
    let frac = |t: f64| {
        if n == 0 {
            0.0
        } else {
            errors.iter().filter(|&&e| e <= t).count() as f64 / n as f64
        }
    };
    let truth: BTreeSet<(usize, usize)> = gt.pairs.iter().copied().collect();
    let correct = m.pairs().iter().filter(|p| truth.contains(p)).count();
    Ok(Metrics {
        mma: thresholds.iter().map(|&t| (t, frac(t))).collect(),
        precision: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        recall: if truth.is_empty() { 0.0 } else { correct as f64 / truth.len() as f64 },
        num_matches: n,
        inlier_ratio: frac(MATCH_THRESHOLD_PX),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::matrix::Matrix;

    fn set(points: Vec<Point>, w: u32, h: u32) -> KeypointSet {
        let n = points.len();
        KeypointSet::new(points, Matrix::from_fn(n, 2, |r, c| (r + c) as f64), w, h).unwrap()
    }

    fn warp(p: Point) -> Point {
        Point::new(0.9 * p.x + 0.2 * p.y + 12.0, -0.1 * p.x + 1.1 * p.y + 5.0)
    }

    fn group_instance(n: usize, seed: u64) -> (KeypointSet, KeypointSet, MatchSet, Vec<CandidateGroup>) {
        let mut r = rng::stream(seed, "matcher.test", 0);
        let src: Vec<Point> = (0..n).map(|_| Point::new(r.random_range(10.0..60.0), r.random_range(10.0..60.0))).collect();
        let dst: Vec<Point> = src.iter().map(|&p| warp(p)).collect();
        let matches = (0..n)
            .map(|i| Match {
                source: i,
                target: i,
                score: 2.0,
                stage: if i == 0 { Stage::Seed } else { Stage::Candidate },
            })
            .collect();
        let group = CandidateGroup {
            seed: (0, 0),
            members: (0..n).map(|i| (i, i)).collect(),
        };
        (set(src, 100, 100), set(dst, 120, 120), MatchSet::new(matches).unwrap(), vec![group])
    }

    #[test]
    fn affine_fit_is_exact() {
        let src = [Point::new(0.0, 0.0), Point::new(3.0, 1.0), Point::new(-2.0, 5.0)];
        let a = Affine::from_three(src, src.map(warp)).unwrap();
        let p = Point::new(7.5, -3.0);
        assert!(a.apply(p).distance(&warp(p)) < 1e-12);
        let line = [Point::new(0.0, 0.0), Point::new(1.0, 1.0), Point::new(2.0, 2.0)];
        assert!(Affine::from_three(line, line).is_none());
    }

    #[test]
    fn consistent_group_survives_entirely() {
        let (s, t, m, g) = group_instance(20, 1);
        let out = filter_matches(&m, &s, &t, &g, 10.0, &FilterConfig::default()).unwrap();
        assert_eq!(out.pairs(), m.pairs());
        assert!(out.matches.iter().all(|x| x.stage == Stage::Verified));
    }

    /// Exhaustive affine fits over all 3-subsets confirm that the displaced
    /// correspondence is the only one no consistent model explains.
    #[test]
    fn single_displaced_candidate_is_removed() {
        let (s, t, m, g) = group_instance(20, 2);
        let threshold = 0.15 * 10.0;
        let mut kt = t.keypoints().to_vec();
        kt[7] = Point::new(kt[7].x + 10.0 * threshold, kt[7].y);
        let t = set(kt.clone(), 120, 120);

        let ks = s.keypoints();
        let mut best = 0;
        let mut best_set = Vec::new();
        for a in 0..20 {
            for b in a + 1..20 {
                for c in b + 1..20 {
                    if let Some(model) = Affine::from_three([ks[a], ks[b], ks[c]], [kt[a], kt[b], kt[c]]) {
                        let inl: Vec<usize> = (0..20).filter(|&k| model.apply(ks[k]).distance(&kt[k]) <= threshold).collect();
                        if inl.len() > best {
                            best = inl.len();
                            best_set = inl;
                        }
                    }
                }
            }
        }
        assert_eq!(best_set, (0..20).filter(|&k| k != 7).collect::<Vec<_>>());

        let out = filter_matches(&m, &s, &t, &g, 10.0, &FilterConfig::default()).unwrap();
        let want: Vec<(usize, usize)> = best_set.iter().map(|&k| (k, k)).collect();
        assert_eq!(out.pairs(), want);
    }

    #[test]
    fn small_groups_drop_or_pass_through() {
        let (s, t, m, _) = group_instance(5, 3);
        let g = vec![CandidateGroup {
            seed: (0, 0),
            members: vec![(0, 0), (1, 1)],
        }];
        assert!(filter_matches(&m, &s, &t, &g, 10.0, &FilterConfig::default()).unwrap().is_empty());
        let pass = FilterConfig {
            small_neighborhoods: SmallNeighborhoods::PassThrough,
            ..FilterConfig::default()
        };
        let out = filter_matches(&m, &s, &t, &g, 10.0, &pass).unwrap();
        assert_eq!(out.pairs(), vec![(0, 0), (1, 1)]);
        assert_eq!(out.matches[0].stage, Stage::Seed);
    }

    #[test]
    fn filter_never_invents_matches_and_is_deterministic() {
        let (s, t, m, mut g) = group_instance(30, 4);
        // a group referencing a pair that is not in the match set
        g[0].members.push((3, 4));
        let a = filter_matches(&m, &s, &t, &g, 10.0, &FilterConfig::default()).unwrap();
        assert!(a.pairs().iter().all(|p| m.pairs().contains(p)));
        let b = filter_matches(&m, &s, &t, &g, 10.0, &FilterConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn larger_threshold_never_lowers_best_inlier_count() {
        let mut r = rng::stream(5, "matcher.test", 1);
        for trial in 0..20u64 {
            let n = 25;
            let src: Vec<Point> = (0..n).map(|_| Point::new(r.random_range(0.0..50.0), r.random_range(0.0..50.0))).collect();
            let dst: Vec<Point> = src
                .iter()
                .map(|&p| {
                    let q = warp(p);
                    Point::new(q.x + r.random_range(-3.0..3.0), q.y + r.random_range(-3.0..3.0))
                })
                .collect();
            let mut prev = 0;
            for thr in [0.5, 1.0, 2.0, 4.0] {
                let mut rr = rng::stream(trial, "matcher.mono", 0);
                let count = ransac_affine(&src, &dst, 64, thr, &mut rr).len();
                assert!(count >= prev);
                prev = count;
            }
        }
    }

    #[test]
    fn evaluate_constructed_errors() {
        let src = set(vec![Point::new(10.0, 10.0); 4], 100, 100);
        let offsets = [0.5, 2.0, 4.0, 20.0];
        let tgt = set(offsets.iter().map(|&o| Point::new(10.0 + o, 10.0)).collect(), 100, 100);
        let m = MatchSet::new(
            (0..4)
                .map(|i| Match {
                    source: i,
                    target: i,
                    score: 1.0,
                    stage: Stage::Verified,
                })
                .collect(),
        )
        .unwrap();
        let gt = GroundTruth::from_pairs(vec![(0, 0), (1, 1)], 4, 4).unwrap();
        let metrics = evaluate(&m, &src, &tgt, &gt, &Homography::identity(), &[1.0, 3.0, 10.0]).unwrap();
        assert_eq!(metrics.mma, vec![(1.0, 0.25), (3.0, 0.5), (10.0, 0.75)]);
        assert_eq!(metrics.inlier_ratio, 0.5);
        assert_eq!((metrics.precision, metrics.recall), (0.5, 1.0));
        let json = serde_json::to_string(&metrics).unwrap();
        assert!(json.starts_with(r#"{"mma":{"1":0.25,"3":0.5,"10":0.75},"precision":0.5"#), "{json}");

        let empty = evaluate(&MatchSet::default(), &src, &tgt, &gt, &Homography::identity(), &[1.0]).unwrap();
        assert_eq!((empty.num_matches, empty.mma[0].1, empty.precision), (0, 0.0, 0.0));
    }

    #[test]
    fn duplicate_matches_rejected() {
        let m = Match {
            source: 1,
            target: 2,
            score: 1.0,
            stage: Stage::Seed,
        };
        assert!(MatchSet::new(vec![m, m]).is_err());
    }
}
