//! Uniform-grid bucketing for radius queries over 2D points.

use std::collections::HashMap;

use crate::geometry::Point;

pub struct SpatialGrid {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
    points: Vec<Point>,
}

impl SpatialGrid {
    /// Buckets `points` into square cells of side `cell` (must be positive).
    pub fn new(points: &[Point], cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "grid cell size must be positive");
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(cell, p)).or_default().push(i);
        }
        Self {
            cell,
            buckets,
            points: points.to_vec(),
        }
    }

    fn key(cell: f64, p: &Point) -> (i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
    }

    /// Indices of all points with `‖p − center‖ ≤ radius`, ascending.
    pub fn within(&self, center: Point, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if !(radius >= 0.0) {
            return out;
        }
        let span = (radius / self.cell).ceil() as i64;
        let (cx, cy) = Self::key(self.cell, &center);
        let r2 = radius * radius;
        for gx in cx - span..=cx + span {
            for gy in cy - span..=cy + span {
                if let Some(bucket) = self.buckets.get(&(gx, gy)) {
                    out.extend(
                        bucket
                            .iter()
                            .copied()
                            .filter(|&i| self.points[i].distance_squared(&center) <= r2),
                    );
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Nearest point within `radius` (ties toward the lower index).
    pub fn nearest_within(&self, center: Point, radius: f64) -> Option<(usize, f64)> {
        self.within(center, radius)
            .into_iter()
            .map(|i| (i, self.points[i].distance(&center)))
            .fold(None, |best, (i, d)| match best {
                Some((_, bd)) if bd <= d => best,
                _ => Some((i, d)),
            })
    }
}
