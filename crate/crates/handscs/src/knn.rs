//! Uniform spatial grid for exact nearest-neighbor queries over point clouds.
//!
//! Used by the consistency-loss correspondence, the embedding smoothness
//! neighbor graph, and scale initialization. Queries return exactly what the
//! brute-force scan returns: ties on squared distance break toward the
//! smallest point index, and the candidate selection is order-independent.

use crate::math::Real;
use nalgebra::Vector3;
use std::collections::HashMap;

pub struct UniformGrid<T: Real> {
    cell: T,
    origin: Vector3<T>,
    cells: HashMap<(i32, i32, i32), Vec<usize>>,
    points: Vec<Vector3<T>>,
    cell_lo: (i32, i32, i32),
    cell_hi: (i32, i32, i32),
}

#[inline]
fn dist2<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> T {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

impl<T: Real> UniformGrid<T> {
    /// Build a grid over `points` with an automatically chosen cell size
    /// (bounding-box diagonal scaled by the cube root of the count).
    pub fn build(points: &[Vector3<T>]) -> Self {
        assert!(!points.is_empty(), "grid over empty cloud");
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = (hi - lo).norm();
        let n = points.len() as f64;
        let mut cell = extent / crate::math::real(n.cbrt().max(1.0));
        if cell <= T::zero() {
            cell = T::one();
        }
        let mut cells: HashMap<(i32, i32, i32), Vec<usize>> = HashMap::new();
        let mut cell_lo = (i32::MAX, i32::MAX, i32::MAX);
        let mut cell_hi = (i32::MIN, i32::MIN, i32::MIN);
        for (i, p) in points.iter().enumerate() {
            let key = Self::key(p, &lo, cell);
            cell_lo = (cell_lo.0.min(key.0), cell_lo.1.min(key.1), cell_lo.2.min(key.2));
            cell_hi = (cell_hi.0.max(key.0), cell_hi.1.max(key.1), cell_hi.2.max(key.2));
            cells.entry(key).or_default().push(i);
        }
        Self { cell, origin: lo, cells, points: points.to_vec(), cell_lo, cell_hi }
    }

    #[inline]
    fn key(p: &Vector3<T>, origin: &Vector3<T>, cell: T) -> (i32, i32, i32) {
        let q = (p - origin) / cell;
        (
            q.x.floor().to_i32().unwrap_or(0),
            q.y.floor().to_i32().unwrap_or(0),
            q.z.floor().to_i32().unwrap_or(0),
        )
    }

    /// Exact nearest neighbor of `query` (ties -> smallest index).
    pub fn nearest(&self, query: &Vector3<T>) -> usize {
        self.k_nearest(query, 1)[0]
    }

    /// Exact k nearest neighbors sorted by (squared distance, index).
    /// `exclude` skips one index (for self-queries).
    pub fn k_nearest_excluding(
        &self,
        query: &Vector3<T>,
        k: usize,
        exclude: Option<usize>,
    ) -> Vec<usize> {
        let k = k.min(self.points.len() - usize::from(exclude.is_some()));
        let center = Self::key(query, &self.origin, self.cell);
        // Ring radius that guarantees every occupied cell has been visited.
        let cover = [
            (center.0 - self.cell_lo.0).abs().max((center.0 - self.cell_hi.0).abs()),
            (center.1 - self.cell_lo.1).abs().max((center.1 - self.cell_hi.1).abs()),
            (center.2 - self.cell_lo.2).abs().max((center.2 - self.cell_hi.2).abs()),
        ]
        .into_iter()
        .max()
        .unwrap();
        let mut found: Vec<(T, usize)> = Vec::with_capacity(k + 1);
        let mut ring = 0i32;
        loop {
            for (cx, cy, cz) in ring_cells(center, ring) {
                if let Some(v) = self.cells.get(&(cx, cy, cz)) {
                    for &i in v {
                        if Some(i) == exclude {
                            continue;
                        }
                        let d = dist2(query, &self.points[i]);
                        insert_candidate(&mut found, k, (d, i));
                    }
                }
            }
            // Conservative lower bound on distances in the next ring.
            let next_min = self.cell * crate::math::real::<T>(ring as f64);
            let done = found.len() == k
                && found.last().map(|&(d, _)| d < next_min * next_min).unwrap_or(false);
            if done || ring >= cover {
                break;
            }
            ring += 1;
        }
        found.into_iter().map(|(_, i)| i).collect()
    }

    pub fn k_nearest(&self, query: &Vector3<T>, k: usize) -> Vec<usize> {
        self.k_nearest_excluding(query, k, None)
    }
}

/// Ordered-insert into the candidate list keyed by (distance, index).
#[inline]
fn insert_candidate<T: Real>(found: &mut Vec<(T, usize)>, k: usize, cand: (T, usize)) {
    let pos = found
        .iter()
        .position(|&(d, i)| cand.0 < d || (cand.0 == d && cand.1 < i))
        .unwrap_or(found.len());
    if pos < k {
        found.insert(pos, cand);
        found.truncate(k);
    }
}

/// All cells at Chebyshev distance exactly `ring` from `center`.
fn ring_cells(center: (i32, i32, i32), ring: i32) -> Vec<(i32, i32, i32)> {
    let (cx, cy, cz) = center;
    if ring == 0 {
        return vec![center];
    }
    let mut out = Vec::new();
    for dx in -ring..=ring {
        for dy in -ring..=ring {
            for dz in -ring..=ring {
                if dx.abs().max(dy.abs()).max(dz.abs()) == ring {
                    out.push((cx + dx, cy + dy, cz + dz));
                }
            }
        }
    }
    out
}

/// O(N) reference scan: exact nearest neighbor with the same tie rule.
pub fn nearest_brute<T: Real>(query: &Vector3<T>, points: &[Vector3<T>]) -> usize {
    let mut best = (dist2(query, &points[0]), 0usize);
    for (i, p) in points.iter().enumerate().skip(1) {
        let d = dist2(query, p);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// O(N log N) reference scan for k nearest neighbors.
pub fn k_nearest_brute<T: Real>(
    query: &Vector3<T>,
    points: &[Vector3<T>],
    k: usize,
    exclude: Option<usize>,
) -> Vec<usize> {
    let mut all: Vec<(T, usize)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, p)| (dist2(query, p), i))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.truncate(k);
    all.into_iter().map(|(_, i)| i).collect()
}
