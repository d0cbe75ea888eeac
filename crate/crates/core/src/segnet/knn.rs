use std::collections::{BinaryHeap, HashMap};

use rayon::prelude::*;

use super::{Result, SegNetError};
use crate::tensor::NeighborTable;

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.d2.total_cmp(&other.d2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

pub(crate) struct Grid {
    cell: f64,
    origin: [f64; 3],
    extent: [i64; 3],
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
}

impl Grid {
    pub(crate) fn new(positions: &[[f32; 3]], cell: f64) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a] as f64);
                hi[a] = hi[a].max(p[a] as f64);
            }
        }
        let mut grid = Self { cell, origin: lo, extent: [0; 3], cells: HashMap::new() };
        for a in 0..3 {
            grid.extent[a] = ((hi[a] - lo[a]) / cell).floor() as i64 + 1;
        }
        for (i, p) in positions.iter().enumerate() {
            grid.cells.entry(grid.key(p)).or_default().push(i as u32);
        }
        grid
    }

    pub(crate) fn key(&self, p: &[f32; 3]) -> (i64, i64, i64) {
        let c = |a: usize| ((p[a] as f64 - self.origin[a]) / self.cell).floor() as i64;
        (c(0), c(1), c(2))
    }

    /// Points in cells whose Chebyshev offset from `center` is exactly `ring`.
    fn visit_ring(&self, center: (i64, i64, i64), ring: i64, mut f: impl FnMut(u32)) {
        for dx in -ring..=ring {
            for dy in -ring..=ring {
                for dz in -ring..=ring {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                        continue;
                    }
                    if let Some(members) = self.cells.get(&(center.0 + dx, center.1 + dy, center.2 + dz)) {
                        members.iter().copied().for_each(&mut f);
                    }
                }
            }
        }
    }

    /// All points within `radius` (inclusive) of `p`, in ascending index order.
    pub(crate) fn within(&self, positions: &[[f32; 3]], p: &[f32; 3], radius: f64) -> Vec<u32> {
        let r2 = radius * radius;
        let center = self.key(p);
        let rings = (radius / self.cell).ceil() as i64;
        let mut out = Vec::new();
        for ring in 0..=rings {
            self.visit_ring(center, ring, |j| {
                if dist2(p, &positions[j as usize]) <= r2 {
                    out.push(j);
                }
            });
        }
        out.sort_unstable();
        out
    }

    fn max_ring(&self) -> i64 {
        self.extent.iter().copied().max().unwrap_or(1) + 1
    }
}

pub(crate) fn dist2(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    (0..3).map(|i| (a[i] as f64 - b[i] as f64).powi(2)).sum()
}

/// The `k` nearest other points of every point, ordered by distance with ties
/// broken towards the lower point index.
pub fn knn_index(positions: &[[f32; 3]], k: usize) -> Result<NeighborTable> {
    let n = positions.len();
    if k == 0 || n <= k {
        return Err(SegNetError::Size(format!("kNN with k={k} needs more than {k} points, got {n}")));
    }
    let (lo, hi) = positions.iter().fold(([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]), |(mut lo, mut hi), p| {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a] as f64);
            hi[a] = hi[a].max(p[a] as f64);
        }
        (lo, hi)
    });
    // volume spanned by the non-degenerate axes, so planar data gets a sensible cell
    let spans: Vec<f64> = (0..3).map(|a| hi[a] - lo[a]).filter(|&s| s > 1e-9).collect();
    let cell = if spans.is_empty() {
        1.0
    } else {
        let measure: f64 = spans.iter().product();
        (measure * k as f64 / n as f64).powf(1.0 / spans.len() as f64).max(1e-6)
    };
    let grid = Grid::new(positions, cell);

    let rows: Vec<Vec<u32>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = &positions[i];
            let center = grid.key(p);
            let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
            let mut ring = 0;
            loop {
                grid.visit_ring(center, ring, |j| {
                    if j as usize == i {
                        return;
                    }
                    let c = Candidate { d2: dist2(p, &positions[j as usize]), index: j };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("non-empty") {
                        heap.pop();
                        heap.push(c);
                    }
                });
                // unvisited points lie at distance >= ring * cell
                let bound = ring as f64 * cell;
                if heap.len() == k && heap.peek().expect("full").d2 < bound * bound {
                    break;
                }
                if ring > grid.max_ring() {
                    break;
                }
                ring += 1;
            }
            let mut sorted = heap.into_vec();
            sorted.sort();
            sorted.into_iter().map(|c| c.index).collect()
        })
        .collect();
    Ok(NeighborTable::new(k, rows.into_iter().flatten().collect())?)
}
