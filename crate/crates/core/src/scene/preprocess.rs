use std::collections::HashMap;

use super::LabeledCloud;

fn voxel(p: &[f32; 3], cell: f64) -> (i64, i64, i64) {
    let k = |v: f32| (v as f64 / cell).floor() as i64;
    (k(p[0]), k(p[1]), k(p[2]))
}

/// Keeps one point per occupied voxel of side `cell`: the one closest to the
/// centroid of the voxel's points (lowest index on ties). Output preserves
/// input order.
///
/// # Panics
/// If `cell` is not positive.
pub fn grid_subsample(cloud: &LabeledCloud, cell: f64) -> LabeledCloud {
    assert!(cell > 0.0, "grid cell must be positive");
    let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        cells.entry(voxel(p, cell)).or_default().push(i);
    }
    let mut keep: Vec<usize> = cells
        .values()
        .map(|members| {
            let n = members.len() as f64;
            let mut c = [0.0f64; 3];
            for &i in members {
                for a in 0..3 {
                    c[a] += cloud.positions[i][a] as f64 / n;
                }
            }
            let d2 = |i: usize| (0..3).map(|a| (cloud.positions[i][a] as f64 - c[a]).powi(2)).sum::<f64>();
            // members are in ascending order, so min_by keeps the lowest index on ties
            *members.iter().min_by(|&&a, &&b| d2(a).total_cmp(&d2(b))).expect("non-empty cell")
        })
        .collect();
    keep.sort_unstable();
    cloud.select(&keep, cloud.name.clone())
}

fn longest_axis(cloud: &LabeledCloud, idx: &[usize]) -> (usize, f32, f32) {
    let mut lo = [f32::INFINITY; 3];
    let mut hi = [f32::NEG_INFINITY; 3];
    for &i in idx {
        for a in 0..3 {
            lo[a] = lo[a].min(cloud.positions[i][a]);
            hi[a] = hi[a].max(cloud.positions[i][a]);
        }
    }
    let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a))).unwrap_or(0);
    (axis, lo[axis], hi[axis])
}

/// Slab of `x` among `k` equal slabs of `[lo, hi]`; boundary points go to the lower slab.
fn slab(x: f32, lo: f32, hi: f32, k: usize) -> usize {
    let w = (hi as f64 - lo as f64) / k as f64;
    let s = ((x as f64 - lo as f64) / w).ceil() as i64 - 1;
    s.clamp(0, k as i64 - 1) as usize
}

fn split(cloud: &LabeledCloud, idx: Vec<usize>, max_points: usize, out: &mut Vec<Vec<usize>>) {
    if idx.len() <= max_points {
        out.push(idx);
        return;
    }
    let (axis, lo, hi) = longest_axis(cloud, &idx);
    if hi <= lo {
        // all points share one coordinate: fall back to index chunks
        out.extend(idx.chunks(max_points).map(<[usize]>::to_vec));
        return;
    }
    let min_k = idx.len().div_ceil(max_points);
    let max_k = min_k * 64;
    let mut chosen = Vec::new();
    for k in min_k.max(2)..=max_k {
        let mut slabs = vec![Vec::new(); k];
        for &i in &idx {
            slabs[slab(cloud.positions[i][axis], lo, hi, k)].push(i);
        }
        let ok = slabs.iter().all(|s| s.len() <= max_points);
        chosen = slabs;
        if ok {
            break;
        }
    }
    for s in chosen.into_iter().filter(|s| !s.is_empty()) {
        split(cloud, s, max_points, out);
    }
}

/// Splits a cloud into slabs along its longest axis so that no part exceeds
/// `max_points`, using the fewest equal-width slabs that achieve this.
/// Oversized slabs (for example from stacked duplicates) are split again.
///
/// # Panics
/// If `max_points` is zero.
pub fn crop_longest_axis(cloud: &LabeledCloud, max_points: usize) -> Vec<LabeledCloud> {
    assert!(max_points > 0, "max_points must be positive");
    if cloud.len() <= max_points {
        return vec![cloud.clone()];
    }
    let mut parts = Vec::new();
    split(cloud, (0..cloud.len()).collect(), max_points, &mut parts);
    parts
        .iter()
        .enumerate()
        .map(|(k, idx)| cloud.select(idx, format!("{}_part{k}", cloud.name)))
        .collect()
}
