//! Brute-force reference implementations, independent of the library's code paths.

/// Triple-loop matrix product on row-major buffers.
pub fn matmul_ref(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * c + j];
            }
            out[i * c + j] = s;
        }
    }
    out
}

fn d2(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    (0..3).map(|i| (a[i] as f64 - b[i] as f64).powi(2)).sum()
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    parent[i] = r;
    r
}

/// Brute-force DBSCAN over the masked points: eps-graph components of core
/// points via union-find, border points attached to the nearest core point.
/// Returns (members, core flags) per region, filtered and ordered like the
/// simulator's regions.
pub fn dbscan_ref(
    positions: &[[f32; 3]],
    mask: &[bool],
    eps: f64,
    min_pts: usize,
    min_size: usize,
) -> Vec<(Vec<usize>, Vec<bool>)> {
    let idx: Vec<usize> = (0..positions.len()).filter(|&i| mask[i]).collect();
    let n = idx.len();
    let e2 = eps * eps;
    let near = |a: usize, b: usize| d2(&positions[idx[a]], &positions[idx[b]]) <= e2;
    let core: Vec<bool> = (0..n).map(|a| (0..n).filter(|&b| near(a, b)).count() >= min_pts).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for a in 0..n {
        for b in 0..n {
            if core[a] && core[b] && near(a, b) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut root = vec![None; n];
    for a in 0..n {
        if core[a] {
            root[a] = Some(find(&mut parent, a));
        } else {
            let mut best: Option<(f64, usize)> = None;
            for b in 0..n {
                if core[b] && near(a, b) {
                    let d = d2(&positions[idx[a]], &positions[idx[b]]);
                    if best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, b));
                    }
                }
            }
            root[a] = best.map(|(_, b)| find(&mut parent, b));
        }
    }
    let mut groups: std::collections::BTreeMap<usize, (Vec<usize>, Vec<bool>)> = Default::default();
    for a in 0..n {
        if let Some(r) = root[a] {
            let g = groups.entry(r).or_default();
            g.0.push(idx[a]);
            g.1.push(core[a]);
        }
    }
    let mut out: Vec<_> = groups.into_values().filter(|g| g.0.len() >= min_size.max(1)).collect();
    out.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0[0].cmp(&b.0[0])));
    out
}

/// O(n²) Gaussian KDE, `(2π)^{-3/2} h^{-3} / n · Σ exp(-d²/2h²)`.
pub fn kde_ref(points: &[[f32; 3]], h: f64) -> Vec<f64> {
    let norm = (2.0 * std::f64::consts::PI).powf(-1.5) / h.powi(3) / points.len() as f64;
    points.iter().map(|p| points.iter().map(|q| (-d2(p, q) / (2.0 * h * h)).exp()).sum::<f64>() * norm).collect()
}

/// First index of the maximum among `candidates`.
pub fn argmax_ref(values: &[f64], candidates: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for &c in candidates {
        if best.map_or(true, |b| values[c] > values[b]) {
            best = Some(c);
        }
    }
    best
}

/// k nearest other points by exhaustive sort; ties go to the lower index.
pub fn knn_ref(points: &[[f32; 3]], k: usize) -> Vec<Vec<u32>> {
    (0..points.len())
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..points.len()).filter(|&j| j != i).map(|j| (d2(&points[i], &points[j]), j)).collect();
            others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j as u32).collect()
        })
        .collect()
}
