//! Simulated annotator: cluster the error map, click the densest interior
//! point of the largest error region with its ground-truth label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::refine::{ClickSource, InteractionRecord};
use crate::segnet::knn::{dist2, Grid};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("invalid simulator config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClickSelection {
    /// Highest-density core point, lowest index on ties.
    ArgMax,
    /// Core point drawn with probability proportional to its density.
    DensityWeighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
    pub kde_bandwidth: f64,
    pub clicks_per_round: usize,
    pub min_region_size: usize,
    pub selection: ClickSelection,
    /// Regions larger than this use a kernel truncated at `KDE_CUTOFF` bandwidths.
    pub kde_exact_limit: usize,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dbscan_eps: 0.09,
            dbscan_min_pts: 8,
            kde_bandwidth: 0.09,
            clicks_per_round: 1,
            min_region_size: 15,
            selection: ClickSelection::ArgMax,
            kde_exact_limit: 3000,
            rng_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dbscan_eps > 0.0 && self.kde_bandwidth > 0.0) {
            return Err(SimError::Config("dbscan_eps and kde_bandwidth must be positive".into()));
        }
        if self.clicks_per_round == 0 || self.dbscan_min_pts == 0 {
            return Err(SimError::Config("clicks_per_round and dbscan_min_pts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Truncation radius of the large-region kernel, in bandwidths.
pub const KDE_CUTOFF: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRegion {
    /// Point indices into the full cloud, ascending.
    pub members: Vec<usize>,
    /// Whether each member is a DBSCAN core point.
    pub core: Vec<bool>,
    /// Per-member density; empty until [`ErrorRegion::with_density`].
    pub density: Vec<f64>,
}

impl ErrorRegion {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn with_density(mut self, positions: &[[f32; 3]], cfg: &SimConfig) -> Self {
        let pts: Vec<[f32; 3]> = self.members.iter().map(|&i| positions[i]).collect();
        self.density = if pts.len() <= cfg.kde_exact_limit {
            kde_density(&pts, cfg.kde_bandwidth)
        } else {
            kde_density_truncated(&pts, cfg.kde_bandwidth, KDE_CUTOFF * cfg.kde_bandwidth)
        };
        self
    }
}

pub fn error_map(predicted: &[u32], ground_truth: &[u32]) -> Result<Vec<bool>> {
    if predicted.len() != ground_truth.len() {
        return Err(SimError::Length(format!("{} predictions, {} labels", predicted.len(), ground_truth.len())));
    }
    Ok(predicted.iter().zip(ground_truth).map(|(p, g)| p != g).collect())
}

/// DBSCAN over the masked points. A point is core when at least `min_pts`
/// masked points (itself included) lie within `eps`. Core points within `eps`
/// of each other share a region; a non-core point within `eps` of a core
/// point joins the region of its nearest core neighbour (lowest index on
/// ties); everything else is noise. Regions smaller than `min_region_size`
/// are dropped; the rest are ordered by size, then by smallest member.
pub fn cluster_errors(positions: &[[f32; 3]], mask: &[bool], cfg: &SimConfig) -> Result<Vec<ErrorRegion>> {
    if positions.len() != mask.len() {
        return Err(SimError::Length(format!("{} positions, {} mask entries", positions.len(), mask.len())));
    }
    cfg.validate()?;
    let global: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if global.is_empty() {
        return Ok(Vec::new());
    }
    let pts: Vec<[f32; 3]> = global.iter().map(|&i| positions[i]).collect();
    let grid = Grid::new(&pts, cfg.dbscan_eps);
    let nbrs: Vec<Vec<u32>> = (0..pts.len()).into_par_iter().map(|i| grid.within(&pts, &pts[i], cfg.dbscan_eps)).collect();
    let is_core: Vec<bool> = nbrs.iter().map(|n| n.len() >= cfg.dbscan_min_pts).collect();

    const NONE: usize = usize::MAX;
    let mut cluster = vec![NONE; pts.len()];
    let mut next = 0;
    let mut stack = Vec::new();
    for seed in 0..pts.len() {
        if !is_core[seed] || cluster[seed] != NONE {
            continue;
        }
        cluster[seed] = next;
        stack.push(seed);
        while let Some(i) = stack.pop() {
            for &j in &nbrs[i] {
                let j = j as usize;
                if is_core[j] && cluster[j] == NONE {
                    cluster[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    for i in 0..pts.len() {
        if is_core[i] {
            continue;
        }
        // neighbour lists are ascending, so strict < keeps the lowest index on ties
        let mut best: Option<(f64, usize)> = None;
        for &j in &nbrs[i] {
            let j = j as usize;
            if is_core[j] {
                let d = dist2(&pts[i], &pts[j]);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
        }
        if let Some((_, j)) = best {
            cluster[i] = cluster[j];
        }
    }

    let mut regions: Vec<ErrorRegion> = (0..next).map(|_| ErrorRegion { members: vec![], core: vec![], density: vec![] }).collect();
    for i in 0..pts.len() {
        if cluster[i] != NONE {
            regions[cluster[i]].members.push(global[i]);
            regions[cluster[i]].core.push(is_core[i]);
        }
    }
    regions.retain(|r| r.size() >= cfg.min_region_size.max(1));
    regions.sort_by(|a, b| b.size().cmp(&a.size()).then(a.members[0].cmp(&b.members[0])));
    Ok(regions)
}

/// Normalisation of the 3-D Gaussian kernel: `(2π)^{-3/2} h^{-3}`.
fn kernel_norm(h: f64) -> f64 {
    (2.0 * std::f64::consts::PI).powf(-1.5) / (h * h * h)
}

/// Gaussian kernel density of every point w.r.t. all points of the set
/// (itself included): `(1/n) Σ_j K_h(x_i - x_j)`.
pub fn kde_density(positions: &[[f32; 3]], bandwidth: f64) -> Vec<f64> {
    let n = positions.len();
    let (norm, inv) = (kernel_norm(bandwidth) / n as f64, -0.5 / (bandwidth * bandwidth));
    (0..n)
        .into_par_iter()
        .map(|i| positions.iter().map(|q| (dist2(&positions[i], q) * inv).exp()).sum::<f64>() * norm)
        .collect()
}

/// As [`kde_density`] but ignoring pairs farther apart than `cutoff`.
pub fn kde_density_truncated(positions: &[[f32; 3]], bandwidth: f64, cutoff: f64) -> Vec<f64> {
    let n = positions.len();
    let (norm, inv) = (kernel_norm(bandwidth) / n as f64, -0.5 / (bandwidth * bandwidth));
    let grid = Grid::new(positions, cutoff);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let p = &positions[i];
            grid.within(positions, p, cutoff).iter().map(|&j| (dist2(p, &positions[j as usize]) * inv).exp()).sum::<f64>()
                * norm
        })
        .collect()
}

/// What the simulator may look at.
#[derive(Clone, Copy, Debug)]
pub struct SimView<'a> {
    pub predicted: &'a [u32],
    pub ground_truth: &'a [u32],
    pub positions: &'a [[f32; 3]],
}

/// Picks a core member that is not excluded, per the selection rule.
fn pick(region: &ErrorRegion, excluded: &dyn Fn(usize) -> bool, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Option<usize> {
    let cands: Vec<usize> = (0..region.size()).filter(|&k| region.core[k] && !excluded(region.members[k])).collect();
    if cands.is_empty() {
        return None;
    }
    let k = match cfg.selection {
        ClickSelection::ArgMax => {
            let mut best = cands[0];
            for &k in &cands[1..] {
                if region.density[k] > region.density[best] {
                    best = k;
                }
            }
            best
        }
        ClickSelection::DensityWeighted => {
            let total: f64 = cands.iter().map(|&k| region.density[k]).sum();
            let mut u = rng.random::<f64>() * total;
            let mut chosen = *cands.last().expect("non-empty");
            for &k in &cands {
                u -= region.density[k];
                if u < 0.0 {
                    chosen = k;
                    break;
                }
            }
            chosen
        }
    };
    Some(region.members[k])
}

/// Corrective clicks for the current prediction. One click per region,
/// largest regions first, skipping regions whose core points have all been
/// clicked already; when there are fewer usable regions than
/// `clicks_per_round`, further clicks come from the largest region. Points in
/// `already_clicked` are never chosen. An empty result means no usable error
/// region is left.
pub fn next_clicks(
    view: SimView<'_>,
    already_clicked: &[usize],
    round: usize,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<InteractionRecord>> {
    if view.positions.len() != view.predicted.len() {
        return Err(SimError::Length(format!("{} positions, {} predictions", view.positions.len(), view.predicted.len())));
    }
    let mask = error_map(view.predicted, view.ground_truth)?;
    let regions = cluster_errors(view.positions, &mask, cfg)?;
    let mut chosen: Vec<usize> = Vec::new();
    let mut scored: Vec<ErrorRegion> = Vec::new();
    for region in regions {
        if chosen.len() >= cfg.clicks_per_round {
            break;
        }
        let region = region.with_density(view.positions, cfg);
        let excluded = |i: usize| already_clicked.contains(&i) || chosen.contains(&i);
        if let Some(i) = pick(&region, &excluded, cfg, rng) {
            chosen.push(i);
            scored.push(region);
        }
    }
    if let Some(largest) = scored.first() {
        while chosen.len() < cfg.clicks_per_round {
            let excluded = |i: usize| already_clicked.contains(&i) || chosen.contains(&i);
            match pick(largest, &excluded, cfg, rng) {
                Some(i) => chosen.push(i),
                None => break,
            }
        }
    }
    Ok(chosen
        .into_iter()
        .map(|i| InteractionRecord {
            point_index: i,
            corrected_label: view.ground_truth[i],
            round,
            source: ClickSource::Simulator,
        })
        .collect())
}

/// Fresh RNG for a simulator run.
pub fn sim_rng(cfg: &SimConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.rng_seed)
}
