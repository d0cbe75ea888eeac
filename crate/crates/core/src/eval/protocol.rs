use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{write_artifacts, BenchmarkSummary};
use super::{miou, noc, EvalConfig, EvalError, Result, Variant};
use crate::refine::{InteractionRecord, RefinementSession, WarmupReport};
use crate::scalar::Scalar;
use crate::scene::{LabeledCloud, Manifest, Split};
use crate::segnet::{NetworkParams, SegInput};
use crate::sim::{next_clicks, SimConfig, SimView};

/// A test cloud with its network input prepared once.
#[derive(Clone, Debug)]
pub struct PreparedScene<T> {
    pub cloud: LabeledCloud,
    pub input: SegInput<T>,
}

impl<T: Scalar> PreparedScene<T> {
    pub fn new(cloud: LabeledCloud, knn_k: usize) -> Result<Self> {
        if cloud.labels.is_none() {
            return Err(EvalError::Unlabeled(cloud.name.clone()));
        }
        let input = SegInput::new(&cloud, knn_k)?;
        Ok(Self { cloud, input })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scene: String,
    pub variant: Variant,
    pub seed: u64,
    /// mIoU of the network before warm-up.
    pub baseline_miou: f64,
    /// mIoU after 0, 1, 2, ... clicks; entry 0 follows warm-up.
    pub miou_curve: Vec<f64>,
    pub clicks: Vec<InteractionRecord>,
    /// Clicks needed per target (same order as the config); `None` is a failure.
    pub noc: Vec<Option<usize>>,
    pub round_seconds: Vec<f64>,
    /// Clicked points carrying their corrected label, summed over refine calls.
    pub clicked_hits: usize,
    pub clicked_total: usize,
    pub warmup: WarmupReport,
}

impl RunRecord {
    pub fn final_miou(&self) -> f64 {
        *self.miou_curve.last().expect("curve has the initial entry")
    }

    pub fn initial_miou(&self) -> f64 {
        self.miou_curve[0]
    }
}

fn sim_rng(sim: &SimConfig, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sim.rng_seed ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// One scene, one variant: warm up, then alternate simulated clicks and
/// refinement until the budget is spent, the simulator has nothing left to
/// click, or (with `stop_at_target`) the highest target is met.
pub fn noc_protocol<T: Scalar>(
    scene: &PreparedScene<T>,
    baseline: &NetworkParams<T>,
    cfg: &EvalConfig,
    variant: Variant,
    seed: u64,
) -> Result<RunRecord> {
    let gt = scene.cloud.labels.as_deref().ok_or_else(|| EvalError::Unlabeled(scene.cloud.name.clone()))?;
    let m = baseline.config.num_classes;
    let mut session =
        RefinementSession::with_input(scene.cloud.clone(), scene.input.clone(), baseline.clone(), variant.config(&cfg.refine))?;
    let baseline_miou = miou(session.labels(), gt, m)?.miou;
    let warmup = session.warm_up()?;
    let mut curve = vec![miou(session.labels(), gt, m)?.miou];
    let top = cfg.target_mious.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut rng = sim_rng(&cfg.sim, seed);
    let mut clicks: Vec<InteractionRecord> = Vec::new();
    let mut round_seconds = Vec::new();
    let (mut hits, mut total) = (0, 0);
    while clicks.len() < cfg.click_budget {
        if cfg.stop_at_target && *curve.last().expect("non-empty") >= top {
            break;
        }
        let sim = SimConfig { clicks_per_round: cfg.sim.clicks_per_round.min(cfg.click_budget - clicks.len()), ..cfg.sim.clone() };
        let view = SimView { predicted: session.labels(), ground_truth: gt, positions: &scene.cloud.positions };
        let clicked: Vec<usize> = session.clicks().iter().map(|c| c.point_index).collect();
        let new = next_clicks(view, &clicked, session.interaction_round() + 1, &sim, &mut rng)?;
        if new.is_empty() {
            break;
        }
        let start = Instant::now();
        session.refine(&new)?;
        round_seconds.push(start.elapsed().as_secs_f64());
        hits += session.clicks().iter().filter(|c| session.labels()[c.point_index] == c.corrected_label).count();
        total += session.clicks().len();
        let value = miou(session.labels(), gt, m)?.miou;
        curve.extend(std::iter::repeat_n(value, new.len()));
        clicks.extend(new);
    }
    Ok(RunRecord {
        scene: scene.cloud.name.clone(),
        variant,
        seed,
        baseline_miou,
        noc: cfg.target_mious.iter().map(|&t| noc(&curve, t)).collect(),
        miou_curve: curve,
        clicks,
        round_seconds,
        clicked_hits: hits,
        clicked_total: total,
        warmup,
    })
}

/// Runs every scene × variant × seed job; the output order is fixed
/// (scene-major, then variant, then seed) regardless of scheduling.
pub fn run_records<T: Scalar>(scenes: &[PreparedScene<T>], baseline: &NetworkParams<T>, cfg: &EvalConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let jobs: Vec<(usize, Variant, u64)> = (0..scenes.len())
        .flat_map(|s| cfg.variants.iter().flat_map(move |&v| cfg.seeds.iter().map(move |&seed| (s, v, seed))))
        .collect();
    let run = || -> Result<Vec<RunRecord>> {
        jobs.par_iter()
            .map(|&(s, v, seed)| {
                let rec = noc_protocol(&scenes[s], baseline, cfg, v, seed);
                if let Ok(r) = &rec {
                    log::info!("{} {} seed {}: {:.3} -> {:.3}", r.scene, v, seed, r.initial_miou(), r.final_miou());
                }
                rec
            })
            .collect()
    };
    if cfg.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| EvalError::Config(format!("worker pool: {e}")))?;
        pool.install(run)
    } else {
        run()
    }
}

/// Evaluates the manifest's test split and, when `out_dir` is given, writes
/// the CSV, summary and plot there.
pub fn run_benchmark<T: Scalar>(
    manifest: &Manifest,
    baseline: &NetworkParams<T>,
    cfg: &EvalConfig,
    out_dir: Option<&Path>,
) -> Result<(BenchmarkSummary, Vec<RunRecord>)> {
    let scenes = manifest
        .load_split(Split::Test)?
        .into_iter()
        .map(|c| PreparedScene::new(c, baseline.config.knn_k))
        .collect::<Result<Vec<_>>>()?;
    let records = run_records(&scenes, baseline, cfg)?;
    let summary = BenchmarkSummary::from_records(&records, cfg);
    if let Some(dir) = out_dir {
        write_artifacts(dir, &records, &summary, Some(manifest))?;
    }
    Ok((summary, records))
}
