use std::collections::HashSet;
use std::sync::Arc;

use proptest::prelude::*;

use interseg::eval::{miou, noc};
use interseg::optim::{Optimizer, OptimizerConfig};
use interseg::refine::{Ablation, InteractionRecord, RefineConfig, RefinementSession};
use interseg::scene::{crop_longest_axis, grid_subsample, LabeledCloud};
use interseg::segnet::{forward, init_params, SegInput, SegNetConfig};
use interseg::sim::{cluster_errors, next_clicks, sim_rng, SimConfig, SimView};
use interseg::tensor::{softmax, BatchNormState, BnMode, NeighborTable, Reduction, Tape, Tensor};

fn cloud_strategy(min: usize, max: usize) -> impl Strategy<Value = LabeledCloud> {
    prop::collection::vec(((0f32..2.0, 0f32..2.0, 0f32..1.0), (0f32..1.0, 0f32..1.0, 0f32..1.0), 0u32..4), min..max).prop_map(
        |pts| {
            let positions = pts.iter().map(|((x, y, z), _, _)| [*x, *y, *z]).collect();
            let colors: Vec<[f32; 3]> = pts.iter().map(|(_, (r, g, b), _)| [*r, *g, *b]).collect();
            let labels = pts.iter().map(|(_, _, l)| *l).collect();
            LabeledCloud::from_xyz_rgb("p", positions, &colors, Some(labels)).unwrap()
        },
    )
}

fn small_net() -> SegNetConfig {
    SegNetConfig { hidden_dims: vec![8, 8, 12], num_classes: 4, knn_k: 4, ..SegNetConfig::default() }
}

fn permute(cloud: &LabeledCloud, perm: &[usize]) -> LabeledCloud {
    cloud.select(perm, cloud.name.clone())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-300f64..300.0, 5), 1..20)) {
        let p = softmax(&Tensor::from_rows(&rows).unwrap()).unwrap();
        for r in 0..p.rows() {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_reads_only_its_mode(rows in prop::collection::vec(prop::collection::vec(-5f64..5.0, 3), 2..12)) {
        let x = Tensor::from_rows(&rows).unwrap();
        let mut st = BatchNormState::new(3, 1e-5);
        st.running_mu = vec![f64::NAN; 3];
        st.running_sigma2 = vec![f64::NAN; 3];
        st.mode = BnMode::InstanceStats;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let (g, b) = (tape.leaf(st.gamma.clone(), false), tape.leaf(st.beta.clone(), false));
        let y = tape.batch_norm(xv, g, b, &st).unwrap();
        prop_assert!(tape.value(y).is_finite());

        let mut st = BatchNormState::new(3, 1e-5);
        st.running_mu = vec![0.5; 3];
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let (g, b) = (tape.leaf(st.gamma.clone(), false), tape.leaf(st.beta.clone(), false));
        let y = tape.batch_norm(xv, g, b, &st).unwrap();
        // running mode is an affine map of each row on its own
        for (r, row) in rows.iter().enumerate() {
            for c in 0..3 {
                let want = (row[c] - 0.5) / (1.0 + 1e-5f64).sqrt();
                prop_assert!((tape.value(y).at(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_bit_deterministic(rows in prop::collection::vec(prop::collection::vec(-2f32..2.0, 4), 3..10)) {
        let run = || {
            let x = Tensor::from_rows(&rows).unwrap();
            let n = x.rows();
            let mut tape = Tape::new();
            let xv = tape.leaf(x, true);
            let w = tape.leaf(Tensor::full(&[4, 3], 0.3f32), true);
            let b = tape.leaf(Tensor::zeros(&[1, 3]), true);
            let h = tape.linear(xv, w, b).unwrap();
            let table = Arc::new(NeighborTable::new(1, (0..n as u32).map(|i| (i + 1) % n as u32).collect()).unwrap());
            let h = tape.neighbor_mean(h, table).unwrap();
            let lp = tape.log_softmax(h).unwrap();
            let loss = tape.weighted_entropy(lp, &vec![1.0; n], Reduction::Mean).unwrap();
            tape.backward(loss).unwrap();
            (tape.grad(xv).unwrap().clone(), tape.grad(w).unwrap().clone())
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn forward_is_permutation_equivariant(cloud in cloud_strategy(12, 60), seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..cloud.len()).collect();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let params = init_params::<f64>(&small_net()).unwrap();
        let a = forward(&SegInput::new(&cloud, 4).unwrap(), &params, BnMode::InstanceStats).unwrap();
        let b = forward(&SegInput::new(&permute(&cloud, &perm), 4).unwrap(), &params, BnMode::InstanceStats).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..4 {
                prop_assert!((b.logits.at(new, c) - a.logits.at(old, c)).abs() < 1e-5);
            }
        }
        for i in 0..a.num_points() {
            let row = a.probs.row(i);
            let arg = (0..4).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            prop_assert_eq!(a.labels[i] as usize, arg);
        }
    }

    #[test]
    fn memoryless_steps_repeat(g in prop::collection::vec(-1f64..1.0, 6), adam in any::<bool>()) {
        let cfg = if adam { OptimizerConfig::adam(0.01) } else { OptimizerConfig::sgd(0.01) }.with_ga(false);
        let mut opt = Optimizer::<f64>::new(cfg);
        let grads = vec![Tensor::new(vec![2, 3], g).unwrap()];
        let mut w = Tensor::full(&[2, 3], 0.5);
        let before = w.clone();
        opt.step(vec![("w".to_string(), &mut w)], &grads).unwrap();
        let first: Vec<f64> = w.data().iter().zip(before.data()).map(|(a, b)| a - b).collect();
        let mut w2 = before.clone();
        opt.step(vec![("w".to_string(), &mut w2)], &grads).unwrap();
        let second: Vec<f64> = w2.data().iter().zip(before.data()).map(|(a, b)| a - b).collect();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn zero_gradient_is_a_fixpoint(w in prop::collection::vec(-3f64..3.0, 4), adam in any::<bool>(), ga in any::<bool>()) {
        let cfg = OptimizerConfig { weight_decay: 0.0, ..if adam { OptimizerConfig::adam(0.1) } else { OptimizerConfig::sgd(0.1) }.with_ga(ga) };
        let mut opt = Optimizer::<f64>::new(cfg);
        let mut t = Tensor::new(vec![4, 1], w.clone()).unwrap();
        for _ in 0..3 {
            opt.step(vec![("w".to_string(), &mut t)], &[Tensor::zeros(&[4, 1])]).unwrap();
        }
        prop_assert_eq!(t.data(), w.as_slice());
    }

    #[test]
    fn grid_subsample_keeps_one_point_per_cell(cloud in cloud_strategy(1, 200), cell in 0.05f64..0.8) {
        let sub = grid_subsample(&cloud, cell);
        prop_assert!(sub.len() <= cloud.len());
        let mut cells = HashSet::new();
        for p in &sub.positions {
            let key = [0, 1, 2].map(|k| (p[k] as f64 / cell).floor() as i64);
            prop_assert!(cells.insert(key));
        }
    }

    #[test]
    fn crop_partitions_the_cloud(cloud in cloud_strategy(1, 300), max_points in 5usize..80) {
        let parts = crop_longest_axis(&cloud, max_points);
        let mut seen: Vec<Vec<u32>> = parts.iter().flat_map(|p| p.features.chunks(6).map(|f| f.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()).collect();
        let mut want: Vec<Vec<u32>> = cloud.features.chunks(6).map(|f| f.iter().map(|v| v.to_bits()).collect()).collect();
        seen.sort();
        want.sort();
        prop_assert_eq!(seen, want);
        prop_assert!(parts.iter().all(|p| p.len() <= max_points && !p.is_empty()));
    }

    #[test]
    fn miou_invariances(pairs in prop::collection::vec((0u32..5, 0u32..5), 1..100), seed in any::<u64>()) {
        let pred: Vec<u32> = pairs.iter().map(|p| p.0).collect();
        let gt: Vec<u32> = pairs.iter().map(|p| p.1).collect();
        let base = miou(&pred, &gt, 5).unwrap().miou;
        let mut idx: Vec<usize> = (0..pred.len()).collect();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        let p2: Vec<u32> = idx.iter().map(|&i| pred[i]).collect();
        let g2: Vec<u32> = idx.iter().map(|&i| gt[i]).collect();
        prop_assert!((miou(&p2, &g2, 5).unwrap().miou - base).abs() < 1e-12);
        let relabel = [3u32, 0, 4, 1, 2];
        let p3: Vec<u32> = pred.iter().map(|&c| relabel[c as usize]).collect();
        let g3: Vec<u32> = gt.iter().map(|&c| relabel[c as usize]).collect();
        prop_assert!((miou(&p3, &g3, 5).unwrap().miou - base).abs() < 1e-12);
    }

    #[test]
    fn noc_is_monotone_in_target(curve in prop::collection::vec(0f64..1.0, 1..30), a in 0.01f64..1.0, b in 0.01f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        match (noc(&curve, lo), noc(&curve, hi)) {
            (Some(x), Some(y)) => prop_assert!(x <= y),
            (None, Some(_)) => prop_assert!(false, "lower target failed while higher succeeded"),
            _ => {}
        }
    }

    #[test]
    fn clustering_ignores_point_order(cloud in cloud_strategy(10, 150), seed in any::<u64>()) {
        let mask: Vec<bool> = (0..cloud.len()).map(|i| (i * 7 + seed as usize) % 3 != 0).collect();
        let cfg = SimConfig { dbscan_eps: 0.3, dbscan_min_pts: 3, min_region_size: 1, ..SimConfig::default() };
        let mut perm: Vec<usize> = (0..cloud.len()).collect();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let pos2: Vec<[f32; 3]> = perm.iter().map(|&i| cloud.positions[i]).collect();
        let mask2: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
        let canon = |regions: Vec<interseg::sim::ErrorRegion>, map: &dyn Fn(usize) -> usize| {
            let mut sets: Vec<Vec<(usize, bool)>> = regions.into_iter().map(|r| {
                let mut s: Vec<(usize, bool)> = r.members.iter().map(|&m| map(m)).zip(r.core).collect();
                s.sort();
                s
            }).collect();
            sets.sort();
            sets
        };
        let a = canon(cluster_errors(&cloud.positions, &mask, &cfg).unwrap(), &|i| i);
        let b = canon(cluster_errors(&pos2, &mask2, &cfg).unwrap(), &|i| perm[i]);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn clicks_hit_wrong_core_points_deterministically(cloud in cloud_strategy(20, 150), shift in 0u32..4) {
        let gt = cloud.labels.clone().unwrap();
        let pred: Vec<u32> = gt.iter().enumerate().map(|(i, &g)| if i % 2 == 0 { (g + 1 + shift) % 5 } else { g }).collect();
        let cfg = SimConfig { dbscan_eps: 0.35, dbscan_min_pts: 2, min_region_size: 1, clicks_per_round: 2, ..SimConfig::default() };
        let view = SimView { predicted: &pred, ground_truth: &gt, positions: &cloud.positions };
        let a = next_clicks(view, &[], 1, &cfg, &mut sim_rng(&cfg)).unwrap();
        let b = next_clicks(view, &[], 1, &cfg, &mut sim_rng(&cfg)).unwrap();
        prop_assert_eq!(&a, &b);
        let mask: Vec<bool> = pred.iter().zip(&gt).map(|(p, g)| p != g).collect();
        let regions = cluster_errors(&cloud.positions, &mask, &cfg).unwrap();
        for c in &a {
            prop_assert!(pred[c.point_index] != gt[c.point_index]);
            prop_assert_eq!(c.corrected_label, gt[c.point_index]);
            let is_core = regions.iter().any(|r| r.members.iter().zip(&r.core).any(|(&m, &k)| m == c.point_index && k));
            prop_assert!(is_core);
        }
    }
}

fn session(cloud: &LabeledCloud, ablation: Ablation, lambda: f64) -> RefinementSession<f64> {
    let params = init_params::<f64>(&small_net()).unwrap();
    let cfg = RefineConfig { lambda, warmup_rounds: 1, refine_rounds_per_interaction: 2, ..RefineConfig::default() }.with_ablation(ablation);
    let mut s = RefinementSession::new(cloud.clone(), params, cfg).unwrap();
    s.warm_up().unwrap();
    s
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn probe_leaves_live_parameters_untouched(cloud in cloud_strategy(15, 60), click in 0usize..15) {
        let mut s = session(&cloud, Ablation::default(), 100.0);
        s.refine(&[InteractionRecord::human(click, 2)]).unwrap();
        let before = s.params().clone();
        let scores = s.evaluate_filter_scores().unwrap();
        prop_assert_eq!(scores.len(), cloud.len());
        prop_assert!(s.params().bits_equal(&before));
    }

    #[test]
    fn loss_terms_match_ablation(cloud in cloud_strategy(15, 60), click in 0usize..15, lambda in 0f64..200.0) {
        let mut s = session(&cloud, Ablation { no_stabilization: true, ..Ablation::default() }, lambda);
        let out = s.refine(&[InteractionRecord::human(click, 1)]).unwrap();
        for t in &out.trace {
            prop_assert_eq!(t.loss, t.correction);
        }
        let mut s = session(&cloud, Ablation { no_filtering: true, ..Ablation::default() }, lambda);
        let entropies = s.seg().entropies.clone();
        let out = s.refine(&[InteractionRecord::human(click, 1)]).unwrap();
        let mean = entropies.iter().sum::<f64>() / entropies.len() as f64;
        prop_assert!((out.trace[0].stabilization - mean).abs() < 1e-9);
        prop_assert_eq!(out.trace[0].active_filters, cloud.len());
        for t in &out.trace {
            prop_assert!((t.loss - (t.correction + lambda * t.stabilization)).abs() <= 1e-9 * t.loss.abs().max(1.0));
        }
    }
}
