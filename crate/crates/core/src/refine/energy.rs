use super::{InteractionRecord, RefineError, Result};
use crate::scalar::Scalar;
use crate::segnet::SegmentationState;
use crate::tensor::{log_softmax, TensorError};

/// `−Σ_clicks ln p(corrected | x)`: a plain sum over the clicked points.
pub fn correction_energy<T: Scalar>(seg: &SegmentationState<T>, clicks: &[InteractionRecord]) -> Result<f64> {
    if clicks.is_empty() {
        return Err(TensorError::EmptySupport("correction_energy").into());
    }
    let logp = log_softmax(&seg.logits)?;
    let m = seg.num_classes();
    let mut total = 0.0;
    for c in clicks {
        if c.point_index >= seg.num_points() || c.corrected_label as usize >= m {
            return Err(RefineError::Length(format!("click on point {} class {} out of range", c.point_index, c.corrected_label)));
        }
        total -= logp.data()[c.point_index * m + c.corrected_label as usize].as_f64();
    }
    Ok(total)
}

/// `−(1/N) Σ_i s_i Σ_m p log p`.
pub fn stabilization_energy<T: Scalar>(seg: &SegmentationState<T>, filter_scores: &[bool]) -> Result<f64> {
    let n = seg.num_points();
    if filter_scores.len() != n {
        return Err(RefineError::Length(format!("{} filter scores for {n} points", filter_scores.len())));
    }
    let logp = log_softmax(&seg.logits)?;
    let m = seg.num_classes();
    let mut total = 0.0;
    for (row, &s) in logp.data().chunks_exact(m).zip(filter_scores) {
        if s {
            total -= row.iter().map(|&l| (l.exp() * l).as_f64()).sum::<f64>();
        }
    }
    Ok(total / n as f64)
}

/// Entropy-change rule between consecutive rounds: a point whose entropy
/// drops by more than `delta_minus` is switched on, one whose entropy rises
/// by more than `delta_plus` is switched off, anything else keeps its score.
pub fn filter_truth(delta_e: f64, prior: bool, delta_plus: f64, delta_minus: f64) -> bool {
    if delta_e < -delta_minus {
        true
    } else if delta_e > delta_plus {
        false
    } else {
        prior
    }
}

/// Probe rule: a point is excluded when the probe step raises its entropy by
/// at least `delta_probe`.
pub fn probe_truth(delta_e: f64, delta_probe: f64) -> bool {
    !(delta_e >= delta_probe)
}

/// Applies [`filter_truth`] point-wise with `ΔE = new − prev`.
pub fn update_filter_scores<T: Scalar>(
    scores: &mut [bool],
    prev_entropies: &[T],
    new_entropies: &[T],
    delta_plus: f64,
    delta_minus: f64,
) -> Result<()> {
    if scores.len() != prev_entropies.len() || scores.len() != new_entropies.len() {
        return Err(RefineError::Length(format!(
            "{} scores, {} previous and {} new entropies",
            scores.len(),
            prev_entropies.len(),
            new_entropies.len()
        )));
    }
    for ((s, &e0), &e1) in scores.iter_mut().zip(prev_entropies).zip(new_entropies) {
        *s = filter_truth((e1 - e0).as_f64(), *s, delta_plus, delta_minus);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refine::ClickSource;
    use crate::tensor::Tensor;

    fn seg(rows: &[&[f64]]) -> SegmentationState<f64> {
        SegmentationState::from_logits(Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()).unwrap()
    }

    fn click(i: usize, c: u32) -> InteractionRecord {
        InteractionRecord { point_index: i, corrected_label: c, round: 1, source: ClickSource::Human }
    }

    #[test]
    fn correction_examples() {
        let s = seg(&[&[0.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 0.0]]);
        assert!((correction_energy(&s, &[click(0, 2)]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let one = correction_energy(&s, &[click(0, 1)]).unwrap();
        let two = correction_energy(&s, &[click(0, 1), click(1, 1)]).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-12);
        let sure = seg(&[&[0.0, 800.0]]);
        assert!(correction_energy(&sure, &[click(0, 1)]).unwrap().abs() < 1e-12);
        assert!(matches!(correction_energy(&s, &[]), Err(RefineError::Tensor(TensorError::EmptySupport(_)))));
    }

    #[test]
    fn stabilization_examples() {
        let s = seg(&[&[0.0, 0.0, 0.0], &[5.0, -1.0, 2.0]]);
        let e = stabilization_energy(&s, &[true, false]).unwrap();
        assert!((e - 3f64.ln() / 2.0).abs() < 1e-12);
        assert_eq!(stabilization_energy(&s, &[false, false]).unwrap(), 0.0);
        let sharp = seg(&[&[900.0, 0.0], &[0.0, 900.0]]);
        assert!(stabilization_energy(&sharp, &[true, true]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn filter_rule_cases() {
        assert!(filter_truth(-0.05, false, 0.03, 0.03));
        assert!(!filter_truth(0.05, true, 0.03, 0.03));
        assert!(filter_truth(0.0, true, 0.03, 0.03));
        assert!(!filter_truth(0.0, false, 0.03, 0.03));
        assert!(probe_truth(0.5, f64::INFINITY));
        assert!(!probe_truth(-0.5, f64::NEG_INFINITY));
        assert!(!probe_truth(0.03, 0.03));
    }

    #[test]
    fn update_checks_lengths() {
        let mut s = vec![true, false];
        update_filter_scores(&mut s, &[1.0f32, 1.0], &[1.1, 0.9], 0.03, 0.03).unwrap();
        assert_eq!(s, vec![false, true]);
        assert!(update_filter_scores(&mut s, &[1.0f32], &[1.0, 2.0], 0.03, 0.03).is_err());
    }
}
