use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub miou: f64,
    /// IoU per class; `None` when the class is absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Mean intersection-over-union over the classes present in `pred` or `gt`.
pub fn miou(pred: &[u32], gt: &[u32], num_classes: usize) -> Result<MiouReport> {
    if pred.len() != gt.len() {
        return Err(EvalError::Length(format!("{} predictions, {} labels", pred.len(), gt.len())));
    }
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(EvalError::Length(format!("label {} outside [0, {num_classes})", p.max(g))));
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let per_class: Vec<Option<f64>> =
        inter.iter().zip(&union).map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64)).collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(EvalError::Undefined);
    }
    Ok(MiouReport { miou: present.iter().sum::<f64>() / present.len() as f64, per_class })
}

/// Index of the first curve entry reaching `target`.
pub fn noc(curve: &[f64], target: f64) -> Option<usize> {
    curve.iter().position(|&m| m >= target)
}
