use serde::{Deserialize, Serialize};

use super::SceneError;

/// Per-point features carried by generated and loaded clouds: xyz then rgb.
pub const FEATURE_DIM: usize = 6;

/// A point cloud with per-point features and optional ground-truth labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledCloud {
    pub name: String,
    /// Positions in meters.
    pub positions: Vec<[f32; 3]>,
    /// Row-major N × `feature_dim` feature matrix.
    pub features: Vec<f32>,
    pub feature_dim: usize,
    pub labels: Option<Vec<u32>>,
}

impl LabeledCloud {
    /// Builds a cloud whose features are `[x, y, z, r, g, b]`.
    pub fn from_xyz_rgb(
        name: impl Into<String>,
        positions: Vec<[f32; 3]>,
        colors: &[[f32; 3]],
        labels: Option<Vec<u32>>,
    ) -> Result<Self, SceneError> {
        if colors.len() != positions.len() {
            return Err(SceneError::Invalid(format!(
                "{} colors for {} points",
                colors.len(),
                positions.len()
            )));
        }
        let mut features = Vec::with_capacity(positions.len() * FEATURE_DIM);
        for (p, c) in positions.iter().zip(colors) {
            features.extend_from_slice(p);
            features.extend_from_slice(c);
        }
        let cloud = Self { name: name.into(), positions, features, feature_dim: FEATURE_DIM, labels };
        cloud.validate(None)?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_row(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// RGB in [0, 1], read from features 3..6.
    pub fn color(&self, i: usize) -> [f32; 3] {
        let f = self.feature_row(i);
        if self.feature_dim >= 6 {
            [f[3], f[4], f[5]]
        } else {
            [0.5; 3]
        }
    }

    /// Checks finiteness, feature shape and (when `num_classes` is given) label range.
    pub fn validate(&self, num_classes: Option<usize>) -> Result<(), SceneError> {
        if self.features.len() != self.positions.len() * self.feature_dim {
            return Err(SceneError::Invalid(format!(
                "feature buffer has {} values, expected {} x {}",
                self.features.len(),
                self.positions.len(),
                self.feature_dim
            )));
        }
        if self.positions.iter().flatten().chain(&self.features).any(|v| !v.is_finite()) {
            return Err(SceneError::Invalid(format!("cloud {} contains NaN or infinite values", self.name)));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.positions.len() {
                return Err(SceneError::Invalid(format!(
                    "{} labels for {} points",
                    labels.len(),
                    self.positions.len()
                )));
            }
            if let Some(m) = num_classes {
                if let Some(bad) = labels.iter().find(|&&l| l as usize >= m) {
                    return Err(SceneError::Invalid(format!("label {bad} outside [0, {m})")));
                }
            }
        }
        Ok(())
    }

    /// Subset of points in the given order, labels and features carried along.
    pub fn select(&self, indices: &[usize], name: impl Into<String>) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            features.extend_from_slice(self.feature_row(i));
        }
        Self {
            name: name.into(),
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            features,
            feature_dim: self.feature_dim,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Axis-aligned bounds `(min, max)`; `None` for an empty cloud.
    pub fn bounds(&self) -> Option<([f32; 3], [f32; 3])> {
        let first = *self.positions.first()?;
        let mut lo = first;
        let mut hi = first;
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Some((lo, hi))
    }
}
