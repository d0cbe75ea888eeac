use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{InteractionRecord, RefineConfig, RefinementSession, RoundTrace};
use crate::scalar::Scalar;

/// `u32` little-endian, base64.
pub fn encode_labels(labels: &[u32]) -> String {
    let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_labels(text: &str) -> Option<Vec<u32>> {
    let bytes = STANDARD.decode(text).ok()?;
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(bytes.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Replayable record of a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionExport {
    pub scene: String,
    pub num_points: usize,
    pub num_classes: usize,
    pub network_fingerprint: String,
    pub config: RefineConfig,
    /// Click lists in submission order, one per refine call.
    pub history: Vec<Vec<InteractionRecord>>,
    pub clicks: Vec<InteractionRecord>,
    pub trace: Vec<RoundTrace>,
    pub pseudo_labels: Option<String>,
    pub initial_labels: Option<String>,
    pub labels: String,
    /// One byte per point, 0 or 1, base64.
    pub filter_scores: String,
}

impl SessionExport {
    pub fn from_session<T: Scalar>(s: &RefinementSession<T>) -> Self {
        Self {
            scene: s.cloud().name.clone(),
            num_points: s.cloud().len(),
            num_classes: s.params().config.num_classes,
            network_fingerprint: s.params().fingerprint.clone(),
            config: s.config().clone(),
            history: s.history().to_vec(),
            clicks: s.clicks().to_vec(),
            trace: s.trace().to_vec(),
            pseudo_labels: s.pseudo_labels().map(encode_labels),
            initial_labels: s.initial_labels().map(encode_labels),
            labels: encode_labels(s.labels()),
            filter_scores: STANDARD.encode(s.filter_scores().iter().map(|&b| b as u8).collect::<Vec<u8>>()),
        }
    }

    pub fn final_labels(&self) -> Option<Vec<u32>> {
        decode_labels(&self.labels)
    }
}
