//! Synthetic indoor scenes, preprocessing and point-cloud I/O.

mod benchmark;
mod cloud;
mod ply;
mod preprocess;
mod synth;

pub use benchmark::{load_manifest, make_benchmark, BenchmarkSpec, Manifest, ManifestEntry, Split};
pub use cloud::{LabeledCloud, FEATURE_DIM};
pub use ply::{load_ply, parse_ply, save_ply, write_ply, UNLABELED};
pub use preprocess::{crop_longest_axis, grid_subsample};
pub use synth::{class_area_fractions, generate_scene, DomainShift, ObjectCounts, SceneSpec};

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("invalid cloud: {0}")]
    Invalid(String),
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("PLY parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SceneError>;

pub const NUM_CLASSES: usize = 8;

pub const CLASS_NAMES: [&str; NUM_CLASSES] =
    ["floor", "ceiling", "wall", "column", "table", "cabinet", "sphere", "board"];

/// Display colour per class (not the generator's base colours).
pub const CLASS_PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [152, 223, 138],
    [174, 199, 232],
    [31, 119, 180],
    [255, 187, 120],
    [188, 189, 34],
    [140, 86, 75],
    [214, 39, 40],
    [148, 103, 189],
];
