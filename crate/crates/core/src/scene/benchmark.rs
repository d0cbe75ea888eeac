use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    crop_longest_axis, generate_scene, grid_subsample, load_ply, save_ply, DomainShift, LabeledCloud, Result,
    SceneError, SceneSpec, CLASS_NAMES,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub num_train: usize,
    pub num_test: usize,
    /// Base generator settings; its `shift` and `seed` fields are ignored.
    pub scene: SceneSpec,
    /// Shift applied to test scenes only.
    pub shift: DomainShift,
    pub grid_cell: f64,
    pub max_points: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            num_train: 40,
            num_test: 20,
            scene: SceneSpec::default(),
            shift: DomainShift::default(),
            grid_cell: 0.03,
            max_points: 150_000,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub split: Split,
    pub seed: u64,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub spec: BenchmarkSpec,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_cloud(&self, entry: &ManifestEntry) -> Result<LabeledCloud> {
        load_ply(self.root.join(&entry.path))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<LabeledCloud>> {
        self.split(split).map(|e| self.load_cloud(e)).collect()
    }
}

/// SplitMix64 over (base, split, index), so each scene's seed is independent of the counts.
fn scene_seed(base: u64, split: Split, index: usize) -> u64 {
    let mut z = base ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((split as u64 + 1) << 56);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates, subsamples and crops the train and test scenes, writes them as
/// PLY files plus `manifest.json` under `dir`, and returns the manifest.
pub fn make_benchmark(dir: impl AsRef<Path>, spec: &BenchmarkSpec) -> Result<Manifest> {
    if spec.num_train == 0 || spec.num_test == 0 {
        return Err(SceneError::Spec("benchmark needs at least one train and one test scene".into()));
    }
    if !(spec.grid_cell > 0.0) || spec.max_points == 0 {
        return Err(SceneError::Spec("grid_cell and max_points must be positive".into()));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let jobs: Vec<(Split, usize)> = (0..spec.num_train)
        .map(|i| (Split::Train, i))
        .chain((0..spec.num_test).map(|i| (Split::Test, i)))
        .collect();
    let per_scene: Vec<Vec<ManifestEntry>> = jobs
        .par_iter()
        .map(|&(split, i)| -> Result<Vec<ManifestEntry>> {
            let seed = scene_seed(spec.seed, split, i);
            let shift = if split == Split::Test { spec.shift.clone() } else { DomainShift::none() };
            let scene = SceneSpec { seed, shift, ..spec.scene.clone() };
            let tag = match split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let raw = generate_scene(&scene, format!("{tag}_{i:03}"))?;
            let sub = grid_subsample(&raw, spec.grid_cell);
            crop_longest_axis(&sub, spec.max_points)
                .into_iter()
                .map(|part| {
                    let path = PathBuf::from(format!("{}.ply", part.name));
                    save_ply(&part, dir.join(&path))?;
                    Ok(ManifestEntry { name: part.name.clone(), split, seed, path, points: part.len() })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        spec: spec.clone(),
        entries: per_scene.into_iter().flatten().collect(),
        root: dir.to_path_buf(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| SceneError::Manifest(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(manifest)
}

/// Reads `manifest.json` (or the given file) and resolves scene paths against its directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let mut path = path.as_ref().to_path_buf();
    if path.is_dir() {
        path = path.join("manifest.json");
    }
    let text = std::fs::read_to_string(&path)?;
    let mut m: Manifest = serde_json::from_str(&text).map_err(|e| SceneError::Manifest(e.to_string()))?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BenchmarkSpec {
        BenchmarkSpec {
            num_train: 2,
            num_test: 1,
            scene: SceneSpec { density: 400.0, ..Default::default() },
            grid_cell: 0.06,
            ..Default::default()
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        make_benchmark(a.path(), &tiny()).unwrap();
        make_benchmark(b.path(), &tiny()).unwrap();
        for name in ["manifest.json", "train_000.ply", "test_000.ply"] {
            assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        }
        let m = load_manifest(a.path()).unwrap();
        assert_eq!(m.split(Split::Train).count(), 2);
        let test = m.load_split(Split::Test).unwrap();
        assert_eq!(test[0].len(), m.entries[2].points);
    }

    #[test]
    fn seeds_are_distinct() {
        let s: std::collections::HashSet<u64> =
            (0..50).flat_map(|i| [scene_seed(1, Split::Train, i), scene_seed(1, Split::Test, i)]).collect();
        assert_eq!(s.len(), 100);
    }
}
