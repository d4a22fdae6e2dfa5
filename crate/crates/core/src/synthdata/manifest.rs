use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{read_features, read_labels, write_features, write_labels};
use super::{generate_indexed, ScenarioConfig};
use crate::error::{Error, Result};
use crate::seed::derive_named;
use crate::sequence::{FeatureSequence, LabelSequence};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    #[default]
    Random,
    CrossFamily,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SplitMode::Random),
            "cross_family" => Ok(SplitMode::CrossFamily),
            other => Err(Error::Config(format!("unknown split mode {other:?}"))),
        }
    }
}

const TRAIN_FRACTION: f64 = 0.7;
const VAL_FRACTION: f64 = 0.1;

/// Split assignment per sample. Random mode shuffles samples into
/// 70/10/20 (train and val sizes rounded, test takes the rest); cross-family
/// mode assigns whole families at the same ratios, at least one per split.
pub fn build_splits(families: &[usize], mode: SplitMode, seed: u64) -> Result<Vec<Split>> {
    let n = families.len();
    if n < 10 {
        return Err(Error::Config(format!("need at least 10 samples to split, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_named(seed, "splits"));
    match mode {
        SplitMode::Random => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let n_train = (TRAIN_FRACTION * n as f64).round() as usize;
            let n_val = (VAL_FRACTION * n as f64).round() as usize;
            let mut out = vec![Split::Test; n];
            for (rank, &i) in idx.iter().enumerate() {
                if rank < n_train {
                    out[i] = Split::Train;
                } else if rank < n_train + n_val {
                    out[i] = Split::Val;
                }
            }
            Ok(out)
        }
        SplitMode::CrossFamily => {
            let mut ids: Vec<usize> = families.to_vec();
            ids.sort_unstable();
            ids.dedup();
            let nf = ids.len();
            if nf < 3 {
                return Err(Error::Config(format!(
                    "cross_family splits need at least 3 families, got {nf}"
                )));
            }
            ids.shuffle(&mut rng);
            let n_val = ((VAL_FRACTION * nf as f64).round() as usize).max(1);
            let n_test = (((1.0 - TRAIN_FRACTION - VAL_FRACTION) * nf as f64).round() as usize).max(1);
            let n_train = nf - n_val - n_test;
            if n_train == 0 {
                return Err(Error::Config(format!("{nf} families leave no training family")));
            }
            let split_of = |f: usize| {
                let rank = ids.iter().position(|&x| x == f).expect("family listed");
                if rank < n_train {
                    Split::Train
                } else if rank < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                }
            };
            Ok(families.iter().map(|&f| split_of(f)).collect())
        }
    }
}

/// One manifest row. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub features_holistic: String,
    pub features_partial: String,
    pub labels: String,
    pub family: usize,
    pub reference: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Generator settings when the data is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioConfig>,
    #[serde(default)]
    pub split_mode: SplitMode,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(0, format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Contract(e.to_string()))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| e.split == split)
    }
}

/// Generates `n` samples into `dir` (files under `dir/samples/`) and writes
/// `dir/manifest.json`.
pub fn write_dataset(dir: &Path, cfg: &ScenarioConfig, n: usize, mode: SplitMode) -> Result<Manifest> {
    cfg.validate()?;
    let families: Vec<usize> = (0..n).map(|i| i % cfg.families).collect();
    let splits = build_splits(&families, mode, cfg.seed)?;
    let sample_dir = dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(|e| Error::io(&sample_dir, e))?;
    let mut samples = Vec::with_capacity(n);
    for (i, split) in splits.into_iter().enumerate() {
        let s = generate_indexed(cfg, i)?;
        let id = format!("s{i:05}");
        let entry = ManifestEntry {
            features_holistic: format!("samples/{id}.h.sdf"),
            features_partial: format!("samples/{id}.p.sdf"),
            labels: format!("samples/{id}.sdl"),
            id,
            family: s.family,
            reference: s.reference,
            split,
        };
        write_features(&dir.join(&entry.features_holistic), &s.holistic)?;
        write_features(&dir.join(&entry.features_partial), &s.partial)?;
        write_labels(&dir.join(&entry.labels), &s.labels)?;
        samples.push(entry);
    }
    let manifest = Manifest {
        scenario: Some(cfg.clone()),
        split_mode: mode,
        samples,
    };
    manifest.write(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// A manifest row with its files loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub entry: ManifestEntry,
    pub holistic: FeatureSequence,
    pub partial: FeatureSequence,
    pub labels: LabelSequence,
}

/// Loads the samples of `split` (all when `None`) from the manifest at
/// `manifest_path`.
pub fn load_samples(manifest_path: &Path, split: Option<Split>) -> Result<Vec<LoadedSample>> {
    let manifest = Manifest::read(manifest_path)?;
    let base: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest
        .samples
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .map(|e| {
            let holistic = read_features(&base.join(&e.features_holistic))?;
            let partial = read_features(&base.join(&e.features_partial))?;
            let labels = read_labels(&base.join(&e.labels))?;
            if holistic.len() != labels.len() || partial.len() != labels.len() {
                return Err(Error::Contract(format!("sample {}: streams and labels differ in length", e.id)));
            }
            Ok(LoadedSample {
                entry: e.clone(),
                holistic,
                partial,
                labels,
            })
        })
        .collect()
}
