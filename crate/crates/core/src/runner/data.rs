use std::path::{Path, PathBuf};

use super::config::DataConfig;
use crate::error::{Error, Result};
use crate::jetdata::toy::ToySpec;
use crate::jetdata::{normalize_jet, Jet};
use crate::rng::substream;
use crate::sampler::{natural_stream, split_files, Split, SplitManifest};

/// Random stream of the toy generator's seed reserved for the file split.
const TOY_SPLIT_STREAM: u64 = u64::MAX;

fn toy_file_name(i: usize) -> PathBuf {
    PathBuf::from(format!("toy_{i:04}"))
}

/// File-level split of the toy dataset, identical for every run using the
/// same spec and ratios.
pub fn toy_manifest(spec: &ToySpec, ratios: [f64; 3]) -> Result<SplitManifest> {
    let files: Vec<PathBuf> = (0..spec.n_files).map(toy_file_name).collect();
    split_files(&files, ratios, &mut substream(spec.seed, TOY_SPLIT_STREAM))
}

fn toy_index(path: &Path) -> Result<usize> {
    path.to_str()
        .and_then(|s| s.strip_prefix("toy_"))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Config(format!("not a toy file name: {}", path.display())))
}

/// Preprocessed jets of one split in natural file order, at most `cap`.
pub fn load_split(cfg: &DataConfig, split: Split, cap: Option<usize>) -> Result<Vec<Jet>> {
    let cap = cap.unwrap_or(usize::MAX);
    let mut out = Vec::new();
    match (&cfg.manifest, &cfg.toy) {
        (Some(path), None) => {
            let manifest = SplitManifest::load(path)?;
            let files = manifest.files(split);
            if files.is_empty() {
                return Err(Error::Config(format!("split {split:?} of {} has no files", path.display())));
            }
            for jet in natural_stream(files).take(cap) {
                out.push(normalize_jet(&jet?)?);
            }
        }
        (None, Some(spec)) => {
            let manifest = toy_manifest(spec, cfg.split)?;
            'files: for f in manifest.files(split) {
                for jet in spec.file_jets(toy_index(f)?)? {
                    if out.len() == cap {
                        break 'files;
                    }
                    out.push(normalize_jet(&jet)?);
                }
            }
        }
        _ => return Err(Error::Config("data needs exactly one of manifest or toy".into())),
    }
    if out.is_empty() {
        return Err(Error::Config(format!("split {split:?} yielded no jets")));
    }
    Ok(out)
}

/// Training pool plus the capped validation set.
pub struct Dataset {
    pub train: Vec<Jet>,
    pub val: Vec<Jet>,
}

impl Dataset {
    pub fn load(cfg: &DataConfig) -> Result<Self> {
        Ok(Self {
            train: load_split(cfg, Split::Train, None)?,
            val: load_split(cfg, Split::Val, cfg.val_jets)?,
        })
    }
}

/// Writes a toy dataset and its split manifest into `dir`; returns the
/// manifest path. The split matches the in-memory toy split.
pub fn generate_toy_data(spec: &ToySpec, ratios: [f64; 3], dir: &Path) -> Result<PathBuf> {
    let files = spec.write(dir)?;
    let manifest = split_files(&files, ratios, &mut substream(spec.seed, TOY_SPLIT_STREAM))?;
    let path = dir.join("manifest.txt");
    manifest.save(&path)?;
    Ok(path)
}
