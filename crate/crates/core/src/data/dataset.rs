//! On-disk dataset splits: one directory per split holding numbered
//! PPM/PGM pairs and a `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image::{LabelMap, RgbImage};
use super::netpbm::{read_pgm, read_ppm, write_pgm, write_ppm};
use super::synth::{generate_scene, SceneSpec};
use crate::error::{HgError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Offset added to the base seed so splits never share scenes.
    pub fn seed_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1_000_000,
            Split::Test => 2_000_000,
        }
    }

    pub fn seeds(self, base: u64, n: usize) -> Vec<u64> {
        (0..n as u64)
            .map(|i| base.wrapping_add(self.seed_offset() + i))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePaths {
    pub image: String,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: Split,
    pub seeds: Vec<u64>,
    /// Relative to the manifest's directory.
    pub paths: Vec<SamplePaths>,
    #[serde(rename = "K")]
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub scene: SceneSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub image: RgbImage,
    pub labels: LabelMap,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Generates scenes in memory without touching disk.
    pub fn synthesize(split: Split, spec: &SceneSpec, base_seed: u64, n: usize) -> Result<Self> {
        let seeds = split.seeds(base_seed, n);
        let samples = seeds
            .par_iter()
            .map(|&seed| {
                let (image, labels) = generate_scene(spec, seed)?;
                Ok(Sample {
                    seed,
                    image,
                    labels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let paths = (0..n).map(sample_paths).collect();
        Ok(Self {
            manifest: Manifest {
                split,
                seeds,
                paths,
                classes: spec.classes,
                height: spec.height,
                width: spec.width,
                scene: spec.clone(),
            },
            samples,
        })
    }

    /// Writes samples and the manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (s, p) in self.samples.iter().zip(&self.manifest.paths) {
            write_ppm(&dir.join(&p.image), &s.image)?;
            write_pgm(&dir.join(&p.labels), &s.labels)?;
        }
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(dir.join(MANIFEST), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))
            .map_err(|e| HgError::Data(format!("{}: {e}", dir.join(MANIFEST).display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.seeds.len() != manifest.paths.len() {
            return Err(HgError::Data(
                "manifest seeds and paths differ in length".into(),
            ));
        }
        let samples = manifest
            .paths
            .iter()
            .zip(&manifest.seeds)
            .map(|(p, &seed)| {
                let image = read_ppm(&dir.join(&p.image))?;
                let labels = read_pgm(&dir.join(&p.labels))?;
                if (image.height, image.width) != (manifest.height, manifest.width)
                    || (labels.height, labels.width) != (manifest.height, manifest.width)
                {
                    return Err(HgError::Data(format!(
                        "{}: size differs from manifest",
                        p.image
                    )));
                }
                Ok(Sample {
                    seed,
                    image,
                    labels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn sample_paths(i: usize) -> SamplePaths {
    SamplePaths {
        image: format!("{i:06}.ppm"),
        labels: format!("{i:06}.pgm"),
    }
}

pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.name())
}

/// Generates and writes `train/`, `val/`, `test/` under `root`.
pub fn build_splits(
    root: &Path,
    counts: [usize; 3],
    spec: &SceneSpec,
    base_seed: u64,
) -> Result<Vec<Manifest>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(3);
    for (split, n) in Split::ALL.into_iter().zip(counts) {
        let ds = Dataset::synthesize(split, spec, base_seed, n)?;
        ds.save(&split_dir(root, split))?;
        out.push(ds.manifest);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_seeds_are_disjoint() {
        let mut all: Vec<u64> = Split::ALL.iter().flat_map(|s| s.seeds(5, 1000)).collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn splits_have_requested_sizes_and_reload_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            height: 32,
            width: 64,
            ..SceneSpec::default()
        };
        let manifests = build_splits(dir.path(), [5, 3, 2], &spec, 11).unwrap();
        assert_eq!(
            manifests.iter().map(|m| m.seeds.len()).collect::<Vec<_>>(),
            vec![5, 3, 2]
        );
        for split in Split::ALL {
            let loaded = Dataset::load(&split_dir(dir.path(), split)).unwrap();
            let fresh = Dataset::synthesize(split, &spec, 11, loaded.len()).unwrap();
            assert_eq!(loaded.manifest, fresh.manifest);
            for (a, b) in loaded.samples.iter().zip(&fresh.samples) {
                assert_eq!(a.image.to_bytes(), b.image.to_bytes());
                assert_eq!(a.labels, b.labels);
            }
        }
        let json = std::fs::read_to_string(dir.path().join("val").join(MANIFEST)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in ["split", "seeds", "paths", "K"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn missing_manifest_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(HgError::Data(_))));
    }
}
