//! Labelled image collections, manifests and folder-per-class loading.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// Preset label used for unfiltered samples.
pub const CLEAN: &str = "clean";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub src: String,
    pub preset: String,
    pub dst: String,
    pub class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// JSON array of entries. `src` is relative to the source root and `dst`
/// relative to the directory holding the manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Entries that produced an output image.
    pub fn usable(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.warning.is_none())
    }

    pub fn classes(&self) -> Vec<String> {
        let mut c: Vec<String> = self.usable().map(|e| e.class.clone()).collect();
        c.sort();
        c.dedup();
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    /// Preset that produced the image, [`CLEAN`] for originals.
    pub preset: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(classes: Vec<String>, samples: Vec<Sample>) -> Self {
        Dataset { classes, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Samples whose label is in `labels`.
    pub fn filter_labels(&self, labels: &[usize]) -> Dataset {
        Dataset {
            classes: self.classes.clone(),
            samples: self
                .samples
                .iter()
                .filter(|s| labels.contains(&s.label))
                .cloned()
                .collect(),
        }
    }

    pub fn filter_preset(&self, preset: &str) -> Dataset {
        Dataset {
            classes: self.classes.clone(),
            samples: self.samples.iter().filter(|s| s.preset == preset).cloned().collect(),
        }
    }

    /// Preset names in first-seen order.
    pub fn presets(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.samples {
            if !out.contains(&s.preset) {
                out.push(s.preset.clone());
            }
        }
        out
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Inputs and labels for samples `idx`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images: Vec<&Image> = idx.iter().map(|&i| &self.samples[i].image).collect();
        let labels = idx.iter().map(|&i| self.samples[i].label).collect();
        Ok((Image::batch_to_tensor(&images)?, labels))
    }

    /// Contiguous batches in dataset order.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
        (0..self.len())
            .step_by(batch_size.max(1))
            .map(move |s| (s..(s + batch_size).min(self.len())).collect())
    }

    /// Seeded permutation split into batches.
    pub fn shuffled_batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Folder-per-class PNG tree. Class indices follow sorted folder names
    /// unless `classes` is given.
    pub fn load_folder(dir: &Path, classes: Option<&[String]>) -> Result<Self> {
        let found = class_dirs(dir)?;
        let classes: Vec<String> = match classes {
            Some(c) => c.to_vec(),
            None => found.iter().map(|(name, _)| name.clone()).collect(),
        };
        let mut samples = Vec::new();
        for (name, path) in &found {
            let label = class_index(&classes, name)?;
            for file in png_files(path)? {
                samples.push(Sample {
                    image: Image::load_png(&file)?,
                    label,
                    preset: CLEAN.to_string(),
                });
            }
        }
        Ok(Dataset { classes, samples })
    }

    /// Images listed in a manifest, resolved relative to its directory.
    pub fn load_manifest(path: &Path, classes: Option<&[String]>) -> Result<Self> {
        let manifest = Manifest::load(path)?;
        let root = path.parent().unwrap_or(Path::new("."));
        let classes: Vec<String> = match classes {
            Some(c) => c.to_vec(),
            None => manifest.classes(),
        };
        let mut samples = Vec::new();
        for e in manifest.usable() {
            samples.push(Sample {
                image: Image::load_png(&root.join(&e.dst))?,
                label: class_index(&classes, &e.class)?,
                preset: e.preset.clone(),
            });
        }
        Ok(Dataset { classes, samples })
    }

    /// Writes the dataset as `dir/<class>/<index>.png`.
    pub fn save_folder(&self, dir: &Path) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            let path = dir.join(&self.classes[s.label]).join(format!("{i:06}.png"));
            s.image.save_png(&path)?;
        }
        Ok(())
    }

    /// Seeded partition of the class indices into two disjoint halves.
    pub fn split_classes(&self, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        split_classes(self.num_classes(), fraction, seed)
    }
}

pub fn split_classes(num_classes: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if num_classes < 2 {
        return Err(Error::param("classes", "need at least two classes to split"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::param("fraction", format!("{fraction} outside (0, 1)")));
    }
    let take = ((num_classes as f64 * fraction).round() as usize).clamp(1, num_classes - 1);
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut a = order[..take].to_vec();
    let mut b = order[take..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}

fn class_index(classes: &[String], name: &str) -> Result<usize> {
    classes
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| Error::param("class", format!("unknown class `{name}`")))
}

/// Sorted `(name, path)` of every sub-directory.
pub fn class_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Empty(format!("no class folders in {}", dir.display())));
    }
    Ok(out)
}

/// Sorted `*.png` files directly inside `dir`.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_split_is_disjoint_and_covering() {
        let (a, b) = split_classes(10, 0.5, 3).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_classes(10, 0.5, 3).unwrap(), (a, b));
        assert!(split_classes(1, 0.5, 0).is_err());
    }

    #[test]
    fn folder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let classes = vec!["a".to_string(), "b".to_string()];
        let samples = (0..4)
            .map(|i| Sample {
                image: Image::filled(4, 4, [i as f64 / 4.0, 0.5, 0.2]).quantized(),
                label: i % 2,
                preset: CLEAN.into(),
            })
            .collect();
        let ds = Dataset::new(classes.clone(), samples);
        ds.save_folder(dir.path()).unwrap();
        let back = Dataset::load_folder(dir.path(), None).unwrap();
        assert_eq!(back.classes, classes);
        assert_eq!(back.len(), 4);
        let mut want: Vec<_> = ds.samples.iter().map(|s| (s.label, s.image.to_rgb8())).collect();
        let mut got: Vec<_> = back.samples.iter().map(|s| (s.label, s.image.to_rgb8())).collect();
        want.sort();
        got.sort();
        assert_eq!(want, got);
    }
}
