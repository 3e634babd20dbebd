//! Filtered corpus generation.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::preset::PresetRegistry;
use crate::data::{class_dirs, png_files, Dataset, Manifest, ManifestEntry, Sample};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusMode {
    /// Every image through every preset.
    Full,
    /// A per-class sample, each image through one random preset.
    Mini,
}

impl std::str::FromStr for CorpusMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(CorpusMode::Full),
            "mini" => Ok(CorpusMode::Mini),
            other => Err(Error::param("mode", format!("`{other}` is not full|mini"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CorpusOptions {
    pub mode: CorpusMode,
    pub seed: u64,
    /// Share of each class kept in mini mode.
    pub fraction: f64,
    pub workers: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            mode: CorpusMode::Full,
            seed: 0,
            fraction: 0.1,
            workers: 1,
        }
    }
}

/// Per class, the chosen `(sample index, preset index)` pairs of a mini
/// draw. Indices are sorted, so the plan depends only on the seed and counts.
pub fn mini_plan(
    class_sizes: &[usize],
    num_presets: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<Vec<(usize, usize)>>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param("fraction", format!("{fraction} outside (0, 1]")));
    }
    if num_presets == 0 {
        return Err(Error::Empty("preset registry".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = Vec::with_capacity(class_sizes.len());
    for &n in class_sizes {
        if n == 0 {
            return Err(Error::Empty("class with no images".into()));
        }
        let k = ((n as f64 * fraction).round() as usize).clamp(1, n);
        let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
        picked.sort_unstable();
        plan.push(
            picked
                .into_iter()
                .map(|i| (i, rng.gen_range(0..num_presets)))
                .collect(),
        );
    }
    Ok(plan)
}

/// In-memory counterpart of [`generate_corpus`] for clean datasets.
pub fn filter_dataset(
    clean: &Dataset,
    registry: &PresetRegistry,
    mode: CorpusMode,
    fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    let mut samples = Vec::new();
    match mode {
        CorpusMode::Full => {
            for preset in registry.presets() {
                for s in &clean.samples {
                    samples.push(Sample {
                        image: preset.apply(&s.image)?.quantized(),
                        label: s.label,
                        preset: preset.name.clone(),
                    });
                }
            }
        }
        CorpusMode::Mini => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); clean.num_classes()];
            for (i, s) in clean.samples.iter().enumerate() {
                by_class[s.label].push(i);
            }
            let present: Vec<&Vec<usize>> = by_class.iter().filter(|v| !v.is_empty()).collect();
            let sizes: Vec<usize> = present.iter().map(|v| v.len()).collect();
            let plan = mini_plan(&sizes, registry.len(), fraction, seed)?;
            for (members, picks) in present.iter().zip(plan) {
                for (i, p) in picks {
                    let s = &clean.samples[members[i]];
                    let preset = &registry.presets()[p];
                    samples.push(Sample {
                        image: preset.apply(&s.image)?.quantized(),
                        label: s.label,
                        preset: preset.name.clone(),
                    });
                }
            }
        }
    }
    Ok(Dataset::new(clean.classes.clone(), samples))
}

struct Job {
    src: PathBuf,
    src_rel: String,
    class: String,
    preset: usize,
    dst_rel: String,
}

/// Filters a folder-per-class PNG tree into `dst_dir/<preset>/<class>/` and
/// writes `dst_dir/manifest.json`. Output bytes do not depend on `workers`.
pub fn generate_corpus(
    src_dir: &Path,
    dst_dir: &Path,
    registry: &PresetRegistry,
    opts: &CorpusOptions,
) -> Result<Manifest> {
    let classes = class_dirs(src_dir)?;
    let mut files = Vec::with_capacity(classes.len());
    for (name, path) in &classes {
        let list = png_files(path)?;
        if list.is_empty() {
            return Err(Error::Empty(format!("class folder `{name}` has no PNG images")));
        }
        files.push(list);
    }

    let job = |class: &str, file: &Path, preset: usize| {
        let fname = file.file_name().unwrap_or_default().to_string_lossy().into_owned();
        Job {
            src: file.to_path_buf(),
            src_rel: format!("{class}/{fname}"),
            class: class.to_string(),
            preset,
            dst_rel: format!("{}/{class}/{fname}", registry.presets()[preset].slug()),
        }
    };
    let mut jobs = Vec::new();
    match opts.mode {
        CorpusMode::Full => {
            for p in 0..registry.len() {
                for ((name, _), list) in classes.iter().zip(&files) {
                    jobs.extend(list.iter().map(|f| job(name, f, p)));
                }
            }
        }
        CorpusMode::Mini => {
            let sizes: Vec<usize> = files.iter().map(Vec::len).collect();
            let plan = mini_plan(&sizes, registry.len(), opts.fraction, opts.seed)?;
            for (((name, _), list), picks) in classes.iter().zip(&files).zip(plan) {
                jobs.extend(picks.into_iter().map(|(i, p)| job(name, &list[i], p)));
            }
        }
    }

    let run = |j: &Job| -> Result<ManifestEntry> {
        let preset = &registry.presets()[j.preset];
        let mut entry = ManifestEntry {
            src: j.src_rel.clone(),
            preset: preset.name.clone(),
            dst: j.dst_rel.clone(),
            class: j.class.clone(),
            seed: Some(opts.seed),
            warning: None,
        };
        match Image::load_png(&j.src) {
            Ok(img) => preset.apply(&img)?.save_png(&dst_dir.join(&j.dst_rel))?,
            Err(e) => {
                log::warn!("skipping {}: {e}", j.src.display());
                entry.dst = String::new();
                entry.warning = Some(format!("unreadable image: {e}"));
            }
        }
        Ok(entry)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::param("workers", e.to_string()))?;
    let entries = pool.install(|| jobs.par_iter().map(run).collect::<Result<Vec<_>>>())?;
    let manifest = Manifest { entries };
    manifest.save(&dst_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mini_plan_takes_ten_percent() {
        let plan = mini_plan(&[60, 35, 3], 20, 0.1, 9).unwrap();
        assert_eq!(plan[0].len(), 6);
        assert_eq!(plan[1].len(), 4);
        assert_eq!(plan[2].len(), 1);
        assert!(plan.iter().flatten().all(|&(_, p)| p < 20));
        assert_eq!(plan, mini_plan(&[60, 35, 3], 20, 0.1, 9).unwrap());
        assert!(mini_plan(&[5, 0], 20, 0.1, 9).is_err());
    }

    #[test]
    fn mode_parses() {
        assert_eq!("mini".parse::<CorpusMode>().unwrap(), CorpusMode::Mini);
        assert!("half".parse::<CorpusMode>().is_err());
    }
}
