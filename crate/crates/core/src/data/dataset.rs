use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::io::{load_image, load_trimap, save_image, save_trimap};
use super::transform::{augment, AugmentParams};
use super::{DataError, Image, LabelMask, Result};
use crate::derive_seed;

pub const IMAGES_DIR: &str = "images";
pub const TRIMAPS_DIR: &str = "trimaps";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    /// Index of the original image this sample derives from.
    pub source: usize,
    pub image: Image,
    pub mask: Option<LabelMask>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset { samples: indices.iter().map(|&i| self.samples[i].clone()).collect() }
    }
}

/// Sorted stems of the `.png` files under `dir/images`.
pub fn list_names(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let images = dir.as_ref().join(IMAGES_DIR);
    if !images.is_dir() {
        return Err(DataError::MissingDir(images));
    }
    let entries = std::fs::read_dir(&images).map_err(|source| DataError::Io { path: images.clone(), source })?;
    let mut names = Vec::new();
    for entry in entries {
        let path = entry.map_err(|source| DataError::Io { path: images.clone(), source })?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Loads every image under `dir/images`, in name order, with its trimap from
/// `dir/trimaps`. Missing trimaps are an error only when `require_trimaps`.
pub fn load_dataset(dir: impl AsRef<Path>, require_trimaps: bool) -> Result<Dataset> {
    let dir = dir.as_ref();
    let trimaps = dir.join(TRIMAPS_DIR);
    let mut samples = Vec::new();
    for (source, name) in list_names(dir)?.into_iter().enumerate() {
        let image = load_image(dir.join(IMAGES_DIR).join(format!("{name}.png")))?;
        let tpath = trimaps.join(format!("{name}.png"));
        let mask = if tpath.is_file() {
            let m = load_trimap(&tpath)?;
            if (m.height(), m.width()) != (image.height(), image.width()) {
                return Err(DataError::Invalid(format!(
                    "{name}: trimap {}x{} does not match image {}x{}",
                    m.height(),
                    m.width(),
                    image.height(),
                    image.width()
                )));
            }
            Some(m)
        } else if require_trimaps {
            return Err(DataError::MissingTrimap { name, dir: trimaps });
        } else {
            None
        };
        samples.push(Sample { name, source, image, mask });
    }
    Ok(Dataset { samples })
}

/// Writes `dir/images/<name>.png` and, when given, `dir/trimaps/<name>.png`.
pub fn save_pair(dir: impl AsRef<Path>, name: &str, image: &Image, mask: Option<&LabelMask>) -> Result<()> {
    let dir = dir.as_ref();
    let mkdir = |p: PathBuf| std::fs::create_dir_all(&p).map_err(|source| DataError::Io { path: p.clone(), source });
    mkdir(dir.join(IMAGES_DIR))?;
    save_image(image, dir.join(IMAGES_DIR).join(format!("{name}.png")))?;
    if let Some(m) = mask {
        mkdir(dir.join(TRIMAPS_DIR))?;
        save_trimap(m, dir.join(TRIMAPS_DIR).join(format!("{name}.png")))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
}

/// Indices into the source list; each list is sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..sources` with the spec seed and deals out the three splits.
/// Sources beyond the requested counts are left unused.
pub fn split(sources: usize, spec: &SplitSpec) -> Result<Split> {
    let need = spec.train + spec.valid + spec.test;
    if need > sources {
        return Err(DataError::InfeasibleSplit {
            train: spec.train,
            valid: spec.valid,
            test: spec.test,
            available: sources,
        });
    }
    let mut order: Vec<usize> = (0..sources).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let take = |r: std::ops::Range<usize>| {
        let mut v = order[r].to_vec();
        v.sort_unstable();
        v
    };
    Ok(Split {
        train: take(0..spec.train),
        valid: take(spec.train..spec.train + spec.valid),
        test: take(spec.train + spec.valid..need),
    })
}

/// Returns the originals followed by `copies` augmented variants of each.
/// Variants keep their parent's `source`, so splitting by source before or
/// after augmentation yields the same grouping.
pub fn augment_samples(samples: &[Sample], copies: usize, params: &AugmentParams, seed: u64) -> Result<Vec<Sample>> {
    params.validate()?;
    let mut out = samples.to_vec();
    for s in samples {
        let mask = s.mask.clone().unwrap_or(LabelMask::filled(s.image.height(), s.image.width(), 0)?);
        for k in 0..copies {
            let (image, m) = augment(&s.image, &mask, derive_seed(seed, &[s.source as u64, k as u64]), params)?;
            out.push(Sample {
                name: format!("{}_aug{k}", s.name),
                source: s.source,
                image,
                mask: s.mask.as_ref().map(|_| m),
            });
        }
    }
    Ok(out)
}
