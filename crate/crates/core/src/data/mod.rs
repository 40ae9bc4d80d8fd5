//! Patches, datasets, deterministic splitting and resampling.

mod folder;
mod synth;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::rng_for;

pub use folder::{load_domain_folder, load_folder, write_folder, write_manifest, DatasetManifest};
pub use synth::{class_signature, synth_generate, SynthParams, MAX_SYNTH_CLASSES};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing class: {0}")]
    MissingClass(String),
    #[error("cannot decode {path}: {reason}")]
    DecodeError { path: PathBuf, reason: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid patch {key}: {reason}")]
    InvalidPatch { key: String, reason: String },
    #[error("invalid split spec: {0}")]
    InvalidSplit(String),
    #[error("invalid synthetic parameters: {0}")]
    InvalidSynth(String),
    #[error(transparent)]
    Stain(#[from] crate::stain::StainError),
}

pub const MIN_SIDE: u32 = 8;

/// Interleaved 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Self {
        assert_eq!(
            data.len(),
            width as usize * height as usize * 3,
            "pixel buffer does not match {width}x{height}"
        );
        RgbImage {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: u32, height: u32, color: [u8; 3]) -> Self {
        let data = color
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        RgbImage::from_raw(width, height, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn mean_rgb(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        for px in self.pixels() {
            for k in 0..3 {
                acc[k] += f64::from(px[k]);
            }
        }
        let n = (self.width * self.height) as f64;
        acc.map(|v| v / n)
    }
}

/// One labeled image tile.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: RgbImage,
    pub class_id: usize,
    pub domain_id: Option<u8>,
    pub task_id: Option<usize>,
    pub source_key: String,
}

impl Patch {
    pub fn new(pixels: RgbImage, class_id: usize, source_key: impl Into<String>) -> Self {
        Patch {
            pixels,
            class_id,
            domain_id: None,
            task_id: None,
            source_key: source_key.into(),
        }
    }

    pub fn side(&self) -> u32 {
        self.pixels.width()
    }
}

/// An ordered collection of patches over a fixed class list.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub patches: Vec<Patch>,
    pub class_names: Vec<String>,
    pub metadata: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>) -> Self {
        Dataset {
            patches: Vec::new(),
            class_names,
            metadata: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Checks the class-index and minimum-size invariants of every patch.
    pub fn validate(&self) -> Result<(), DataError> {
        for p in &self.patches {
            if p.class_id >= self.class_names.len() {
                return Err(DataError::InvalidPatch {
                    key: p.source_key.clone(),
                    reason: format!(
                        "class_id {} out of range for {} classes",
                        p.class_id,
                        self.class_names.len()
                    ),
                });
            }
            if p.pixels.width() < MIN_SIDE || p.pixels.height() < MIN_SIDE {
                return Err(DataError::InvalidPatch {
                    key: p.source_key.clone(),
                    reason: format!("{}x{} is below 8x8", p.pixels.width(), p.pixels.height()),
                });
            }
        }
        Ok(())
    }

    /// Patch indices grouped by class id (one entry per class, possibly empty).
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_names.len()];
        for (i, p) in self.patches.iter().enumerate() {
            out[p.class_id].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.indices_by_class().iter().map(Vec::len).collect()
    }

    /// Dataset of the given patch indices, in the order given.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            patches: indices.iter().map(|&i| self.patches[i].clone()).collect(),
            class_names: self.class_names.clone(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn filter(&self, mut keep: impl FnMut(&Patch) -> bool) -> Dataset {
        Dataset {
            patches: self.patches.iter().filter(|p| keep(p)).cloned().collect(),
            class_names: self.class_names.clone(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Dataset {
        let mut iter = parts.into_iter();
        let Some(first) = iter.next() else {
            return Dataset::default();
        };
        let mut out = first.clone();
        for ds in iter {
            out.patches.extend(ds.patches.iter().cloned());
        }
        out
    }

    pub fn domains_present(&self) -> Vec<u8> {
        let mut d: Vec<u8> = self.patches.iter().filter_map(|p| p.domain_id).collect();
        d.sort_unstable();
        d.dedup();
        d
    }
}

/// Train/validation/test fractions with a seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub stratified: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            val: 0.0,
            test: 0.2,
            seed: 0,
            stratified: true,
        }
    }
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Self {
        SplitSpec {
            train,
            val,
            test,
            seed,
            stratified: true,
        }
    }

    pub fn fractions(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let f = self.fractions();
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(DataError::InvalidSplit(format!("fractions {f:?} outside [0,1]")));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidSplit(format!("fractions sum to {sum}")));
        }
        Ok(())
    }
}

/// Largest-remainder allocation of `n` items to `fractions`; every count
/// is within one of `fraction·n` and the counts sum to `n`.
pub fn allocate_counts(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    // stable: larger remainder first, ties by position
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Seeded train/val/test partition. Each part keeps the input order.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset), DataError> {
    spec.validate()?;
    let groups: Vec<Vec<usize>> = if spec.stratified {
        ds.indices_by_class()
    } else {
        vec![(0..ds.len()).collect()]
    };
    let mut part_of = vec![0usize; ds.len()];
    for (g, members) in groups.into_iter().enumerate() {
        let mut shuffled = members;
        shuffled.shuffle(&mut rng_for(spec.seed, "split", g as u64));
        let counts = allocate_counts(shuffled.len(), &spec.fractions());
        let mut it = shuffled.into_iter();
        for (part, &c) in counts.iter().enumerate() {
            for i in it.by_ref().take(c) {
                part_of[i] = part;
            }
        }
    }
    let pick = |part: usize| -> Vec<usize> {
        (0..ds.len()).filter(|&i| part_of[i] == part).collect()
    };
    Ok((ds.subset(&pick(0)), ds.subset(&pick(1)), ds.subset(&pick(2))))
}

/// Bilinear resample to `side`×`side` using pixel-center alignment.
pub fn downscale(p: &Patch, side: u32) -> Patch {
    assert!(side >= MIN_SIDE, "side must be at least 8");
    let mut out = p.clone();
    out.pixels = resize_bilinear(&p.pixels, side, side);
    out
}

pub fn resize_bilinear(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    let sx = f64::from(img.width()) / f64::from(width);
    let sy = f64::from(img.height()) / f64::from(height);
    let max_x = f64::from(img.width() - 1);
    let max_y = f64::from(img.height() - 1);
    let mut data = Vec::with_capacity(width as usize * height as usize * 3);
    for y in 0..height {
        let fy = ((f64::from(y) + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let y0 = fy.floor() as u32;
        let y1 = (y0 + 1).min(img.height() - 1);
        let wy = fy - f64::from(y0);
        for x in 0..width {
            let fx = ((f64::from(x) + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let x0 = fx.floor() as u32;
            let x1 = (x0 + 1).min(img.width() - 1);
            let wx = fx - f64::from(x0);
            let (a, b, c, d) = (
                img.pixel(x0, y0),
                img.pixel(x1, y0),
                img.pixel(x0, y1),
                img.pixel(x1, y1),
            );
            for k in 0..3 {
                let top = f64::from(a[k]) * (1.0 - wx) + f64::from(b[k]) * wx;
                let bottom = f64::from(c[k]) * (1.0 - wx) + f64::from(d[k]) * wx;
                let v = top * (1.0 - wy) + bottom * wy;
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage::from_raw(width, height, data)
}
