//! Procedural H&E-like tiles for desk-scale experiments.
//!
//! Each class has a fixed signature: mean hematoxylin and eosin
//! concentrations plus a nucleus count and size. Tiles are concentration
//! fields made of Gaussian blobs, rendered through the default stain basis.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Patch, MIN_SIDE};
use crate::rng::rng_for;
use crate::stain::{remix, ConcentrationMap, StainMatrix};

pub const MAX_SYNTH_CLASSES: usize = 16;

/// (mean c_H, mean c_E, nuclei per 32×32 tile, nucleus sigma in px at 32×32)
const SIGNATURES: [(f64, f64, u32, f64); MAX_SYNTH_CLASSES] = [
    (0.15, 0.20, 2, 1.5),
    (0.85, 0.25, 12, 1.2),
    (0.30, 0.75, 4, 2.5),
    (0.60, 0.55, 8, 2.0),
    (0.95, 0.85, 10, 2.8),
    (0.45, 0.10, 6, 1.0),
    (0.20, 1.00, 3, 3.0),
    (0.70, 0.95, 9, 1.6),
    (1.10, 0.45, 14, 1.4),
    (0.35, 0.40, 5, 2.2),
    (0.55, 0.25, 7, 2.6),
    (0.80, 0.65, 11, 1.8),
    (0.10, 0.55, 2, 2.0),
    (1.20, 0.15, 13, 1.1),
    (0.40, 1.25, 4, 1.7),
    (1.30, 1.10, 15, 2.4),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub classes: usize,
    pub per_class: usize,
    #[serde(default = "default_side")]
    pub side: u32,
    #[serde(default)]
    pub seed: u64,
}

fn default_side() -> u32 {
    32
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            classes: 6,
            per_class: 200,
            side: 32,
            seed: 0,
        }
    }
}

/// Signature of class `c`: (mean c_H, mean c_E).
pub fn class_signature(c: usize) -> (f64, f64) {
    let s = SIGNATURES[c];
    (s.0, s.1)
}

fn gaussian_field(side: u32, centers: &[(f64, f64, f64, f64)]) -> Vec<f64> {
    let mut out = vec![0.0; (side * side) as usize];
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
            out[(y * side + x) as usize] = centers
                .iter()
                .map(|&(cx, cy, sigma, amp)| {
                    let d2 = (px - cx).powi(2) + (py - cy).powi(2);
                    amp * (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .sum();
        }
    }
    out
}

fn render_tile(class: usize, side: u32, rng: &mut impl Rng) -> ConcentrationMap {
    let (h_mean, e_mean, nuclei, sigma32) = SIGNATURES[class];
    let scale = f64::from(side) / 32.0;
    let s = f64::from(side);
    let n_nuclei = ((f64::from(nuclei) * scale * scale).round() as u32).max(1);
    let jitter_h = rng.gen_range(0.9..1.1);
    let jitter_e = rng.gen_range(0.9..1.1);

    let nuclei: Vec<_> = (0..n_nuclei)
        .map(|_| {
            (
                rng.gen_range(0.0..s),
                rng.gen_range(0.0..s),
                sigma32 * scale * rng.gen_range(0.8..1.25),
                rng.gen_range(1.5..2.5),
            )
        })
        .collect();
    let stroma: Vec<_> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.0..s),
                rng.gen_range(0.0..s),
                s * rng.gen_range(0.15..0.35),
                rng.gen_range(0.3..0.7),
            )
        })
        .collect();
    let nuc = gaussian_field(side, &nuclei);
    let str_field = gaussian_field(side, &stroma);

    let h: Vec<f64> = nuc.iter().map(|v| 0.35 + v).collect();
    let e: Vec<f64> = str_field
        .iter()
        .zip(&nuc)
        .map(|(st, n)| (0.6 + st - 0.2 * n).max(0.05))
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let kh = h_mean * jitter_h / mean(&h);
    let ke = e_mean * jitter_e / mean(&e);
    let data = h
        .iter()
        .zip(&e)
        .map(|(hv, ev)| [hv * kh, ev * ke, 0.0])
        .collect();
    ConcentrationMap::new(side, side, data)
}

fn generate_class(class: usize, params: &SynthParams, basis: &StainMatrix) -> Vec<Patch> {
    let mut rng = rng_for(params.seed, "synth-class", class as u64);
    (0..params.per_class)
        .map(|i| {
            let conc = render_tile(class, params.side, &mut rng);
            let pixels = remix(&conc, basis, [1.0; 3]);
            Patch::new(pixels, class, format!("class_{class:02}/{i:05}.png"))
        })
        .collect()
}

/// Generates `classes × per_class` tiles of `side`×`side` pixels.
pub fn synth_generate(params: &SynthParams) -> Result<Dataset, DataError> {
    if !(2..=MAX_SYNTH_CLASSES).contains(&params.classes) {
        return Err(DataError::InvalidSynth(format!(
            "classes must be in [2, {MAX_SYNTH_CLASSES}], got {}",
            params.classes
        )));
    }
    if params.per_class < 10 {
        return Err(DataError::InvalidSynth(format!(
            "per_class must be at least 10, got {}",
            params.per_class
        )));
    }
    if params.side < MIN_SIDE {
        return Err(DataError::InvalidSynth(format!(
            "side must be at least {MIN_SIDE}"
        )));
    }
    let basis = StainMatrix::default();
    let per_class: Vec<Vec<Patch>> = (0..params.classes)
        .into_par_iter()
        .map(|c| generate_class(c, params, &basis))
        .collect();
    let mut ds = Dataset::new((0..params.classes).map(|c| format!("class_{c:02}")).collect());
    ds.patches = per_class.into_iter().flatten().collect();
    ds.metadata.insert("source".into(), "synth".into());
    ds.metadata.insert("seed".into(), params.seed.to_string());
    ds.metadata.insert("side".into(), params.side.to_string());
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(classes: usize, per_class: usize, seed: u64) -> SynthParams {
        SynthParams {
            classes,
            per_class,
            side: 32,
            seed,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(&params(4, 12, 3)).unwrap();
        let b = synth_generate(&params(4, 12, 3)).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&params(4, 12, 4)).unwrap();
        assert_ne!(a.patches[0].pixels, c.patches[0].pixels);
    }

    #[test]
    fn class_generation_is_independent_of_class_count() {
        let a = synth_generate(&params(3, 10, 9)).unwrap();
        let b = synth_generate(&params(6, 10, 9)).unwrap();
        assert_eq!(a.patches[..30], b.patches[..30]);
    }

    #[test]
    fn rendering_contract() {
        let ds = synth_generate(&params(MAX_SYNTH_CLASSES, 10, 1)).unwrap();
        for p in &ds.patches {
            assert!(p.pixels.pixels().any(|px| px != [255, 255, 255]));
            assert_eq!(p.pixels.width(), 32);
        }
        ds.validate().unwrap();
    }

    #[test]
    fn rejects_bad_params() {
        assert!(synth_generate(&params(1, 10, 0)).is_err());
        assert!(synth_generate(&params(17, 10, 0)).is_err());
        assert!(synth_generate(&params(3, 9, 0)).is_err());
    }

    // Standalone oracle: nearest class mean on per-patch mean RGB.
    #[test]
    fn mean_rgb_nearest_mean_separates_classes() {
        for classes in [6, 9] {
            let ds = synth_generate(&params(classes, 200, 0)).unwrap();
            let feats: Vec<[f64; 3]> = ds.patches.iter().map(|p| p.pixels.mean_rgb()).collect();
            let mut means = vec![[0.0; 3]; classes];
            let mut counts = vec![0.0; classes];
            for (f, p) in feats.iter().zip(&ds.patches) {
                for k in 0..3 {
                    means[p.class_id][k] += f[k];
                }
                counts[p.class_id] += 1.0;
            }
            for (m, n) in means.iter_mut().zip(&counts) {
                for v in m.iter_mut() {
                    *v /= n;
                }
            }
            let correct = feats
                .iter()
                .zip(&ds.patches)
                .filter(|(f, p)| {
                    let d = |m: &[f64; 3]| (0..3).map(|k| (f[k] - m[k]).powi(2)).sum::<f64>();
                    let best = (0..classes)
                        .min_by(|&a, &b| d(&means[a]).partial_cmp(&d(&means[b])).unwrap())
                        .unwrap();
                    best == p.class_id
                })
                .count();
            let acc = correct as f64 / feats.len() as f64;
            assert!(acc >= 0.9, "{classes} classes: nearest-mean accuracy {acc}");
        }
    }
}
