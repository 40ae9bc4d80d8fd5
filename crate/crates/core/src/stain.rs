//! Beer–Lambert optical density, H&E color deconvolution, and the stain
//! augmentations that synthesize the five appearance domains.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Patch, RgbImage};
use crate::rng::rng_for;

pub const WHITE_LEVEL: f64 = 255.0;

const DET_EPS: f64 = 1e-6;
const NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StainError {
    #[error("stain matrix is singular (|det| = {0:e})")]
    SingularMatrix(f64),
    #[error("stain vector degenerated to near-zero optical density")]
    DegenerateStain,
    #[error("invalid stain matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid domain spec: {0}")]
    InvalidDomain(String),
    #[error("class {class} has {count} items, need at least 5 to split into domains")]
    EmptyClass { class: usize, count: usize },
}

pub type Od = [f64; 3];

/// Converts an 8-bit RGB triplet to optical density; zero channels clamp to 1.
pub fn rgb_to_od(pixel: [u8; 3], white_level: f64) -> Od {
    pixel.map(|c| (white_level / f64::from(c.max(1))).log10())
}

pub fn od_to_rgb(od: Od, white_level: f64) -> [u8; 3] {
    od.map(|d| {
        let d = if d.is_finite() { d.max(0.0) } else { 0.0 };
        (white_level * 10f64.powf(-d)).round().clamp(0.0, 255.0) as u8
    })
}

fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn normalize(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = norm(&v);
    (n >= 1e-6 && n.is_finite()).then(|| v.map(|x| x / n))
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Optical-density basis: rows are the hematoxylin, eosin and residual
/// stain vectors, each of unit length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct StainMatrix {
    rows: [[f64; 3]; 3],
}

impl TryFrom<[[f64; 3]; 3]> for StainMatrix {
    type Error = StainError;
    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self, StainError> {
        StainMatrix::new(rows)
    }
}

impl From<StainMatrix> for [[f64; 3]; 3] {
    fn from(m: StainMatrix) -> Self {
        m.rows
    }
}

impl Default for StainMatrix {
    fn default() -> Self {
        StainMatrix::from_he([0.650, 0.704, 0.286], [0.072, 0.990, 0.105])
            .expect("standard H&E basis is valid")
    }
}

impl StainMatrix {
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self, StainError> {
        for (i, r) in rows.iter().enumerate() {
            if r.iter().any(|x| !x.is_finite()) {
                return Err(StainError::InvalidMatrix(format!("row {i} is not finite")));
            }
            if (norm(r) - 1.0).abs() > NORM_TOL {
                return Err(StainError::InvalidMatrix(format!(
                    "row {i} has norm {}",
                    norm(r)
                )));
            }
        }
        if rows[0].iter().chain(rows[1].iter()).any(|&x| x < 0.0) {
            return Err(StainError::InvalidMatrix(
                "hematoxylin and eosin components must be non-negative".into(),
            ));
        }
        let det = det3(&rows);
        if det.abs() <= DET_EPS {
            return Err(StainError::SingularMatrix(det));
        }
        Ok(StainMatrix { rows })
    }

    /// Builds a basis from (unnormalized) hematoxylin and eosin vectors; the
    /// residual row is their normalized cross product.
    pub fn from_he(hema: [f64; 3], eosin: [f64; 3]) -> Result<Self, StainError> {
        let h = normalize(hema).ok_or(StainError::DegenerateStain)?;
        let e = normalize(eosin).ok_or(StainError::DegenerateStain)?;
        let r = normalize(cross(&h, &e)).ok_or(StainError::SingularMatrix(0.0))?;
        StainMatrix::new([h, e, r])
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.rows
    }

    pub fn hematoxylin(&self) -> [f64; 3] {
        self.rows[0]
    }

    pub fn eosin(&self) -> [f64; 3] {
        self.rows[1]
    }

    pub fn residual(&self) -> [f64; 3] {
        self.rows[2]
    }

    pub fn determinant(&self) -> f64 {
        det3(&self.rows)
    }

    /// Inverse of the row matrix, so that `c = od · inv`.
    fn inverse(&self) -> Result<[[f64; 3]; 3], StainError> {
        let m = &self.rows;
        let det = det3(m);
        if det.abs() <= DET_EPS {
            return Err(StainError::SingularMatrix(det));
        }
        let mut inv = [[0.0; 3]; 3];
        for (i, row) in inv.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                // cofactor of m[j][i]
                let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
            }
        }
        Ok(inv)
    }

    /// Exact (unclamped) concentrations with `combine(c) == od`.
    pub fn solve(&self, od: Od) -> Result<[f64; 3], StainError> {
        let inv = self.inverse()?;
        Ok(solve_with(&inv, od))
    }

    /// Optical density produced by concentrations `c`: Σ_s c_s · row_s.
    pub fn combine(&self, c: [f64; 3]) -> Od {
        let mut od = [0.0; 3];
        for (s, row) in self.rows.iter().enumerate() {
            for k in 0..3 {
                od[k] += c[s] * row[k];
            }
        }
        od
    }
}

/// Per-pixel stain concentrations (c_H, c_E, c_res), row-major.
///
/// `remainder` holds, per pixel, the optical density that the clamped
/// concentrations cannot express (the contribution of the negative parts of
/// the exact solve). It is re-added unscaled by [`remix`], so identity
/// remixing is lossless while intensity scales only act on real stain.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f64; 3]>,
    pub remainder: Vec<Od>,
}

impl ConcentrationMap {
    /// A map with no clamping remainder.
    pub fn new(width: u32, height: u32, data: Vec<[f64; 3]>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize);
        let remainder = vec![[0.0; 3]; data.len()];
        ConcentrationMap {
            width,
            height,
            data,
            remainder,
        }
    }

    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        self.data[(y * self.width + x) as usize]
    }

    /// True if no pixel needed clamping.
    pub fn is_exact(&self) -> bool {
        self.remainder.iter().all(|r| *r == [0.0; 3])
    }
}

fn solve_with(inv: &[[f64; 3]; 3], od: Od) -> [f64; 3] {
    let mut c = [0.0; 3];
    for (j, v) in c.iter_mut().enumerate() {
        *v = (0..3).map(|k| od[k] * inv[k][j]).sum();
    }
    c
}

/// Color deconvolution: solves od = cᵀ·M per pixel and clamps negative
/// concentrations to 0.
pub fn unmix(image: &RgbImage, m: &StainMatrix) -> Result<ConcentrationMap, StainError> {
    let inv = m.inverse()?;
    let n = image.width() as usize * image.height() as usize;
    let mut data = Vec::with_capacity(n);
    let mut remainder = Vec::with_capacity(n);
    for px in image.pixels() {
        let exact = solve_with(&inv, rgb_to_od(px, WHITE_LEVEL));
        let mut c = [0.0; 3];
        let mut negative = [0.0; 3];
        for (j, &v) in exact.iter().enumerate() {
            if v >= 0.0 {
                c[j] = v;
            } else {
                negative[j] = v;
            }
        }
        data.push(c);
        remainder.push(if negative == [0.0; 3] {
            [0.0; 3]
        } else {
            m.combine(negative)
        });
    }
    Ok(ConcentrationMap {
        width: image.width(),
        height: image.height(),
        data,
        remainder,
    })
}

/// Re-renders concentrations through a (possibly perturbed) basis with
/// per-stain intensity scales: od' = Σ_s scale_s·c_s·row_s (+ remainder).
pub fn remix(c: &ConcentrationMap, m: &StainMatrix, scales: [f64; 3]) -> RgbImage {
    let mut out = Vec::with_capacity(c.data.len() * 3);
    for (conc, rem) in c.data.iter().zip(&c.remainder) {
        let scaled = [conc[0] * scales[0], conc[1] * scales[1], conc[2] * scales[2]];
        let mut od = m.combine(scaled);
        for k in 0..3 {
            od[k] += rem[k];
        }
        out.extend_from_slice(&od_to_rgb(od, WHITE_LEVEL));
    }
    RgbImage::from_raw(c.width, c.height, out)
}

// HSV on [0,1] channels, hue in [0,1).
fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let v = max;
    if max == min {
        return [0.0, 0.0, v];
    }
    let d = max - min;
    let s = d / max;
    let h = if max == r {
        (g - b) / d
    } else if max == g {
        2.0 + (b - r) / d
    } else {
        4.0 + (r - g) / d
    };
    [(h / 6.0).rem_euclid(1.0), s, v]
}

fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    if s == 0.0 {
        return [v, v, v];
    }
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Shifts the hue and scales the saturation of a stain's rendered color and
/// returns the resulting unit OD vector.
pub fn perturb_stain_vector(row: Od, hue_delta: f64, sat_scale: f64) -> Result<Od, StainError> {
    let rgb = row.map(|d| 10f64.powf(-d));
    let [h, s, v] = rgb_to_hsv(rgb);
    let hsv = [
        (h + hue_delta).rem_euclid(1.0),
        (s * sat_scale).clamp(0.0, 1.0),
        v,
    ];
    let shifted = hsv_to_rgb(hsv);
    let od = shifted.map(|c| -((c * WHITE_LEVEL).max(1.0) / WHITE_LEVEL).log10());
    normalize(od).ok_or(StainError::DegenerateStain)
}

/// Closed real interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl From<[f64; 2]> for Interval {
    fn from(v: [f64; 2]) -> Self {
        Interval { lo: v[0], hi: v[1] }
    }
}

impl From<Interval> for [f64; 2] {
    fn from(v: Interval) -> Self {
        [v.lo, v.hi]
    }
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub const fn point(x: f64) -> Self {
        Interval { lo: x, hi: x }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    fn sample(&self, rng: &mut impl rand::Rng) -> f64 {
        self.lo + (self.hi - self.lo) * rng.gen::<f64>()
    }
}

/// Parameter ranges of one simulated staining domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: u8,
    pub eosin_intensity_range: Interval,
    pub hema_intensity_range: Interval,
    pub eosin_hue_delta_range: Interval,
    pub hema_hue_delta_range: Interval,
    pub eosin_sat_range: Interval,
    pub hema_sat_range: Interval,
}

/// Factors drawn for one patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainSample {
    pub eosin_intensity: f64,
    pub hema_intensity: f64,
    pub eosin_hue_delta: f64,
    pub hema_hue_delta: f64,
    pub eosin_sat: f64,
    pub hema_sat: f64,
}

impl DomainSpec {
    pub fn identity(domain_id: u8) -> Self {
        DomainSpec {
            domain_id,
            eosin_intensity_range: Interval::point(1.0),
            hema_intensity_range: Interval::point(1.0),
            eosin_hue_delta_range: Interval::point(0.0),
            hema_hue_delta_range: Interval::point(0.0),
            eosin_sat_range: Interval::point(1.0),
            hema_sat_range: Interval::point(1.0),
        }
    }

    /// The five default domains: original, stronger stain, eosin intensity
    /// change, hue shift, hue and saturation shift.
    ///
    /// Domain 3 keeps the printed [0.4, 2.75] eosin range even though it is
    /// described as a fading stain.
    pub fn preset(domain_id: u8) -> Option<Self> {
        let base = DomainSpec::identity(domain_id);
        Some(match domain_id {
            1 => base,
            2 => DomainSpec {
                eosin_intensity_range: Interval::new(1.75, 2.75),
                hema_intensity_range: Interval::new(1.5, 2.0),
                ..base
            },
            3 => DomainSpec {
                eosin_intensity_range: Interval::new(0.4, 2.75),
                ..base
            },
            4 => DomainSpec {
                eosin_hue_delta_range: Interval::new(-0.05, -0.03),
                hema_hue_delta_range: Interval::new(0.05, 0.08),
                ..base
            },
            5 => DomainSpec {
                eosin_hue_delta_range: Interval::new(0.03, 0.05),
                eosin_sat_range: Interval::new(1.2, 1.4),
                hema_sat_range: Interval::new(1.1, 1.3),
                ..base
            },
            _ => return None,
        })
    }

    pub fn presets() -> [DomainSpec; 5] {
        [1, 2, 3, 4, 5].map(|k| DomainSpec::preset(k).expect("preset ids 1..5"))
    }

    fn intervals(&self) -> [(&'static str, Interval); 6] {
        [
            ("eosin_intensity_range", self.eosin_intensity_range),
            ("hema_intensity_range", self.hema_intensity_range),
            ("eosin_hue_delta_range", self.eosin_hue_delta_range),
            ("hema_hue_delta_range", self.hema_hue_delta_range),
            ("eosin_sat_range", self.eosin_sat_range),
            ("hema_sat_range", self.hema_sat_range),
        ]
    }

    pub fn is_identity(&self) -> bool {
        *self == DomainSpec::identity(self.domain_id)
    }

    pub fn validate(&self) -> Result<(), StainError> {
        if !(1..=5).contains(&self.domain_id) {
            return Err(StainError::InvalidDomain(format!(
                "domain_id {} outside 1..5",
                self.domain_id
            )));
        }
        for (i, (name, iv)) in self.intervals().iter().enumerate() {
            if !(iv.lo.is_finite() && iv.hi.is_finite()) || iv.lo > iv.hi {
                return Err(StainError::InvalidDomain(format!(
                    "{name} = [{}, {}] is not an interval",
                    iv.lo, iv.hi
                )));
            }
            let positive = !(2..4).contains(&i);
            if positive && iv.lo <= 0.0 {
                return Err(StainError::InvalidDomain(format!("{name} must be positive")));
            }
        }
        if self.domain_id == 1 && !self.is_identity() {
            return Err(StainError::InvalidDomain(
                "domain 1 must be the identity transform".into(),
            ));
        }
        Ok(())
    }

    /// Draws one factor per interval, in declaration order.
    pub fn sample(&self, rng: &mut impl rand::Rng) -> DomainSample {
        DomainSample {
            eosin_intensity: self.eosin_intensity_range.sample(rng),
            hema_intensity: self.hema_intensity_range.sample(rng),
            eosin_hue_delta: self.eosin_hue_delta_range.sample(rng),
            hema_hue_delta: self.hema_hue_delta_range.sample(rng),
            eosin_sat: self.eosin_sat_range.sample(rng),
            hema_sat: self.hema_sat_range.sample(rng),
        }
    }
}

/// Applies a sampled domain transform to an image.
pub fn apply_domain_sample(
    image: &RgbImage,
    base: &StainMatrix,
    s: &DomainSample,
) -> Result<RgbImage, StainError> {
    let hema = perturb_stain_vector(base.hematoxylin(), s.hema_hue_delta, s.hema_sat)?;
    let eosin = perturb_stain_vector(base.eosin(), s.eosin_hue_delta, s.eosin_sat)?;
    let perturbed = StainMatrix::new([hema, eosin, base.residual()])?;
    let conc = unmix(image, base)?;
    Ok(remix(&conc, &perturbed, [s.hema_intensity, s.eosin_intensity, 1.0]))
}

/// Renders `patch` in the appearance of `spec`'s domain. Domain 1 is the
/// identity; other domains draw one factor set per patch from `rng`.
pub fn augment(
    patch: &Patch,
    spec: &DomainSpec,
    base: &StainMatrix,
    rng: &mut impl rand::Rng,
) -> Result<Patch, StainError> {
    spec.validate()?;
    let mut out = patch.clone();
    out.domain_id = Some(spec.domain_id);
    if spec.domain_id == 1 {
        return Ok(out);
    }
    let sample = spec.sample(rng);
    out.pixels = apply_domain_sample(&patch.pixels, base, &sample)?;
    Ok(out)
}

/// Splits every class into five near-equal random parts and renders part k
/// in domain k+1. Output order follows the input order.
pub fn build_augmented_dataset(
    ds: &Dataset,
    specs: &[DomainSpec; 5],
    base: &StainMatrix,
    seed: u64,
) -> Result<Dataset, StainError> {
    for (k, spec) in specs.iter().enumerate() {
        spec.validate()?;
        if usize::from(spec.domain_id) != k + 1 {
            return Err(StainError::InvalidDomain(format!(
                "spec at position {k} has domain_id {}",
                spec.domain_id
            )));
        }
    }
    let assignment = domain_assignment(ds, seed)?;
    let patches = ds
        .patches
        .par_iter()
        .zip(assignment.par_iter())
        .enumerate()
        .map(|(i, (p, &dom))| {
            let mut rng = rng_for(seed, "augment-patch", i as u64);
            augment(p, &specs[dom - 1], base, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut metadata = ds.metadata.clone();
    metadata.insert("augmented".into(), "5-domain".into());
    metadata.insert("augment_seed".into(), seed.to_string());
    Ok(Dataset {
        patches,
        class_names: ds.class_names.clone(),
        metadata,
    })
}

/// Domain (1..=5) for every patch: a seeded near-equal 5-way partition per class.
pub fn domain_assignment(ds: &Dataset, seed: u64) -> Result<Vec<usize>, StainError> {
    use rand::seq::SliceRandom;
    let mut out = vec![0usize; ds.patches.len()];
    for (class, members) in ds.indices_by_class().into_iter().enumerate() {
        if members.len() < 5 {
            return Err(StainError::EmptyClass {
                class,
                count: members.len(),
            });
        }
        let mut shuffled = members;
        shuffled.shuffle(&mut rng_for(seed, "domain-split", class as u64));
        for (part, chunk) in near_equal_chunks(&shuffled, 5).into_iter().enumerate() {
            for &i in chunk {
                out[i] = part + 1;
            }
        }
    }
    Ok(out)
}

/// Splits a slice into `k` contiguous parts whose sizes differ by at most one,
/// larger parts first.
pub fn near_equal_chunks<T>(items: &[T], k: usize) -> Vec<&[T]> {
    let base = items.len() / k;
    let extra = items.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(&items[start..start + len]);
        start += len;
    }
    out
}
