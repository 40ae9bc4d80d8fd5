use std::collections::BTreeMap;

use rand::Rng as _;

use super::StrategyError;
use crate::data::Patch;
use crate::rng::Rng;

/// Greedy herding over L2-normalized feature rows (`n × d`): each pick keeps
/// the running exemplar mean closest to the class mean. Ties go to the lowest
/// index.
pub fn herding_select(features: &[f32], d: usize, m: usize) -> Vec<usize> {
    assert!(d > 0 && features.len().is_multiple_of(d), "features must be n x d");
    let n = features.len() / d;
    let row = |i: usize| &features[i * d..(i + 1) * d];
    let mut mu = vec![0.0f64; d];
    for i in 0..n {
        for (a, &v) in mu.iter_mut().zip(row(i)) {
            *a += f64::from(v) / n as f64;
        }
    }
    let mut acc = vec![0.0f64; d];
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(m.min(n));
    for k in 1..=m.min(n) {
        let inv = 1.0 / k as f64;
        let mut best: Option<(f64, usize)> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            let dist: f64 = row(i)
                .iter()
                .zip(&acc)
                .zip(&mu)
                .map(|((&x, s), u)| (u - inv * (f64::from(x) + s)).powi(2))
                .sum();
            if best.is_none_or(|(b, _)| dist < b) {
                best = Some((dist, i));
            }
        }
        let (_, pick) = best.expect("at least one candidate");
        taken[pick] = true;
        for (s, &x) in acc.iter_mut().zip(row(pick)) {
            *s += f64::from(x);
        }
        out.push(pick);
    }
    out
}

/// A-GEM projection: `g` if it does not conflict with `g_ref`, otherwise
/// `g` minus its component along `g_ref`.
pub fn agem_project(g: &[f32], g_ref: &[f32]) -> Result<Vec<f32>, StrategyError> {
    if g.len() != g_ref.len() {
        return Err(StrategyError::ShapeMismatch(format!(
            "gradient lengths {} and {}",
            g.len(),
            g_ref.len()
        )));
    }
    let dot: f64 = g.iter().zip(g_ref).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
    if dot >= 0.0 {
        return Ok(g.to_vec());
    }
    let rr: f64 = g_ref.iter().map(|b| f64::from(*b).powi(2)).sum();
    if rr <= 1e-24 {
        return Err(StrategyError::ZeroReference);
    }
    let k = dot / rr;
    Ok(g.iter()
        .zip(g_ref)
        .map(|(a, b)| (f64::from(*a) - k * f64::from(*b)) as f32)
        .collect())
}

/// `normalize(α·p + (1−α)·z̄)`.
pub fn cope_update_prototype(p: &[f32], batch_mean: &[f32], alpha: f64) -> Result<Vec<f32>, StrategyError> {
    let mixed: Vec<f64> = p
        .iter()
        .zip(batch_mean)
        .map(|(a, b)| alpha * f64::from(*a) + (1.0 - alpha) * f64::from(*b))
        .collect();
    let norm = mixed.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-8 {
        return Err(StrategyError::DegeneratePrototype(norm));
    }
    Ok(mixed.iter().map(|v| (v / norm) as f32).collect())
}

/// Per-class exemplar lists in herding order, bounded by a total budget.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExemplarMemory {
    pub budget: usize,
    pub per_class: BTreeMap<usize, Vec<Patch>>,
}

impl ExemplarMemory {
    pub fn new(budget: usize) -> Self {
        ExemplarMemory {
            budget,
            per_class: BTreeMap::new(),
        }
    }

    pub fn total(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    /// Keeps the first `m` exemplars of every class.
    pub fn truncate(&mut self, m: usize) {
        for list in self.per_class.values_mut() {
            list.truncate(m);
        }
    }

    pub fn patches(&self) -> impl Iterator<Item = &Patch> {
        self.per_class.values().flatten()
    }

    pub fn source_keys(&self) -> BTreeMap<usize, Vec<String>> {
        self.per_class
            .iter()
            .map(|(c, l)| (*c, l.iter().map(|p| p.source_key.clone()).collect()))
            .collect()
    }
}

/// Bounded replay store, filled either by uniform reservoir sampling or by
/// class-balanced reservoir sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodicBuffer {
    pub capacity: usize,
    pub balanced: bool,
    pub slots: Vec<Patch>,
    seen: usize,
    seen_per_class: BTreeMap<usize, usize>,
}

impl EpisodicBuffer {
    pub fn reservoir(capacity: usize) -> Self {
        EpisodicBuffer {
            capacity,
            balanced: false,
            slots: Vec::new(),
            seen: 0,
            seen_per_class: BTreeMap::new(),
        }
    }

    pub fn balanced(capacity: usize) -> Self {
        EpisodicBuffer {
            balanced: true,
            ..EpisodicBuffer::reservoir(capacity)
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for p in &self.slots {
            *out.entry(p.class_id).or_insert(0) += 1;
        }
        out
    }

    /// Number of items of `class` offered so far.
    pub fn seen(&self, class: usize) -> usize {
        self.seen_per_class.get(&class).copied().unwrap_or(0)
    }

    pub fn insert(&mut self, item: Patch, rng: &mut Rng) {
        self.seen += 1;
        let c = item.class_id;
        *self.seen_per_class.entry(c).or_insert(0) += 1;
        if self.capacity == 0 {
            return;
        }
        if self.slots.len() < self.capacity {
            self.slots.push(item);
            return;
        }
        if !self.balanced {
            let j = rng.gen_range(0..self.seen);
            if j < self.capacity {
                self.slots[j] = item;
            }
            return;
        }
        let counts = self.class_counts();
        let max = counts.values().copied().max().unwrap_or(0);
        let own = counts.get(&c).copied().unwrap_or(0);
        if own < max {
            // evict from a largest class (lowest id among ties)
            let victim_class = *counts.iter().find(|(_, &n)| n == max).expect("non-empty").0;
            let victims: Vec<usize> = (0..self.slots.len())
                .filter(|&i| self.slots[i].class_id == victim_class)
                .collect();
            let v = victims[rng.gen_range(0..victims.len())];
            self.slots[v] = item;
        } else {
            let j = rng.gen_range(0..self.seen(c));
            if j < own {
                let mine: Vec<usize> = (0..self.slots.len()).filter(|&i| self.slots[i].class_id == c).collect();
                let v = mine[rng.gen_range(0..mine.len())];
                self.slots[v] = item;
            }
        }
    }

    /// `k` distinct slots drawn uniformly (all slots when `k ≥ len`).
    pub fn sample(&self, k: usize, rng: &mut Rng) -> Vec<&Patch> {
        let k = k.min(self.slots.len());
        rand::seq::index::sample(rng, self.slots.len(), k)
            .into_iter()
            .map(|i| &self.slots[i])
            .collect()
    }

    /// Class-balanced contract: classes that kept fewer items than the
    /// largest class have stored every item they offered, and counts of the
    /// remaining classes differ by at most one.
    pub fn is_balanced(&self) -> bool {
        let counts = self.class_counts();
        let Some(&max) = counts.values().max() else {
            return true;
        };
        counts.iter().all(|(&c, &n)| n + 1 >= max || n == self.seen(c))
    }

    pub(crate) fn restore(&mut self, slots: Vec<Patch>, seen: usize, seen_per_class: BTreeMap<usize, usize>) {
        self.slots = slots;
        self.seen = seen;
        self.seen_per_class = seen_per_class;
    }

    pub(crate) fn counters(&self) -> (usize, &BTreeMap<usize, usize>) {
        (self.seen, &self.seen_per_class)
    }
}

/// Unit-norm class prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeStore {
    pub prototypes: BTreeMap<usize, Vec<f32>>,
    pub alpha: f64,
    pub temperature: f64,
}

impl PrototypeStore {
    pub fn new(alpha: f64, temperature: f64) -> Self {
        PrototypeStore {
            prototypes: BTreeMap::new(),
            alpha,
            temperature,
        }
    }

    pub fn update(&mut self, class: usize, batch_mean: &[f32]) -> Result<(), StrategyError> {
        let next = match self.prototypes.get(&class) {
            Some(p) => cope_update_prototype(p, batch_mean, self.alpha)?,
            None => cope_update_prototype(batch_mean, batch_mean, 1.0)?,
        };
        self.prototypes.insert(class, next);
        Ok(())
    }

    pub fn max_norm_error(&self) -> f64 {
        self.prototypes
            .values()
            .map(|p| (p.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RgbImage;
    use crate::rng::rng_for;

    fn patch(class: usize, i: usize) -> Patch {
        Patch::new(RgbImage::filled(8, 8, [0, 0, 0]), class, format!("{class}/{i}"))
    }

    #[test]
    fn agem_examples() {
        assert_eq!(agem_project(&[2.0, 1.0], &[1.0, 0.0]).unwrap(), vec![2.0, 1.0]);
        assert_eq!(agem_project(&[1.0, 0.0], &[-1.0, 1.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(agem_project(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(agem_project(&[1.0], &[1.0, 2.0]), Err(StrategyError::ShapeMismatch(_))));
    }

    #[test]
    fn cope_update_examples() {
        let p = cope_update_prototype(&[1.0, 0.0], &[0.0, 1.0], 0.9).unwrap();
        assert!((p[0] - 0.99388).abs() < 1e-5 && (p[1] - 0.11043).abs() < 1e-5);
        let same = cope_update_prototype(&[0.6, 0.8], &[0.6, 0.8], 0.9).unwrap();
        assert!((same[0] - 0.6).abs() < 1e-7 && (same[1] - 0.8).abs() < 1e-7);
        assert!(matches!(
            cope_update_prototype(&[1.0, 0.0], &[-9.0, 0.0], 0.9),
            Err(StrategyError::DegeneratePrototype(_))
        ));
    }

    #[test]
    fn herding_small_cases() {
        assert_eq!(herding_select(&[0.6, 0.8], 2, 3), vec![0]);
        let f = [1.0, 0.0, 0.0, 1.0, 0.6, 0.8];
        let all = herding_select(&f, 2, 5);
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, [0, 1, 2]);
        // prefix property
        assert_eq!(herding_select(&f, 2, 2), all[..2]);
    }

    #[test]
    fn reservoir_bounded() {
        let mut b = EpisodicBuffer::reservoir(10);
        let mut rng = rng_for(0, "t", 0);
        for i in 0..500 {
            b.insert(patch(i % 3, i), &mut rng);
            assert!(b.len() <= 10);
        }
        assert_eq!(b.len(), 10);
    }

    #[test]
    fn balanced_buffer_sequential_classes() {
        let mut b = EpisodicBuffer::balanced(12);
        let mut rng = rng_for(1, "t", 0);
        for c in 0..4 {
            for i in 0..40 {
                b.insert(patch(c, i), &mut rng);
                assert!(b.is_balanced(), "after class {c} item {i}: {:?}", b.class_counts());
                assert!(b.len() <= 12);
            }
        }
        assert!(b.class_counts().values().all(|&n| n == 3));
        let mut zero = EpisodicBuffer::balanced(0);
        zero.insert(patch(0, 0), &mut rng);
        assert!(zero.is_empty());
    }

    #[test]
    fn exemplar_truncation_is_prefix() {
        let mut m = ExemplarMemory::new(6);
        m.per_class.insert(0, (0..3).map(|i| patch(0, i)).collect());
        m.per_class.insert(1, (0..3).map(|i| patch(1, i)).collect());
        m.truncate(2);
        assert_eq!(m.total(), 4);
        assert_eq!(m.source_keys()[&1], vec!["1/0", "1/1"]);
    }
}
