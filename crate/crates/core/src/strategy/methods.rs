use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde_json::json;

use super::fisher::{compute_fisher, FisherLabels};
use super::memory::{herding_select, EpisodicBuffer, ExemplarMemory, PrototypeStore};
use super::{ClassifierMode, Ctx, MemoryReport, Regime, Strategy, StrategyError, TrainBatch};
use crate::data::Patch;
use crate::nn::{forward, l2_normalize, loss_and_backward, Checkpoint, EwcAnchor, LossTerm, Model};
use crate::rng::{derive_seed, rng_for, Rng};

pub struct Finetune;

impl Strategy for Finetune {
    fn name(&self) -> &'static str {
        "finetune"
    }
}

/// Trains experience k on the union of experiences 0..=k.
pub struct Joint;

impl Strategy for Joint {
    fn name(&self) -> &'static str {
        "joint"
    }

    fn training_set(&self, ctx: &Ctx, k: usize) -> Vec<Patch> {
        ctx.stream.experiences[..=k]
            .iter()
            .flat_map(|e| e.train.patches.iter().cloned())
            .collect()
    }
}

fn fisher_for(
    ctx: &Ctx,
    k: usize,
    model: &Model,
    n_samples: usize,
    labels: FisherLabels,
    tag: &str,
) -> Result<Vec<f32>, StrategyError> {
    let data: Vec<&Patch> = ctx.stream.experiences[k].train.patches.iter().collect();
    let seed = derive_seed(ctx.seed, tag, k as u64);
    Ok(compute_fisher(model, &data, |p| ctx.slot(p), n_samples, labels, seed)?.values)
}

fn export_anchors(ck: &mut Checkpoint, prefix: &str, anchors: &[EwcAnchor]) {
    for (i, a) in anchors.iter().enumerate() {
        ck.arrays.push((format!("{prefix}.theta.{i}"), a.theta.to_vec()));
        ck.arrays.push((format!("{prefix}.fisher.{i}"), a.fisher.to_vec()));
    }
}

fn import_anchors(ck: &Checkpoint, prefix: &str) -> Vec<EwcAnchor> {
    (0..)
        .map_while(|i| {
            Some(EwcAnchor {
                theta: ck.array(&format!("{prefix}.theta.{i}"))?.into(),
                fisher: ck.array(&format!("{prefix}.fisher.{i}"))?.into(),
            })
        })
        .collect()
}

/// One quadratic penalty per finished experience.
pub struct Ewc {
    pub lambda: f64,
    pub fisher_samples: usize,
    pub fisher_labels: FisherLabels,
    pub anchors: Vec<EwcAnchor>,
}

impl Ewc {
    pub fn new(lambda: f64, fisher_samples: usize, fisher_labels: FisherLabels) -> Self {
        Ewc {
            lambda,
            fisher_samples,
            fisher_labels,
            anchors: Vec::new(),
        }
    }
}

impl Strategy for Ewc {
    fn name(&self) -> &'static str {
        "ewc"
    }

    fn loss_terms(&mut self, _: &Ctx, _: &Model, batch: &TrainBatch) -> Result<Vec<LossTerm>, StrategyError> {
        let mut terms = vec![batch.cross_entropy()];
        if !self.anchors.is_empty() {
            terms.push(LossTerm::EwcPenalty {
                anchors: self.anchors.clone(),
                lambda: self.lambda,
            });
        }
        Ok(terms)
    }

    fn on_experience_end(&mut self, ctx: &Ctx, k: usize, model: &Model) -> Result<(), StrategyError> {
        let fisher = fisher_for(ctx, k, model, self.fisher_samples, self.fisher_labels, "ewc-fisher")?;
        self.anchors.push(EwcAnchor {
            theta: model.params.values.clone().into(),
            fisher: fisher.into(),
        });
        Ok(())
    }

    fn report(&self) -> MemoryReport {
        MemoryReport {
            penalty_anchors: Some(self.anchors.len()),
            ..Default::default()
        }
    }

    fn export_memory(&self, ck: &mut Checkpoint) {
        export_anchors(ck, "ewc", &self.anchors);
    }

    fn import_memory(&mut self, ck: &Checkpoint, _: &[Patch]) -> Result<(), StrategyError> {
        self.anchors = import_anchors(ck, "ewc");
        Ok(())
    }
}

/// A single anchor with a decayed running Fisher sum.
pub struct OnlineEwc {
    pub lambda: f64,
    pub gamma: f64,
    pub fisher_samples: usize,
    pub fisher_labels: FisherLabels,
    pub anchor: Option<EwcAnchor>,
}

impl OnlineEwc {
    pub fn new(lambda: f64, gamma: f64, fisher_samples: usize, fisher_labels: FisherLabels) -> Self {
        OnlineEwc {
            lambda,
            gamma,
            fisher_samples,
            fisher_labels,
            anchor: None,
        }
    }

    /// `γ·F_old + F_new`.
    pub fn accumulate(&mut self, theta: Vec<f32>, fisher_new: Vec<f32>) {
        let fisher: Vec<f32> = match &self.anchor {
            Some(a) => a
                .fisher
                .iter()
                .zip(&fisher_new)
                .map(|(o, n)| (self.gamma * f64::from(*o) + f64::from(*n)) as f32)
                .collect(),
            None => fisher_new,
        };
        self.anchor = Some(EwcAnchor {
            theta: theta.into(),
            fisher: fisher.into(),
        });
    }
}

impl Strategy for OnlineEwc {
    fn name(&self) -> &'static str {
        "online_ewc"
    }

    fn loss_terms(&mut self, _: &Ctx, _: &Model, batch: &TrainBatch) -> Result<Vec<LossTerm>, StrategyError> {
        let mut terms = vec![batch.cross_entropy()];
        if let Some(a) = &self.anchor {
            terms.push(LossTerm::EwcPenalty {
                anchors: vec![a.clone()],
                lambda: self.lambda,
            });
        }
        Ok(terms)
    }

    fn on_experience_end(&mut self, ctx: &Ctx, k: usize, model: &Model) -> Result<(), StrategyError> {
        let fisher = fisher_for(ctx, k, model, self.fisher_samples, self.fisher_labels, "online-ewc-fisher")?;
        self.accumulate(model.params.values.clone(), fisher);
        Ok(())
    }

    fn report(&self) -> MemoryReport {
        MemoryReport {
            penalty_anchors: Some(usize::from(self.anchor.is_some())),
            ..Default::default()
        }
    }

    fn export_memory(&self, ck: &mut Checkpoint) {
        export_anchors(ck, "online_ewc", self.anchor.as_slice());
    }

    fn import_memory(&mut self, ck: &Checkpoint, _: &[Patch]) -> Result<(), StrategyError> {
        self.anchor = import_anchors(ck, "online_ewc").into_iter().next();
        Ok(())
    }
}

/// Frozen copy of the model and the outputs it was trained on.
struct Teacher {
    params: Arc<[f32]>,
    slots: BTreeMap<usize, Vec<usize>>,
}

impl Teacher {
    fn snapshot(ctx: &Ctx, k: usize, model: &Model) -> Option<Teacher> {
        (k > 0).then(|| Teacher {
            params: model.params.values.clone().into(),
            slots: ctx.trained_slots(k),
        })
    }

    /// One distillation term per head with trained outputs.
    fn terms(
        &self,
        model: &Model,
        batch: &TrainBatch,
        weight: f64,
        temperature: f64,
    ) -> Result<Vec<LossTerm>, StrategyError> {
        if weight == 0.0 {
            return Ok(Vec::new());
        }
        let n = batch.len();
        let mut out = Vec::with_capacity(self.slots.len());
        for (&head, outputs) in &self.slots {
            let logits = forward(&self.params, &model.spec, &batch.inputs, &vec![head; n])?.logits;
            let teacher_logits = logits
                .iter()
                .flat_map(|row| outputs.iter().map(|&o| row[o] as f32))
                .collect();
            out.push(LossTerm::Distillation {
                head,
                outputs: outputs.clone(),
                teacher_logits,
                temperature,
                weight,
            });
        }
        Ok(out)
    }
}

/// Distillation from the model frozen at the start of each experience.
pub struct Lwf {
    pub lambda_o: f64,
    pub temperature: f64,
    teacher: Option<Teacher>,
}

impl Lwf {
    pub fn new(lambda_o: f64, temperature: f64) -> Self {
        Lwf {
            lambda_o,
            temperature,
            teacher: None,
        }
    }
}

impl Strategy for Lwf {
    fn name(&self) -> &'static str {
        "lwf"
    }

    fn on_experience_start(&mut self, ctx: &Ctx, k: usize, model: &Model) -> Result<(), StrategyError> {
        self.teacher = Teacher::snapshot(ctx, k, model);
        Ok(())
    }

    fn loss_terms(&mut self, _: &Ctx, model: &Model, batch: &TrainBatch) -> Result<Vec<LossTerm>, StrategyError> {
        let mut terms = vec![batch.cross_entropy()];
        if let Some(t) = &self.teacher {
            terms.extend(t.terms(model, batch, self.lambda_o, self.temperature)?);
        }
        Ok(terms)
    }
}

fn normalized_features(model: &Model, patches: &[&Patch]) -> Result<Vec<f32>, StrategyError> {
    let images: Vec<_> = patches.iter().map(|p| &p.pixels).collect();
    let mut f = model.features(&images)?;
    for row in f.chunks_mut(model.spec.feature_dim) {
        l2_normalize(row);
    }
    Ok(f)
}

fn mean_rows(rows: &[f32], d: usize) -> Vec<f32> {
    let n = rows.len() / d;
    let mut acc = vec![0.0f64; d];
    for row in rows.chunks(d) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += f64::from(*v);
        }
    }
    acc.iter().map(|v| (v / n as f64) as f32).collect()
}

fn patches_by_key(pool: &[Patch]) -> BTreeMap<&str, &Patch> {
    pool.iter().map(|p| (p.source_key.as_str(), p)).collect()
}

fn resolve(keys: &[String], index: &BTreeMap<&str, &Patch>) -> Result<Vec<Patch>, StrategyError> {
    keys.iter()
        .map(|k| {
            index
                .get(k.as_str())
                .map(|p| (*p).clone())
                .ok_or_else(|| StrategyError::Memory(format!("unknown source key {k}")))
        })
        .collect()
}

/// Herding exemplars, replay plus distillation, nearest-mean-of-exemplars
/// classification. A budget of 0 disables the memory.
pub struct Icarl {
    pub lambda_o: f64,
    pub temperature: f64,
    pub memory: ExemplarMemory,
    seen: BTreeSet<usize>,
    teacher: Option<Teacher>,
}

impl Icarl {
    pub fn new(budget: usize, lambda_o: f64, temperature: f64) -> Self {
        Icarl {
            lambda_o,
            temperature,
            memory: ExemplarMemory::new(budget),
            seen: BTreeSet::new(),
            teacher: None,
        }
    }

    /// Exemplars per class once `classes` classes have been seen.
    pub fn per_class(&self, classes: usize) -> usize {
        self.memory.budget / classes.max(1)
    }
}

impl Strategy for Icarl {
    fn name(&self) -> &'static str {
        "icarl"
    }

    fn classifier_mode(&self) -> ClassifierMode {
        ClassifierMode::NearestMeanOfExemplars
    }

    fn on_experience_start(&mut self, ctx: &Ctx, k: usize, model: &Model) -> Result<(), StrategyError> {
        let upcoming = self.seen.union(&ctx.stream.experiences[k].classes_present).count();
        let budget = self.memory.budget;
        if budget > 0 && budget < upcoming {
            return Err(StrategyError::BudgetTooSmall {
                budget,
                classes: upcoming,
            });
        }
        self.teacher = Teacher::snapshot(ctx, k, model);
        Ok(())
    }

    fn training_set(&self, ctx: &Ctx, k: usize) -> Vec<Patch> {
        let mut out = ctx.stream.experiences[k].train.patches.clone();
        out.extend(self.memory.patches().cloned());
        out
    }

    fn loss_terms(&mut self, _: &Ctx, model: &Model, batch: &TrainBatch) -> Result<Vec<LossTerm>, StrategyError> {
        let mut terms = vec![batch.cross_entropy()];
        if let Some(t) = &self.teacher {
            terms.extend(t.terms(model, batch, self.lambda_o, self.temperature)?);
        }
        Ok(terms)
    }

    fn on_experience_end(&mut self, ctx: &Ctx, k: usize, model: &Model) -> Result<(), StrategyError> {
        let exp = &ctx.stream.experiences[k];
        let new: Vec<usize> = exp.classes_present.difference(&self.seen).copied().collect();
        self.seen.extend(exp.classes_present.iter().copied());
        if self.memory.budget == 0 {
            return Ok(());
        }
        let m = self.per_class(self.seen.len());
        self.memory.truncate(m);
        let d = model.spec.feature_dim;
        for c in new {
            let members: Vec<&Patch> = exp.train.patches.iter().filter(|p| p.class_id == c).collect();
            let feats = normalized_features(model, &members)?;
            let picks = herding_select(&feats, d, m);
            self.memory
                .per_class
                .insert(c, picks.into_iter().map(|i| members[i].clone()).collect());
        }
        Ok(())
    }

    fn class_means(&self, _: &Ctx, model: &Model) -> Result<Vec<(usize, Vec<f32>)>, StrategyError> {
        let d = model.spec.feature_dim;
        self.memory
            .per_class
            .iter()
            .filter(|(_, l)| !l.is_empty())
            .map(|(&c, list)| {
                let refs: Vec<&Patch> = list.iter().collect();
                Ok((c, mean_rows(&normalized_features(model, &refs)?, d)))
            })
            .collect()
    }

    fn report(&self) -> MemoryReport {
        MemoryReport {
            exemplars: Some(self.memory.total()),
            exemplar_budget: Some(self.memory.budget),
            ..Default::default()
        }
    }

    fn export_memory(&self, ck: &mut Checkpoint) {
        ck.meta.insert(
            "icarl.exemplars".into(),
            json!(self.memory.source_keys()),
        );
        ck.meta.insert("icarl.seen".into(), json!(self.seen));
    }

    fn import_memory(&mut self, ck: &Checkpoint, pool: &[Patch]) -> Result<(), StrategyError> {
        let parse = |key: &str| {
            ck.meta
                .get(key)
                .cloned()
                .ok_or_else(|| StrategyError::Memory(format!("missing {key}")))
        };
        let keys: BTreeMap<usize, Vec<String>> = serde_json::from_value(parse("icarl.exemplars")?)
            .map_err(|e| StrategyError::Memory(e.to_string()))?;
        self.seen = serde_json::from_value(parse("icarl.seen")?).map_err(|e| StrategyError::Memory(e.to_string()))?;
        let index = patches_by_key(pool);
        self.memory.per_class = keys
            .iter()
            .map(|(c, k)| Ok((*c, resolve(k, &index)?)))
            .collect::<Result<_, StrategyError>>()?;
        Ok(())
    }
}

fn export_buffer(ck: &mut Checkpoint, prefix: &str, buffer: &EpisodicBuffer) {
    let (seen, per_class) = buffer.counters();
    ck.meta.insert(
        format!("{prefix}.buffer"),
        json!({
            "keys": buffer.slots.iter().map(|p| p.source_key.clone()).collect::<Vec<_>>(),
            "seen": seen,
            "seen_per_class": per_class,
        }),
    );
}

fn import_buffer(ck: &Checkpoint, prefix: &str, buffer: &mut EpisodicBuffer, pool: &[Patch]) -> Result<(), StrategyError> {
    #[derive(serde::Deserialize)]
    struct Stored {
        keys: Vec<String>,
        seen: usize,
        seen_per_class: BTreeMap<usize, usize>,
    }
    let v = ck
        .meta
        .get(&format!("{prefix}.buffer"))
        .cloned()
        .ok_or_else(|| StrategyError::Memory(format!("missing {prefix}.buffer")))?;
    let s: Stored = serde_json::from_value(v).map_err(|e| StrategyError::Memory(e.to_string()))?;
    let slots = resolve(&s.keys, &patches_by_key(pool))?;
    buffer.restore(slots, s.seen, s.seen_per_class);
    Ok(())
}

/// Gradient projection against a reservoir replay buffer.
pub struct Agem {
    pub ref_batch: usize,
    pub buffer: EpisodicBuffer,
    rng: Rng,
    projections: usize,
}

impl Agem {
    pub fn new(capacity: usize, ref_batch: usize, seed: u64) -> Self {
        Agem {
            ref_batch,
            buffer: EpisodicBuffer::reservoir(capacity),
            rng: rng_for(seed, "agem", 0),
            projections: 0,
        }
    }

    /// Steps on which the projection branch fired.
    pub fn projections(&self) -> usize {
        self.projections
    }
}

impl Strategy for Agem {
    fn name(&self) -> &'static str {
        "agem"
    }

    fn regime(&self) -> Option<Regime> {
        Some(Regime::Online)
    }

    fn transform_gradient(&mut self, ctx: &Ctx, model: &Model, grads: Vec<f32>) -> Result<Vec<f32>, StrategyError> {
        if self.buffer.is_empty() {
            return Ok(grads);
        }
        let sample: Vec<Patch> = self.buffer.sample(self.ref_batch, &mut self.rng).into_iter().cloned().collect();
        let n = sample.len();
        let reference = TrainBatch::new(ctx, sample, n)?;
        let (_, g_ref) = loss_and_backward(&model.params.values, &model.spec, &reference.inputs, &[reference.cross_entropy()])?;
        let projected = super::agem_project(&grads, &g_ref)?;
        if projected != grads {
            self.projections += 1;
        }
        Ok(projected)
    }

    fn on_experience_end(&mut self, ctx: &Ctx, k: usize, _: &Model) -> Result<(), StrategyError> {
        for p in &ctx.stream.experiences[k].train.patches {
            self.buffer.insert(p.clone(), &mut self.rng);
        }
        Ok(())
    }

    fn report(&self) -> MemoryReport {
        MemoryReport {
            buffer_len: Some(self.buffer.len()),
            buffer_capacity: Some(self.buffer.capacity),
            ..Default::default()
        }
    }

    fn export_memory(&self, ck: &mut Checkpoint) {
        export_buffer(ck, "agem", &self.buffer);
    }

    fn import_memory(&mut self, ck: &Checkpoint, pool: &[Patch]) -> Result<(), StrategyError> {
        import_buffer(ck, "agem", &mut self.buffer, pool)
    }
}

/// Online prototype learning with a class-balanced replay buffer.
pub struct Cope {
    pub buffer: EpisodicBuffer,
    pub store: PrototypeStore,
    rng: Rng,
    last_features: Vec<f32>,
    max_norm_error: f64,
    balance_violations: usize,
}

impl Cope {
    pub fn new(capacity: usize, alpha: f64, tau: f64, seed: u64) -> Self {
        Cope {
            buffer: EpisodicBuffer::balanced(capacity),
            store: PrototypeStore::new(alpha, tau),
            rng: rng_for(seed, "cope", 0),
            last_features: Vec::new(),
            max_norm_error: 0.0,
            balance_violations: 0,
        }
    }

    /// Largest prototype norm deviation observed after any update.
    pub fn max_norm_error(&self) -> f64 {
        self.max_norm_error
    }

    /// Insertions after which the buffer broke its balance contract.
    pub fn balance_violations(&self) -> usize {
        self.balance_violations
    }

    fn class_batch_means(&self, batch: &TrainBatch, d: usize) -> BTreeMap<usize, Vec<f32>> {
        let mut rows: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
        for (i, p) in batch.patches.iter().enumerate() {
            rows.entry(p.class_id)
                .or_default()
                .extend_from_slice(&self.last_features[i * d..(i + 1) * d]);
        }
        rows.into_iter().map(|(c, r)| (c, mean_rows(&r, d))).collect()
    }
}

impl Strategy for Cope {
    fn name(&self) -> &'static str {
        "cope"
    }

    fn regime(&self) -> Option<Regime> {
        Some(Regime::OnlineMini)
    }

    fn classifier_mode(&self) -> ClassifierMode {
        ClassifierMode::Prototypes
    }

    fn extend_batch(&mut self, _: &Ctx, _: &Model, batch: &mut Vec<Patch>) -> Result<(), StrategyError> {
        let replay: Vec<Patch> = self.buffer.sample(batch.len(), &mut self.rng).into_iter().cloned().collect();
        batch.extend(replay);
        Ok(())
    }

    fn loss_terms(&mut self, _: &Ctx, model: &Model, batch: &TrainBatch) -> Result<Vec<LossTerm>, StrategyError> {
        let d = model.spec.feature_dim;
        let refs: Vec<&Patch> = batch.patches.iter().collect();
        self.last_features = normalized_features(model, &refs)?;
        for (c, mean) in self.class_batch_means(batch, d) {
            if !self.store.prototypes.contains_key(&c) {
                self.store.update(c, &mean)?;
            }
        }
        let ids: Vec<usize> = self.store.prototypes.keys().copied().collect();
        let targets = batch
            .patches
            .iter()
            .map(|p| ids.binary_search(&p.class_id).expect("prototype exists"))
            .collect();
        Ok(vec![LossTerm::PrototypePpp {
            prototypes: self.store.prototypes.values().flatten().copied().collect(),
            targets,
            temperature: self.store.temperature,
            weight: 1.0,
        }])
    }

    fn after_step(&mut self, _: &Ctx, model: &Model, batch: &TrainBatch) -> Result<(), StrategyError> {
        for (c, mean) in self.class_batch_means(batch, model.spec.feature_dim) {
            self.store.update(c, &mean)?;
        }
        self.max_norm_error = self.max_norm_error.max(self.store.max_norm_error());
        for p in &batch.patches[..batch.n_new] {
            self.buffer.insert(p.clone(), &mut self.rng);
            if !self.buffer.is_balanced() {
                self.balance_violations += 1;
            }
        }
        Ok(())
    }

    fn class_means(&self, _: &Ctx, _: &Model) -> Result<Vec<(usize, Vec<f32>)>, StrategyError> {
        Ok(self.store.prototypes.iter().map(|(c, p)| (*c, p.clone())).collect())
    }

    fn report(&self) -> MemoryReport {
        MemoryReport {
            buffer_len: Some(self.buffer.len()),
            buffer_capacity: Some(self.buffer.capacity),
            buffer_class_counts: Some(self.buffer.class_counts().into_iter().collect()),
            buffer_balanced: Some(self.buffer.is_balanced() && self.balance_violations == 0),
            prototype_max_norm_error: Some(self.max_norm_error),
            ..Default::default()
        }
    }

    fn export_memory(&self, ck: &mut Checkpoint) {
        export_buffer(ck, "cope", &self.buffer);
        ck.meta.insert(
            "cope.prototype_classes".into(),
            json!(self.store.prototypes.keys().collect::<Vec<_>>()),
        );
        ck.arrays.push((
            "cope.prototypes".into(),
            self.store.prototypes.values().flatten().copied().collect(),
        ));
    }

    fn import_memory(&mut self, ck: &Checkpoint, pool: &[Patch]) -> Result<(), StrategyError> {
        import_buffer(ck, "cope", &mut self.buffer, pool)?;
        let classes: Vec<usize> = ck
            .meta
            .get("cope.prototype_classes")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| StrategyError::Memory(e.to_string()))?
            .unwrap_or_default();
        let flat = ck.array("cope.prototypes").unwrap_or(&[]);
        if classes.is_empty() {
            self.store.prototypes.clear();
            return Ok(());
        }
        if !flat.len().is_multiple_of(classes.len()) {
            return Err(StrategyError::Memory("prototype array does not match class list".into()));
        }
        let d = flat.len() / classes.len();
        self.store.prototypes = classes
            .into_iter()
            .zip(flat.chunks(d))
            .map(|(c, p)| (c, p.to_vec()))
            .collect();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn online_ewc_accumulation() {
        let mut s = OnlineEwc::new(1.0, 0.0, 1, FisherLabels::Sampled);
        s.accumulate(vec![0.0; 2], vec![1.0, 2.0]);
        s.accumulate(vec![1.0; 2], vec![3.0, 5.0]);
        assert_eq!(&*s.anchor.as_ref().unwrap().fisher, &[3.0, 5.0]);
        let mut s = OnlineEwc::new(1.0, 1.0, 1, FisherLabels::Sampled);
        s.accumulate(vec![0.0; 2], vec![1.0, 2.0]);
        s.accumulate(vec![1.0; 2], vec![3.0, 5.0]);
        let a = s.anchor.as_ref().unwrap();
        assert_eq!(&*a.fisher, &[4.0, 7.0]);
        assert_eq!(&*a.theta, &[1.0, 1.0]);
    }

    #[test]
    fn icarl_per_class_budget() {
        assert_eq!(Icarl::new(2000, 1.0, 2.0).per_class(9), 222);
        assert_eq!(Icarl::new(300, 1.0, 2.0).per_class(6), 50);
    }
}
