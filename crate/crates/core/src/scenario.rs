//! Experience streams for the four incremental scenarios and the two-tumor
//! Domain-IL study.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{allocate_counts, Dataset};
use crate::nn::HeadSpec;
use crate::rng::rng_for;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("domain {0} is missing from the dataset")]
    MissingDomain(u8),
    #[error("class plan mismatch: {0}")]
    PlanMismatch(String),
    #[error("label spaces differ: {0:?} vs {1:?}")]
    LabelSpaceMismatch(Vec<String>, Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    DataIl,
    DomainIl,
    ClassIl,
    TaskIl,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::DataIl => "data_il",
            ScenarioKind::DomainIl => "domain_il",
            ScenarioKind::ClassIl => "class_il",
            ScenarioKind::TaskIl => "task_il",
        }
    }
}

/// Train, validation and test parts of one source dataset.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    fn parts(&self) -> [&Dataset; 3] {
        [&self.train, &self.val, &self.test]
    }

    fn class_names(&self) -> &[String] {
        &self.train.class_names
    }

    fn map(&self, mut f: impl FnMut(&Dataset) -> Dataset) -> Splits {
        Splits {
            train: f(&self.train),
            val: f(&self.val),
            test: f(&self.test),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub index: usize,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub classes_present: BTreeSet<usize>,
    pub task_id: Option<usize>,
}

impl Experience {
    fn new(index: usize, parts: Splits, task_id: Option<usize>) -> Result<Self, ScenarioError> {
        if parts.train.is_empty() || parts.test.is_empty() {
            return Err(ScenarioError::InsufficientData(format!(
                "experience {index} has {} train and {} test patches",
                parts.train.len(),
                parts.test.len()
            )));
        }
        let classes_present = parts.train.patches.iter().map(|p| p.class_id).collect();
        Ok(Experience {
            index,
            train: parts.train,
            val: parts.val,
            test: parts.test,
            classes_present,
            task_id,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceStream {
    pub kind: ScenarioKind,
    pub experiences: Vec<Experience>,
    pub task_id_at_test: bool,
    pub class_names: Vec<String>,
}

/// Where a class lands in the model outputs: `(head_id, output index)`.
pub type OutputSlot = (usize, usize);

impl ExperienceStream {
    pub fn len(&self) -> usize {
        self.experiences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experiences.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// One head per task for Task-IL, otherwise a single shared head over
    /// every class.
    pub fn heads(&self) -> Vec<HeadSpec> {
        if self.kind == ScenarioKind::TaskIl {
            self.experiences
                .iter()
                .map(|e| HeadSpec {
                    head_id: e.index,
                    n_outputs: e.classes_present.len(),
                })
                .collect()
        } else {
            vec![HeadSpec {
                head_id: 0,
                n_outputs: self.n_classes(),
            }]
        }
    }

    /// Output slot of `class` for a sample of `task`.
    pub fn slot(&self, class: usize, task: Option<usize>) -> OutputSlot {
        match (self.kind, task) {
            (ScenarioKind::TaskIl, Some(t)) => {
                let pos = self.experiences[t]
                    .classes_present
                    .iter()
                    .position(|&c| c == class)
                    .expect("class belongs to its task");
                (t, pos)
            }
            _ => (0, class),
        }
    }

    /// Classes a prediction may choose from when testing on experience
    /// `test_exp` after training through experience `trained`.
    pub fn candidates(&self, trained: usize, test_exp: usize) -> Vec<usize> {
        match self.kind {
            ScenarioKind::ClassIl => {
                let seen: BTreeSet<usize> = self.experiences[..=trained]
                    .iter()
                    .flat_map(|e| e.classes_present.iter().copied())
                    .collect();
                seen.into_iter().collect()
            }
            ScenarioKind::TaskIl => self.experiences[test_exp].classes_present.iter().copied().collect(),
            ScenarioKind::DataIl | ScenarioKind::DomainIl => (0..self.n_classes()).collect(),
        }
    }

    /// Accuracy of a uniform guess over the classes of experience `j`.
    pub fn chance(&self, j: usize) -> f64 {
        let k = match self.kind {
            ScenarioKind::ClassIl | ScenarioKind::TaskIl => self.experiences[j].classes_present.len(),
            ScenarioKind::DataIl | ScenarioKind::DomainIl => self.n_classes(),
        };
        1.0 / k.max(1) as f64
    }

    pub fn manifest(&self) -> StreamManifest {
        let summarize = |ds: &Dataset| PartSummary {
            size: ds.len(),
            class_counts: count_by(ds, |p| Some(p.class_id)),
            domain_counts: count_by(ds, |p| p.domain_id.map(usize::from)),
        };
        StreamManifest {
            scenario: self.kind,
            task_id_at_test: self.task_id_at_test,
            class_names: self.class_names.clone(),
            experiences: self
                .experiences
                .iter()
                .map(|e| ExperienceSummary {
                    index: e.index,
                    task_id: e.task_id,
                    classes: e.classes_present.iter().copied().collect(),
                    train: summarize(&e.train),
                    val: summarize(&e.val),
                    test: summarize(&e.test),
                })
                .collect(),
        }
    }
}

fn count_by(ds: &Dataset, key: impl Fn(&crate::data::Patch) -> Option<usize>) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for p in &ds.patches {
        if let Some(k) = key(p) {
            *out.entry(k).or_insert(0) += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSummary {
    pub size: usize,
    pub class_counts: BTreeMap<usize, usize>,
    pub domain_counts: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceSummary {
    pub index: usize,
    pub task_id: Option<usize>,
    pub classes: Vec<usize>,
    pub train: PartSummary,
    pub val: PartSummary,
    pub test: PartSummary,
}

/// Sizes, classes and domains of every experience.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub scenario: ScenarioKind,
    pub task_id_at_test: bool,
    pub class_names: Vec<String>,
    pub experiences: Vec<ExperienceSummary>,
}

/// Class order and grouping for Class-IL and Task-IL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPlan {
    pub order: Vec<usize>,
    pub grouping: Vec<usize>,
}

impl ClassPlan {
    pub fn new(order: Vec<usize>, grouping: Vec<usize>) -> Result<Self, ScenarioError> {
        let plan = ClassPlan { order, grouping };
        plan.validate(None)?;
        Ok(plan)
    }

    /// Identity order split into groups of `per_group` (the last group takes
    /// the remainder).
    pub fn even(n_classes: usize, per_group: usize) -> Result<Self, ScenarioError> {
        if per_group == 0 {
            return Err(ScenarioError::PlanMismatch("group size must be positive".into()));
        }
        let mut grouping = vec![per_group; n_classes / per_group];
        if !n_classes.is_multiple_of(per_group) {
            grouping.push(n_classes % per_group);
        }
        ClassPlan::new((0..n_classes).collect(), grouping)
    }

    /// Parses 1-based class numbers, either as a digit string (`"182736945"`)
    /// or comma separated (`"1,10,2"`), and a grouping string (`"2223"` or
    /// `"2,2,2,3"`). Returns 0-based class ids.
    pub fn parse(order: &str, grouping: &str) -> Result<Self, ScenarioError> {
        let order = parse_list(order, "order")?
            .into_iter()
            .map(|c| {
                c.checked_sub(1)
                    .ok_or_else(|| ScenarioError::PlanMismatch("class numbers start at 1".into()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        ClassPlan::new(order, parse_list(grouping, "grouping")?)
    }

    pub fn validate(&self, n_classes: Option<usize>) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::PlanMismatch(m));
        let n = n_classes.unwrap_or(self.order.len());
        if self.order.len() != n {
            return bad(format!("order lists {} classes, dataset has {n}", self.order.len()));
        }
        let mut seen = vec![false; n];
        for &c in &self.order {
            if c >= n || std::mem::replace(&mut seen[c], true) {
                return bad(format!("order is not a permutation of 0..{n}"));
            }
        }
        if self.grouping.contains(&0) {
            return bad("group sizes must be positive".into());
        }
        let total: usize = self.grouping.iter().sum();
        if total != n {
            return bad(format!("grouping sums to {total}, expected {n}"));
        }
        Ok(())
    }

    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut it = self.order.iter().copied();
        self.grouping.iter().map(|&g| it.by_ref().take(g).collect()).collect()
    }
}

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>, ScenarioError> {
    let s = s.trim();
    let items: Vec<&str> = if s.contains(',') {
        s.split(',').map(str::trim).collect()
    } else {
        s.split("").filter(|c| !c.is_empty()).collect()
    };
    if items.is_empty() {
        return Err(ScenarioError::PlanMismatch(format!("empty {what}")));
    }
    items
        .iter()
        .map(|t| {
            usize::from_str(t)
                .map_err(|_| ScenarioError::PlanMismatch(format!("invalid {what} entry {t:?}")))
        })
        .collect()
}

fn require_domains(splits: &Splits) -> Result<(), ScenarioError> {
    let present = splits.train.domains_present();
    for d in 1..=5u8 {
        if !present.contains(&d) {
            return Err(ScenarioError::MissingDomain(d));
        }
    }
    Ok(())
}

/// Assigns each index of every (class, domain) cell to one of `n` parts.
/// Cell remainders go to parts in a rotating order so totals per domain
/// differ by at most one across parts.
fn stratified_parts(
    ds: &Dataset,
    n: usize,
    seed: u64,
    tag: &str,
    min_cell: usize,
) -> Result<Vec<Vec<usize>>, ScenarioError> {
    let mut cells: BTreeMap<(u8, usize), Vec<usize>> = BTreeMap::new();
    let domains: BTreeSet<u8> = ds.patches.iter().filter_map(|p| p.domain_id).collect();
    for &d in &domains {
        for c in 0..ds.n_classes() {
            cells.insert((d, c), Vec::new());
        }
    }
    for (i, p) in ds.patches.iter().enumerate() {
        cells.entry((p.domain_id.unwrap_or(0), p.class_id)).or_default().push(i);
    }
    let mut parts = vec![Vec::new(); n];
    let mut cursor = 0;
    for (cell_idx, ((d, c), mut members)) in cells.into_iter().enumerate() {
        if members.len() < min_cell {
            return Err(ScenarioError::InsufficientData(format!(
                "class {c} in domain {d} has {} patches, need {min_cell}",
                members.len()
            )));
        }
        members.shuffle(&mut rng_for(seed, tag, cell_idx as u64));
        let (q, r) = (members.len() / n, members.len() % n);
        let mut it = members.into_iter();
        for (k, part) in parts.iter_mut().enumerate() {
            let extra = usize::from((k + n - cursor) % n < r);
            part.extend(it.by_ref().take(q + extra));
        }
        cursor = (cursor + r) % n;
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Data-IL: i.i.d. batches, stratified jointly by class and domain.
pub fn build_data_il(splits: &Splits, n_experiences: usize, seed: u64) -> Result<ExperienceStream, ScenarioError> {
    if n_experiences == 0 {
        return Err(ScenarioError::InsufficientData("n_experiences must be positive".into()));
    }
    require_domains(splits)?;
    let tags = ["data-il-train", "data-il-val", "data-il-test"];
    let mut per_part = Vec::new();
    for (i, ds) in splits.parts().into_iter().enumerate() {
        let min_cell = if i == 0 { n_experiences } else { 0 };
        per_part.push(stratified_parts(ds, n_experiences, seed, tags[i], min_cell)?);
    }
    let experiences = (0..n_experiences)
        .map(|k| {
            let pick = |i: usize| splits.parts()[i].subset(&per_part[i][k]);
            Experience::new(
                k,
                Splits {
                    train: pick(0),
                    val: pick(1),
                    test: pick(2),
                },
                None,
            )
        })
        .collect::<Result<_, _>>()?;
    Ok(ExperienceStream {
        kind: ScenarioKind::DataIl,
        experiences,
        task_id_at_test: false,
        class_names: splits.class_names().to_vec(),
    })
}

/// Domain-IL: experience k holds all data of domain `order[k]`.
pub fn build_domain_il(splits: &Splits, order: &[u8]) -> Result<ExperienceStream, ScenarioError> {
    require_domains(splits)?;
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != [1, 2, 3, 4, 5] {
        return Err(ScenarioError::PlanMismatch(format!(
            "domain order {order:?} is not a permutation of 1..5"
        )));
    }
    let experiences = order
        .iter()
        .enumerate()
        .map(|(k, &d)| Experience::new(k, splits.map(|ds| ds.filter(|p| p.domain_id == Some(d))), None))
        .collect::<Result<_, _>>()?;
    Ok(ExperienceStream {
        kind: ScenarioKind::DomainIl,
        experiences,
        task_id_at_test: false,
        class_names: splits.class_names().to_vec(),
    })
}

fn by_class_groups(splits: &Splits, plan: &ClassPlan, tasks: bool) -> Result<Vec<Experience>, ScenarioError> {
    plan.validate(Some(splits.class_names().len()))?;
    plan.groups()
        .iter()
        .enumerate()
        .map(|(k, group)| {
            let parts = splits.map(|ds| {
                let mut out = ds.filter(|p| group.contains(&p.class_id));
                if tasks {
                    for p in &mut out.patches {
                        p.task_id = Some(k);
                    }
                }
                out
            });
            Experience::new(k, parts, tasks.then_some(k))
        })
        .collect()
}

/// Class-IL: experience k holds every example of the k-th class group.
pub fn build_class_il(splits: &Splits, plan: &ClassPlan) -> Result<ExperienceStream, ScenarioError> {
    Ok(ExperienceStream {
        kind: ScenarioKind::ClassIl,
        experiences: by_class_groups(splits, plan, false)?,
        task_id_at_test: false,
        class_names: splits.class_names().to_vec(),
    })
}

/// Task-IL: the Class-IL grouping with the experience index as task id.
pub fn build_task_il(splits: &Splits, plan: &ClassPlan) -> Result<ExperienceStream, ScenarioError> {
    Ok(ExperienceStream {
        kind: ScenarioKind::TaskIl,
        experiences: by_class_groups(splits, plan, true)?,
        task_id_at_test: true,
        class_names: splits.class_names().to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TumorOrder {
    AFirst,
    BFirst,
}

/// Binary relabeling onto `["non_tumor", "tumor"]`; `positive` names the
/// tumor class of `ds`.
pub fn harmonize_binary(ds: &Dataset, positive: &str) -> Result<Dataset, ScenarioError> {
    let pos = ds.class_names.iter().position(|c| c == positive).ok_or_else(|| {
        ScenarioError::LabelSpaceMismatch(ds.class_names.clone(), vec![positive.to_string()])
    })?;
    let mut out = ds.clone();
    out.class_names = vec!["non_tumor".into(), "tumor".into()];
    for p in &mut out.patches {
        p.class_id = usize::from(p.class_id == pos);
    }
    Ok(out)
}

/// Seeded class-stratified subsample of exactly `n` patches (input order kept).
fn subsample(ds: &Dataset, n: usize, seed: u64, tag: &str) -> Dataset {
    if n >= ds.len() {
        return ds.clone();
    }
    let groups = ds.indices_by_class();
    let sizes: Vec<f64> = groups.iter().map(|g| g.len() as f64 / ds.len() as f64).collect();
    let quotas = allocate_counts(n, &sizes);
    let mut keep: Vec<usize> = Vec::with_capacity(n);
    for (c, (mut g, q)) in groups.into_iter().zip(quotas).enumerate() {
        g.shuffle(&mut rng_for(seed, tag, c as u64));
        keep.extend(g.into_iter().take(q));
    }
    keep.sort_unstable();
    ds.subset(&keep)
}

/// Two experiences, one per tumor type (domain 1 = `a`, domain 2 = `b`).
/// Training volume of the second experience is `volume_ratio` times the
/// first, subsampling whichever side is too large.
pub fn build_two_tumor_domain_il(
    a: &Splits,
    b: &Splits,
    order: TumorOrder,
    volume_ratio: f64,
    seed: u64,
) -> Result<ExperienceStream, ScenarioError> {
    if a.class_names() != b.class_names() {
        return Err(ScenarioError::LabelSpaceMismatch(
            a.class_names().to_vec(),
            b.class_names().to_vec(),
        ));
    }
    if !(volume_ratio.is_finite() && volume_ratio > 0.0) {
        return Err(ScenarioError::InsufficientData(format!(
            "volume ratio must be positive, got {volume_ratio}"
        )));
    }
    let tag = |s: &Splits, d: u8| {
        s.map(|ds| {
            let mut out = ds.clone();
            for p in &mut out.patches {
                p.domain_id = Some(d);
            }
            out
        })
    };
    let (mut first, mut second) = match order {
        TumorOrder::AFirst => (tag(a, 1), tag(b, 2)),
        TumorOrder::BFirst => (tag(b, 2), tag(a, 1)),
    };
    let (f, s) = (first.train.len(), second.train.len());
    let want_s = (volume_ratio * f as f64).round() as usize;
    if s >= want_s {
        second.train = subsample(&second.train, want_s, seed, "tumor-second");
    } else {
        let f_new = ((s as f64 / volume_ratio).floor() as usize).min(f);
        first.train = subsample(&first.train, f_new, seed, "tumor-first");
        let s_new = (volume_ratio * f_new as f64).round() as usize;
        second.train = subsample(&second.train, s_new, seed, "tumor-second");
    }
    let experiences = vec![Experience::new(0, first, None)?, Experience::new(1, second, None)?];
    Ok(ExperienceStream {
        kind: ScenarioKind::DomainIl,
        experiences,
        task_id_at_test: false,
        class_names: a.class_names().to_vec(),
    })
}
