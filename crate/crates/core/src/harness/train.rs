use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, RunConfig, ScenarioConfig};
use super::metrics::{aggregate, compute_metrics, AccMatrix, Aggregate, Metrics};
use super::HarnessError;
use crate::data::{downscale, load_domain_folder, load_folder, split, synth_generate, Dataset, Patch, SynthParams};
use crate::nn::{l2_normalize, loss_and_backward, nearest_mean_classify, sgd_step, Checkpoint, ModelSpec, Model, OptimizerState};
use crate::rng::{derive_seed, rng_for};
use crate::scenario::{
    build_class_il, build_data_il, build_domain_il, build_task_il, build_two_tumor_domain_il, harmonize_binary,
    ClassPlan, ExperienceStream, Splits, StreamManifest,
};
use crate::stain::build_augmented_dataset;
use crate::strategy::{ClassifierMode, Ctx, MemoryReport, Regime, Strategy, StrategyError, TrainBatch, MINI_EXPERIENCE};

/// Split datasets a run draws its streams from.
#[derive(Debug, Clone, PartialEq)]
pub struct Sources {
    pub first: Splits,
    pub second: Option<Splits>,
}

fn load_source(src: &DataSource) -> Result<Dataset, HarnessError> {
    Ok(match src {
        DataSource::Synth {
            classes,
            per_class,
            side,
            seed,
        } => synth_generate(&SynthParams {
            classes: *classes,
            per_class: *per_class,
            side: *side,
            seed: *seed,
        })?,
        DataSource::Folder { path, classes, domains } => {
            if *domains {
                load_domain_folder(path, classes.as_deref())?
            } else {
                load_folder(path, classes.as_deref())?
            }
        }
    })
}

fn prepare(cfg: &RunConfig, src: &DataSource, positive: Option<&str>) -> Result<Splits, HarnessError> {
    let mut ds = load_source(src)?;
    if let Some(side) = cfg.data.resize {
        ds.patches = ds.patches.par_iter().map(|p| downscale(p, side)).collect();
    }
    if let Some(aug) = &cfg.data.augment {
        ds = build_augmented_dataset(&ds, &aug.domains, &aug.stain_matrix, aug.seed)?;
    }
    if let Some(pos) = positive {
        ds = harmonize_binary(&ds, pos)?;
    }
    let (train, val, test) = split(&ds, &cfg.data.split)?;
    Ok(Splits { train, val, test })
}

/// Loads, resizes, augments and splits the configured data.
pub fn load_sources(cfg: &RunConfig) -> Result<Sources, HarnessError> {
    match &cfg.scenario {
        ScenarioConfig::TwoTumor {
            second,
            positive_first,
            positive_second,
            ..
        } => Ok(Sources {
            first: prepare(cfg, &cfg.data.source, positive_first.as_deref())?,
            second: Some(prepare(cfg, second, positive_second.as_deref())?),
        }),
        _ => Ok(Sources {
            first: prepare(cfg, &cfg.data.source, None)?,
            second: None,
        }),
    }
}

fn plan(order: &Option<String>, grouping: &str, n_classes: usize) -> Result<ClassPlan, HarnessError> {
    let plan = match order {
        Some(o) => ClassPlan::parse(o, grouping)?,
        None => {
            let identity: String = (1..=n_classes).map(|c| c.to_string()).collect::<Vec<_>>().join(",");
            ClassPlan::parse(&identity, grouping)?
        }
    };
    plan.validate(Some(n_classes))?;
    Ok(plan)
}

/// Builds the experience stream of one seed.
pub fn build_stream(cfg: &RunConfig, sources: &Sources, seed: u64) -> Result<ExperienceStream, HarnessError> {
    let s = &sources.first;
    let n = s.train.n_classes();
    Ok(match &cfg.scenario {
        ScenarioConfig::DataIl { n_experiences } => build_data_il(s, *n_experiences, derive_seed(seed, "data-il", 0))?,
        ScenarioConfig::DomainIl { order } => build_domain_il(s, order)?,
        ScenarioConfig::ClassIl { order, grouping } => build_class_il(s, &plan(order, grouping, n)?)?,
        ScenarioConfig::TaskIl { order, grouping } => build_task_il(s, &plan(order, grouping, n)?)?,
        ScenarioConfig::TwoTumor {
            order, volume_ratio, ..
        } => {
            let second = sources.second.as_ref().expect("two-tumor sources carry a second dataset");
            build_two_tumor_domain_il(s, second, *order, *volume_ratio, derive_seed(seed, "two-tumor", 0))?
        }
    })
}

/// What happened while training one experience.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceLog {
    pub experience: usize,
    pub regime: Regime,
    pub epochs: usize,
    pub train_size: usize,
    pub steps: usize,
    /// Sizes of the mini-experiences (one entry per chunk and epoch).
    pub mini_experience_sizes: Vec<usize>,
    pub min_visits: usize,
    pub max_visits: usize,
    pub last_loss: f64,
    pub memory: MemoryReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub acc_matrix: AccMatrix,
    pub chance: Vec<f64>,
    pub metrics: Metrics,
    /// Mean accuracy over the validation sets after the last experience.
    pub val_acc: Option<f64>,
    pub experiences: Vec<ExperienceLog>,
    /// Wall-clock seconds per experience (training plus evaluation).
    #[serde(skip)]
    pub seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub schema_version: u32,
    pub config: RunConfig,
    pub stream: StreamManifest,
    pub seeds: Vec<SeedRun>,
    pub aggregate: Aggregate,
}

/// Receives the global step index and the parameters after that step.
pub type StepObserver<'a> = &'a mut dyn FnMut(usize, &[f32]);

/// Observer hooks for one training run.
#[derive(Default)]
pub struct RunHooks<'a> {
    pub on_step: Option<StepObserver<'a>>,
    /// Directory for per-experience checkpoints.
    pub checkpoint_dir: Option<&'a Path>,
}

fn ctx_err(seed: u64, experience: usize, step: Option<usize>) -> impl Fn(StrategyError) -> HarnessError {
    move |source| HarnessError::Training {
        seed,
        experience,
        step,
        source,
    }
}

/// Correct predictions on `test` after training through experience `trained`.
pub fn evaluate(
    ctx: &Ctx,
    strategy: &dyn Strategy,
    model: &Model,
    trained: usize,
    test_exp: usize,
    test: &Dataset,
) -> Result<usize, StrategyError> {
    if test.is_empty() {
        return Ok(0);
    }
    let stream = ctx.stream;
    let candidates = stream.candidates(trained, test_exp);
    let images: Vec<_> = test.patches.iter().map(|p| &p.pixels).collect();
    let predictions: Vec<Option<usize>> = match strategy.classifier_mode() {
        ClassifierMode::Head => {
            let heads: Vec<usize> = test.patches.iter().map(|p| ctx.slot(p).0).collect();
            let logits = model.logits(&images, &heads)?;
            test.patches
                .iter()
                .zip(&logits)
                .map(|(p, row)| {
                    let mut best: Option<(f64, usize)> = None;
                    for &c in &candidates {
                        let (h, o) = stream.slot(c, p.task_id);
                        if h != ctx.slot(p).0 {
                            continue;
                        }
                        if best.is_none_or(|(b, _)| row[o] > b) {
                            best = Some((row[o], c));
                        }
                    }
                    best.map(|(_, c)| c)
                })
                .collect()
        }
        ClassifierMode::NearestMeanOfExemplars | ClassifierMode::Prototypes => {
            let means: Vec<(usize, Vec<f32>)> = strategy
                .class_means(ctx, model)?
                .into_iter()
                .filter(|(c, _)| candidates.contains(c))
                .collect();
            let d = model.spec.feature_dim;
            let mut feats = model.features(&images)?;
            feats
                .chunks_mut(d)
                .map(|row| {
                    l2_normalize(row);
                    nearest_mean_classify(row, &means)
                })
                .collect()
        }
    };
    Ok(test
        .patches
        .iter()
        .zip(predictions)
        .filter(|(p, pred)| *pred == Some(p.class_id))
        .count())
}

/// Trains one seed over the stream and fills its accuracy matrix.
pub fn run_seed(
    cfg: &RunConfig,
    stream: &ExperienceStream,
    seed: u64,
    hooks: RunHooks,
) -> Result<SeedRun, HarnessError> {
    let RunHooks {
        mut on_step,
        checkpoint_dir,
    } = hooks;
    let side = stream
        .experiences
        .first()
        .and_then(|e| e.train.patches.first())
        .map(|p| p.side() as usize)
        .ok_or_else(|| HarnessError::Config("empty stream".into()))?;
    let spec = ModelSpec::with_blocks(side, cfg.model.blocks.clone(), stream.heads(), derive_seed(seed, "init", 0));
    let mut model = Model::init(spec)?;
    let mut strategy = cfg.strategy.build(derive_seed(seed, "strategy", 0)).map_err(ctx_err(seed, 0, None))?;
    let (regime, epochs) = cfg.effective_regime();
    debug_assert_eq!(strategy.regime().unwrap_or(cfg.train.regime), regime);
    let mut opt = OptimizerState::new(model.params.len(), &cfg.train.sgd);
    let ctx = Ctx { stream, seed };
    let t = stream.len();
    let mut rows = Vec::with_capacity(t);
    let mut logs = Vec::with_capacity(t);
    let mut seconds = Vec::with_capacity(t);
    let mut global_step = 0usize;

    for k in 0..t {
        let started = Instant::now();
        let err = ctx_err(seed, k, None);
        strategy.on_experience_start(&ctx, k, &model).map_err(&err)?;
        let data = strategy.training_set(&ctx, k);
        opt.reset();
        let mut visits = vec![0usize; data.len()];
        let mut minis = Vec::new();
        let mut steps = 0;
        let mut last_loss = 0.0;
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng_for(seed, "batch-order", ((k as u64) << 32) | epoch as u64));
            let chunk = if regime == Regime::OnlineMini { MINI_EXPERIENCE } else { order.len().max(1) };
            for mini in order.chunks(chunk) {
                minis.push(mini.len());
                for idx in mini.chunks(cfg.train.batch_size) {
                    let step_err = ctx_err(seed, k, Some(global_step));
                    let mut patches: Vec<Patch> = idx.iter().map(|&i| data[i].clone()).collect();
                    for &i in idx {
                        visits[i] += 1;
                    }
                    let n_new = patches.len();
                    strategy.extend_batch(&ctx, &model, &mut patches).map_err(&step_err)?;
                    let batch = TrainBatch::new(&ctx, patches, n_new).map_err(&step_err)?;
                    let terms = strategy.loss_terms(&ctx, &model, &batch).map_err(&step_err)?;
                    let (loss, grads) = loss_and_backward(&model.params.values, &model.spec, &batch.inputs, &terms)
                        .map_err(|e| step_err(e.into()))?;
                    let grads = strategy.transform_gradient(&ctx, &model, grads).map_err(&step_err)?;
                    sgd_step(&mut model.params.values, &grads, &mut opt, epoch).map_err(|e| step_err(e.into()))?;
                    strategy.after_step(&ctx, &model, &batch).map_err(&step_err)?;
                    if let Some(f) = on_step.as_mut() {
                        f(global_step, &model.params.values);
                    }
                    last_loss = loss;
                    steps += 1;
                    global_step += 1;
                }
            }
        }
        strategy.on_experience_end(&ctx, k, &model).map_err(&err)?;

        let row = stream
            .experiences
            .par_iter()
            .map(|e| {
                let correct = evaluate(&ctx, strategy.as_ref(), &model, k, e.index, &e.test)?;
                Ok(correct as f64 / e.test.len() as f64)
            })
            .collect::<Result<Vec<f64>, StrategyError>>()
            .map_err(&err)?;
        rows.push(row);
        if let Some(dir) = checkpoint_dir {
            let mut ck = Checkpoint::new(model.spec.clone(), model.params.clone());
            strategy.export_memory(&mut ck);
            ck.meta.insert("experience".into(), k.into());
            ck.meta.insert("seed".into(), seed.into());
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
            ck.save(&dir.join(format!("seed_{seed}_exp_{k}.cldp")))?;
        }
        logs.push(ExperienceLog {
            experience: k,
            regime,
            epochs,
            train_size: data.len(),
            steps,
            mini_experience_sizes: minis,
            min_visits: visits.iter().copied().min().unwrap_or(0),
            max_visits: visits.iter().copied().max().unwrap_or(0),
            last_loss,
            memory: strategy.report(),
        });
        seconds.push(started.elapsed().as_secs_f64());
    }

    let val_sets: Vec<_> = stream.experiences.iter().filter(|e| !e.val.is_empty()).collect();
    let val_acc = if val_sets.is_empty() {
        None
    } else {
        let mut sum = 0.0;
        for e in &val_sets {
            let correct = evaluate(&ctx, strategy.as_ref(), &model, t - 1, e.index, &e.val).map_err(ctx_err(seed, t - 1, None))?;
            sum += correct as f64 / e.val.len() as f64;
        }
        Some(sum / val_sets.len() as f64)
    };
    let chance: Vec<f64> = (0..t).map(|j| stream.chance(j)).collect();
    let acc_matrix = AccMatrix::new(rows)?;
    let metrics = compute_metrics(&acc_matrix, &chance)?;
    Ok(SeedRun {
        seed,
        acc_matrix,
        chance,
        metrics,
        val_acc,
        experiences: logs,
        seconds,
    })
}

/// Runs every configured seed (in parallel) and aggregates the metrics.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunResult, HarnessError> {
    cfg.validate()?;
    let sources = load_sources(cfg)?;
    run_with_sources(cfg, &sources)
}

/// [`run_experiment`] on already loaded data.
pub fn run_with_sources(cfg: &RunConfig, sources: &Sources) -> Result<RunResult, HarnessError> {
    let ckpt_dir = cfg
        .output
        .dir
        .as_ref()
        .filter(|_| cfg.output.checkpoints)
        .map(|d| d.join("checkpoints"));
    if let Some(dir) = &cfg.output.dir {
        let first = build_stream(cfg, sources, cfg.train.seeds[0])?;
        super::output::write_manifest(&first.manifest(), dir)?;
    }
    let runs: Vec<(SeedRun, StreamManifest)> = cfg
        .train
        .seeds
        .par_iter()
        .map(|&seed| {
            let stream = build_stream(cfg, sources, seed)?;
            let hooks = RunHooks {
                on_step: None,
                checkpoint_dir: ckpt_dir.as_deref(),
            };
            Ok((run_seed(cfg, &stream, seed, hooks)?, stream.manifest()))
        })
        .collect::<Result<_, HarnessError>>()?;
    let stream = runs[0].1.clone();
    let seeds: Vec<SeedRun> = runs.into_iter().map(|(r, _)| r).collect();
    let aggregate = aggregate(&seeds.iter().map(|s| s.metrics).collect::<Vec<_>>());
    Ok(RunResult {
        schema_version: super::config::SCHEMA_VERSION,
        config: cfg.clone(),
        stream,
        seeds,
        aggregate,
    })
}
