//! Desk-scale acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::time::Instant;

use common::gradcheck;
use histocl::data::RgbImage;
use histocl::harness::{self, RunConfig, RunHooks, RunResult, Sources};
use histocl::nn::Checkpoint;
use histocl::rng::rng_for;
use histocl::stain::{remix, unmix, StainMatrix};
use histocl::strategy::{agem_project, herding_select, Regime};
use rand::Rng;
use serde_json::{json, Value};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Synthetic 6-class, 200 per class, 32×32; 70/10/20 split; lr 0.01.
fn desk(scenario: Value, strategy: Value) -> RunConfig {
    let cfg: RunConfig = serde_json::from_value(json!({
        "data": {
            "source": {"kind": "synth", "classes": 6, "per_class": 200, "side": 32, "seed": 0},
            "split": {"train": 0.7, "val": 0.1, "test": 0.2, "seed": 0}
        },
        "scenario": scenario,
        "strategy": strategy,
        "train": {"epochs": 15, "batch_size": 16, "seeds": SEEDS, "sgd": {"lr": 0.01}}
    }))
    .expect("desk config");
    cfg.validate().expect("valid desk config");
    cfg
}

fn class_il(strategy: Value) -> RunConfig {
    desk(json!({"kind": "class_il", "grouping": "222"}), strategy)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn final_acc(r: &RunResult) -> f64 {
    r.aggregate.acc.mean
}

// 1 ------------------------------------------------------------------------

fn stain_roundtrip() -> Outcome {
    let m = StainMatrix::default();
    let mut rng = rng_for(11, "acceptance-stain", 0);
    let mut worst = 0i16;
    for _ in 0..1000 {
        let raw: Vec<u8> = (0..16 * 16 * 3).map(|_| rng.gen_range(10..=245)).collect();
        let img = RgbImage::from_raw(16, 16, raw);
        let back = remix(&unmix(&img, &m).expect("invertible basis"), &m, [1.0; 3]);
        for (a, b) in img.as_raw().iter().zip(back.as_raw()) {
            worst = worst.max((i16::from(*a) - i16::from(*b)).abs());
        }
    }
    let mut coef_err = 0.0f64;
    for _ in 0..1000 {
        let c = [rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..0.5)];
        let got = m.solve(m.combine(c)).expect("invertible basis");
        for k in 0..3 {
            coef_err = coef_err.max((got[k] - c[k]).abs());
        }
    }
    outcome(
        worst <= 2 && coef_err <= 1e-4,
        format!("max channel deviation {worst} (≤ 2), max coefficient error {coef_err:.1e} (≤ 1e-4)"),
    )
}

// 2 ------------------------------------------------------------------------

fn gradient_fidelity() -> Outcome {
    let names = ["cross-entropy", "distillation", "EWC", "PPP", "all"];
    let mut worst = [0.0f64; 5];
    let mut kinks = 0;
    let mut n_params = 0;
    let mut fine = 0.0f64;
    for seed in 0..20 {
        let f = gradcheck::fixture(seed);
        n_params = f.params.len();
        let terms = gradcheck::all_terms(&f, seed);
        for (i, t) in terms.iter().enumerate() {
            let r = gradcheck::check(&f, std::slice::from_ref(t));
            worst[i] = worst[i].max(r.max_rel);
            kinks += r.kinks;
        }
        worst[4] = worst[4].max(gradcheck::check(&f, &terms).max_rel);
        fine = fine.max(gradcheck::max_rel_at(&f, &terms, gradcheck::KINK_EPS));
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    let per_term: Vec<String> = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.3e}")).collect();
    outcome(
        max <= 1e-3 && n_params <= 500,
        format!(
            "max relative error per term over 20 seeds: {} (≤ 1e-3); {n_params} params, {kinks} kink re-probes; all terms at ε = 1e-6 on every coordinate: {fine:.1e}",
            per_term.join(", ")
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn agem_projection() -> Outcome {
    let mut rng = rng_for(12, "acceptance-agem", 0);
    let mut min_dot = f64::INFINITY;
    let mut passthrough_exact = true;
    let mut conflicts = 0;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=64);
        let g: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = agem_project(&g, &r).expect("non-zero reference");
        let dot_in: f64 = g.iter().zip(&r).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
        let dot_out: f64 = out.iter().zip(&r).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
        if dot_in >= 0.0 {
            passthrough_exact &= out == g;
        } else {
            conflicts += 1;
            min_dot = min_dot.min(dot_out);
        }
    }
    let hand = agem_project(&[1.0, 0.0], &[-1.0, 1.0]).expect("non-zero reference");
    let hand_ok = hand == [0.5, 0.5];
    outcome(
        min_dot >= -1e-6 && passthrough_exact && hand_ok,
        format!("min projected·g_ref {min_dot:.1e} over {conflicts} conflicts, non-conflict exact: {passthrough_exact}, ((1,0),(−1,1)) → {hand:?}"),
    )
}

// 4 ------------------------------------------------------------------------

/// Per-step exhaustive argmin: recomputes every candidate mean from scratch.
fn herding_oracle(rows: &[Vec<f64>], m: usize) -> Vec<usize> {
    let n = rows.len();
    let d = rows[0].len();
    let mu: Vec<f64> = (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n as f64).collect();
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..m.min(n) {
        let mut best = (f64::INFINITY, usize::MAX);
        for i in 0..n {
            if chosen.contains(&i) {
                continue;
            }
            let set: Vec<usize> = chosen.iter().copied().chain([i]).collect();
            let dist: f64 = (0..d)
                .map(|k| {
                    let avg = set.iter().map(|&j| rows[j][k]).sum::<f64>() / set.len() as f64;
                    (mu[k] - avg).powi(2)
                })
                .sum();
            if dist < best.0 {
                best = (dist, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

fn herding() -> Outcome {
    let mut rng = rng_for(13, "acceptance-herding", 0);
    let mut matches = 0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=8);
        let m = rng.gen_range(1..=3);
        let d = rng.gen_range(2..=6);
        let mut flat = Vec::with_capacity(n * d);
        for _ in 0..n {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            flat.extend(v.iter().map(|x| (x / norm) as f32));
        }
        let rows: Vec<Vec<f64>> = flat.chunks(d).map(|r| r.iter().map(|&x| f64::from(x)).collect()).collect();
        if herding_select(&flat, d, m) == herding_oracle(&rows, m) {
            matches += 1;
        }
    }
    outcome(matches == 100, format!("{matches}/100 instances match the exhaustive oracle"))
}

// 5, 6, 10 -------------------------------------------------------------------

struct Suite {
    runs: BTreeMap<&'static str, RunResult>,
    task_il_finetune: RunResult,
}

fn run(cfg: &RunConfig, sources: &Sources) -> RunResult {
    harness::run_with_sources(cfg, sources).expect("desk run")
}

fn desk_suite() -> Suite {
    let base = class_il(json!({"name": "finetune"}));
    let sources = harness::load_sources(&base).expect("desk data");
    let mut runs = BTreeMap::new();
    for name in ["finetune", "joint", "ewc", "online_ewc", "lwf", "icarl", "agem", "cope"] {
        let started = Instant::now();
        let r = run(&class_il(json!({ "name": name })), &sources);
        println!(
            "    class_il {name:<10} ACC {:.4} ± {:.4}  BWT {:+.4}  ({:.1} s)",
            r.aggregate.acc.mean,
            r.aggregate.acc.std,
            r.aggregate.bwt.mean,
            started.elapsed().as_secs_f64()
        );
        runs.insert(name, r);
    }
    let til = desk(json!({"kind": "task_il", "grouping": "222"}), json!({"name": "finetune"}));
    let task_il_finetune = run(&til, &sources);
    println!(
        "    task_il  finetune   ACC {:.4} ± {:.4}",
        task_il_finetune.aggregate.acc.mean, task_il_finetune.aggregate.acc.std
    );
    Suite { runs, task_il_finetune }
}

fn forgetting(s: &Suite) -> Outcome {
    let ft = &s.runs["finetune"];
    let exp0 = mean(ft.seeds.iter().map(|r| {
        let last = r.acc_matrix.size() - 1;
        r.acc_matrix.values[last][0]
    }));
    let gap = final_acc(&s.runs["icarl"]) - final_acc(ft);
    let joint = final_acc(&s.runs["joint"]);
    let worst_margin = s
        .runs
        .iter()
        .filter(|(n, _)| !matches!(**n, "joint" | "finetune"))
        .map(|(_, r)| joint - final_acc(r))
        .fold(f64::INFINITY, f64::min);
    outcome(
        exp0 <= 0.10 && gap >= 0.20 && worst_margin >= -0.03,
        format!(
            "finetune exp-0 after last {:.1}% (≤ 10), iCaRL − finetune {:+.1} pts (≥ 20), joint − best CL {:+.1} pts (≥ −3)",
            100.0 * exp0,
            100.0 * gap,
            100.0 * worst_margin
        ),
    )
}

fn task_vs_class(s: &Suite) -> Outcome {
    let gap = final_acc(&s.task_il_finetune) - final_acc(&s.runs["finetune"]);
    outcome(gap >= 0.15, format!("Task-IL − Class-IL finetune {:+.1} pts (≥ 15)", 100.0 * gap))
}

fn memory_contracts(s: &Suite) -> Outcome {
    let mut exemplar_ok = true;
    let mut max_exemplars = 0;
    for r in &s.runs["icarl"].seeds {
        for e in &r.experiences {
            let (n, k) = (e.memory.exemplars.unwrap_or(usize::MAX), e.memory.exemplar_budget.unwrap_or(0));
            exemplar_ok &= n <= k;
            max_exemplars = max_exemplars.max(n);
        }
    }
    let mut balanced_every_insert = true;
    let mut spread = 0;
    let mut norm_err = 0.0f64;
    for r in &s.runs["cope"].seeds {
        for e in &r.experiences {
            balanced_every_insert &= e.memory.buffer_balanced == Some(true);
            let counts: Vec<usize> = e.memory.buffer_class_counts.iter().flatten().map(|(_, n)| *n).collect();
            if let (Some(max), Some(min)) = (counts.iter().max(), counts.iter().min()) {
                spread = spread.max(max - min);
            }
            norm_err = norm_err.max(e.memory.prototype_max_norm_error.unwrap_or(f64::INFINITY));
        }
    }
    outcome(
        exemplar_ok && balanced_every_insert && spread <= 1 && norm_err <= 1e-5,
        format!(
            "iCaRL exemplars ≤ K: {exemplar_ok} (max {max_exemplars}), CoPE balance after every insert: {balanced_every_insert}, per-class spread at experience ends {spread} (≤ 1), prototype norm error {norm_err:.1e} (≤ 1e-5)"
        ),
    )
}

// 7 ------------------------------------------------------------------------

fn trajectory(cfg: &RunConfig, sources: &Sources, seed: u64) -> Vec<u64> {
    let stream = harness::build_stream(cfg, sources, seed).expect("stream");
    let mut hashes = Vec::new();
    let mut record = |_: usize, params: &[f32]| {
        let mut h = DefaultHasher::new();
        for p in params {
            p.to_bits().hash(&mut h);
        }
        hashes.push(h.finish());
    };
    let hooks = RunHooks {
        on_step: Some(&mut record),
        checkpoint_dir: None,
    };
    harness::run_seed(cfg, &stream, seed, hooks).expect("baseline run");
    hashes
}

fn baseline_equivalence() -> Outcome {
    let short = |strategy: Value, regime: &str| {
        let mut cfg = class_il(strategy);
        cfg.train.epochs = 2;
        cfg.train.regime = serde_json::from_value(json!(regime)).expect("regime");
        cfg
    };
    let sources = harness::load_sources(&short(json!({"name": "finetune"}), "offline")).expect("desk data");
    let seed = 7;
    let offline = trajectory(&short(json!({"name": "finetune"}), "offline"), &sources, seed);
    let online = trajectory(&short(json!({"name": "finetune"}), "online"), &sources, seed);
    let cases = [
        (json!({"name": "ewc", "lambda": 0.0}), &offline),
        (json!({"name": "online_ewc", "lambda": 0.0}), &offline),
        (json!({"name": "lwf", "lambda_o": 0.0}), &offline),
        (json!({"name": "icarl", "memory_size": 0, "lambda_o": 0.0}), &offline),
        (json!({"name": "agem", "capacity": 0}), &online),
    ];
    let mut failed = Vec::new();
    for (strategy, reference) in cases {
        let name = strategy["name"].as_str().unwrap_or_default().to_string();
        if &trajectory(&short(strategy, "offline"), &sources, seed) != reference {
            failed.push(name);
        }
    }
    outcome(
        failed.is_empty() && !offline.is_empty(),
        format!(
            "ewc, online_ewc, lwf, icarl vs offline finetune and agem vs online finetune over {} / {} steps; mismatches: {failed:?}",
            offline.len(),
            online.len()
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn metrics() -> Outcome {
    let m = harness::AccMatrix::new(vec![vec![0.9, 0.1], vec![0.7, 0.8]]).expect("valid matrix");
    let r = harness::compute_metrics(&m, &[0.5, 0.5]).expect("metrics");
    let mut rng = rng_for(14, "acceptance-metrics", 0);
    let mut constant_zero = true;
    for _ in 0..100 {
        let t = rng.gen_range(1..=6);
        let row: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let m = harness::AccMatrix::new(vec![row; t]).expect("valid matrix");
        constant_zero &= harness::compute_metrics(&m, &vec![0.0; t]).expect("metrics").bwt == 0.0;
    }
    outcome(
        r.acc == 0.75 && r.bwt == -0.2 && constant_zero,
        format!("ACC {} BWT {} on the 2×2 example, BWT = 0 on 100 constant-row matrices: {constant_zero}", r.acc, r.bwt),
    )
}

// 9 ------------------------------------------------------------------------

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let out = dir.path().join("run");
    let mut cfg = class_il(json!({"name": "cope"}));
    cfg.output.dir = Some(out.clone());
    cfg.output.checkpoints = true;
    let a = harness::run_experiment(&cfg).expect("cope run");
    harness::write_results(&a, &out).expect("write");
    let ja = std::fs::read(out.join("result.json")).expect("first result");
    let ck_dir = dir.path().join("first-checkpoints");
    std::fs::rename(out.join("checkpoints"), &ck_dir).expect("move checkpoints");
    let b = harness::run_experiment(&cfg).expect("cope run");
    harness::write_results(&b, &out).expect("write");
    let jb = std::fs::read(out.join("result.json")).expect("second result");
    let identical = ja == jb;

    let mut ck_files = 0;
    let mut ck_repeat = true;
    let mut ck_exact = true;
    for entry in std::fs::read_dir(&ck_dir).expect("checkpoints") {
        let path = entry.expect("entry").path();
        let bytes = std::fs::read(&path).expect("checkpoint bytes");
        let ck = Checkpoint::load(&path).expect("checkpoint loads");
        ck_exact &= ck.to_bytes().expect("checkpoint encodes") == bytes;
        let again = out.join("checkpoints").join(path.file_name().expect("file name"));
        ck_repeat &= std::fs::read(again).ok().as_ref() == Some(&bytes);
        ck_files += 1;
    }

    let mut minis_ok = true;
    let mut single_visit = true;
    for r in &a.seeds {
        for e in &r.experiences {
            let (last, full) = e.mini_experience_sizes.split_last().expect("at least one mini-experience");
            minis_ok &= full.iter().all(|&s| s == 128) && *last <= 128 && *last > 0;
            minis_ok &= e.regime == Regime::OnlineMini;
            single_visit &= e.min_visits == 1 && e.max_visits == 1;
        }
    }
    let agem = harness::run_experiment(&class_il(json!({"name": "agem"}))).expect("agem run");
    for r in &agem.seeds {
        for e in &r.experiences {
            single_visit &= e.regime == Regime::Online && e.min_visits == 1 && e.max_visits == 1;
        }
    }
    let sizes = &a.seeds[0].experiences[0].mini_experience_sizes;
    outcome(
        identical && ck_exact && ck_repeat && ck_files > 0 && minis_ok && single_visit,
        format!(
            "result.json identical across reruns: {identical}, {ck_files} checkpoints byte-exact after load/save: {ck_exact} and across reruns: {ck_repeat}, CoPE mini-experiences {sizes:?}, one visit per example (CoPE, A-GEM): {single_visit}"
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        // test-harness protocol: nothing to enumerate
        return;
    }
    // optional criterion numbers restrict the run, e.g. `-- 5 9`
    let only: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let selected = |n: usize| only.is_empty() || only.contains(&n);
    harness::configure_threads().expect("HISTOCL_THREADS");
    let started = Instant::now();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut record = |n: usize, title: &str, f: &dyn Fn() -> Outcome| {
        if !selected(n) {
            return;
        }
        let t = Instant::now();
        let o = f();
        println!(
            "criterion {n:>2} [{}] {title}: {} ({:.1} s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
        results.push((n, o));
    };
    record(1, "stain roundtrip", &stain_roundtrip);
    record(2, "gradient fidelity", &gradient_fidelity);
    record(3, "A-GEM projection", &agem_projection);
    record(4, "herding oracle", &herding);
    let suite = [5, 6, 10].into_iter().any(selected).then(|| {
        println!("    running the desk suite (Class-IL, 8 strategies × 3 seeds; Task-IL finetune)");
        desk_suite()
    });
    if let Some(suite) = &suite {
        record(5, "catastrophic forgetting ordering", &|| forgetting(suite));
        record(6, "Task-IL vs Class-IL", &|| task_vs_class(suite));
    }
    record(7, "baseline equivalence", &baseline_equivalence);
    record(8, "metrics", &metrics);
    record(9, "determinism and persistence", &determinism);
    if let Some(suite) = &suite {
        record(10, "buffer and memory contracts", &|| memory_contracts(suite));
    }
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.1} s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
