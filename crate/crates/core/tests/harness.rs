use std::collections::BTreeMap;

use histocl::harness::{
    self, enumerate_grid, grid_search, read_result, result_json, run_experiment, write_results, HarnessError,
    RunConfig,
};
use histocl::strategy::Regime;
use serde_json::json;

fn config(scenario: serde_json::Value, strategy: serde_json::Value, epochs: usize) -> RunConfig {
    let v = json!({
        "data": {
            "source": {"kind": "synth", "classes": 4, "per_class": 30, "side": 16, "seed": 2},
            "split": {"train": 0.6, "val": 0.2, "test": 0.2},
            "augment": {"seed": 1}
        },
        "scenario": scenario,
        "model": {"blocks": [{"out_channels": 8, "pool": true}, {"out_channels": 8, "pool": false}]},
        "strategy": strategy,
        "train": {"epochs": epochs, "batch_size": 8, "seeds": [5], "sgd": {"lr": 0.01}}
    });
    let cfg: RunConfig = serde_json::from_value(v).unwrap();
    cfg.validate().unwrap();
    cfg
}

fn class_il(strategy: &str, grouping: &str, epochs: usize) -> RunConfig {
    config(json!({"kind": "class_il", "grouping": grouping}), json!({"name": strategy}), epochs)
}

#[test]
fn single_experience_joint_acc_is_the_only_entry() {
    let r = run_experiment(&class_il("joint", "4", 2)).unwrap();
    let s = &r.seeds[0];
    assert_eq!(s.acc_matrix.size(), 1);
    assert_eq!(s.metrics.acc, s.acc_matrix.values[0][0]);
    assert_eq!((s.metrics.bwt, s.metrics.fwt), (0.0, 0.0));
}

#[test]
fn finetune_forgets_disjoint_classes() {
    let r = run_experiment(&class_il("finetune", "22", 6)).unwrap();
    let m = &r.seeds[0].acc_matrix.values;
    assert!(m[0][0] >= 0.8, "{m:?}");
    assert!(m[1][0] <= 0.2, "{m:?}");
}

#[test]
fn entries_are_exact_ratios_and_reruns_match() {
    let cfg = class_il("finetune", "22", 2);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(result_json(&a), result_json(&b));
    for (j, e) in a.stream.experiences.iter().enumerate() {
        let n = e.test.size as f64;
        for row in &a.seeds[0].acc_matrix.values {
            let correct = row[j] * n;
            assert!((correct - correct.round()).abs() < 1e-9, "{} is not k/{n}", row[j]);
        }
    }
}

#[test]
fn joint_trains_on_the_union_so_far() {
    let r = run_experiment(&class_il("joint", "211", 1)).unwrap();
    let sizes: Vec<usize> = r.seeds[0].experiences.iter().map(|e| e.train_size).collect();
    let parts: Vec<usize> = r.stream.experiences.iter().map(|e| e.train.size).collect();
    assert_eq!(sizes, vec![parts[0], parts[0] + parts[1], parts[0] + parts[1] + parts[2]]);
}

#[test]
fn online_regimes_visit_each_example_once() {
    let mut cfg = class_il("finetune", "22", 5);
    cfg.train.regime = Regime::Online;
    let r = run_experiment(&cfg).unwrap();
    for e in &r.seeds[0].experiences {
        assert_eq!((e.epochs, e.min_visits, e.max_visits), (1, 1, 1));
    }
    let r = run_experiment(&class_il("cope", "22", 5)).unwrap();
    for e in &r.seeds[0].experiences {
        assert_eq!(e.regime, Regime::OnlineMini);
        assert_eq!(e.max_visits, 1);
        assert!(e.mini_experience_sizes.iter().all(|&s| s <= 128));
    }
}

#[test]
fn result_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(json!({"kind": "domain_il"}), json!({"name": "finetune"}), 1);
    let r = run_experiment(&cfg).unwrap();
    write_results(&r, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("result.json")).unwrap();
    let back = read_result(&dir.path().join("result.json")).unwrap();
    assert_eq!(result_json(&back), text);

    let csv = std::fs::read_to_string(dir.path().join("acc_matrix_5.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "after_exp,test_0,test_1,test_2,test_3,test_4");
    for (i, line) in lines[1..].iter().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], i.to_string());
        for (j, cell) in cells[1..].iter().enumerate() {
            assert_eq!(cell.split('.').nth(1).unwrap().len(), 5);
            let v: f64 = cell.parse().unwrap();
            assert!((v - r.seeds[0].acc_matrix.values[i][j]).abs() <= 5e-6);
        }
    }

    let svg = std::fs::read_to_string(dir.path().join("curves.svg")).unwrap();
    assert_eq!(svg.matches("<polyline class=\"curve\"").count(), r.stream.experiences.len());
    assert_eq!(r.stream.experiences.len(), 5);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("stream_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experiences"].as_array().unwrap().len(), 5);
    assert!(dir.path().join("timing.json").is_file());
}

#[test]
fn grid_search_covers_the_product() {
    let cfg = config(json!({"kind": "class_il", "grouping": "22"}), json!({"name": "ewc", "fisher_samples": 8}), 1);
    let mut grid = BTreeMap::new();
    grid.insert("strategy.lambda".to_string(), vec![json!(0.0), json!(100.0)]);
    let g = grid_search(&cfg, &grid).unwrap();
    assert_eq!(g.rows.len(), 2);
    let lambdas: Vec<_> = g.rows.iter().map(|r| r.assignment["strategy.lambda"].clone()).collect();
    assert_eq!(lambdas, vec![json!(0.0), json!(100.0)]);
    let best = g.ranking[0];
    assert_eq!(best, g.best_index);
    assert!(g.rows.iter().all(|r| r.val_acc <= g.rows[best].val_acc));
    if g.rows[0].val_acc == g.rows[1].val_acc {
        assert_eq!(best, 0);
    }
    assert_eq!(g.table().lines().count(), 3);

    let mut single = BTreeMap::new();
    single.insert("strategy.lambda".to_string(), vec![json!(3.0)]);
    let g = grid_search(&cfg, &single).unwrap();
    let point = enumerate_grid(&single).remove(0);
    assert_eq!(g.best, harness::apply_overrides(&cfg, &point).unwrap());
    assert_eq!(enumerate_grid(&grid), enumerate_grid(&grid.clone()));
}

#[test]
fn grid_search_needs_validation_data() {
    let mut cfg = class_il("finetune", "22", 1);
    cfg.data.split.train = 0.8;
    cfg.data.split.val = 0.0;
    let mut grid = BTreeMap::new();
    grid.insert("train.sgd.lr".to_string(), vec![json!(0.01)]);
    assert!(matches!(grid_search(&cfg, &grid), Err(HarnessError::Config(_))));
    assert!(grid_search(&class_il("finetune", "22", 1), &BTreeMap::new()).is_err());
}

#[test]
fn training_errors_carry_context() {
    let mut cfg = class_il("finetune", "22", 1);
    cfg.train.sgd.lr = 1e30;
    cfg.train.sgd.momentum = 0.0;
    match run_experiment(&cfg) {
        Err(e @ HarnessError::Training { .. }) => {
            let HarnessError::Training { seed, step, .. } = &e else { unreachable!() };
            assert_eq!(*seed, 5);
            assert!(step.is_some());
            assert!(e.to_string().contains("seed 5"));
        }
        other => panic!("expected a training error, got {other:?}"),
    }
}
