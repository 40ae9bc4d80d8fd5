use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::RunConfig;
use super::output::round5;
use super::train::{load_sources, run_with_sources};
use super::HarnessError;

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    /// Position in the enumeration order.
    pub index: usize,
    pub assignment: BTreeMap<String, Value>,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: RunConfig,
    pub best_index: usize,
    /// Rows in enumeration order.
    pub rows: Vec<GridRow>,
    /// Row indices by decreasing validation accuracy (stable).
    pub ranking: Vec<usize>,
}

impl GridResult {
    pub fn table(&self) -> String {
        let mut out = String::from("rank\tindex\tval_acc\ttest_acc\tassignment\n");
        for (rank, &i) in self.ranking.iter().enumerate() {
            let row = &self.rows[i];
            let assignment: Vec<String> = row.assignment.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{:.5}\t{:.5}\t{}",
                rank + 1,
                row.index,
                round5(row.val_acc),
                round5(row.test_acc),
                assignment.join(" ")
            );
        }
        out
    }
}

/// Cartesian product of `grid` in row-major order: keys sorted, the last
/// key varies fastest.
pub fn enumerate_grid(grid: &BTreeMap<String, Vec<Value>>) -> Vec<BTreeMap<String, Value>> {
    let mut points = vec![BTreeMap::new()];
    for (key, values) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.insert(key.clone(), v.clone());
                    q
                })
            })
            .collect();
    }
    points
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), HarnessError> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cur
            .as_object_mut()
            .ok_or_else(|| HarnessError::Config(format!("grid key {path}: {part} is not inside an object")))?;
        if i + 1 == parts.len() {
            map.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = map.entry(*part).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(HarnessError::Config("empty grid key".into()))
}

/// Applies dotted-path overrides (`strategy.lambda`, `train.sgd.lr`) to a
/// config.
pub fn apply_overrides(cfg: &RunConfig, assignment: &BTreeMap<String, Value>) -> Result<RunConfig, HarnessError> {
    let mut v = serde_json::to_value(cfg).map_err(|e| HarnessError::Config(e.to_string()))?;
    for (path, value) in assignment {
        set_path(&mut v, path, value.clone())?;
    }
    let out: RunConfig = serde_json::from_value(v).map_err(|e| HarnessError::Config(e.to_string()))?;
    out.validate()?;
    Ok(out)
}

/// Evaluates every grid point on the first configured seed and picks the
/// highest mean validation accuracy after the last experience; ties go to
/// the earlier point.
pub fn grid_search(cfg: &RunConfig, grid: &BTreeMap<String, Vec<Value>>) -> Result<GridResult, HarnessError> {
    if grid.is_empty() || grid.values().any(Vec::is_empty) {
        return Err(HarnessError::Config("grid must list at least one value per key".into()));
    }
    if cfg.data.split.val <= 0.0 {
        return Err(HarnessError::Config("grid search needs data.split.val > 0".into()));
    }
    let points = enumerate_grid(grid);
    let configs = points
        .iter()
        .map(|p| {
            let mut c = apply_overrides(cfg, p)?;
            c.train.seeds.truncate(1);
            c.output = Default::default();
            Ok(c)
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let touches_data = grid.keys().any(|k| k == "data" || k.starts_with("data."));
    let shared = if touches_data { None } else { Some(load_sources(&configs[0])?) };
    let rows = configs
        .par_iter()
        .zip(points.par_iter())
        .enumerate()
        .map(|(index, (c, p))| {
            let result = match &shared {
                Some(s) => run_with_sources(c, s)?,
                None => run_with_sources(c, &load_sources(c)?)?,
            };
            let seed = &result.seeds[0];
            let val_acc = seed
                .val_acc
                .ok_or_else(|| HarnessError::Config("stream has no validation sets".into()))?;
            Ok(GridRow {
                index,
                assignment: p.clone(),
                val_acc,
                test_acc: seed.metrics.acc,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let mut ranking: Vec<usize> = (0..rows.len()).collect();
    ranking.sort_by(|&a, &b| rows[b].val_acc.total_cmp(&rows[a].val_acc));
    let best_index = ranking[0];
    let best = apply_overrides(cfg, &points[best_index])?;
    Ok(GridResult {
        best,
        best_index,
        rows,
        ranking,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn row_major_enumeration() {
        let mut grid = BTreeMap::new();
        grid.insert("b".to_string(), vec![json!(1), json!(2)]);
        grid.insert("a".to_string(), vec![json!("x"), json!("y"), json!("z")]);
        let points = enumerate_grid(&grid);
        assert_eq!(points.len(), 6);
        let flat: Vec<(Value, Value)> = points.iter().map(|p| (p["a"].clone(), p["b"].clone())).collect();
        assert_eq!(flat[0], (json!("x"), json!(1)));
        assert_eq!(flat[1], (json!("x"), json!(2)));
        assert_eq!(flat[2], (json!("y"), json!(1)));
        assert_eq!(flat[5], (json!("z"), json!(2)));
    }

    #[test]
    fn overrides_follow_dotted_paths() {
        let cfg = RunConfig::from_json(
            r#"{"data": {"source": {"kind": "synth", "classes": 4, "per_class": 20}},
                "scenario": {"kind": "class_il", "grouping": "22"},
                "strategy": {"name": "ewc"}}"#,
        )
        .unwrap();
        let mut a = BTreeMap::new();
        a.insert("strategy.lambda".to_string(), json!(5.0));
        a.insert("train.sgd.lr".to_string(), json!(0.01));
        let c = apply_overrides(&cfg, &a).unwrap();
        assert_eq!(c.train.sgd.lr, 0.01);
        assert!(matches!(c.strategy, crate::strategy::StrategyConfig::Ewc { lambda, .. } if lambda == 5.0));
        a.insert("strategy.nonsense".to_string(), json!(1));
        assert!(apply_overrides(&cfg, &a).is_err());
    }
}
