use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::Value;

use super::train::RunResult;
use super::HarnessError;
use crate::scenario::StreamManifest;

/// Rounds to 5 decimal places (and turns −0 into 0).
pub fn round5(x: f64) -> f64 {
    (x * 1e5).round() / 1e5 + 0.0
}

fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = round5(n.as_f64().unwrap_or(0.0));
            *v = serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number);
        }
        Value::Array(items) => items.iter_mut().for_each(round_floats),
        Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("result types serialize to JSON");
    text.push('\n');
    text
}

/// Canonical text of `result.json`: sorted keys, every float outside the
/// config echo rounded to 5 decimals. Wall-clock times are not included.
pub fn result_json(r: &RunResult) -> String {
    let mut v = serde_json::to_value(r).expect("RunResult serializes to JSON");
    if let Value::Object(map) = &mut v {
        for (key, field) in map.iter_mut() {
            if key != "config" {
                round_floats(field);
            }
        }
    }
    to_json(&v)
}

pub fn read_result(path: &Path) -> Result<RunResult, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn write_manifest(m: &StreamManifest, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write(&dir.join("stream_manifest.json"), &to_json(m))
}

/// One CSV per seed: header `after_exp,test_0..`, one row per experience.
pub fn acc_matrix_csv(values: &[Vec<f64>]) -> String {
    let t = values.len();
    let mut out = String::from("after_exp");
    for j in 0..t {
        let _ = write!(out, ",test_{j}");
    }
    out.push('\n');
    for (i, row) in values.iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in row {
            let _ = write!(out, ",{:.5}", round5(*v));
        }
        out.push('\n');
    }
    out
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Accuracy on each test set against the experience index, averaged over
/// seeds.
pub fn curves_svg(r: &RunResult) -> String {
    let t = r.seeds.first().map_or(0, |s| s.acc_matrix.size());
    let n = r.seeds.len().max(1) as f64;
    let mean = |i: usize, j: usize| round5(r.seeds.iter().map(|s| s.acc_matrix.values[i][j]).sum::<f64>() / n);
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 140.0, 20.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x = |i: usize| left + if t > 1 { pw * i as f64 / (t - 1) as f64 } else { pw / 2.0 };
    let y = |a: f64| top + ph * (1.0 - a);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for k in 0..=4 {
        let a = k as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{yy:.2}" x2="{x2}" y2="{yy:.2}" stroke="#dddddd"/><text x="{tx}" y="{ty:.2}" text-anchor="end">{a:.2}</text>"##,
            yy = y(a),
            x2 = left + pw,
            tx = left - 6.0,
            ty = y(a) + 4.0,
        );
    }
    for i in 0..t {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{i}</text>"#,
            x(i),
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">after experience</text>"#,
        left + pw / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">accuracy</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for j in 0..t {
        let color = PALETTE[j % PALETTE.len()];
        let points: Vec<String> = (0..t).map(|i| format!("{:.2},{:.2}", x(i), y(mean(i, j)))).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="curve" data-test="{j}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = top + 14.0 + 18.0 * j as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">test {j}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Regenerates the CSV and SVG files of `r` in `dir`.
pub fn render_report(r: &RunResult, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    for s in &r.seeds {
        write(&dir.join(format!("acc_matrix_{}.csv", s.seed)), &acc_matrix_csv(&s.acc_matrix.values))?;
    }
    write(&dir.join("curves.svg"), &curves_svg(r))
}

/// Writes `result.json`, `timing.json`, `stream_manifest.json`, the per-seed
/// CSVs and `curves.svg`.
pub fn write_results(r: &RunResult, dir: &Path) -> Result<(), HarnessError> {
    write_manifest(&r.stream, dir)?;
    write(&dir.join("result.json"), &result_json(r))?;
    let timing: serde_json::Map<String, Value> = r
        .seeds
        .iter()
        .map(|s| (s.seed.to_string(), s.seconds.iter().map(|&x| round5(x)).collect::<Vec<_>>().into()))
        .collect();
    write(&dir.join("timing.json"), &to_json(&serde_json::json!({ "seconds_per_experience": timing })))?;
    render_report(r, dir)
}
