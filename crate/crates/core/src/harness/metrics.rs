use serde::{Deserialize, Serialize};

use super::HarnessError;

/// `values[i][j]`: accuracy on test set j after training experience i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccMatrix {
    pub values: Vec<Vec<f64>>,
}

impl AccMatrix {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self, HarnessError> {
        let m = AccMatrix { values };
        m.validate()?;
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.values.len()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let t = self.values.len();
        if t == 0 {
            return Err(HarnessError::ShapeMismatch("accuracy matrix is empty".into()));
        }
        for (i, row) in self.values.iter().enumerate() {
            if row.len() != t {
                return Err(HarnessError::ShapeMismatch(format!(
                    "row {i} has {} entries, expected {t}",
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(HarnessError::ShapeMismatch(format!("entry {v} in row {i} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub bwt: f64,
    pub fwt: f64,
}

/// ACC: mean of the last row. BWT: mean change from `R[j][j]` to
/// `R[T−1][j]` over j < T−1. FWT: mean of `R[j−1][j] − chance[j]` over j ≥ 1.
/// Both transfers are 0 when T = 1. Results are snapped to a 1e-12 grid so
/// decimal inputs give decimal outputs (0.7 − 0.9 reports as −0.2).
pub fn compute_metrics(m: &AccMatrix, chance: &[f64]) -> Result<Metrics, HarnessError> {
    m.validate()?;
    let t = m.size();
    if chance.len() != t {
        return Err(HarnessError::ShapeMismatch(format!(
            "{} chance levels for {t} experiences",
            chance.len()
        )));
    }
    let r = &m.values;
    let acc = r[t - 1].iter().sum::<f64>() / t as f64;
    if t == 1 {
        return Ok(Metrics {
            acc: snap(acc),
            bwt: 0.0,
            fwt: 0.0,
        });
    }
    let denom = (t - 1) as f64;
    let bwt = (0..t - 1).map(|j| r[t - 1][j] - r[j][j]).sum::<f64>() / denom;
    let fwt = (1..t).map(|j| r[j - 1][j] - chance[j]).sum::<f64>() / denom;
    Ok(Metrics {
        acc: snap(acc),
        bwt: snap(bwt),
        fwt: snap(fwt),
    })
}

fn snap(x: f64) -> f64 {
    (x * 1e12).round() / 1e12 + 0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Arithmetic mean and sample standard deviation (0 for one value).
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len();
        if n == 0 {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub acc: MeanStd,
    pub bwt: MeanStd,
    pub fwt: MeanStd,
    pub n: usize,
}

pub fn aggregate(results: &[Metrics]) -> Aggregate {
    let col = |f: fn(&Metrics) -> f64| {
        // sorted so the result does not depend on seed order
        let mut v: Vec<f64> = results.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        MeanStd::of(&v)
    };
    Aggregate {
        acc: col(|m| m.acc),
        bwt: col(|m| m.bwt),
        fwt: col(|m| m.fwt),
        n: results.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let m = AccMatrix::new(vec![vec![0.9, 0.1], vec![0.7, 0.8]]).unwrap();
        let r = compute_metrics(&m, &[0.5, 0.5]).unwrap();
        assert_eq!(r.acc, 0.75);
        assert_eq!(r.bwt, -0.2);
        assert_eq!(r.fwt, -0.4);
        let r = compute_metrics(&m, &[0.0, 0.1]).unwrap();
        assert_eq!(r.fwt, 0.0);
        let flat = AccMatrix::new(vec![vec![0.6; 3]; 3]).unwrap();
        assert_eq!(compute_metrics(&flat, &[0.0; 3]).unwrap().bwt, 0.0);
        let one = AccMatrix::new(vec![vec![0.42]]).unwrap();
        let r = compute_metrics(&one, &[0.5]).unwrap();
        assert_eq!((r.acc, r.bwt, r.fwt), (0.42, 0.0, 0.0));
        assert!(compute_metrics(&m, &[0.5]).is_err());
        assert!(AccMatrix::new(vec![vec![0.5, 0.5]]).is_err());
        assert!(AccMatrix::new(vec![vec![1.5]]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let m = |acc| Metrics { acc, bwt: 0.0, fwt: 0.0 };
        let a = aggregate(&[m(0.7), m(0.8)]);
        assert!((a.acc.mean - 0.75).abs() < 1e-15);
        assert!((a.acc.std - 0.07071).abs() < 1e-5);
        assert_eq!(aggregate(&[m(0.3)]).acc.std, 0.0);
        let x = aggregate(&[m(0.1), m(0.25), m(0.7)]);
        let y = aggregate(&[m(0.7), m(0.1), m(0.25)]);
        assert_eq!(x, y);
    }
}
