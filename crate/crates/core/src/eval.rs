//! Challenge metrics, confusion counting and multi-run aggregation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_predictions(n_classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} targets vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut c = Self::new(n_classes);
        for (&t, &p) in truth.iter().zip(pred) {
            c.add(t, p)?;
        }
        Ok(c)
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            n_classes: n,
            counts: rows.concat(),
        })
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let n = self.n_classes;
        for t in [truth, pred] {
            if t >= n {
                return Err(Error::TargetOutOfRange { target: t, classes: n });
            }
        }
        self.counts[truth * n + pred] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.n_classes).map(|p| self.get(class, p)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Mean recall over classes with non-zero support.
    pub fn balanced_accuracy(&self) -> f64 {
        let recalls: Vec<f64> = (0..self.n_classes)
            .filter(|&c| self.support(c) > 0)
            .map(|c| self.get(c, c) as f64 / self.support(c) as f64)
            .collect();
        if recalls.is_empty() {
            0.0
        } else {
            recalls.iter().sum::<f64>() / recalls.len() as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            return 0.0;
        }
        (0..self.n_classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / t as f64
    }
}

impl fmt::Display for Confusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in 0..self.n_classes {
            let row: Vec<String> = (0..self.n_classes).map(|p| self.get(t, p).to_string()).collect();
            writeln!(f, "{}", row.join("\t"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityMode {
    /// An anomaly counts as detected only when its exact class is predicted.
    #[default]
    Strict,
    /// Any anomaly prediction for an anomalous cycle counts.
    Lenient,
}

/// Percentages in [0, 100].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub se: f64,
    pub sp: f64,
    pub sc: f64,
    pub hs: f64,
}

impl ScoreReport {
    pub fn from_se_sp(se: f64, sp: f64) -> Self {
        let hs = if se + sp == 0.0 { 0.0 } else { 2.0 * se * sp / (se + sp) };
        Self {
            se,
            sp,
            sc: (se + sp) / 2.0,
            hs,
        }
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Sp {:.2}  Se {:.2}  Sc {:.2}  HS {:.2}",
            self.sp, self.se, self.sc, self.hs
        )
    }
}

pub fn score(c: &Confusion, normal_class: usize, mode: SensitivityMode) -> Result<ScoreReport> {
    let n = c.n_classes;
    if n < 2 || normal_class >= n {
        return Err(Error::Shape(format!(
            "need at least two classes and a valid normal index, got {n} / {normal_class}"
        )));
    }
    let normals = c.support(normal_class);
    if normals == 0 {
        return Err(Error::DegenerateTestSet("no normal cycles"));
    }
    let anomalies: u64 = (0..n).filter(|&k| k != normal_class).map(|k| c.support(k)).sum();
    if anomalies == 0 {
        return Err(Error::DegenerateTestSet("no anomalous cycles"));
    }
    let hits: u64 = (0..n)
        .filter(|&k| k != normal_class)
        .map(|k| match mode {
            SensitivityMode::Strict => c.get(k, k),
            SensitivityMode::Lenient => c.support(k) - c.get(k, normal_class),
        })
        .sum();
    let sp = 100.0 * c.get(normal_class, normal_class) as f64 / normals as f64;
    let se = 100.0 * hits as f64 / anomalies as f64;
    Ok(ScoreReport::from_se_sp(se, sp))
}

/// Entry with the highest Sc; ties keep the earliest.
pub fn track_best(history: &[(usize, ScoreReport)]) -> Option<(usize, ScoreReport)> {
    let mut best: Option<(usize, ScoreReport)> = None;
    for &(e, r) in history {
        if best.is_none_or(|(_, b)| r.sc > b.sc) {
            best = Some((e, r));
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub se: MeanStd,
    pub sp: MeanStd,
    pub sc: MeanStd,
    pub hs: MeanStd,
}

pub fn aggregate_runs(reports: &[ScoreReport]) -> Aggregate {
    let col = |f: fn(&ScoreReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Aggregate {
        runs: reports.len(),
        se: col(|r| r.se),
        sp: col(|r| r.sp),
        sc: col(|r| r.sc),
        hs: col(|r| r.hs),
    }
}
