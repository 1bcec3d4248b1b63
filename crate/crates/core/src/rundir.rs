//! Self-describing run directories.
//!
//! ```text
//! RUNDIR/
//!   config.toml        resolved configuration (includes the seed)
//!   seed.txt
//!   train_log.csv      one row per training epoch; wall time is the last column
//!   probe_log.csv      one row per probe epoch (two-stage regimes)
//!   checkpoints/last   model after the final training epoch
//!   checkpoints/best   encoder + classifier at the reported epoch
//!   scores.json        reported score, confusion matrix and balanced accuracy
//!   report.txt         human-readable summary
//! ```

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Regime};
use crate::error::{Error, Result};
use crate::eval::{aggregate_runs, Aggregate, Confusion, ScoreReport};
use crate::nn::save_checkpoint;
use crate::train::{EpochStats, ProbeEpoch, RunObserver, RunResult};

pub const CONFIG_FILE: &str = "config.toml";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const PROBE_LOG: &str = "probe_log.csv";
pub const SCORES_FILE: &str = "scores.json";
pub const REPORT_FILE: &str = "report.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFile {
    pub regime: Regime,
    pub seed: u64,
    pub best_epoch: usize,
    pub score: ScoreReport,
    pub balanced_accuracy: f64,
    pub confusion: Confusion,
    pub labels: Vec<String>,
}

impl ScoreFile {
    pub fn new(cfg: &ExperimentConfig, best_epoch: usize, score: ScoreReport, confusion: Confusion, labels: &[&str]) -> Self {
        Self {
            regime: cfg.regime.kind,
            seed: cfg.seed,
            best_epoch,
            score,
            balanced_accuracy: confusion.balanced_accuracy(),
            confusion,
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Other(format!("{}: {e}", path.display()))
}

impl RunDir {
    pub fn create(root: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints")).map_err(|e| Error::io(root, e))?;
        let dir = Self {
            root: root.to_path_buf(),
        };
        dir.write(CONFIG_FILE, &cfg.to_toml_string())?;
        dir.write("seed.txt", &format!("{}\n", cfg.seed))?;
        Ok(dir)
    }

    pub fn open(root: &Path) -> Result<Self> {
        if !root.join(CONFIG_FILE).exists() {
            return Err(Error::Other(format!("{} is not a run directory", root.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn checkpoint_dir(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.path(CONFIG_FILE))
    }

    pub fn scores(&self) -> Result<ScoreFile> {
        let p = self.path(SCORES_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: p,
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn write_scores(&self, sf: &ScoreFile) -> Result<()> {
        self.write(SCORES_FILE, &serde_json::to_string_pretty(sf).expect("scores serialize"))?;
        self.write(REPORT_FILE, &render_scores(sf))
    }

    /// Replaces `probe_log.csv`.
    pub fn write_probe_log(&self, log: &[ProbeEpoch]) -> Result<()> {
        let path = self.path(PROBE_LOG);
        let mut w = probe_writer(&path)?;
        for p in log {
            w.write_record(probe_row(p)).map_err(csv_err(&path))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn logger(&self, cfg: &ExperimentConfig) -> Result<EpochLogger> {
        EpochLogger::new(&self.root, cfg.regime.kind)
    }

    /// Writes checkpoints, scores and the text report of a finished run.
    pub fn finish(&self, cfg: &ExperimentConfig, r: &RunResult, labels: &[&str]) -> Result<ScoreFile> {
        let steps = r.epochs.iter().map(|e| e.steps).sum::<usize>() as u64;
        save_checkpoint(&r.last_model, steps, &self.checkpoint_dir("last"))?;
        save_checkpoint(&r.best_model, steps, &self.checkpoint_dir("best"))?;
        let sf = ScoreFile::new(cfg, r.best_epoch, r.best, r.best_confusion.clone(), labels);
        self.write_scores(&sf)?;
        Ok(sf)
    }
}

pub fn render_scores(sf: &ScoreFile) -> String {
    let mut s = format!(
        "regime {} seed {} best epoch {}\n{}\nbalanced accuracy {:.2}%\n\nconfusion (rows = truth)\n",
        sf.regime,
        sf.seed,
        sf.best_epoch,
        sf.score,
        100.0 * sf.balanced_accuracy
    );
    s.push_str(&format!("\t{}\n", sf.labels.join("\t")));
    for (t, label) in sf.labels.iter().enumerate() {
        let row: Vec<String> = (0..sf.confusion.n_classes)
            .map(|p| sf.confusion.get(t, p).to_string())
            .collect();
        s.push_str(&format!("{label}\t{}\n", row.join("\t")));
    }
    s
}

/// Streams epoch rows to `train_log.csv` and `probe_log.csv`.
pub struct EpochLogger {
    train: csv::Writer<File>,
    train_path: PathBuf,
    probe: Option<csv::Writer<File>>,
    probe_path: PathBuf,
}

impl EpochLogger {
    pub fn new(root: &Path, regime: Regime) -> Result<Self> {
        let train_path = root.join(TRAIN_LOG);
        let mut train = csv::Writer::from_path(&train_path).map_err(csv_err(&train_path))?;
        let mut header = vec!["epoch".to_string(), "loss".to_string()];
        header.extend((0..regime.n_projectors()).map(|k| format!("head{k}_loss")));
        if regime.has_classifier() {
            header.push("ce_loss".into());
        }
        header.extend(
            ["lr", "steps", "skipped_steps", "skipped_anchors", "se", "sp", "sc", "hs", "wall_s"]
                .map(String::from),
        );
        train.write_record(&header).map_err(csv_err(&train_path))?;
        train.flush().map_err(|e| Error::io(&train_path, e))?;
        Ok(Self {
            train,
            train_path,
            probe: None,
            probe_path: root.join(PROBE_LOG),
        })
    }
}

fn score_cells(s: Option<ScoreReport>) -> [String; 4] {
    match s {
        Some(s) => [s.se, s.sp, s.sc, s.hs].map(|v| format!("{v:.4}")),
        None => Default::default(),
    }
}

fn probe_writer(path: &Path) -> Result<csv::Writer<File>> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["epoch", "loss", "lr", "se", "sp", "sc", "hs", "wall_s"])
        .map_err(csv_err(path))?;
    Ok(w)
}

fn probe_row(p: &ProbeEpoch) -> Vec<String> {
    let mut row = vec![p.epoch.to_string(), format!("{:.9}", p.loss), format!("{:.6e}", p.lr)];
    row.extend(score_cells(Some(p.score)));
    row.push(format!("{:.3}", p.wall_s));
    row
}

impl RunObserver for EpochLogger {
    fn epoch(&mut self, e: &EpochStats) -> Result<()> {
        let mut row = vec![e.epoch.to_string(), format!("{:.9}", e.loss)];
        row.extend(e.per_head.iter().map(|v| format!("{v:.9}")));
        if let Some(ce) = e.ce {
            row.push(format!("{ce:.9}"));
        }
        row.extend([
            format!("{:.6e}", e.lr),
            e.steps.to_string(),
            e.skipped_steps.to_string(),
            e.skipped_anchors.to_string(),
        ]);
        row.extend(score_cells(e.score));
        row.push(format!("{:.3}", e.wall_s));
        self.train.write_record(&row).map_err(csv_err(&self.train_path))?;
        self.train.flush().map_err(|e| Error::io(&self.train_path, e))
    }

    fn probe_epoch(&mut self, p: &ProbeEpoch) -> Result<()> {
        if self.probe.is_none() {
            self.probe = Some(probe_writer(&self.probe_path)?);
        }
        let w = self.probe.as_mut().expect("opened");
        w.write_record(probe_row(p)).map_err(csv_err(&self.probe_path))?;
        w.flush().map_err(|e| Error::io(&self.probe_path, e))
    }
}

/// Reads a log CSV, dropping the trailing wall-time column.
pub fn read_log_without_wall_time(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut rows = vec![r.headers().map_err(csv_err(path))?.iter().map(String::from).collect::<Vec<_>>()];
    for rec in r.records() {
        rows.push(rec.map_err(csv_err(path))?.iter().map(String::from).collect());
    }
    for row in &mut rows {
        row.pop();
    }
    Ok(rows)
}

/// Mean ± std table over runs, grouped by regime.
pub fn report_table(runs: &[ScoreFile]) -> (Vec<(Regime, Aggregate)>, String) {
    let mut groups: Vec<(Regime, Vec<ScoreReport>)> = Vec::new();
    for r in runs {
        match groups.iter_mut().find(|(g, _)| *g == r.regime) {
            Some((_, v)) => v.push(r.score),
            None => groups.push((r.regime, vec![r.score])),
        }
    }
    let aggs: Vec<(Regime, Aggregate)> = groups.into_iter().map(|(g, v)| (g, aggregate_runs(&v))).collect();
    let mut s = format!("{:<8} {:>4} {:>14} {:>14} {:>14} {:>14}\n", "regime", "runs", "Sp", "Se", "Sc", "HS");
    for (g, a) in &aggs {
        s.push_str(&format!(
            "{:<8} {:>4} {:>14} {:>14} {:>14} {:>14}\n",
            g.to_string(),
            a.runs,
            a.sp.to_string(),
            a.se.to_string(),
            a.sc.to_string(),
            a.hs.to_string()
        ));
    }
    (aggs, s)
}
