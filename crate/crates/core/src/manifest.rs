//! Canonical cycle-level manifest and dataset adapters.
//!
//! The on-disk manifest is tab-separated UTF-8 text:
//!
//! ```text
//! #respcl-manifest v1 dataset=<icbhi|sprsound|synth>
//! cycle_id  audio_path  start_s  end_s  class_label  patient_id  sex  age_years  device  location  split
//! <one record per line>
//! ```
//!
//! `sex` is `M`, `F` or `unknown`; an empty `age_years` means unknown.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_MAGIC: &str = "#respcl-manifest";
pub const MANIFEST_VERSION: u32 = 1;

const FIELDS: [&str; 11] = [
    "cycle_id",
    "audio_path",
    "start_s",
    "end_s",
    "class_label",
    "patient_id",
    "sex",
    "age_years",
    "device",
    "location",
    "split",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
    Unknown,
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::M => "M",
            Sex::F => "F",
            Sex::Unknown => "unknown",
        })
    }
}

impl FromStr for Sex {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "M" | "m" => Ok(Sex::M),
            "F" | "f" => Ok(Sex::F),
            "unknown" | "NA" | "" => Ok(Sex::Unknown),
            other => Err(format!("unknown sex `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    Icbhi,
    Sprsound,
    Synth,
}

impl Dataset {
    /// Declared class labels; index 0 is the normal class.
    pub fn labels(self) -> &'static [&'static str] {
        match self {
            Dataset::Icbhi | Dataset::Synth => &["normal", "crackle", "wheeze", "both"],
            Dataset::Sprsound => &[
                "normal",
                "rhonchi",
                "wheeze",
                "stridor",
                "coarse_crackle",
                "fine_crackle",
                "both",
            ],
        }
    }

    pub fn label_index(self, label: &str) -> Option<usize> {
        self.labels().iter().position(|&l| l == label)
    }

    pub fn default_age_scheme(self) -> AgeScheme {
        match self {
            Dataset::Icbhi | Dataset::Synth => AgeScheme::icbhi(),
            Dataset::Sprsound => AgeScheme::sprsound(),
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dataset::Icbhi => "icbhi",
            Dataset::Sprsound => "sprsound",
            Dataset::Synth => "synth",
        })
    }
}

impl FromStr for Dataset {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "icbhi" => Ok(Dataset::Icbhi),
            "sprsound" => Ok(Dataset::Sprsound),
            "synth" => Ok(Dataset::Synth),
            other => Err(format!("unknown dataset `{other}`")),
        }
    }
}

/// One labelled respiratory cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle_id: String,
    pub audio_path: PathBuf,
    pub start_s: f64,
    pub end_s: f64,
    pub class_label: String,
    pub patient_id: String,
    pub sex: Sex,
    pub age_years: Option<f64>,
    pub device: String,
    pub location: String,
    pub split: Split,
}

impl CycleRecord {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dataset: Dataset,
    pub records: Vec<CycleRecord>,
}

impl Manifest {
    pub fn class_index(&self, rec: &CycleRecord) -> Result<usize> {
        self.dataset
            .label_index(&rec.class_label)
            .ok_or_else(|| Error::Other(format!("label `{}` not in {} label set", rec.class_label, self.dataset)))
    }

    pub fn n_classes(&self) -> usize {
        self.dataset.labels().len()
    }
}

// ---------------------------------------------------------------------------
// Manifest I/O

pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let mut out = format!("{MANIFEST_MAGIC} v{MANIFEST_VERSION} dataset={}\n", m.dataset);
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(Vec::new());
    let io = |e: csv::Error| Error::Other(format!("manifest encoding: {e}"));
    w.write_record(FIELDS).map_err(io)?;
    for r in &m.records {
        w.write_record([
            r.cycle_id.clone(),
            r.audio_path.to_string_lossy().into_owned(),
            r.start_s.to_string(),
            r.end_s.to_string(),
            r.class_label.clone(),
            r.patient_id.clone(),
            r.sex.to_string(),
            r.age_years.map(|a| a.to_string()).unwrap_or_default(),
            r.device.clone(),
            r.location.clone(),
            r.split.to_string(),
        ])
        .map_err(io)?;
    }
    let body = w.into_inner().map_err(|e| Error::Other(e.to_string()))?;
    out.push_str(&String::from_utf8(body).expect("utf-8 manifest"));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let (first, body) = text.split_once('\n').unwrap_or((text.as_str(), ""));
    let parts: Vec<&str> = first.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != MANIFEST_MAGIC {
        return Err(perr(1, "missing manifest header".into()));
    }
    if parts[1] != format!("v{MANIFEST_VERSION}") {
        return Err(perr(1, format!("unsupported manifest version {}", parts[1])));
    }
    let dataset: Dataset = parts[2]
        .strip_prefix("dataset=")
        .ok_or_else(|| perr(1, "missing dataset".into()))?
        .parse()
        .map_err(|e| perr(1, e))?;

    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .from_reader(body.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| perr(2, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != FIELDS {
        return Err(perr(2, format!("unexpected columns {header:?}")));
    }
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 3;
        let row = row.map_err(|e| perr(line, e.to_string()))?;
        let f = |k: usize| row.get(k).unwrap_or("");
        let num = |k: usize| -> Result<f64> {
            f(k).parse::<f64>()
                .map_err(|_| perr(line, format!("bad {} `{}`", FIELDS[k], f(k))))
        };
        records.push(CycleRecord {
            cycle_id: f(0).to_string(),
            audio_path: PathBuf::from(f(1)),
            start_s: num(2)?,
            end_s: num(3)?,
            class_label: f(4).to_string(),
            patient_id: f(5).to_string(),
            sex: f(6).parse().map_err(|e| perr(line, e))?,
            age_years: if f(7).is_empty() { None } else { Some(num(7)?) },
            device: f(8).to_string(),
            location: f(9).to_string(),
            split: f(10).parse().map_err(|e| perr(line, e))?,
        });
    }
    Ok(Manifest { dataset, records })
}

// ---------------------------------------------------------------------------
// Filesystem helpers

fn files_sorted(root: &Path) -> Result<Vec<PathBuf>> {
    let mut v = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::io(path, e.into())
        })?;
        if entry.file_type().is_file() {
            v.push(entry.into_path());
        }
    }
    Ok(v)
}

fn has_ext(p: &Path, ext: &str) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

// ---------------------------------------------------------------------------
// ICBHI

pub const ICBHI_SPLIT_FILE: &str = "ICBHI_challenge_train_test.txt";
pub const ICBHI_DEMOGRAPHICS_FILE: &str = "ICBHI_Challenge_demographic_information.txt";

fn find_named(files: &[PathBuf], name: &str) -> Option<PathBuf> {
    files
        .iter()
        .find(|p| p.file_name().is_some_and(|n| n == name))
        .cloned()
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)
        .map_err(|e| Error::io(path, e))?
        .lines()
        .map(str::to_string)
        .collect())
}

fn icbhi_demographics(path: &Path) -> Result<HashMap<String, (Sex, Option<f64>)>> {
    let mut out = HashMap::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() < 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected `patient age sex ...`".into(),
            });
        }
        let age = match f[1] {
            "NA" => None,
            a => Some(a.parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("bad age `{a}`"),
            })?),
        };
        let sex = f[2].parse().unwrap_or(Sex::Unknown);
        out.insert(f[0].to_string(), (sex, age));
    }
    Ok(out)
}

/// Reads an ICBHI 2017 tree: `<rec>.wav` with a `<rec>.txt` cycle annotation
/// per recording, the official split listing and (optionally) the
/// demographic table, anywhere under `root`.
pub fn ingest_icbhi(root: &Path) -> Result<Vec<CycleRecord>> {
    let files = files_sorted(root)?;
    let wavs: Vec<&PathBuf> = files.iter().filter(|p| has_ext(p, "wav")).collect();
    if wavs.is_empty() {
        log::warn!("no audio files found under {}", root.display());
        return Ok(Vec::new());
    }
    let split_path = find_named(&files, ICBHI_SPLIT_FILE)
        .ok_or_else(|| Error::Other(format!("{ICBHI_SPLIT_FILE} not found under {}", root.display())))?;
    let mut splits = HashMap::new();
    for (i, line) in read_lines(&split_path)?.iter().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let split = f
            .get(1)
            .ok_or("missing split column".to_string())
            .and_then(|s| s.parse::<Split>())
            .map_err(|message| Error::Parse {
                path: split_path.clone(),
                line: i + 1,
                message,
            })?;
        splits.insert(f[0].to_string(), split);
    }
    let demographics = match find_named(&files, ICBHI_DEMOGRAPHICS_FILE) {
        Some(p) => icbhi_demographics(&p)?,
        None => {
            log::warn!("{ICBHI_DEMOGRAPHICS_FILE} not found; metadata unknown");
            HashMap::new()
        }
    };

    let mut records = Vec::new();
    for wav in wavs {
        let name = stem(wav);
        let ann = wav.with_extension("txt");
        if !ann.exists() {
            return Err(Error::MissingAnnotation(wav.clone()));
        }
        let split = *splits
            .get(&name)
            .ok_or_else(|| Error::MissingSplit(name.clone()))?;
        let parts: Vec<&str> = name.split('_').collect();
        let patient = parts.first().copied().unwrap_or("").to_string();
        let location = parts.get(2).copied().unwrap_or("").to_string();
        let device = parts.get(4).copied().unwrap_or("").to_string();
        let (sex, age) = demographics
            .get(&patient)
            .copied()
            .unwrap_or((Sex::Unknown, None));
        for (i, line) in read_lines(&ann)?.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let perr = |message: String| Error::Parse {
                path: ann.clone(),
                line: i + 1,
                message,
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(perr(format!("expected 4 columns, got {}", f.len())));
            }
            let start: f64 = f[0].parse().map_err(|_| perr(format!("bad start `{}`", f[0])))?;
            let end: f64 = f[1].parse().map_err(|_| perr(format!("bad end `{}`", f[1])))?;
            let label = match (f[2], f[3]) {
                ("0", "0") => "normal",
                ("1", "0") => "crackle",
                ("0", "1") => "wheeze",
                ("1", "1") => "both",
                (c, w) => return Err(perr(format!("bad crackle/wheeze flags `{c} {w}`"))),
            };
            records.push(CycleRecord {
                cycle_id: format!("{name}_{i:03}"),
                audio_path: wav.clone(),
                start_s: start,
                end_s: end,
                class_label: label.into(),
                patient_id: patient.clone(),
                sex,
                age_years: age,
                device: device.clone(),
                location: location.clone(),
                split,
            });
        }
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// SPRSound

fn sprsound_label(kind: &str) -> Option<&'static str> {
    match kind.trim() {
        "Normal" => Some("normal"),
        "Rhonchi" => Some("rhonchi"),
        "Wheeze" => Some("wheeze"),
        "Stridor" => Some("stridor"),
        "Coarse Crackle" => Some("coarse_crackle"),
        "Fine Crackle" => Some("fine_crackle"),
        "Wheeze & Crackle" | "Wheeze+Crackle" | "Both" => Some("both"),
        _ => None,
    }
}

fn sprsound_split(path: &Path) -> Option<Split> {
    let s = path.to_string_lossy().to_lowercase();
    if s.contains("intra") {
        None
    } else if s.contains("test") {
        Some(Split::Test)
    } else {
        Some(Split::Train)
    }
}

fn json_millis(v: &serde_json::Value) -> Option<f64> {
    match v {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// Reads an SPRSound tree: `<pid>_<age>_<gender>_<location>_<n>.wav` with a
/// same-stem event annotation `.json`. Paths containing `intra` are skipped,
/// paths containing `test` form the (inter-patient) test split, everything
/// else is training data. Gender `0` is male, `1` female.
pub fn ingest_sprsound(root: &Path) -> Result<Vec<CycleRecord>> {
    let files = files_sorted(root)?;
    let wavs: Vec<&PathBuf> = files
        .iter()
        .filter(|p| has_ext(p, "wav") && sprsound_split(p).is_some())
        .collect();
    if wavs.is_empty() {
        log::warn!("no audio files found under {}", root.display());
        return Ok(Vec::new());
    }
    let jsons: HashMap<String, &PathBuf> = files
        .iter()
        .filter(|p| has_ext(p, "json") && sprsound_split(p).is_some())
        .map(|p| (stem(p), p))
        .collect();

    let mut records = Vec::new();
    for wav in wavs {
        let name = stem(wav);
        let ann = *jsons
            .get(&name)
            .ok_or_else(|| Error::MissingAnnotation(wav.clone()))?;
        let split = sprsound_split(ann).unwrap_or(Split::Train);
        let text = fs::read_to_string(ann).map_err(|e| Error::io(ann, e))?;
        let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: ann.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let parts: Vec<&str> = name.split('_').collect();
        let patient = parts.first().copied().unwrap_or("").to_string();
        let age = parts.get(1).and_then(|a| a.parse::<f64>().ok());
        let sex = match parts.get(2).copied() {
            Some("0") => Sex::M,
            Some("1") => Sex::F,
            _ => Sex::Unknown,
        };
        let location = parts.get(3).copied().unwrap_or("").to_string();
        let events = doc
            .get("event_annotation")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Parse {
                path: ann.clone(),
                line: 1,
                message: "missing `event_annotation` array".into(),
            })?;
        for (i, ev) in events.iter().enumerate() {
            let perr = |message: String| Error::Parse {
                path: ann.clone(),
                line: 1,
                message: format!("event {i}: {message}"),
            };
            let start = ev
                .get("start")
                .and_then(json_millis)
                .ok_or_else(|| perr("bad start".into()))?;
            let end = ev
                .get("end")
                .and_then(json_millis)
                .ok_or_else(|| perr("bad end".into()))?;
            let kind = ev.get("type").and_then(|t| t.as_str()).unwrap_or("");
            let label = sprsound_label(kind).ok_or_else(|| perr(format!("unknown event type `{kind}`")))?;
            records.push(CycleRecord {
                cycle_id: format!("{name}_{i:03}"),
                audio_path: wav.clone(),
                start_s: start / 1000.0,
                end_s: end / 1000.0,
                class_label: label.into(),
                patient_id: patient.clone(),
                sex,
                age_years: age,
                device: "Yunting".into(),
                location: location.clone(),
                split,
            });
        }
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Metadata groups

/// Two-way age split used for the metadata pretext task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgeScheme {
    /// Ages at or above the threshold fall in the older group.
    pub threshold_years: f64,
    pub young_name: String,
    pub old_name: String,
}

impl AgeScheme {
    pub fn icbhi() -> Self {
        Self {
            threshold_years: 18.0,
            young_name: "Young".into(),
            old_name: "Old".into(),
        }
    }

    pub fn sprsound() -> Self {
        Self {
            threshold_years: 2.0,
            young_name: "Baby".into(),
            old_name: "Kid".into(),
        }
    }
}

impl Default for AgeScheme {
    fn default() -> Self {
        Self::icbhi()
    }
}

pub const N_METADATA_GROUPS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetadataLabel {
    /// `2 * age_bit + sex_bit` with M = 0, F = 1 and young = 0, old = 1.
    pub group_id: usize,
    pub description: String,
}

pub fn metadata_label(sex: Sex, age: Option<f64>, scheme: &AgeScheme) -> Option<MetadataLabel> {
    let sex_bit = match sex {
        Sex::M => 0,
        Sex::F => 1,
        Sex::Unknown => return None,
    };
    let age = age.filter(|a| a.is_finite() && *a >= 0.0)?;
    let old = age >= scheme.threshold_years;
    Some(MetadataLabel {
        group_id: 2 * usize::from(old) + sex_bit,
        description: format!(
            "{sex}-{}",
            if old { &scheme.old_name } else { &scheme.young_name }
        ),
    })
}

/// Sex × age-group label per record; `None` flags unknown metadata, which
/// keeps the record out of metadata-head batches.
pub fn synth_metadata_labels(records: &[CycleRecord], scheme: &AgeScheme) -> Vec<Option<MetadataLabel>> {
    records
        .iter()
        .map(|r| metadata_label(r.sex, r.age_years, scheme))
        .collect()
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    NonPositiveDuration,
    DuplicateId,
    UnknownLabel(String),
    NegativeAge,
    NonFiniteBoundary,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::NonPositiveDuration => f.write_str("non-positive duration"),
            ViolationKind::DuplicateId => f.write_str("duplicate id"),
            ViolationKind::UnknownLabel(l) => write!(f, "unknown label `{l}`"),
            ViolationKind::NegativeAge => f.write_str("negative age"),
            ViolationKind::NonFiniteBoundary => f.write_str("non-finite boundary"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub cycle_id: String,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub n_records: usize,
    pub class_histogram: BTreeMap<String, usize>,
    pub split_sizes: BTreeMap<Split, usize>,
    /// Records with both sex and age known.
    pub metadata_known: usize,
    pub duration_min_s: f64,
    pub duration_mean_s: f64,
    pub duration_max_s: f64,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "records: {}", self.n_records)?;
        for (k, v) in &self.class_histogram {
            writeln!(f, "  class {k}: {v}")?;
        }
        for (k, v) in &self.split_sizes {
            writeln!(f, "  split {k}: {v}")?;
        }
        writeln!(f, "metadata known: {}/{}", self.metadata_known, self.n_records)?;
        writeln!(
            f,
            "duration s: min {:.3} mean {:.3} max {:.3}",
            self.duration_min_s, self.duration_mean_s, self.duration_max_s
        )?;
        for v in &self.violations {
            writeln!(f, "violation [{}] {}: {}", v.index, v.cycle_id, v.kind)?;
        }
        Ok(())
    }
}

pub fn validate_manifest(m: &Manifest) -> ValidationReport {
    let mut class_histogram = BTreeMap::new();
    let mut split_sizes = BTreeMap::new();
    let mut seen = HashSet::new();
    let mut violations = Vec::new();
    let mut known = 0;
    let (mut dmin, mut dmax, mut dsum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for (i, r) in m.records.iter().enumerate() {
        let mut flag = |kind| {
            violations.push(Violation {
                index: i,
                cycle_id: r.cycle_id.clone(),
                kind,
            })
        };
        *class_histogram.entry(r.class_label.clone()).or_insert(0) += 1;
        *split_sizes.entry(r.split).or_insert(0) += 1;
        if !seen.insert(r.cycle_id.as_str()) {
            flag(ViolationKind::DuplicateId);
        }
        if !(r.start_s.is_finite() && r.end_s.is_finite()) {
            flag(ViolationKind::NonFiniteBoundary);
        } else if r.end_s <= r.start_s {
            flag(ViolationKind::NonPositiveDuration);
        }
        if m.dataset.label_index(&r.class_label).is_none() {
            flag(ViolationKind::UnknownLabel(r.class_label.clone()));
        }
        if r.age_years.is_some_and(|a| a < 0.0) {
            flag(ViolationKind::NegativeAge);
        }
        if r.sex != Sex::Unknown && r.age_years.is_some() {
            known += 1;
        }
        let d = r.duration_s();
        if d.is_finite() {
            dmin = dmin.min(d);
            dmax = dmax.max(d);
            dsum += d;
        }
    }
    let n = m.records.len();
    ValidationReport {
        n_records: n,
        class_histogram,
        split_sizes,
        metadata_known: known,
        duration_min_s: if n > 0 { dmin } else { 0.0 },
        duration_mean_s: if n > 0 { dsum / n as f64 } else { 0.0 },
        duration_max_s: if n > 0 { dmax } else { 0.0 },
        violations,
    }
}
