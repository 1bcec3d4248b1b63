//! Deterministic synthetic respiratory-like corpus.
//!
//! Each cycle is breath-like low-passed noise under a smooth envelope;
//! crackles add short broadband clicks, wheezes add a sustained 400–800 Hz
//! tone, `both` adds the two. Patients carry fixed sex/age metadata and
//! their class mixture leans towards one class per metadata group, with
//! strength set by `metadata_correlation`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{write_wav, Waveform};
use crate::error::{Error, Result};
use crate::exec;
use crate::manifest::{
    write_manifest, CycleRecord, Dataset, Manifest, Sex, Split, N_METADATA_GROUPS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_patients: usize,
    pub cycles_per_patient: usize,
    pub cycles_per_recording: usize,
    /// Held-out patients, taken from the end of the patient list.
    pub n_test_patients: usize,
    pub rate_hz: u32,
    pub min_cycle_s: f64,
    pub max_cycle_s: f64,
    /// Proportions over `normal, crackle, wheeze, both`.
    pub class_mixture: [f64; 4],
    /// 0 makes class independent of metadata; 1 gives every patient only
    /// the class paired with its metadata group.
    pub metadata_correlation: f64,
    pub noise_level: f64,
    pub wheeze_level: f64,
    pub crackle_level: f64,
    /// Mean clicks per second in crackle cycles.
    pub crackle_rate_hz: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_patients: 8,
            cycles_per_patient: 64,
            cycles_per_recording: 16,
            n_test_patients: 2,
            rate_hz: 16_000,
            min_cycle_s: 0.6,
            max_cycle_s: 1.6,
            class_mixture: [0.25; 4],
            metadata_correlation: 0.5,
            noise_level: 0.05,
            wheeze_level: 0.3,
            crackle_level: 0.5,
            crackle_rate_hz: 12.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let c = |f: &str, m: &str| Err(Error::config(format!("synth.{f}"), m));
        if self.n_patients == 0 || self.cycles_per_patient == 0 || self.cycles_per_recording == 0 {
            return c("n_patients", "patients, cycles and cycles per recording must be positive");
        }
        if self.n_test_patients >= self.n_patients {
            return c("n_test_patients", "must leave at least one training patient");
        }
        if !(self.min_cycle_s > 0.0 && self.min_cycle_s <= self.max_cycle_s) {
            return c("min_cycle_s", "need 0 < min_cycle_s <= max_cycle_s");
        }
        if self.rate_hz < 4000 {
            return c("rate_hz", "must be at least 4000 Hz");
        }
        if self.class_mixture.iter().any(|&w| !(w >= 0.0)) || self.class_mixture.iter().sum::<f64>() <= 0.0 {
            return c("class_mixture", "weights must be non-negative with a positive sum");
        }
        if !(0.0..=1.0).contains(&self.metadata_correlation) {
            return c("metadata_correlation", "must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::config("synth", e.message()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_records(&self) -> usize {
        self.n_patients * self.cycles_per_patient
    }
}

/// Largest-remainder rounding of `weights · total`.
pub fn allocate(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let short = total - out.iter().sum::<usize>();
    for &k in order.iter().take(short) {
        out[k] += 1;
    }
    out
}

/// Patient × class count matrix with exact class totals and exact
/// per-patient totals, as close as rounding allows to the correlated mixture.
fn class_matrix(spec: &SynthSpec) -> Vec<[usize; 4]> {
    let n_p = spec.n_patients;
    let cpp = spec.cycles_per_patient;
    let totals = allocate(&spec.class_mixture, spec.n_records());
    let rho = spec.metadata_correlation;
    let mix_sum: f64 = spec.class_mixture.iter().sum();
    // preferred real-valued counts, then iterative proportional fitting
    let mut t: Vec<[f64; 4]> = (0..n_p)
        .map(|p| {
            let fav = p % N_METADATA_GROUPS;
            let mut row = [0.0; 4];
            for (k, r) in row.iter_mut().enumerate() {
                let base = spec.class_mixture[k] / mix_sum;
                *r = ((1.0 - rho) * base + rho * f64::from(u8::from(k == fav))) * cpp as f64 + 1e-12;
            }
            row
        })
        .collect();
    for _ in 0..200 {
        for k in 0..4 {
            let col: f64 = t.iter().map(|r| r[k]).sum();
            if col > 0.0 {
                for r in t.iter_mut() {
                    r[k] *= totals[k] as f64 / col;
                }
            }
        }
        for r in t.iter_mut() {
            let s: f64 = r.iter().sum();
            for v in r.iter_mut() {
                *v *= cpp as f64 / s;
            }
        }
    }
    let mut out: Vec<[usize; 4]> = t
        .iter()
        .map(|r| r.map(|v| v.floor() as usize))
        .collect();
    let mut col_def: Vec<usize> = (0..4)
        .map(|k| totals[k] - out.iter().map(|r| r[k]).sum::<usize>().min(totals[k]))
        .collect();
    for p in 0..n_p {
        let mut deficit = cpp - out[p].iter().sum::<usize>();
        while deficit > 0 {
            let k = (0..4)
                .filter(|&k| col_def[k] > 0)
                .max_by(|&a, &b| {
                    let fa = t[p][a] - out[p][a] as f64;
                    let fb = t[p][b] - out[p][b] as f64;
                    fa.partial_cmp(&fb).unwrap().then(b.cmp(&a))
                })
                .expect("row and column deficits balance");
            out[p][k] += 1;
            col_def[k] -= 1;
            deficit -= 1;
        }
    }
    out
}

struct PatientMeta {
    id: String,
    sex: Sex,
    age: f64,
    location: &'static str,
    split: Split,
}

fn patients(spec: &SynthSpec) -> Vec<PatientMeta> {
    const LOCATIONS: [&str; 5] = ["Tc", "Al", "Ar", "Pl", "Pr"];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0001);
    (0..spec.n_patients)
        .map(|p| {
            let g = p % N_METADATA_GROUPS;
            let sex = if g & 1 == 1 { Sex::F } else { Sex::M };
            let age = if g >> 1 == 1 {
                rng.gen_range(25.0..80.0f64)
            } else {
                rng.gen_range(2.0..16.0f64)
            };
            PatientMeta {
                id: format!("{:03}", p + 1),
                sex,
                age: (age * 10.0).round() / 10.0,
                location: LOCATIONS[p % LOCATIONS.len()],
                split: if p >= spec.n_patients - spec.n_test_patients {
                    Split::Test
                } else {
                    Split::Train
                },
            }
        })
        .collect()
}

fn cycle_signal(class: usize, n: usize, spec: &SynthSpec, patient_tone: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let rate = spec.rate_hz as f64;
    // breath noise: one-pole low-pass with a patient-specific corner
    let a = (-2.0 * PI * patient_tone / rate).exp();
    let mut lp = 0.0;
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let env = (PI * i as f64 / n as f64).sin().powf(0.5);
            lp = a * lp + (1.0 - a) * rng.gen_range(-1.0..1.0f64);
            spec.noise_level * 8.0 * lp * env + spec.noise_level * 0.1 * rng.gen_range(-1.0..1.0f64)
        })
        .collect();
    let wheeze = class == 2 || class == 3;
    let crackle = class == 1 || class == 3;
    if wheeze {
        let f0 = rng.gen_range(400.0..800.0f64);
        let vib = rng.gen_range(2.0..6.0f64);
        let ph0 = rng.gen_range(0.0..2.0 * PI);
        let mut phase = ph0;
        for (i, v) in x.iter_mut().enumerate() {
            let t = i as f64 / rate;
            let f = f0 * (1.0 + 0.02 * (2.0 * PI * vib * t).sin());
            phase += 2.0 * PI * f / rate;
            let env = (PI * i as f64 / n as f64).sin().max(0.2);
            *v += spec.wheeze_level * env * (phase.sin() + 0.3 * (2.0 * phase).sin());
        }
    }
    if crackle {
        let dur_s = n as f64 / rate;
        let n_clicks = ((spec.crackle_rate_hz * dur_s).round() as usize).max(3);
        for _ in 0..n_clicks {
            let at = rng.gen_range(0..n);
            let len = (rate * rng.gen_range(0.003..0.008)) as usize;
            let fc = rng.gen_range(200.0..1500.0f64);
            let amp = spec.crackle_level * rng.gen_range(0.6..1.0);
            for j in 0..len.min(n - at) {
                let t = j as f64 / rate;
                let decay = (-(j as f64) / (len as f64 / 4.0)).exp();
                x[at + j] += amp * decay * (2.0 * PI * fc * t).sin();
            }
        }
    }
    x.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub audio_files: Vec<PathBuf>,
}

/// Writes `audio/*.wav` and `manifest.tsv` under `out`.
pub fn generate(spec: &SynthSpec, out: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    let audio_dir = out.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let counts = class_matrix(spec);
    let meta = patients(spec);
    let labels = Dataset::Synth.labels();

    // per-patient cycle class order
    let plans: Vec<Vec<usize>> = (0..spec.n_patients)
        .map(|p| {
            let mut classes: Vec<usize> = (0..4).flat_map(|k| std::iter::repeat_n(k, counts[p][k])).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003).wrapping_add(p as u64));
            classes.shuffle(&mut rng);
            classes
        })
        .collect();

    let jobs: Vec<(usize, usize)> = (0..spec.n_patients)
        .flat_map(|p| (0..spec.cycles_per_patient.div_ceil(spec.cycles_per_recording)).map(move |r| (p, r)))
        .collect();
    let results = exec::map_range(jobs.len(), |j| -> Result<(PathBuf, Vec<CycleRecord>)> {
        let (p, r) = jobs[j];
        let pm = &meta[p];
        let mut rng = ChaCha8Rng::seed_from_u64(
            spec.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(((p as u64) << 20) | r as u64),
        );
        let patient_tone = 150.0 + 40.0 * (p % 5) as f64;
        let rate = spec.rate_hz as f64;
        let first = r * spec.cycles_per_recording;
        let last = (first + spec.cycles_per_recording).min(spec.cycles_per_patient);
        let name = format!("p{}_r{:02}", pm.id, r);
        let path = audio_dir.join(format!("{name}.wav"));
        let mut samples = Vec::new();
        let mut recs = Vec::new();
        for (c, &class) in plans[p][first..last].iter().enumerate() {
            let dur = rng.gen_range(spec.min_cycle_s..=spec.max_cycle_s);
            let n = (dur * rate).round() as usize;
            let start = samples.len();
            samples.extend(cycle_signal(class, n, spec, patient_tone, &mut rng));
            recs.push(CycleRecord {
                cycle_id: format!("{name}_c{c:02}"),
                audio_path: path.clone(),
                start_s: start as f64 / rate,
                end_s: samples.len() as f64 / rate,
                class_label: labels[class].to_string(),
                patient_id: pm.id.clone(),
                sex: pm.sex,
                age_years: Some(pm.age),
                device: "synth".into(),
                location: pm.location.into(),
                split: pm.split,
            });
        }
        write_wav(&path, &Waveform::new(samples, spec.rate_hz))?;
        Ok((path, recs))
    });

    let mut records = Vec::with_capacity(spec.n_records());
    let mut audio_files = Vec::new();
    for r in results {
        let (path, recs) = r?;
        audio_files.push(path);
        records.extend(recs);
    }
    let manifest = Manifest {
        dataset: Dataset::Synth,
        records,
    };
    let manifest_path = out.join("manifest.tsv");
    write_manifest(&manifest_path, &manifest)?;
    Ok(SynthOutput {
        manifest,
        manifest_path,
        audio_files,
    })
}
