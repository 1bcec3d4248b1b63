//! Waveform preprocessing and log-mel extraction.
//!
//! Recordings are mixed to mono, resampled with a windowed-sinc interpolator,
//! sliced to one respiratory cycle (capped, then tiled or padded to a fixed
//! length), and turned into a natural-log mel spectrogram from a Hann-window
//! STFT magnitude and a Slaney-style triangular filterbank.

use std::fs;
use std::path::{Path, PathBuf};

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::manifest::CycleRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, rate_hz: u32) -> Self {
        Self { samples, rate_hz }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate_hz as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortCycle {
    /// Repeat the cycle until it fills the target length.
    Tile,
    /// Append zeros up to the target length.
    Pad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelParams {
    pub n_mels: usize,
    pub win: usize,
    pub hop: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub rate: u32,
    pub max_cycle_s: f64,
    /// Cycles shorter than this are tiled (or padded) up to it.
    pub min_cycle_s: f64,
    pub short_cycle: ShortCycle,
    pub log_floor: f64,
    pub center_pad: bool,
    /// Per-spectrogram zero-mean / unit-variance scaling after the log.
    pub standardize: bool,
}

impl Default for MelParams {
    fn default() -> Self {
        Self {
            n_mels: 64,
            win: 1024,
            hop: 512,
            f_min: 50.0,
            f_max: 2000.0,
            rate: 16_000,
            max_cycle_s: 8.0,
            min_cycle_s: 8.0,
            short_cycle: ShortCycle::Tile,
            log_floor: 1e-10,
            center_pad: true,
            standardize: true,
        }
    }
}

impl MelParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::MelParams(m));
        if self.n_mels == 0 || self.hop == 0 || self.rate == 0 {
            return bad("n_mels, hop and rate must be positive".into());
        }
        if self.win < self.hop {
            return bad(format!("win {} < hop {}", self.win, self.hop));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= self.rate as f64 / 2.0) {
            return bad(format!(
                "need 0 <= f_min < f_max <= rate/2, got {}..{} at {} Hz",
                self.f_min, self.f_max, self.rate
            ));
        }
        if !(self.max_cycle_s > 0.0) || self.min_cycle_s < 0.0 {
            return bad("cycle length bounds must be positive".into());
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }

    /// Frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        if self.center_pad {
            Some(1 + len / self.hop)
        } else if len >= self.win {
            Some(1 + (len - self.win) / self.hop)
        } else {
            None
        }
    }

    /// Samples in a sliced training cycle when every cycle is brought to the
    /// same length (`min_cycle_s == max_cycle_s`).
    pub fn cycle_samples(&self) -> usize {
        (self.min_cycle_s * self.rate as f64).round() as usize
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("params serialize");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Log-mel spectrogram, row-major `[n_mels × n_frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelGram {
    pub grid: Vec<f32>,
    pub n_mels: usize,
    pub n_frames: usize,
}

impl MelGram {
    pub fn new(grid: Vec<f32>, n_mels: usize, n_frames: usize) -> Result<Self> {
        if grid.len() != n_mels * n_frames {
            return Err(Error::Shape(format!(
                "mel grid has {} cells, expected {n_mels}×{n_frames}",
                grid.len()
            )));
        }
        Ok(Self {
            grid,
            n_mels,
            n_frames,
        })
    }

    pub fn at(&self, mel: usize, frame: usize) -> f32 {
        self.grid[mel * self.n_frames + frame]
    }
}

// ---------------------------------------------------------------------------
// Audio I/O

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let audio_err = |e: hound::Error| Error::Audio {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = hound::WavReader::open(path).map_err(audio_err)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(audio_err)?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(audio_err)?
        }
    };
    let samples = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    Ok(Waveform::new(samples, spec.sample_rate))
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.rate_hz,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let audio_err = |e: hound::Error| Error::Audio {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(audio_err)?;
    for &s in &w.samples {
        writer.write_sample(s).map_err(audio_err)?;
    }
    writer.finalize().map_err(audio_err)
}

// ---------------------------------------------------------------------------
// Resampling

const SINC_ZERO_CROSSINGS: f64 = 16.0;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Band-limited resampling by windowed-sinc interpolation.
pub fn resample(w: &Waveform, target_hz: u32) -> Result<Waveform> {
    if target_hz == 0 {
        return Err(Error::Other("resample target rate must be positive".into()));
    }
    if w.rate_hz == target_hz || w.samples.is_empty() {
        return Ok(Waveform::new(w.samples.clone(), target_hz));
    }
    let src = w.rate_hz as f64;
    let dst = target_hz as f64;
    let ratio = dst / src;
    let out_len = (w.samples.len() as f64 * ratio).round() as usize;
    // cutoff as a fraction of the source Nyquist
    let cutoff = ratio.min(1.0) * 0.95;
    let half_width = SINC_ZERO_CROSSINGS / cutoff;
    let input = &w.samples;
    let n = input.len() as isize;
    let mut out = vec![0.0f32; out_len];
    exec::for_each_chunk_mut(&mut out, 4096, |ci, chunk| {
        for (j, o) in chunk.iter_mut().enumerate() {
            let t = (ci * 4096 + j) as f64 / ratio;
            let lo = (t - half_width).ceil().max(0.0) as isize;
            let hi = ((t + half_width).floor() as isize).min(n - 1);
            let mut acc = 0.0f64;
            for k in lo..=hi {
                let x = t - k as f64;
                let win = 0.5 + 0.5 * (std::f64::consts::PI * x / half_width).cos();
                acc += input[k as usize] as f64 * cutoff * sinc(cutoff * x) * win;
            }
            *o = acc as f32;
        }
    });
    Ok(Waveform::new(out, target_hz))
}

// ---------------------------------------------------------------------------
// Cycle slicing

/// Extracts one cycle, caps it at `max_cycle_s` and brings it up to
/// `min_cycle_s` by tiling or zero padding.
pub fn slice_cycle(w: &Waveform, rec: &CycleRecord, p: &MelParams) -> Result<Waveform> {
    let rate = w.rate_hz as f64;
    let len = w.samples.len();
    let mut start = (rec.start_s * rate).round();
    let mut end = (rec.end_s.min(rec.start_s + p.max_cycle_s) * rate).round();
    if start < 0.0 || end > len as f64 {
        log::warn!(
            "cycle {} [{:.3}, {:.3}] s exceeds recording of {:.3} s; clamping",
            rec.cycle_id,
            rec.start_s,
            rec.end_s,
            len as f64 / rate
        );
        start = start.max(0.0);
        end = end.min(len as f64);
    }
    if end <= start {
        return Err(Error::EmptyCycle(rec.cycle_id.clone()));
    }
    let piece = &w.samples[start as usize..end as usize];
    let target = (p.min_cycle_s * rate).round() as usize;
    let samples = if piece.len() >= target {
        piece.to_vec()
    } else {
        match p.short_cycle {
            ShortCycle::Tile => piece.iter().copied().cycle().take(target).collect(),
            ShortCycle::Pad => {
                let mut v = piece.to_vec();
                v.resize(target, 0.0);
                v
            }
        }
    };
    Ok(Waveform::new(samples, w.rate_hz))
}

// ---------------------------------------------------------------------------
// Mel spectrogram

const SLANEY_F_SP: f64 = 200.0 / 3.0;
const SLANEY_MIN_LOG_HZ: f64 = 1000.0;
const SLANEY_MIN_LOG_MEL: f64 = SLANEY_MIN_LOG_HZ / SLANEY_F_SP;

fn slaney_logstep() -> f64 {
    6.4f64.ln() / 27.0
}

pub fn hz_to_mel(f: f64) -> f64 {
    if f < SLANEY_MIN_LOG_HZ {
        f / SLANEY_F_SP
    } else {
        SLANEY_MIN_LOG_MEL + (f / SLANEY_MIN_LOG_HZ).ln() / slaney_logstep()
    }
}

pub fn mel_to_hz(m: f64) -> f64 {
    if m < SLANEY_MIN_LOG_MEL {
        m * SLANEY_F_SP
    } else {
        SLANEY_MIN_LOG_HZ * ((m - SLANEY_MIN_LOG_MEL) * slaney_logstep()).exp()
    }
}

/// `n_mels + 2` band edges equally spaced on the mel scale.
fn mel_edges(p: &MelParams) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(p.f_min), hz_to_mel(p.f_max));
    (0..p.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (p.n_mels + 1) as f64))
        .collect()
}

/// Center frequency of every mel band.
pub fn mel_center_frequencies(p: &MelParams) -> Vec<f64> {
    mel_edges(p)[1..=p.n_mels].to_vec()
}

/// Area-normalized triangular filters, row-major `[n_mels × (win/2 + 1)]`.
pub fn mel_filterbank(p: &MelParams) -> Vec<f64> {
    let n_bins = p.win / 2 + 1;
    let edges = mel_edges(p);
    let mut bank = vec![0.0; p.n_mels * n_bins];
    for m in 0..p.n_mels {
        let (f0, f1, f2) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (f2 - f0);
        for k in 0..n_bins {
            let f = k as f64 * p.rate as f64 / p.win as f64;
            let w = ((f - f0) / (f1 - f0)).min((f2 - f) / (f2 - f1)).max(0.0);
            bank[m * n_bins + k] = w * norm;
        }
    }
    bank
}

fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Log-mel spectrogram of `w`.
pub fn melgram(w: &Waveform, p: &MelParams) -> Result<MelGram> {
    p.validate()?;
    if w.rate_hz != p.rate {
        return Err(Error::MelParams(format!(
            "waveform rate {} differs from mel rate {}",
            w.rate_hz, p.rate
        )));
    }
    let len = w.samples.len();
    let n_frames = p
        .frame_count(len)
        .ok_or(Error::SignalTooShort { len, win: p.win })?;
    if len == 0 {
        return Err(Error::SignalTooShort { len, win: p.win });
    }
    let offset = if p.center_pad { (p.win / 2) as isize } else { 0 };
    let window: Vec<f64> = (0..p.win)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / p.win as f64).cos())
        .collect();
    let bank = mel_filterbank(p);
    let n_bins = p.win / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(p.win);
    let mut grid = vec![0.0f32; p.n_mels * n_frames];
    let mut buf = vec![Complex::new(0.0, 0.0); p.win];
    let mut mag = vec![0.0f64; n_bins];
    for t in 0..n_frames {
        let base = (t * p.hop) as isize - offset;
        for (n, slot) in buf.iter_mut().enumerate() {
            let idx = reflect_index(base + n as isize, len);
            *slot = Complex::new(w.samples[idx] as f64 * window[n], 0.0);
        }
        fft.process(&mut buf);
        for (k, m) in mag.iter_mut().enumerate() {
            *m = buf[k].norm();
        }
        for m in 0..p.n_mels {
            let e: f64 = bank[m * n_bins..(m + 1) * n_bins]
                .iter()
                .zip(&mag)
                .map(|(a, b)| a * b)
                .sum();
            grid[m * n_frames + t] = (e + p.log_floor).ln() as f32;
        }
    }
    MelGram::new(grid, p.n_mels, n_frames)
}

/// In-place zero-mean / unit-variance scaling; constant grids are only centred.
pub fn standardize(m: &mut MelGram) {
    let n = m.grid.len() as f64;
    if n == 0.0 {
        return;
    }
    let mean = m.grid.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = m.grid.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    let scale = if sd > 1e-8 { 1.0 / sd } else { 1.0 };
    for v in &mut m.grid {
        *v = ((*v as f64 - mean) * scale) as f32;
    }
}

/// Full per-cycle front end: resample → slice → log-mel → optional standardization.
pub fn cycle_features(recording: &Waveform, rec: &CycleRecord, p: &MelParams) -> Result<MelGram> {
    let w = resample(recording, p.rate)?;
    let cyc = slice_cycle(&w, rec, p)?;
    let mut m = melgram(&cyc, p)?;
    if p.standardize {
        standardize(&mut m);
    }
    Ok(m)
}

/// Computes features for every record, reading each audio file once.
pub fn features_for_records(records: &[CycleRecord], p: &MelParams) -> Result<Vec<MelGram>> {
    use std::collections::BTreeMap;
    let mut by_file: BTreeMap<&Path, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_file.entry(r.audio_path.as_path()).or_default().push(i);
    }
    let groups: Vec<(&Path, Vec<usize>)> = by_file.into_iter().collect();
    let per_file = exec::map_range(groups.len(), |g| -> Result<Vec<(usize, MelGram)>> {
        let (path, idx) = &groups[g];
        let w = resample(&read_wav(path)?, p.rate)?;
        idx.iter()
            .map(|&i| {
                let cyc = slice_cycle(&w, &records[i], p)?;
                let mut m = melgram(&cyc, p)?;
                if p.standardize {
                    standardize(&mut m);
                }
                Ok((i, m))
            })
            .collect()
    });
    let mut out: Vec<Option<MelGram>> = vec![None; records.len()];
    for r in per_file {
        for (i, m) in r? {
            out[i] = Some(m);
        }
    }
    Ok(out.into_iter().map(|m| m.expect("every record processed")).collect())
}

// ---------------------------------------------------------------------------
// Feature cache

fn cache_paths(dir: &Path, cycle_id: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{cycle_id}.f32")),
        dir.join(format!("{cycle_id}.hdr")),
    )
}

/// Writes `<id>.f32` (little-endian, row-major) and `<id>.hdr`
/// (`n_mels n_frames params_hash`).
pub fn write_cached(dir: &Path, cycle_id: &str, m: &MelGram, params_hash: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (data, hdr) = cache_paths(dir, cycle_id);
    let mut bytes = Vec::with_capacity(m.grid.len() * 4);
    for v in &m.grid {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&data, bytes).map_err(|e| Error::io(&data, e))?;
    fs::write(&hdr, format!("{} {} {}\n", m.n_mels, m.n_frames, params_hash))
        .map_err(|e| Error::io(&hdr, e))
}

/// Reads a cached grid; `Ok(None)` when absent or computed with other parameters.
pub fn read_cached(dir: &Path, cycle_id: &str, params_hash: &str) -> Result<Option<MelGram>> {
    let (data, hdr) = cache_paths(dir, cycle_id);
    let Ok(header) = fs::read_to_string(&hdr) else {
        return Ok(None);
    };
    let f: Vec<&str> = header.split_whitespace().collect();
    if f.len() != 3 || f[2] != params_hash {
        return Ok(None);
    }
    let parse = |s: &str| {
        s.parse::<usize>().map_err(|_| Error::Parse {
            path: hdr.clone(),
            line: 1,
            message: format!("bad dimension {s}"),
        })
    };
    let (n_mels, n_frames) = (parse(f[0])?, parse(f[1])?);
    let bytes = fs::read(&data).map_err(|e| Error::io(&data, e))?;
    let grid = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    MelGram::new(grid, n_mels, n_frames).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{Sex, Split};

    fn record(start: f64, end: f64) -> CycleRecord {
        CycleRecord {
            cycle_id: "c0".into(),
            audio_path: PathBuf::from("x.wav"),
            start_s: start,
            end_s: end,
            class_label: "normal".into(),
            patient_id: "p".into(),
            sex: Sex::Unknown,
            age_years: None,
            device: String::new(),
            location: String::new(),
            split: Split::Train,
        }
    }

    fn tone(freq: f64, rate: u32, secs: f64) -> Waveform {
        let n = (rate as f64 * secs) as usize;
        Waveform::new(
            (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin() as f32)
                .collect(),
            rate,
        )
    }

    /// Index of the largest-magnitude FFT bin of a real signal.
    fn dominant_bin(x: &[f32]) -> usize {
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        (1..buf.len() / 2)
            .max_by(|&a, &b| buf[a].norm().partial_cmp(&buf[b].norm()).unwrap())
            .unwrap()
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let w = tone(300.0, 16_000, 0.1);
        assert_eq!(resample(&w, 16_000).unwrap(), w);
    }

    #[test]
    fn resample_length() {
        let w = tone(300.0, 4_000, 1.0);
        let r = resample(&w, 16_000).unwrap();
        assert!((r.samples.len() as i64 - 16_000).abs() <= 1);
        assert!(resample(&Waveform::new(vec![], 8000), 16_000).unwrap().samples.is_empty());
    }

    #[test]
    fn resampled_tone_keeps_frequency() {
        let w = tone(440.0, 8_000, 1.0);
        let r = resample(&w, 16_000).unwrap();
        // 1 s of signal: bin k is k Hz
        let bin = dominant_bin(&r.samples);
        assert!((bin as i64 - 440).abs() <= 1, "dominant bin {bin}");
    }

    #[test]
    fn slice_caps_long_cycles() {
        let w = Waveform::new(vec![0.1; 16_000 * 13], 16_000);
        let p = MelParams::default();
        let out = slice_cycle(&w, &record(0.5, 12.5), &p).unwrap();
        assert_eq!(out.samples.len(), 8 * 16_000);
    }

    #[test]
    fn slice_tiles_short_cycles() {
        let w = Waveform::new((0..16_000 * 4).map(|i| i as f32).collect(), 16_000);
        let p = MelParams::default();
        let out = slice_cycle(&w, &record(0.0, 3.0), &p).unwrap();
        assert_eq!(out.samples.len(), 8 * 16_000);
        let period = 3 * 16_000;
        assert_eq!(out.samples[period], out.samples[0]);
        assert_eq!(out.samples[2 * period + 17], out.samples[17]);

        let short = slice_cycle(&w, &record(1.0, 1.2), &p).unwrap();
        assert_eq!(&short.samples[..3200], &w.samples[16_000..19_200]);

        let padded = slice_cycle(
            &w,
            &record(0.0, 3.0),
            &MelParams {
                short_cycle: ShortCycle::Pad,
                ..p
            },
        )
        .unwrap();
        assert!(padded.samples[3 * 16_000..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn slice_clamps_and_rejects_empty() {
        let w = Waveform::new(vec![1.0; 16_000], 16_000);
        let p = MelParams {
            min_cycle_s: 0.0,
            ..Default::default()
        };
        let out = slice_cycle(&w, &record(0.5, 3.0), &p).unwrap();
        assert_eq!(out.samples.len(), 8000);
        assert!(matches!(
            slice_cycle(&w, &record(2.0, 3.0), &p),
            Err(Error::EmptyCycle(_))
        ));
    }

    #[test]
    fn frame_count_eight_seconds() {
        let p = MelParams::default();
        let w = Waveform::new(vec![0.0; 128_000], 16_000);
        let m = melgram(&w, &p).unwrap();
        assert_eq!(m.n_frames, 251);
        assert_eq!(m.n_mels, 64);
    }

    #[test]
    fn silence_is_log_floor() {
        let p = MelParams::default();
        let m = melgram(&Waveform::new(vec![0.0; 4000], 16_000), &p).unwrap();
        let expected = (p.log_floor.ln()) as f32;
        assert!(m.grid.iter().all(|&v| v == expected));
    }

    #[test]
    fn uncentred_short_signal_errors() {
        let p = MelParams {
            center_pad: false,
            ..Default::default()
        };
        assert!(matches!(
            melgram(&Waveform::new(vec![0.0; 1000], 16_000), &p),
            Err(Error::SignalTooShort { .. })
        ));
        let ok = melgram(&Waveform::new(vec![0.0; 1024 + 512 * 3], 16_000), &p).unwrap();
        assert_eq!(ok.n_frames, 4);
    }

    #[test]
    fn pure_tone_peaks_at_nearest_band() {
        let p = MelParams::default();
        let centers = mel_center_frequencies(&p);
        let nearest = (0..centers.len())
            .min_by(|&a, &b| {
                (centers[a] - 1000.0)
                    .abs()
                    .partial_cmp(&(centers[b] - 1000.0).abs())
                    .unwrap()
            })
            .unwrap();
        // cosine phase: reflect padding continues it smoothly into the first frame
        let w = Waveform::new(
            (0..32_000)
                .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 16_000.0).cos() as f32)
                .collect(),
            16_000,
        );
        let m = melgram(&w, &p).unwrap();
        for t in 0..m.n_frames {
            let arg = (0..p.n_mels)
                .max_by(|&a, &b| m.at(a, t).partial_cmp(&m.at(b, t)).unwrap())
                .unwrap();
            assert_eq!(arg, nearest, "frame {t}");
        }
    }

    #[test]
    fn filterbank_rows_contiguous_and_positive_on_flat_spectrum() {
        let p = MelParams::default();
        let bank = mel_filterbank(&p);
        let n_bins = p.win / 2 + 1;
        for m in 0..p.n_mels {
            let row = &bank[m * n_bins..(m + 1) * n_bins];
            assert!(row.iter().all(|&v| v >= 0.0));
            let nz: Vec<usize> = (0..n_bins).filter(|&k| row[k] > 0.0).collect();
            assert!(!nz.is_empty());
            assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len(), "band {m} not contiguous");
            assert!(row.iter().sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn louder_never_decreases() {
        let p = MelParams {
            min_cycle_s: 0.0,
            ..Default::default()
        };
        let w = tone(700.0, 16_000, 0.5);
        let loud = Waveform::new(w.samples.iter().map(|v| v * 2.5).collect(), 16_000);
        let (a, b) = (melgram(&w, &p).unwrap(), melgram(&loud, &p).unwrap());
        assert!(a.grid.iter().zip(&b.grid).all(|(x, y)| y >= x));
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = MelGram::new(vec![1.0, -2.5, 3.25, 0.0, 7.0, 8.0], 2, 3).unwrap();
        write_cached(dir.path(), "id1", &m, "abc").unwrap();
        assert_eq!(read_cached(dir.path(), "id1", "abc").unwrap(), Some(m));
        assert_eq!(read_cached(dir.path(), "id1", "other").unwrap(), None);
        assert_eq!(read_cached(dir.path(), "missing", "abc").unwrap(), None);
    }
}
