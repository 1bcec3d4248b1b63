//! SpecAugment-style frequency and time masking.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::MelGram;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskValue {
    Zero,
    /// Mean of the input grid.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub n_freq_masks: usize,
    /// Mel bins per frequency mask.
    pub freq_width: usize,
    pub n_time_masks: usize,
    /// Frames per time mask.
    pub time_width: usize,
    pub mask_value: MaskValue,
    pub seed: Option<u64>,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            n_freq_masks: 2,
            freq_width: 20,
            n_time_masks: 2,
            time_width: 40,
            mask_value: MaskValue::Zero,
            seed: None,
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            n_freq_masks: 0,
            n_time_masks: 0,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.n_freq_masks * self.freq_width == 0 && self.n_time_masks * self.time_width == 0
    }

    /// Upper bound on masked cells for an `n_mels × n_frames` grid.
    pub fn max_masked_cells(&self, n_mels: usize, n_frames: usize) -> usize {
        self.n_freq_masks * self.freq_width.min(n_mels) * n_frames
            + self.n_time_masks * self.time_width.min(n_frames) * n_mels
    }
}

/// Block positions drawn for one view, as `(start, width)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Masks {
    pub freq: Vec<(usize, usize)>,
    pub time: Vec<(usize, usize)>,
}

fn draw_blocks<R: Rng + ?Sized>(rng: &mut R, n: usize, width: usize, extent: usize) -> Vec<(usize, usize)> {
    let w = width.min(extent);
    if w == 0 {
        return Vec::new();
    }
    (0..n).map(|_| (rng.gen_range(0..=extent - w), w)).collect()
}

pub fn sample_masks<R: Rng + ?Sized>(n_mels: usize, n_frames: usize, pol: &AugmentationPolicy, rng: &mut R) -> Masks {
    let freq = draw_blocks(rng, pol.n_freq_masks, pol.freq_width, n_mels);
    let time = draw_blocks(rng, pol.n_time_masks, pol.time_width, n_frames);
    Masks { freq, time }
}

pub fn apply_masks(m: &MelGram, masks: &Masks, value: MaskValue) -> MelGram {
    let mut out = m.clone();
    let fill = match value {
        MaskValue::Zero => 0.0,
        MaskValue::Mean if m.grid.is_empty() => 0.0,
        MaskValue::Mean => (m.grid.iter().map(|&v| v as f64).sum::<f64>() / m.grid.len() as f64) as f32,
    };
    let t = m.n_frames;
    for &(s, w) in &masks.freq {
        out.grid[s * t..(s + w) * t].fill(fill);
    }
    for &(s, w) in &masks.time {
        for row in out.grid.chunks_exact_mut(t) {
            row[s..s + w].fill(fill);
        }
    }
    out
}

/// One stochastic view. Widths larger than the grid are clamped.
pub fn apply<R: Rng + ?Sized>(m: &MelGram, pol: &AugmentationPolicy, rng: &mut R) -> Result<MelGram> {
    if m.grid.is_empty() {
        return Err(Error::Shape("cannot augment an empty grid".into()));
    }
    let masks = sample_masks(m.n_mels, m.n_frames, pol, rng);
    Ok(apply_masks(m, &masks, pol.mask_value))
}

/// Two views from independent streams seeded with `s1` and `s2`.
pub fn make_views_seeded(m: &MelGram, pol: &AugmentationPolicy, s1: u64, s2: u64) -> Result<(MelGram, MelGram)> {
    let a = apply(m, pol, &mut ChaCha8Rng::seed_from_u64(s1))?;
    let b = apply(m, pol, &mut ChaCha8Rng::seed_from_u64(s2))?;
    Ok((a, b))
}

pub fn make_views<R: RngCore + ?Sized>(m: &MelGram, pol: &AugmentationPolicy, rng: &mut R) -> Result<(MelGram, MelGram)> {
    let s1 = rng.next_u64();
    let s2 = rng.next_u64();
    make_views_seeded(m, pol, s1, s2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n_mels: usize, n_frames: usize) -> MelGram {
        let grid = (0..n_mels * n_frames).map(|i| 1.0 + i as f32 * 0.01).collect();
        MelGram::new(grid, n_mels, n_frames).unwrap()
    }

    #[test]
    fn zero_width_is_identity() {
        let m = ramp(8, 10);
        let mut pol = AugmentationPolicy::default();
        pol.freq_width = 0;
        pol.time_width = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(apply(&m, &pol, &mut rng).unwrap(), m);
        let (a, b) = make_views(&m, &AugmentationPolicy::identity(), &mut rng).unwrap();
        assert_eq!((a, b), (m.clone(), m));
    }

    #[test]
    fn full_frequency_mask_blanks_grid() {
        let m = ramp(8, 10);
        let pol = AugmentationPolicy {
            n_freq_masks: 1,
            freq_width: 8,
            n_time_masks: 0,
            ..Default::default()
        };
        let out = apply(&m, &pol, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(out.grid.iter().all(|&v| v == 0.0));
        let mean = AugmentationPolicy {
            mask_value: MaskValue::Mean,
            ..pol
        };
        let out = apply(&m, &mean, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mu = (m.grid.iter().map(|&v| v as f64).sum::<f64>() / 80.0) as f32;
        assert!(out.grid.iter().all(|&v| v == mu));
    }

    #[test]
    fn oversized_widths_are_clamped() {
        let m = ramp(4, 6);
        let out = apply(&m, &AugmentationPolicy::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.grid.len(), 24);
        assert!(out.grid.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn views_depend_on_seed() {
        let m = ramp(64, 251);
        let pol = AugmentationPolicy::default();
        let (a, b) = make_views_seeded(&m, &pol, 5, 5).unwrap();
        assert_eq!(a, b);
        let differ = (0..8u64).any(|k| {
            let (a, b) = make_views_seeded(&m, &pol, 10 + k, 1000 + k).unwrap();
            a != b
        });
        assert!(differ);
    }

    #[test]
    fn empty_grid_errors() {
        let m = MelGram::new(Vec::new(), 0, 0).unwrap();
        assert!(apply(&m, &AugmentationPolicy::default(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
