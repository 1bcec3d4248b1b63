//! Training objectives: cross-entropy, supervised contrastive (SCL) over a
//! multiviewed batch, its multi-head weighted sum, and the CE/SCL hybrid.
//!
//! Each loss returns its value together with the analytic gradient with
//! respect to its inputs (logits or projections). Internals run in `f64`
//! regardless of the model's element type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    /// Softmax denominator over the anchor's negatives only.
    NegativesOnly,
    /// Softmax denominator over every view except the anchor itself.
    AllButSelf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

impl Reduction {
    fn weight(self, n: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub alpha: f64,
    /// One weight per contrastive head: class head first, metadata head second.
    pub lambdas: Vec<f64>,
    pub denominator_mode: DenominatorMode,
    /// Outer reduction over anchors for the contrastive loss.
    pub reduction: Reduction,
    /// Reduction over samples for cross-entropy.
    pub ce_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.06,
            alpha: 0.5,
            lambdas: vec![0.25, 0.75],
            denominator_mode: DenominatorMode::NegativesOnly,
            reduction: Reduction::Sum,
            ce_reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("loss.tau", format!("must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(
                "loss.alpha",
                format!("must lie in [0, 1], got {}", self.alpha),
            ));
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::config("loss.lambdas", "need one positive weight per head"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Cross-entropy

/// Row-wise numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let (b, c) = (logits.dim(0), logits.dim(1));
    let mut out = Tensor::zeros(&[b, c]);
    for r in 0..b {
        let row = logits.row(r);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        for (j, e) in exps.into_iter().enumerate() {
            out.data_mut()[r * c + j] = T::lit(e / s);
        }
    }
    out
}

fn check_targets(targets: &[usize], rows: usize, classes: usize) -> Result<()> {
    if targets.len() != rows {
        return Err(Error::Shape(format!(
            "{} targets for {rows} rows",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::TargetOutOfRange { target: t, classes });
    }
    Ok(())
}

/// Cross-entropy of class probabilities against integer targets.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, targets: &[usize], reduction: Reduction) -> Result<f64> {
    let (b, c) = (probs.dim(0), probs.dim(1));
    check_targets(targets, b, c)?;
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| -probs.row(r)[t].as_f64().ln())
        .sum();
    Ok(total * reduction.weight(b))
}

/// Cross-entropy computed from logits, with the gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    reduction: Reduction,
) -> Result<(f64, Tensor<T>)> {
    let (b, c) = (logits.dim(0), logits.dim(1));
    check_targets(targets, b, c)?;
    let w = reduction.weight(b);
    let mut grad = Tensor::zeros(&[b, c]);
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
        for j in 0..c {
            let p = (row[j] - lse).exp();
            let g = if j == t { p - 1.0 } else { p };
            grad.data_mut()[r * c + j] = T::lit(g * w);
        }
    }
    Ok((total * w, grad))
}

// ---------------------------------------------------------------------------
// Supervised contrastive

/// Positives and negatives of one anchor view (0-indexed).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// `P(i)` = other views sharing the anchor's label, `N(i)` = views with a different label.
pub fn pair_sets(labels: &[usize]) -> Vec<PairSet> {
    (0..labels.len())
        .map(|i| {
            let (mut positives, mut negatives) = (Vec::new(), Vec::new());
            for (j, &l) in labels.iter().enumerate() {
                if j == i {
                    continue;
                }
                if l == labels[i] {
                    positives.push(j);
                } else {
                    negatives.push(j);
                }
            }
            PairSet {
                positives,
                negatives,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SupConOutput<T> {
    pub loss: f64,
    /// Gradient w.r.t. the projections, same shape as the input.
    pub grad: Tensor<T>,
    /// Anchors left out because their positive or denominator set was empty.
    pub skipped: usize,
}

/// Supervised contrastive loss over the rows of `z` (one row per view).
pub fn supcon_loss<T: Scalar>(z: &Tensor<T>, labels: &[usize], cfg: &LossConfig) -> Result<SupConOutput<T>> {
    if z.shape().len() != 2 || z.dim(0) != labels.len() {
        return Err(Error::Shape(format!(
            "projections {:?} vs {} labels",
            z.shape(),
            labels.len()
        )));
    }
    if !(cfg.tau > 0.0) {
        return Err(Error::config("loss.tau", "must be > 0"));
    }
    let (m, d) = (z.dim(0), z.dim(1));
    let zf: Vec<f64> = z.data().iter().map(|v| v.as_f64()).collect();
    let mut sim = vec![0.0f64; m * m];
    crate::nn::gemm_f64_abt(m, d, &zf, &mut sim);
    let inv_tau = 1.0 / cfg.tau;
    for s in &mut sim {
        *s *= inv_tau;
    }

    let sets = pair_sets(labels);
    let valid: Vec<bool> = sets
        .iter()
        .map(|s| {
            !s.positives.is_empty()
                && match cfg.denominator_mode {
                    DenominatorMode::NegativesOnly => !s.negatives.is_empty(),
                    DenominatorMode::AllButSelf => true,
                }
        })
        .collect();
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::DegenerateBatch);
    }
    let w = cfg.reduction.weight(n_valid);

    let mut dsim = vec![0.0f64; m * m];
    let mut total = 0.0;
    let mut denom: Vec<usize> = Vec::with_capacity(m);
    for (i, set) in sets.iter().enumerate() {
        if !valid[i] {
            continue;
        }
        denom.clear();
        match cfg.denominator_mode {
            DenominatorMode::NegativesOnly => denom.extend_from_slice(&set.negatives),
            DenominatorMode::AllButSelf => denom.extend((0..m).filter(|&j| j != i)),
        }
        let row = &sim[i * m..(i + 1) * m];
        let mx = denom.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = denom.iter().map(|&j| (row[j] - mx).exp()).sum();
        let lse = mx + sum_exp.ln();
        let inv_p = 1.0 / set.positives.len() as f64;
        let pos_mean: f64 = set.positives.iter().map(|&p| row[p]).sum::<f64>() * inv_p;
        total += lse - pos_mean;

        let grow = &mut dsim[i * m..(i + 1) * m];
        for &j in &denom {
            grow[j] += w * (row[j] - lse).exp();
        }
        for &p in &set.positives {
            grow[p] -= w * inv_p;
        }
    }

    // sim = z zᵀ / τ  ⇒  dz = (dS + dSᵀ) z / τ
    let mut sym = vec![0.0f64; m * m];
    for i in 0..m {
        for j in 0..m {
            sym[i * m + j] = (dsim[i * m + j] + dsim[j * m + i]) * inv_tau;
        }
    }
    let mut dz = vec![0.0f64; m * d];
    crate::nn::gemm_f64_ab(m, m, d, &sym, &zf, &mut dz);
    Ok(SupConOutput {
        loss: total * w,
        grad: Tensor::from_vec(&[m, d], dz.into_iter().map(T::lit).collect())?,
        skipped: m - n_valid,
    })
}

/// Projections and labels for one contrastive head. `None` labels mark views
/// that must not participate (e.g. unknown metadata); passing them here is an
/// error, callers filter them out first.
#[derive(Debug, Clone, Copy)]
pub struct HeadInput<'a, T> {
    pub z: &'a Tensor<T>,
    pub labels: &'a [Option<usize>],
}

#[derive(Debug, Clone)]
pub struct MultiSupConOutput<T> {
    pub loss: f64,
    /// Unweighted per-head losses.
    pub per_head: Vec<f64>,
    /// Gradients of the weighted total w.r.t. each head's projections.
    pub grads: Vec<Tensor<T>>,
    pub skipped: usize,
}

/// Weighted sum of per-head supervised contrastive losses.
pub fn multi_supcon_loss<T: Scalar>(heads: &[HeadInput<'_, T>], cfg: &LossConfig) -> Result<MultiSupConOutput<T>> {
    if heads.is_empty() || cfg.lambdas.len() != heads.len() {
        return Err(Error::config(
            "loss.lambdas",
            format!("{} weights for {} heads", cfg.lambdas.len(), heads.len()),
        ));
    }
    let mut out = MultiSupConOutput {
        loss: 0.0,
        per_head: Vec::with_capacity(heads.len()),
        grads: Vec::with_capacity(heads.len()),
        skipped: 0,
    };
    for (k, (h, &lambda)) in heads.iter().zip(&cfg.lambdas).enumerate() {
        let missing: Vec<usize> = h
            .labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.is_none().then_some(i))
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingLabels {
                head: k,
                views: missing,
            });
        }
        let labels: Vec<usize> = h.labels.iter().map(|l| l.expect("checked")).collect();
        let mut r = supcon_loss(h.z, &labels, cfg)?;
        out.loss += lambda * r.loss;
        out.per_head.push(r.loss);
        r.grad.scale(T::lit(lambda));
        out.grads.push(r.grad);
        out.skipped += r.skipped;
    }
    Ok(out)
}

/// `alpha * ce + (1 - alpha) * scl`.
pub fn hybrid_loss(ce: f64, scl: f64, alpha: f64) -> f64 {
    alpha * ce + (1.0 - alpha) * scl
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg(tau: f64, mode: DenominatorMode) -> LossConfig {
        LossConfig {
            tau,
            denominator_mode: mode,
            ..Default::default()
        }
    }

    fn orthogonal_pairs() -> Tensor<f64> {
        Tensor::from_vec(&[4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn ce_one_hot_and_uniform() {
        let p = Tensor::<f64>::from_vec(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&p, &[1], Reduction::Mean).unwrap(), 0.0);
        let u = Tensor::<f64>::filled(&[2, 4], 0.25);
        assert_relative_eq!(
            cross_entropy(&u, &[0, 3], Reduction::Mean).unwrap(),
            4f64.ln(),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            cross_entropy(&u, &[0, 3], Reduction::Sum).unwrap(),
            2.0 * 4f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn ce_rejects_bad_target() {
        let u = Tensor::<f64>::filled(&[1, 4], 0.25);
        assert!(matches!(
            cross_entropy(&u, &[4], Reduction::Mean),
            Err(Error::TargetOutOfRange { target: 4, classes: 4 })
        ));
    }

    #[test]
    fn softmax_ce_matches_probability_form() {
        let logits = Tensor::<f64>::from_vec(&[2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, -0.5]).unwrap();
        let (v, _) = softmax_cross_entropy(&logits, &[2, 0], Reduction::Mean).unwrap();
        let p = softmax(&logits);
        assert_relative_eq!(v, cross_entropy(&p, &[2, 0], Reduction::Mean).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn pair_sets_small_cases() {
        let s = pair_sets(&[0, 0, 1, 1]);
        assert_eq!(s[0].positives, vec![1]);
        assert_eq!(s[0].negatives, vec![2, 3]);
        assert!(pair_sets(&[5, 5, 5]).iter().all(|p| p.negatives.is_empty()));
    }

    #[test]
    fn orthogonal_pairs_values() {
        let z = orthogonal_pairs();
        let l = [0, 0, 1, 1];
        let neg = supcon_loss(&z, &l, &cfg(1.0, DenominatorMode::NegativesOnly)).unwrap();
        assert_relative_eq!(neg.loss, 4.0 * (2f64.ln() - 1.0), epsilon = 1e-12);
        let all = supcon_loss(&z, &l, &cfg(1.0, DenominatorMode::AllButSelf)).unwrap();
        assert_relative_eq!(all.loss, 4.0 * (1.0 + 2.0 / std::f64::consts::E).ln(), epsilon = 1e-12);
    }

    #[test]
    fn identical_views_give_four_ln2() {
        let z = Tensor::<f64>::from_vec(&[4, 2], vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8, 0.6, 0.8]).unwrap();
        let r = supcon_loss(&z, &[0, 0, 1, 1], &cfg(1.0, DenominatorMode::NegativesOnly)).unwrap();
        assert_relative_eq!(r.loss, 4.0 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn single_label_batch_is_degenerate() {
        let z = orthogonal_pairs();
        assert!(matches!(
            supcon_loss(&z, &[1, 1, 1, 1], &cfg(1.0, DenominatorMode::NegativesOnly)),
            Err(Error::DegenerateBatch)
        ));
        // the all-but-self form stays defined
        assert!(supcon_loss(&z, &[1, 1, 1, 1], &cfg(1.0, DenominatorMode::AllButSelf)).is_ok());
    }

    #[test]
    fn anchors_without_negatives_are_skipped() {
        let z = Tensor::<f64>::from_vec(&[5, 2], vec![1.0, 0.0, 0.9, 0.1, 0.0, 1.0, 0.1, 0.9, 0.5, 0.5]).unwrap();
        // label 2 appears once: anchor 4 has no positives
        let r = supcon_loss(&z, &[0, 0, 1, 1, 2], &cfg(0.5, DenominatorMode::NegativesOnly)).unwrap();
        assert_eq!(r.skipped, 1);
    }

    #[test]
    fn mscl_weights_and_missing_labels() {
        let z = orthogonal_pairs();
        let c = cfg(1.0, DenominatorMode::NegativesOnly);
        let single = supcon_loss(&z, &[0, 0, 1, 1], &c).unwrap().loss;
        let labels = [Some(0), Some(0), Some(1), Some(1)];
        let one = LossConfig {
            lambdas: vec![1.0],
            ..c.clone()
        };
        let r = multi_supcon_loss(&[HeadInput { z: &z, labels: &labels }], &one).unwrap();
        assert_eq!(r.loss, single);

        let with_gap = [Some(0), None, Some(1), None];
        let err = multi_supcon_loss(
            &[
                HeadInput { z: &z, labels: &labels },
                HeadInput { z: &z, labels: &with_gap },
            ],
            &c,
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingLabels { head: 1, ref views } if views == &vec![1, 3]));
    }

    #[test]
    fn hybrid_arithmetic() {
        assert_eq!(hybrid_loss(1.0, 2.0, 1.0), 1.0);
        assert_eq!(hybrid_loss(1.0, 2.0, 0.0), 2.0);
        assert_eq!(hybrid_loss(1.0, 2.0, 0.5), 1.5);
        assert_eq!(0.25 * 2.0 + 0.75 * 1.0, 1.25);
    }

    #[test]
    fn config_validation_names_field() {
        let bad = LossConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("loss.tau"));
    }
}
