//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod grad;

use rand::Rng;
use respcl::losses::DenominatorMode;

/// Per-anchor triple loop over views: for every anchor with a non-empty
/// positive set (and, for `negatives_only`, a non-empty negative set),
/// `-1/|P| Σ_p log(exp(s_ip) / Σ_{a∈D(i)} exp(s_ia))`, summed over anchors.
/// Returns `(sum, anchors used)`.
pub fn scl_oracle(z: &[Vec<f64>], labels: &[usize], tau: f64, mode: DenominatorMode) -> (f64, usize) {
    let m = z.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    let mut used = 0;
    for i in 0..m {
        let pos: Vec<usize> = (0..m).filter(|&p| p != i && labels[p] == labels[i]).collect();
        let neg: Vec<usize> = (0..m).filter(|&a| labels[a] != labels[i]).collect();
        let den: Vec<usize> = match mode {
            DenominatorMode::NegativesOnly => neg,
            DenominatorMode::AllButSelf => (0..m).filter(|&a| a != i).collect(),
        };
        if pos.is_empty() || den.is_empty() {
            continue;
        }
        used += 1;
        let mut anchor = 0.0;
        for &p in &pos {
            let num = (dot(&z[i], &z[p]) / tau).exp();
            let mut d = 0.0;
            for &a in &den {
                d += (dot(&z[i], &z[a]) / tau).exp();
            }
            anchor += (num / d).ln();
        }
        total += -anchor / pos.len() as f64;
    }
    (total, used)
}

/// Naive `(positives, negatives)` per anchor.
pub fn pair_oracle(labels: &[usize]) -> Vec<(Vec<usize>, Vec<usize>)> {
    let n = labels.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut p = Vec::new();
        let mut q = Vec::new();
        for j in 0..n {
            if j != i {
                if labels[j] == labels[i] {
                    p.push(j);
                } else {
                    q.push(j);
                }
            }
        }
        out.push((p, q));
    }
    out
}

/// Mean cross-entropy straight from the definition.
pub fn ce_oracle(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        total -= (row[t].exp() / denom).ln();
    }
    total / logits.len() as f64
}

pub fn unit_rows<R: Rng>(rows: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-12)
}

pub const FD_H: f64 = 1e-4;

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + FD_H;
            let up = f(&xs);
            xs[i] = orig - FD_H;
            let down = f(&xs);
            xs[i] = orig;
            (up - down) / (2.0 * FD_H)
        })
        .collect()
}

/// Largest relative error between analytic and numeric gradients. Entries
/// where both are below `floor` in magnitude are compared absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// The desk-scale experiment config shipped in `configs/`.
pub fn desk_config() -> respcl::config::ExperimentConfig {
    let p = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synth_desk.toml");
    respcl::config::ExperimentConfig::load(&p).expect("desk config")
}
