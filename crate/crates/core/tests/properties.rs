//! Property tests for losses, metrics, manifests and augmentation.

mod common;

use common::{ce_oracle, flatten, pair_oracle, rel_close, scl_oracle, unit_rows};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use respcl::augment::{apply, AugmentationPolicy, MaskValue};
use respcl::dsp::MelGram;
use respcl::eval::{score, Confusion, ScoreReport, SensitivityMode};
use respcl::losses::{
    hybrid_loss, multi_supcon_loss, pair_sets, softmax_cross_entropy, supcon_loss, DenominatorMode, HeadInput,
    LossConfig, Reduction,
};
use respcl::manifest::{
    read_manifest, synth_metadata_labels, write_manifest, AgeScheme, CycleRecord, Dataset, Manifest, Sex, Split,
};
use respcl::nn::Tensor;
use respcl::Error;

fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_vec(&[rows.len(), rows[0].len()], flatten(rows)).unwrap()
}

fn cfg(tau: f64, mode: DenominatorMode) -> LossConfig {
    LossConfig {
        tau,
        denominator_mode: mode,
        ..Default::default()
    }
}

/// Projections on the unit sphere plus per-view labels.
fn batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (2usize..=16, 1usize..=16, 1usize..=4, any::<u64>()).prop_flat_map(|(m, d, c, seed)| {
        proptest::collection::vec(0..c, m).prop_map(move |labels| {
            let z = unit_rows(m, d, &mut ChaCha8Rng::seed_from_u64(seed));
            (z, labels)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn supcon_matches_triple_loop((z, labels) in batch(), tau in 0.05f64..1.0) {
        for mode in [DenominatorMode::NegativesOnly, DenominatorMode::AllButSelf] {
            let (want, used) = scl_oracle(&z, &labels, tau, mode);
            match supcon_loss(&tensor(&z), &labels, &cfg(tau, mode)) {
                Ok(out) => {
                    prop_assert!(rel_close(out.loss, want, 1e-6), "{mode:?}: {} vs {want}", out.loss);
                    prop_assert_eq!(out.skipped, labels.len() - used);
                }
                Err(Error::DegenerateBatch) => prop_assert_eq!(used, 0),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }

    #[test]
    fn pair_sets_match_double_loop(labels in proptest::collection::vec(0usize..4, 0..16)) {
        let got: Vec<_> = pair_sets(&labels).into_iter().map(|s| (s.positives, s.negatives)).collect();
        prop_assert_eq!(got, pair_oracle(&labels));
    }

    #[test]
    fn losses_invariant_to_view_order((z, labels) in batch(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..labels.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pz: Vec<Vec<f64>> = perm.iter().map(|&i| z[i].clone()).collect();
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        for mode in [DenominatorMode::NegativesOnly, DenominatorMode::AllButSelf] {
            let c = cfg(0.1, mode);
            if let (Ok(a), Ok(b)) = (supcon_loss(&tensor(&z), &labels, &c), supcon_loss(&tensor(&pz), &pl, &c)) {
                prop_assert!(rel_close(a.loss, b.loss, 1e-6));
            }
        }
        let ce_targets: Vec<usize> = labels.iter().map(|&l| l % z[0].len()).collect();
        let pt: Vec<usize> = perm.iter().map(|&i| ce_targets[i]).collect();
        let (a, _) = softmax_cross_entropy(&tensor(&z), &ce_targets, Reduction::Mean).unwrap();
        let (b, _) = softmax_cross_entropy(&tensor(&pz), &pt, Reduction::Mean).unwrap();
        prop_assert!(rel_close(a, b, 1e-6));
    }

    #[test]
    fn ce_matches_definition(rows in 1usize..8, classes in 2usize..6, seed in any::<u64>()) {
        let logits = unit_rows(rows, classes, &mut ChaCha8Rng::seed_from_u64(seed));
        let targets: Vec<usize> = (0..rows).map(|r| (r * 7 + seed as usize) % classes).collect();
        let (got, _) = softmax_cross_entropy(&tensor(&logits), &targets, Reduction::Mean).unwrap();
        prop_assert!((got - ce_oracle(&logits, &targets)).abs() < 1e-7);
    }

    #[test]
    fn combined_losses_are_linear((z, labels) in batch(), w1 in 0.01f64..1.0, w2 in 0.01f64..1.0, ce in 0.0f64..5.0, alpha in 0.0f64..=1.0) {
        let c = LossConfig { lambdas: vec![w1, w2], tau: 0.2, ..Default::default() };
        let meta: Vec<Option<usize>> = labels.iter().map(|&l| Some(l / 2)).collect();
        let class: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
        let zt = tensor(&z);
        let heads = [HeadInput { z: &zt, labels: &class }, HeadInput { z: &zt, labels: &meta }];
        if let Ok(r) = multi_supcon_loss(&heads, &c) {
            prop_assert!(rel_close(r.loss, w1 * r.per_head[0] + w2 * r.per_head[1], 1e-12));
        }
        let h = hybrid_loss(ce, 1.5, alpha);
        prop_assert!((h - (alpha * ce + (1.0 - alpha) * 1.5)).abs() < 1e-12);
    }

    #[test]
    fn hs_never_exceeds_sc(rows in proptest::collection::vec(proptest::collection::vec(0u64..50, 4), 4)) {
        let mut rows = rows;
        rows[0][0] += 1;
        rows[1][1] += 1;
        let c = Confusion::from_rows(&rows).unwrap();
        let s = score(&c, 0, SensitivityMode::Strict).unwrap();
        prop_assert!(s.hs <= s.sc + 1e-12);
        if (s.se - s.sp).abs() > 1e-9 {
            prop_assert!(s.hs < s.sc);
        } else {
            prop_assert!((s.hs - s.sc).abs() < 1e-9);
        }
    }

    #[test]
    fn score_invariant_to_count_scaling(rows in proptest::collection::vec(proptest::collection::vec(1u64..30, 3), 3), k in 2u64..20) {
        let a = score(&Confusion::from_rows(&rows).unwrap(), 0, SensitivityMode::Strict).unwrap();
        let scaled: Vec<Vec<u64>> = rows.iter().map(|r| r.iter().map(|v| v * k).collect()).collect();
        let b = score(&Confusion::from_rows(&scaled).unwrap(), 0, SensitivityMode::Strict).unwrap();
        prop_assert!((a.sc - b.sc).abs() < 1e-9 && (a.hs - b.hs).abs() < 1e-9);
    }

    #[test]
    fn binary_score_is_textbook(tn in 1u64..100, fp in 0u64..100, fn_ in 0u64..100, tp in 1u64..100) {
        let c = Confusion::from_rows(&[vec![tn, fp], vec![fn_, tp]]).unwrap();
        let s = score(&c, 0, SensitivityMode::Strict).unwrap();
        let se = 100.0 * tp as f64 / (tp + fn_) as f64;
        let sp = 100.0 * tn as f64 / (tn + fp) as f64;
        prop_assert!((s.se - se).abs() < 1e-9 && (s.sp - sp).abs() < 1e-9);
    }

    #[test]
    fn manifest_tsv_round_trip(records in proptest::collection::vec(record(), 0..12)) {
        let m = Manifest { dataset: Dataset::Synth, records };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        write_manifest(&p, &m).unwrap();
        prop_assert_eq!(read_manifest(&p).unwrap(), m);
    }

    #[test]
    fn metadata_groups_partition_known_records(records in proptest::collection::vec(record(), 1..30)) {
        let labels = synth_metadata_labels(&records, &AgeScheme::icbhi());
        for (r, l) in records.iter().zip(&labels) {
            let known = r.sex != Sex::Unknown && r.age_years.is_some();
            prop_assert_eq!(known, l.is_some());
            if let Some(l) = l {
                prop_assert!(l.group_id < 4);
                let old = r.age_years.unwrap() >= 18.0;
                prop_assert_eq!(l.group_id, 2 * old as usize + (r.sex == Sex::F) as usize);
            }
        }
    }

    #[test]
    fn augment_invariants(mels in 1usize..40, frames in 1usize..60, fw in 0usize..50, tw in 0usize..80, seed in any::<u64>()) {
        let grid: Vec<f32> = (0..mels * frames).map(|i| (i as f32 * 0.37).sin() + 2.0).collect();
        let m = MelGram::new(grid, mels, frames).unwrap();
        let pol = AugmentationPolicy { freq_width: fw, time_width: tw, mask_value: MaskValue::Zero, ..Default::default() };
        let a = apply(&m, &pol, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = apply(&m, &pol, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!((a.n_mels, a.n_frames), (mels, frames));
        let changed = a.grid.iter().zip(&m.grid).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
        prop_assert!(changed <= pol.max_masked_cells(mels, frames));
        prop_assert!(a.grid.iter().zip(&m.grid).all(|(&x, &y)| x == y || x == 0.0));
    }
}

fn record() -> impl Strategy<Value = CycleRecord> {
    (
        "[a-z0-9_]{1,12}",
        "[a-zA-Z0-9_/]{1,20}\\.wav",
        0.0f64..100.0,
        0.01f64..10.0,
        prop_oneof![Just("normal"), Just("crackle"), Just("wheeze"), Just("both")],
        "[0-9]{1,4}",
        prop_oneof![Just(Sex::M), Just(Sex::F), Just(Sex::Unknown)],
        proptest::option::of(0.0f64..90.0),
        (any::<bool>(), "[A-Za-z0-9]{0,8}", "[A-Za-z]{0,4}"),
    )
        .prop_map(|(id, path, start, dur, label, pid, sex, age, (test, device, location))| CycleRecord {
            cycle_id: id,
            audio_path: path.into(),
            start_s: start,
            end_s: start + dur,
            class_label: label.into(),
            patient_id: pid,
            sex,
            age_years: age,
            device,
            location,
            split: if test { Split::Test } else { Split::Train },
        })
}

#[test]
fn gradient_norm_grows_as_tau_shrinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = unit_rows(8, 6, &mut rng);
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    for mode in [DenominatorMode::NegativesOnly, DenominatorMode::AllButSelf] {
        let norms: Vec<f64> = [1.0, 0.1, 0.06]
            .iter()
            .map(|&tau| {
                let g = supcon_loss(&tensor(&z), &labels, &cfg(tau, mode)).unwrap().grad;
                g.data().iter().map(|v| v * v).sum::<f64>().sqrt()
            })
            .collect();
        assert!(norms[0] < norms[1] && norms[1] < norms[2], "{mode:?}: {norms:?}");
    }
}

#[test]
fn distinct_sample_labels_leave_only_the_sibling_positive() {
    let origin: Vec<usize> = (0..6).flat_map(|s| [s, s]).collect();
    for (i, set) in pair_sets(&origin).iter().enumerate() {
        assert_eq!(set.positives, vec![i ^ 1]);
        assert_eq!(set.negatives.len(), origin.len() - 2);
    }
}

#[test]
fn score_report_formula() {
    let s = ScoreReport::from_se_sp(40.0, 60.0);
    assert_eq!(s.sc, 50.0);
    assert!((s.hs - 48.0).abs() < 1e-12);
}
