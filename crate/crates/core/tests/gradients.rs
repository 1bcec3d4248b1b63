//! Analytic gradients against central finite differences in f64.

mod common;

use common::grad::{self, TOL};
use respcl::losses::DenominatorMode;

fn assert_all(errs: Vec<(String, f64)>) {
    for (name, e) in errs {
        assert!(e < TOL, "{name}: {e}");
    }
}

#[test]
fn cross_entropy_gradient() {
    let e = grad::cross_entropy();
    assert!(e < TOL, "{e}");
}

#[test]
fn supcon_gradient_both_modes() {
    for mode in [DenominatorMode::NegativesOnly, DenominatorMode::AllButSelf] {
        let e = grad::supcon(mode);
        assert!(e < TOL, "{mode:?}: {e}");
    }
}

#[test]
fn multi_head_gradient() {
    let e = grad::multi_head();
    assert!(e < TOL, "{e}");
}

#[test]
fn two_block_encoder_gradient() {
    assert_all(grad::two_block_encoder());
}

#[test]
fn hybrid_gradient_through_model() {
    assert_all(grad::hybrid());
}

#[test]
fn multi_head_gradient_through_model() {
    assert_all(grad::multi_head_model());
}

#[test]
fn projector_gradient() {
    assert_all(grad::projector());
}
