//! Reverse-mode gradients against central differences (h = 1e-4) for every
//! primitive and for the assembled model in all residual, batch-norm and
//! selection configurations.

#[path = "support/gradient_cases.rs"]
mod gradient_cases;

use gradient_cases::*;

fn assert_cases(cases: Cases) {
    assert!(!cases.is_empty());
    for (name, worst) in cases {
        assert!(worst < TOL, "{name}: max relative error {worst:e}");
    }
}

#[test]
fn binary() {
    assert_cases(binary_primitives());
}

#[test]
fn scaling() {
    assert_cases(scaling_primitives());
}

#[test]
fn unary() {
    assert_cases(unary_primitives());
}

#[test]
fn structural() {
    assert_cases(structural_primitives());
}

#[test]
fn batch_norm_and_logloss() {
    assert_cases(batch_norm_and_loss());
}

#[test]
fn towers() {
    assert_cases(towers_at_depths_and_shapes());
}

#[test]
fn embedding_attention_gate() {
    assert_cases(embedding_attention_gate_composite());
}

#[test]
fn full_model() {
    assert_cases(full_model_all_modes());
}
