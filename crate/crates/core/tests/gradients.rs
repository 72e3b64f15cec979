mod common;

use common::ops::{self, Checks, TOL};

fn assert_within(checks: Checks) {
    assert!(!checks.is_empty());
    for w in checks {
        assert!(
            w.rel_error < TOL,
            "{}: relative error {:.3e} at {}",
            w.op,
            w.rel_error,
            w.detail
        );
    }
}

#[test]
fn conv2d_gradients() {
    assert_within(ops::conv2d());
}

#[test]
fn activation_gradients() {
    assert_within(ops::activations());
}

#[test]
fn pool_gradients() {
    assert_within(ops::pools());
}

#[test]
fn sampling_gradients() {
    assert_within(ops::sampling());
}

#[test]
fn correlation_gradients() {
    assert_within(ops::correlation());
}

#[test]
fn concat_gradients() {
    assert_within(ops::structural());
}

#[test]
fn arithmetic_gradients() {
    assert_within(ops::arithmetic());
}
