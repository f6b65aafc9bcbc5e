//! Reverse-mode gradients against central finite differences.

mod common;

use common::gradcheck::{self, Check};

fn assert_passed(checks: Vec<Check>) {
    for c in &checks {
        println!("{}: worst relative error {:e} (seed {})", c.name, c.worst, c.worst_seed);
    }
    for c in &checks {
        assert!(c.passed(), "{}: seed {} relative error {:e}", c.name, c.worst_seed, c.worst);
    }
}

#[test]
fn mixture_log_density_gradients() {
    let mut out = Vec::new();
    gradcheck::mixture_log_density_gradients(&mut out);
    assert_passed(out);
}

#[test]
fn responsibility_gradients() {
    let mut out = Vec::new();
    gradcheck::responsibility_gradients(&mut out);
    assert_passed(out);
}

#[test]
fn network_parameter_and_input_gradients() {
    let mut out = Vec::new();
    gradcheck::network_parameter_and_input_gradients(&mut out);
    assert_passed(out);
}

#[test]
fn dv_objective_gradients() {
    let mut out = Vec::new();
    gradcheck::dv_objective_gradients(&mut out);
    assert_passed(out);
}

#[test]
fn gibbs_input_gradient() {
    let mut out = Vec::new();
    gradcheck::gibbs_input_gradient(&mut out);
    assert_passed(out);
}

#[test]
fn fused_mixture_ops() {
    let mut out = Vec::new();
    gradcheck::fused_mixture_ops(&mut out);
    assert_passed(out);
}

#[test]
fn block_ops() {
    let mut out = Vec::new();
    gradcheck::block_ops(&mut out);
    assert_passed(out);
}

#[test]
fn elementwise_and_row_ops() {
    let mut out = Vec::new();
    gradcheck::elementwise_and_row_ops(&mut out);
    assert_passed(out);
}
