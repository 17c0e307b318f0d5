//! Gradient checks: analytic backward passes against central differences,
//! 100 seeds per layer.

mod support;

use support::grad::{self, worst_over_seeds, TOLERANCE};

fn assert_layer(name: &str, layer: fn(u64) -> pcc_core::tensor::gradcheck::GradCheckReport) {
    let (seed, report) = worst_over_seeds(layer);
    assert!(report.passes(TOLERANCE), "{name}: seed {seed}: {report:?}");
}

#[test]
fn matmul() {
    assert_layer("matmul", grad::matmul);
}

#[test]
fn pointwise_mlp() {
    assert_layer("pointwise mlp", grad::pointwise_mlp);
}

#[test]
fn softmax() {
    assert_layer("softmax", grad::softmax);
}

#[test]
fn layer_norm() {
    assert_layer("layer norm", grad::layer_norm);
}

#[test]
fn batch_norm() {
    assert_layer("batch norm", grad::batch_norm);
}

#[test]
fn relu() {
    assert_layer("relu", grad::relu);
}

#[test]
fn tanh() {
    assert_layer("tanh", grad::tanh);
}

#[test]
fn maxpool() {
    assert_layer("maxpool", grad::maxpool);
}

#[test]
fn mhsa_block() {
    assert_layer("mhsa block", grad::mhsa);
}

#[test]
fn full_decoder() {
    assert_layer("decoder", grad::decoder);
}

#[test]
fn tmlp_encoder() {
    assert_layer("tmlp encoder", grad::tmlp_encoder);
}
