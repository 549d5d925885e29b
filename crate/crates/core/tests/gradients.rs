#[allow(dead_code)]
#[path = "support/gradient_suite.rs"]
mod gradient_suite;

use gradient_suite::{run, tolerance, Layer, CONFIGS_PER_LAYER};

fn check_layer(layer: Layer) {
    for i in 0..CONFIGS_PER_LAYER {
        let report = run(layer, i).unwrap_or_else(|e| panic!("{layer:?} config {i}: {e}"));
        let (name, err) = report.worst().unwrap();
        assert!(err < tolerance(), "{layer:?} config {i}: {name} relative error {err:.3e}");
    }
}

#[test]
fn conv_encoder_gradients() {
    check_layer(Layer::ConvEncoder);
}

#[test]
fn transformer_encoder_gradients() {
    check_layer(Layer::TransformerEncoder);
}

#[test]
fn gat_gradients() {
    check_layer(Layer::Gat);
}

#[test]
fn gcn_gradients() {
    check_layer(Layer::Gcn);
}

#[test]
fn mean_aggregator_gradients() {
    check_layer(Layer::Mean);
}

#[test]
fn pooling_gradients() {
    check_layer(Layer::Pooling);
}

#[test]
fn crossing_gradients() {
    check_layer(Layer::Crossing);
}
