mod common;

use common::gradcheck;
use gafrl::neural::*;

fn kinds() -> Vec<(&'static str, Vec<usize>, Vec<LayerSpec>)> {
    vec![
        ("conv2d", vec![2, 6, 6], vec![LayerSpec::Conv2d { filters: 3, kernel: 3 }]),
        ("dense", vec![7], vec![LayerSpec::Dense { units: 5 }]),
        ("relu", vec![4], vec![LayerSpec::Dense { units: 6 }, LayerSpec::Relu]),
        ("maxpool2x2", vec![2, 6, 6], vec![LayerSpec::Conv2d { filters: 2, kernel: 1 }, LayerSpec::MaxPool2x2]),
        ("flatten", vec![2, 3, 3], vec![LayerSpec::Flatten, LayerSpec::Dense { units: 3 }]),
        ("softmax", vec![5], vec![LayerSpec::Dense { units: 4 }, LayerSpec::Softmax]),
    ]
}

#[test]
fn every_layer_kind_passes_gradient_check() {
    for (name, shape, specs) in kinds() {
        for seed in 0..5 {
            let err = gradcheck::network_error(&shape, &specs, seed);
            assert!(err < gradcheck::TOLERANCE, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn classifier_stack_passes_gradient_check() {
    let err = gradcheck::network_error(&[4, 10, 10], &gafrl::classifier::architecture(), 11);
    assert!(err < gradcheck::TOLERANCE, "{err}");
}

#[test]
fn cross_entropy_examples() {
    let (loss, _) = softmax_cross_entropy(&Tensor::vector(vec![0.0, 0.0]), 0).unwrap();
    assert!((loss - 2f64.ln()).abs() < 1e-15);
    let (loss, grad) = softmax_cross_entropy(&Tensor::vector(vec![1000.0, 0.0]), 0).unwrap();
    assert!(loss.abs() < 1e-12 && grad.is_finite());
}

#[test]
fn adam_quadratic_descent() {
    let mut w = Tensor::vector(vec![0.0]);
    let mut adam = Adam::new(0.1);
    for _ in 0..100 {
        let g = Tensor::vector(vec![2.0 * (w.data()[0] - 3.0)]);
        adam.step(vec![&mut w], &[g]).unwrap();
    }
    assert!((w.data()[0] - 3.0).abs() < 0.5);
    assert_eq!(adam.step_count(), 100);
}
