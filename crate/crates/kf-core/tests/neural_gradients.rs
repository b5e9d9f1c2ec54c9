//! Analytic backprop gradients checked against central finite differences
//! for every layer kind and activation.

use kf_core::neural::{
    initialize, mse, mse_and_grad, Activation, Architecture, InputScaling, SupervisedSet,
};
use kf_core::rng::{substream, Purpose};
use nalgebra::DMatrix;
use rand::Rng;

const FD_STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random_problem(in_dim: usize, out_dim: usize, n: usize, salt: u64) -> SupervisedSet {
    let mut rng = substream(77, Purpose::Sampling, salt, 0);
    let inputs = DMatrix::from_fn(n, in_dim, |_, _| rng.gen_range(-1.5..1.5));
    let targets = DMatrix::from_fn(n, out_dim, |_, _| rng.gen_range(-1.0..1.0));
    SupervisedSet { inputs, targets, input_scaling: InputScaling::identity(in_dim) }
}

/// Max relative deviation between analytic and finite-difference gradients.
fn check_gradients(arch: &Architecture, salt: u64) -> f64 {
    let set = random_problem(arch.input_dim(), arch.output_dim(), 4, salt);
    let mut params = initialize(arch, &set, 1000 + salt);

    // move biases off zero and exercise non-trivial scalings
    let mut theta = params.flat();
    let mut rng = substream(78, Purpose::Sampling, salt, 1);
    for v in theta.iter_mut() {
        *v += rng.gen_range(-0.1..0.1);
    }
    params.set_flat(&theta);
    for (i, v) in params.input_scale.iter_mut().enumerate() {
        *v = 0.8 + 0.1 * i as f64;
    }
    for v in params.output_scale.iter_mut() {
        *v = 1.3;
    }
    for v in params.output_shift.iter_mut() {
        *v = 0.2;
    }

    let (_, grad) = mse_and_grad(&params, &set.inputs, &set.targets);
    let mut fd = grad.clone();
    let mut work = params.clone();
    for j in 0..theta.len() {
        let saved = theta[j];
        theta[j] = saved + FD_STEP;
        work.set_flat(&theta);
        let up = mse(&work, &set.inputs, &set.targets);
        theta[j] = saved - FD_STEP;
        work.set_flat(&theta);
        let down = mse(&work, &set.inputs, &set.targets);
        theta[j] = saved;
        fd[j] = (up - down) / (2.0 * FD_STEP);
    }
    work.set_flat(&theta);

    (&grad - &fd).norm() / grad.norm().max(fd.norm()).max(1e-12)
}

const ACTIVATIONS: [Activation; 6] = [
    Activation::Identity,
    Activation::Tanh,
    Activation::ReLU,
    Activation::Softplus,
    Activation::Elu,
    Activation::Sigmoid,
];

#[test]
fn dense_gradients_match_finite_differences_for_every_activation() {
    for (i, &act) in ACTIVATIONS.iter().enumerate() {
        let arch = Architecture::feedforward(3, &[5, 4], 2, act);
        let err = check_gradients(&arch, i as u64);
        assert!(
            err <= TOL,
            "dense gradient mismatch for {act:?}: relative error {err:e}"
        );
    }
}

#[test]
fn lstm_cell_gradients_match_finite_differences_as_cell_activation() {
    for (i, &act) in ACTIVATIONS.iter().enumerate() {
        let arch = Architecture::lstm_first(3, &[4], 2, act, Activation::Sigmoid, Activation::Tanh);
        let err = check_gradients(&arch, 100 + i as u64);
        assert!(
            err <= TOL,
            "lstm gradient mismatch for cell activation {act:?}: relative error {err:e}"
        );
    }
}

#[test]
fn lstm_cell_gradients_match_finite_differences_as_gate_activation() {
    for (i, &act) in ACTIVATIONS.iter().enumerate() {
        let arch = Architecture::lstm_first(3, &[4], 2, Activation::Tanh, act, Activation::Tanh);
        let err = check_gradients(&arch, 200 + i as u64);
        assert!(
            err <= TOL,
            "lstm gradient mismatch for gate activation {act:?}: relative error {err:e}"
        );
    }
}

#[test]
fn deep_mixed_network_gradients_match_finite_differences() {
    let mut arch = Architecture::lstm_first(
        4,
        &[5, 4, 4],
        3,
        Activation::Softplus,
        Activation::Softplus,
        Activation::Elu,
    );
    arch.activations[3] = Activation::Tanh;
    arch.validate().unwrap();
    let err = check_gradients(&arch, 300);
    assert!(err <= TOL, "mixed network gradient mismatch: {err:e}");
}
