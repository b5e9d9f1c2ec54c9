//! Timing behaviour of the benchmark harness: network-controlled simulation
//! time should grow roughly linearly in the ensemble size.

use kf_core::diagnostics::{bench_controllers, BenchConfig, BenchEntry};
use kf_core::kinetic::Controller;
use kf_core::models::ModelSpec;
use kf_core::neural::{initialize, Architecture, InputScaling, SupervisedSet};
use nalgebra::DMatrix;
use std::time::Duration;

#[test]
fn network_controller_scales_linearly_in_batch_size() {
    let spec = ModelSpec::sznajd(-1.0, 0.05);
    // weights are irrelevant for timing; initialize a wide net on dummy data
    let arch = Architecture::feedforward(3, &[64, 64], 2, kf_core::neural::Activation::Softplus);
    let dummy = SupervisedSet {
        inputs: DMatrix::from_fn(8, 3, |r, c| 0.1 * (r as f64) - 0.2 * (c as f64)),
        targets: DMatrix::from_fn(8, 2, |r, c| 0.05 * (r as f64 + c as f64) - 0.1),
        input_scaling: InputScaling::identity(3),
    };
    let net = initialize(&arch, &dummy, 11);

    let entries = vec![BenchEntry::fixed("nn_control", Controller::NnControl(net))];
    let cfg = BenchConfig {
        batch_sizes: vec![4000, 16000],
        dims: vec![1],
        repetitions: 3,
        n_steps: 5,
        dt: 0.01,
        epsilon: 0.01,
        seed: 3,
        cell_budget: Duration::from_secs(120),
    };
    let report = bench_controllers(&spec, &entries, &cfg).unwrap();
    let t_small = report.cells[0].median_seconds.unwrap();
    let t_large = report.cells[1].median_seconds.unwrap();
    let slope = (t_large / t_small).ln() / 4.0f64.ln();
    assert!(
        (0.7..=1.3).contains(&slope),
        "batch-size scaling slope {slope:.3} outside [0.7, 1.3] \
         (t(4000) = {t_small:.4}s, t(16000) = {t_large:.4}s)"
    );
}
