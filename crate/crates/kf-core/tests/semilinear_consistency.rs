//! The frozen pair matrices must reproduce the forward-Euler update of the raw
//! model equations: `A(s) s + B(s) u == s + dt * (rhs(s) + H u)` up to roundoff.
//! The reference below evaluates each model's right-hand side directly, without
//! any matrix assembly, so the two paths share no code.

use kf_core::models::{
    kernel_cucker_smale, kernel_sznajd, morse_terms, semilinearize, ModelKind, ModelSpec,
    PairState,
};
use kf_core::rng::{substream, Purpose};
use nalgebra::DVector;
use rand::Rng;

/// Straight-line forward-Euler step of the pair equations.
fn euler_reference(spec: &ModelSpec, s: &PairState, u: &DVector<f64>, dt: f64) -> DVector<f64> {
    let d = spec.d;
    match spec.kind {
        ModelKind::Sznajd { beta } => {
            let x = s.x[0];
            let xs = s.x_star[0];
            let x_next = x + dt * (kernel_sznajd(x, beta) * (xs - x) + u[0]);
            let xs_next = xs + dt * (kernel_sznajd(xs, beta) * (x - xs) + u[1]);
            DVector::from_vec(vec![x_next, xs_next])
        }
        ModelKind::CuckerSmale => {
            let p = kernel_cucker_smale(&s.x, &s.x_star);
            let x_next = &s.x + dt * &s.v;
            let xs_next = &s.x_star + dt * &s.v_star;
            let v_next = &s.v + dt * (p * (&s.v_star - &s.v) + u.rows(0, d).into_owned());
            let vs_next =
                &s.v_star + dt * (p * (&s.v - &s.v_star) + u.rows(d, d).into_owned());
            stack(&[x_next, xs_next, v_next, vs_next])
        }
        ModelKind::QuasiMorse { .. } => {
            let (p_x, p_v) = morse_terms(&s.x, &s.x_star, &s.v, spec);
            let (_, p_v_star) = morse_terms(&s.x, &s.x_star, &s.v_star, spec);
            let x_next = &s.x + dt * &s.v;
            let xs_next = &s.x_star + dt * &s.v_star;
            let v_next = &s.v
                + dt * (p_x * (&s.x_star - &s.x) + p_v * &s.v + u.rows(0, d).into_owned());
            let vs_next = &s.v_star
                + dt * (p_x * (&s.x - &s.x_star) + p_v_star * &s.v_star
                    + u.rows(d, d).into_owned());
            stack(&[x_next, xs_next, v_next, vs_next])
        }
    }
}

fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
    let n: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(n);
    let mut off = 0;
    for p in parts {
        out.rows_mut(off, p.len()).copy_from(p);
        off += p.len();
    }
    out
}

fn check_model(spec: &ModelSpec, salt: u64) {
    let n = spec.state_dim();
    let m = spec.control_dim();
    for trial in 0..1000u64 {
        let mut rng = substream(2024, Purpose::Sampling, salt, trial);
        let dt = rng.gen_range(0.0..0.5);
        let sv = DVector::from_fn(n, |i, _| rng.gen_range(spec.domain_lo[i]..spec.domain_hi[i]));
        let u = DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0));
        let s = PairState::from_stacked(spec, &sv, dt);

        let sl = semilinearize(spec, &s, dt);
        let matrix_step = &sl.a * &sv + &sl.b * &u;
        let direct_step = euler_reference(spec, &s, &u, dt);
        let err = (&matrix_step - &direct_step).norm();
        assert!(
            err <= 1e-12 * (1.0 + sv.norm()),
            "{:?} trial {trial}: matrix and direct Euler steps differ by {err:.3e}",
            spec.kind
        );
    }
}

#[test]
fn sznajd_matrices_match_direct_euler() {
    check_model(&ModelSpec::sznajd(-1.0, 0.05), 1);
}

#[test]
fn cucker_smale_matrices_match_direct_euler() {
    check_model(&ModelSpec::cucker_smale(3, 0.01), 2);
}

#[test]
fn quasi_morse_matrices_match_direct_euler() {
    check_model(&ModelSpec::quasi_morse(0.01), 3);
}
