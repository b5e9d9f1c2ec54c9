//! The three binary-interaction models (opinion polarization, velocity
//! alignment, attraction-repulsion swarming) behind one interface: kernels,
//! semilinear factorizations of the pair dynamics, and quadratic cost matrices.
//!
//! Pair states stack as `s = (x, x_star)` for first-order models and
//! `s = (x, x_star, v, v_star)` for second-order ones. The discrete pair map is
//! `s' = A(s) s + B(s) u` with `A = I + dt*G(s)` and `B = dt*H`, so `dt = 0`
//! freezes the state exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
}

/// Interaction rule plus its named parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelKind {
    /// First-order opinion exchange with kernel `beta * (1 - x^2)`;
    /// negative `beta` polarizes opinions toward the extremes.
    Sznajd { beta: f64 },
    /// Second-order velocity alignment with kernel `1 / (1 + |x - x_star|^2)`.
    CuckerSmale,
    /// Second-order self-propelled swarming in a quasi-Morse potential
    /// (attraction strength `c`, exponent `p`, length ratio `l`) with
    /// propulsion `alpha - beta |v|^2`.
    QuasiMorse { c: f64, p: f64, l: f64, alpha: f64, beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    First,
    Second,
}

/// What the feedback law steers the controlled coordinates toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Drive the controlled coordinates to zero.
    Zero,
    /// Drive both agents' controlled coordinates to their common mean.
    PairMean,
}

/// Full description of a control problem instance: model, per-agent dimension,
/// control penalty, sampling box (one entry per stacked state coordinate), and
/// steering target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub d: usize,
    pub order: Order,
    pub gamma: f64,
    pub domain_lo: DVector<f64>,
    pub domain_hi: DVector<f64>,
    pub target: Target,
}

impl ModelSpec {
    /// Opinion model on `[-1, 1]` steering opinions to zero.
    pub fn sznajd(beta: f64, gamma: f64) -> Self {
        ModelSpec {
            kind: ModelKind::Sznajd { beta },
            d: 1,
            order: Order::First,
            gamma,
            domain_lo: DVector::from_element(2, -1.0),
            domain_hi: DVector::from_element(2, 1.0),
            target: Target::Zero,
        }
    }

    /// Alignment model in `d` dimensions on `[-5, 5]^(4d)` steering the pair
    /// to its mean velocity.
    pub fn cucker_smale(d: usize, gamma: f64) -> Self {
        ModelSpec {
            kind: ModelKind::CuckerSmale,
            d,
            order: Order::Second,
            gamma,
            domain_lo: DVector::from_element(4 * d, -5.0),
            domain_hi: DVector::from_element(4 * d, 5.0),
            target: Target::PairMean,
        }
    }

    /// Swarming model in three dimensions on `[-4, 4]^12` with the reference
    /// potential parameters, steering the pair to its mean velocity.
    pub fn quasi_morse(gamma: f64) -> Self {
        ModelSpec {
            kind: ModelKind::QuasiMorse { c: 0.6, p: 1.5, l: 0.5, alpha: 2.0, beta: 1.5 },
            d: 3,
            order: Order::Second,
            gamma,
            domain_lo: DVector::from_element(12, -4.0),
            domain_hi: DVector::from_element(12, 4.0),
            target: Target::PairMean,
        }
    }

    /// Stacked pair-state dimension: `2d` first order, `4d` second order.
    pub fn state_dim(&self) -> usize {
        match self.order {
            Order::First => 2 * self.d,
            Order::Second => 4 * self.d,
        }
    }

    /// Stacked control dimension (`u` and `u_star`): always `2d`.
    pub fn control_dim(&self) -> usize {
        2 * self.d
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 {
            return Err(ModelError::InvalidSpec("d must be at least 1".into()));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(ModelError::InvalidSpec(format!(
                "gamma must be positive and finite, got {}",
                self.gamma
            )));
        }
        let expected_order = match self.kind {
            ModelKind::Sznajd { .. } => Order::First,
            ModelKind::CuckerSmale | ModelKind::QuasiMorse { .. } => Order::Second,
        };
        if self.order != expected_order {
            return Err(ModelError::InvalidSpec(format!(
                "{:?} must be {:?} order",
                self.kind, expected_order
            )));
        }
        if matches!(self.kind, ModelKind::Sznajd { .. }) && self.d != 1 {
            return Err(ModelError::InvalidSpec("opinion model is scalar (d = 1)".into()));
        }
        if matches!(self.kind, ModelKind::QuasiMorse { .. }) && self.d != 3 {
            return Err(ModelError::InvalidSpec("swarming model lives in d = 3".into()));
        }
        let n = self.state_dim();
        if self.domain_lo.len() != n || self.domain_hi.len() != n {
            return Err(ModelError::InvalidSpec(format!(
                "sampling box must have one entry per state coordinate ({n}), got {} and {}",
                self.domain_lo.len(),
                self.domain_hi.len()
            )));
        }
        if self.domain_lo.iter().zip(self.domain_hi.iter()).any(|(lo, hi)| !(lo < hi)) {
            return Err(ModelError::InvalidSpec(
                "sampling box must satisfy lo < hi componentwise".into(),
            ));
        }
        if let ModelKind::QuasiMorse { p, l, .. } = self.kind {
            if !(p > 0.0) || !(l > 0.0) {
                return Err(ModelError::InvalidSpec(
                    "potential exponent p and length ratio l must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// State of one interacting pair. First-order models leave the velocity
/// vectors empty; `dt` is the interaction time-step the pair evolves with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairState {
    pub x: DVector<f64>,
    pub x_star: DVector<f64>,
    pub v: DVector<f64>,
    pub v_star: DVector<f64>,
    pub dt: f64,
}

impl PairState {
    pub fn first_order(x: DVector<f64>, x_star: DVector<f64>, dt: f64) -> Self {
        PairState { x, x_star, v: DVector::zeros(0), v_star: DVector::zeros(0), dt }
    }

    pub fn second_order(
        x: DVector<f64>,
        x_star: DVector<f64>,
        v: DVector<f64>,
        v_star: DVector<f64>,
        dt: f64,
    ) -> Self {
        PairState { x, x_star, v, v_star, dt }
    }

    /// Stacked state vector `(x, x_star)` or `(x, x_star, v, v_star)`.
    pub fn stacked(&self) -> DVector<f64> {
        let n = self.x.len() + self.x_star.len() + self.v.len() + self.v_star.len();
        let mut s = DVector::zeros(n);
        let mut off = 0;
        for part in [&self.x, &self.x_star, &self.v, &self.v_star] {
            s.rows_mut(off, part.len()).copy_from(part);
            off += part.len();
        }
        s
    }

    /// Rebuild a pair state from a stacked vector laid out for `spec`.
    pub fn from_stacked(spec: &ModelSpec, s: &DVector<f64>, dt: f64) -> Self {
        let d = spec.d;
        assert_eq!(s.len(), spec.state_dim(), "stacked state has wrong length");
        match spec.order {
            Order::First => PairState::first_order(
                s.rows(0, d).into_owned(),
                s.rows(d, d).into_owned(),
                dt,
            ),
            Order::Second => PairState::second_order(
                s.rows(0, d).into_owned(),
                s.rows(d, d).into_owned(),
                s.rows(2 * d, d).into_owned(),
                s.rows(3 * d, d).into_owned(),
                dt,
            ),
        }
    }

    /// Exchange the two agents.
    pub fn swapped(&self) -> Self {
        PairState {
            x: self.x_star.clone(),
            x_star: self.x.clone(),
            v: self.v_star.clone(),
            v_star: self.v.clone(),
            dt: self.dt,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.dt.is_finite()
            && [&self.x, &self.x_star, &self.v, &self.v_star]
                .iter()
                .all(|p| p.iter().all(|c| c.is_finite()))
    }
}

/// Frozen pair dynamics `s' = A s + B u` at one state, with the time-step
/// embedded (`A = I + dt*G`, `B = dt*H`).
#[derive(Debug, Clone)]
pub struct SemilinearPair {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub dt: f64,
}

/// Opinion-exchange kernel `beta * (1 - x^2)`; depends on the acting agent only.
pub fn kernel_sznajd(x: f64, beta: f64) -> f64 {
    beta * (1.0 - x * x)
}

/// Alignment kernel `1 / (1 + |x - x_star|^2)`, in `(0, 1]` and symmetric.
pub fn kernel_cucker_smale(x: &DVector<f64>, x_star: &DVector<f64>) -> f64 {
    assert_eq!(x.len(), x_star.len(), "kernel arguments must have equal length");
    1.0 / (1.0 + (x - x_star).norm_squared())
}

/// Position and velocity coefficients of the swarming force at one pair state:
/// `P_x = r^(p-2) * ((c/l^p) exp(-r^p/(p l^p)) - exp(-r^p/p))` with
/// `r = |x - x_star|`, and the propulsion coefficient `P_v = alpha - beta |v|^2`.
///
/// `P_x` is singular at `r = 0` for `p < 2`; coincident positions (separation
/// below 1e-12) return `P_x = 0`, which keeps the force bounded and only
/// affects a measure-zero set of samples.
pub fn morse_terms(
    x: &DVector<f64>,
    x_star: &DVector<f64>,
    v: &DVector<f64>,
    spec: &ModelSpec,
) -> (f64, f64) {
    let ModelKind::QuasiMorse { c, p, l, alpha, beta } = spec.kind else {
        panic!("morse_terms requires a quasi-Morse spec");
    };
    let r = (x - x_star).norm();
    let p_x = if r < 1e-12 {
        0.0
    } else {
        let rp = r.powf(p);
        let lp = l.powf(p);
        r.powf(p - 2.0) * ((c / lp) * (-rp / (p * lp)).exp() - (-rp / p).exp())
    };
    let p_v = alpha - beta * v.norm_squared();
    (p_x, p_v)
}

/// Freeze the pair dynamics at `s`: returns `A = I + dt*G(s)` and `B = dt*H`
/// with controls entering velocity rows only (position rows for first-order
/// models). The factorization is exact for the forward-Euler pair update.
pub fn semilinearize(spec: &ModelSpec, s: &PairState, dt: f64) -> SemilinearPair {
    let d = spec.d;
    let n = spec.state_dim();
    let m = spec.control_dim();
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut b = DMatrix::<f64>::zeros(n, m);

    match spec.kind {
        ModelKind::Sznajd { beta } => {
            let p1 = kernel_sznajd(s.x[0], beta);
            let p2 = kernel_sznajd(s.x_star[0], beta);
            a[(0, 0)] -= dt * p1;
            a[(0, 1)] += dt * p1;
            a[(1, 0)] += dt * p2;
            a[(1, 1)] -= dt * p2;
            b[(0, 0)] = dt;
            b[(1, 1)] = dt;
        }
        ModelKind::CuckerSmale => {
            let p = kernel_cucker_smale(&s.x, &s.x_star);
            for i in 0..d {
                // transport: positions integrate their own velocities
                a[(i, 2 * d + i)] = dt;
                a[(d + i, 3 * d + i)] = dt;
                // alignment: velocities relax toward each other
                a[(2 * d + i, 2 * d + i)] -= dt * p;
                a[(2 * d + i, 3 * d + i)] += dt * p;
                a[(3 * d + i, 2 * d + i)] += dt * p;
                a[(3 * d + i, 3 * d + i)] -= dt * p;
                b[(2 * d + i, i)] = dt;
                b[(3 * d + i, d + i)] = dt;
            }
        }
        ModelKind::QuasiMorse { .. } => {
            let (p_x, p_v1) = morse_terms(&s.x, &s.x_star, &s.v, spec);
            let (_, p_v2) = morse_terms(&s.x, &s.x_star, &s.v_star, spec);
            for i in 0..d {
                a[(i, 2 * d + i)] = dt;
                a[(d + i, 3 * d + i)] = dt;
                // pair force +/- P_x (x_star - x) and self-propulsion P_v v
                a[(2 * d + i, i)] -= dt * p_x;
                a[(2 * d + i, d + i)] += dt * p_x;
                a[(3 * d + i, i)] += dt * p_x;
                a[(3 * d + i, d + i)] -= dt * p_x;
                a[(2 * d + i, 2 * d + i)] += dt * p_v1;
                a[(3 * d + i, 3 * d + i)] += dt * p_v2;
                b[(2 * d + i, i)] = dt;
                b[(3 * d + i, d + i)] = dt;
            }
        }
    }
    SemilinearPair { a, b, dt }
}

/// Stage-cost matrices for the pair problem, with the time-step embedded to
/// match the `A = I + dt*G` convention: `Q` penalizes deviation of the
/// controlled coordinates from the target (zero or the pair mean) and
/// `R = dt*gamma*I` (halved for the pair-mean target, matching the quadratic
/// expansion of the consensus cost).
pub fn cost_matrices(spec: &ModelSpec, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = spec.d;
    let n = spec.state_dim();
    let m = spec.control_dim();
    let mut q = DMatrix::<f64>::zeros(n, n);
    // controlled coordinates start at 0 (first order) or 2d (second order)
    let off = n - 2 * d;
    match spec.target {
        Target::Zero => {
            for i in 0..2 * d {
                q[(off + i, off + i)] = dt;
            }
        }
        Target::PairMean => {
            // I - M with M the projection onto the shared mean: diagonal 1/2,
            // cross-agent coupling -1/2 per coordinate.
            for i in 0..d {
                q[(off + i, off + i)] = 0.5 * dt;
                q[(off + d + i, off + d + i)] = 0.5 * dt;
                q[(off + i, off + d + i)] = -0.5 * dt;
                q[(off + d + i, off + i)] = -0.5 * dt;
            }
        }
    }
    let r_scale = match spec.target {
        Target::Zero => spec.gamma,
        Target::PairMean => 0.5 * spec.gamma,
    };
    let r = DMatrix::<f64>::identity(m, m) * (dt * r_scale);
    (q, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sznajd_kernel_reference_values() {
        assert_eq!(kernel_sznajd(0.0, -1.0), -1.0);
        assert_eq!(kernel_sznajd(1.0, -1.0), 0.0);
        assert_eq!(kernel_sznajd(-1.0, -1.0), 0.0);
        assert_eq!(kernel_sznajd(0.5, -1.0), -0.75);
    }

    #[test]
    fn cucker_smale_kernel_values_and_symmetry() {
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(kernel_cucker_smale(&x, &x), 1.0);

        let y = DVector::from_vec(vec![2.0, 3.0, 4.0]); // squared distance 3
        assert_relative_eq!(kernel_cucker_smale(&x, &y), 0.25, epsilon = 1e-15);
        assert_eq!(
            kernel_cucker_smale(&x, &y).to_bits(),
            kernel_cucker_smale(&y, &x).to_bits()
        );
    }

    #[test]
    fn morse_propulsion_and_potential_reference_values() {
        let spec = ModelSpec::quasi_morse(0.01);
        let x = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let y = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let v = DVector::from_vec(vec![(4.0f64 / 3.0).sqrt(), 0.0, 0.0]);
        let (_, p_v) = morse_terms(&x, &y, &v, &spec);
        assert_relative_eq!(p_v, 0.0, epsilon = 1e-12);

        // potential value at contact: -1 + c
        let ModelKind::QuasiMorse { c, p, l, .. } = spec.kind else { unreachable!() };
        let w_at_zero = -1.0 + c;
        assert_relative_eq!(w_at_zero, -0.4, epsilon = 1e-15);
        // far apart the pair force vanishes
        let far = DVector::from_vec(vec![1e4, 0.0, 0.0]);
        let (p_x_far, _) = morse_terms(&x, &far, &v, &spec);
        assert!(p_x_far.abs() < 1e-300);
        // coincident positions are regularized to zero force
        let (p_x_zero, _) = morse_terms(&x, &x, &v, &spec);
        assert_eq!(p_x_zero, 0.0);
        let _ = (p, l);
    }

    #[test]
    fn semilinearization_is_identity_at_zero_dt() {
        let specs = [
            ModelSpec::sznajd(-1.0, 0.05),
            ModelSpec::cucker_smale(3, 0.01),
            ModelSpec::quasi_morse(0.01),
        ];
        for spec in &specs {
            let s = sample_state(spec, 7);
            let sl = semilinearize(spec, &s, 0.0);
            let n = spec.state_dim();
            assert_eq!(sl.a, DMatrix::identity(n, n), "{:?}", spec.kind);
            assert_eq!(sl.b, DMatrix::zeros(n, spec.control_dim()), "{:?}", spec.kind);
        }
    }

    #[test]
    fn cucker_smale_coincident_positions_use_unit_kernel() {
        let spec = ModelSpec::cucker_smale(2, 0.01);
        let x = DVector::from_vec(vec![0.3, -0.4]);
        let v = DVector::from_vec(vec![1.0, 2.0]);
        let vs = DVector::from_vec(vec![-1.0, 0.5]);
        let s = PairState::second_order(x.clone(), x.clone(), v, vs, 0.1);
        let sl = semilinearize(&spec, &s, 0.1);
        // velocity row: 1 - dt * P with P = 1 exactly
        assert_eq!(sl.a[(4, 4)], 1.0 - 0.1);
        assert_eq!(sl.a[(4, 6)], 0.1);
    }

    #[test]
    fn pair_mean_cost_block_and_row_sums() {
        let spec = ModelSpec::cucker_smale(1, 0.01);
        let (q, r) = cost_matrices(&spec, 1.0);
        // velocity block [[1/2, -1/2], [-1/2, 1/2]]
        assert_eq!(q[(2, 2)], 0.5);
        assert_eq!(q[(2, 3)], -0.5);
        assert_eq!(q[(3, 2)], -0.5);
        assert_eq!(q[(3, 3)], 0.5);
        // positions unpenalized
        assert_eq!(q.view((0, 0), (2, 2)), DMatrix::zeros(2, 2));
        for i in 0..4 {
            let row_sum: f64 = q.row(i).iter().sum();
            assert_relative_eq!(row_sum, 0.0, epsilon = 1e-15);
        }
        assert_eq!(r[(0, 0)], 0.005);
    }

    #[test]
    fn consensus_velocities_have_zero_stage_cost() {
        let spec = ModelSpec::cucker_smale(3, 0.01);
        let (q, _) = cost_matrices(&spec, 0.05);
        let v = DVector::from_vec(vec![0.7, -0.2, 1.1]);
        let mut s = DVector::zeros(12);
        s.rows_mut(0, 3).copy_from(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
        s.rows_mut(3, 3).copy_from(&DVector::from_vec(vec![-1.0, 0.0, 2.0]));
        s.rows_mut(6, 3).copy_from(&v);
        s.rows_mut(9, 3).copy_from(&v);
        let cost = (s.transpose() * &q * &s)[(0, 0)];
        assert_relative_eq!(cost, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_target_penalizes_controlled_coordinates_only() {
        let spec = ModelSpec::sznajd(-1.0, 0.05);
        let (q, r) = cost_matrices(&spec, 0.01);
        assert_eq!(q, DMatrix::identity(2, 2) * 0.01);
        assert_eq!(r, DMatrix::identity(2, 2) * (0.01 * 0.05));
    }

    #[test]
    fn spec_validation_catches_bad_boxes_and_orders() {
        let mut spec = ModelSpec::cucker_smale(2, 0.01);
        assert!(spec.validate().is_ok());
        spec.domain_lo[3] = 10.0;
        assert!(spec.validate().is_err());

        let mut spec = ModelSpec::sznajd(-1.0, 0.05);
        spec.order = Order::Second;
        assert!(spec.validate().is_err());

        let spec = ModelSpec::sznajd(-1.0, -0.05);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn stacked_roundtrip_and_swap() {
        let spec = ModelSpec::cucker_smale(2, 0.01);
        let s = sample_state(&spec, 3);
        let rebuilt = PairState::from_stacked(&spec, &s.stacked(), s.dt);
        assert_eq!(s, rebuilt);

        let sw = s.swapped();
        assert_eq!(sw.x, s.x_star);
        assert_eq!(sw.v_star, s.v);
        assert_eq!(sw.swapped(), s);
    }

    /// Deterministic pseudo-random state inside the spec's box.
    fn sample_state(spec: &ModelSpec, salt: u64) -> PairState {
        use rand::Rng;
        let mut rng = crate::rng::substream(11, crate::rng::Purpose::Sampling, salt, 0);
        let n = spec.state_dim();
        let s = DVector::from_fn(n, |i, _| {
            rng.gen_range(spec.domain_lo[i]..spec.domain_hi[i])
        });
        PairState::from_stacked(spec, &s, 0.05)
    }
}
