//! Discrete-time algebraic Riccati equation (DARE) solvers and the closed-form
//! limit solution for symmetric binary-exchange problems.
//!
//! The default solver is a damped-free fixed-point iteration of the Riccati map
//! itself, which is robust for the short-horizon problems produced by the
//! semilinearized pair dynamics (where `A = I + dt*G` is close to the identity).
//! A structured doubling variant is available as an opt-in fast path for large
//! states; it converges quadratically but is slightly noisier in directions the
//! cost does not penalize, so the fixed-point version stays the default.

use nalgebra::{DMatrix, DVector, Matrix2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RiccatiError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("inner solve failed: R + B'*Pi*B is singular")]
    SingularInnerSolve,
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
}

/// Finite-horizon-free LQ data: minimize sum of `s'Qs + u'Ru` subject to
/// `s_{n+1} = A s_n + B u_n`.
#[derive(Debug, Clone)]
pub struct LqProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl LqProblem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self, RiccatiError> {
        let prob = LqProblem { a, b, q, r };
        prob.validate()?;
        Ok(prob)
    }

    /// State and input dimensions `(n, m)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.a.nrows(), self.b.ncols())
    }

    pub fn validate(&self) -> Result<(), RiccatiError> {
        let n = self.a.nrows();
        let m = self.b.ncols();
        if self.a.ncols() != n {
            return Err(RiccatiError::DimensionMismatch(format!(
                "A must be square, got {}x{}",
                self.a.nrows(),
                self.a.ncols()
            )));
        }
        if self.b.nrows() != n {
            return Err(RiccatiError::DimensionMismatch(format!(
                "B must have {} rows, got {}",
                n,
                self.b.nrows()
            )));
        }
        if self.q.shape() != (n, n) {
            return Err(RiccatiError::DimensionMismatch(format!(
                "Q must be {n}x{n}, got {}x{}",
                self.q.nrows(),
                self.q.ncols()
            )));
        }
        if self.r.shape() != (m, m) {
            return Err(RiccatiError::DimensionMismatch(format!(
                "R must be {m}x{m}, got {}x{}",
                self.r.nrows(),
                self.r.ncols()
            )));
        }
        Ok(())
    }
}

/// Stabilizing DARE solution with its feedback gain `K` so that `u = -K s`.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub pi: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// Frobenius norm of the DARE residual at the returned `pi`.
    pub residual_norm: f64,
    pub iterations: usize,
}

/// Closed-form solution of the continuous-time limit Riccati equation for a
/// symmetric two-agent alignment exchange with interaction strength `p` and
/// control penalty `gamma`.
///
/// The value matrix has the exchange structure `[[pi_d, pi_o], [pi_o, pi_d]]`
/// (Kronecker-extended over the coordinate dimension), and `pi_d + pi_o`
/// always equals `sqrt(gamma)`.
#[derive(Debug, Clone, Copy)]
pub struct BinaryOracle {
    pub pi_d: f64,
    pub pi_o: f64,
    pub p: f64,
    pub gamma: f64,
}

impl BinaryOracle {
    /// Assemble the full `2d x 2d` value matrix for `d`-dimensional agents.
    pub fn pi_matrix(&self, d: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(2 * d, 2 * d);
        for i in 0..d {
            m[(i, i)] = self.pi_d;
            m[(d + i, d + i)] = self.pi_d;
            m[(i, d + i)] = self.pi_o;
            m[(d + i, i)] = self.pi_o;
        }
        m
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

fn solve_sym(s: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, RiccatiError> {
    if let Some(chol) = s.clone().cholesky() {
        return Ok(chol.solve(rhs));
    }
    s.clone().lu().solve(rhs).ok_or(RiccatiError::SingularInnerSolve)
}

/// `K(pi) = (R + B' pi B)^{-1} B' pi A`.
fn gain_from(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    pi: &DMatrix<f64>,
) -> Result<DMatrix<f64>, RiccatiError> {
    let bt_pi = b.transpose() * pi;
    let s = symmetrize(&(r + &bt_pi * b));
    let rhs = &bt_pi * a;
    solve_sym(&s, &rhs)
}

/// One application of the Riccati map, `F(pi) = Q + A' pi (A - B K(pi))`.
fn dare_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    pi: &DMatrix<f64>,
) -> Result<DMatrix<f64>, RiccatiError> {
    let k = gain_from(a, b, r, pi)?;
    let a_cl = a - b * &k;
    Ok(symmetrize(&(q + a.transpose() * pi * a_cl)))
}

/// Solve the DARE `pi = Q + A'pi A - A'pi B (R + B'pi B)^{-1} B'pi A` by
/// fixed-point iteration from `pi_0 = Q`, stopping once the Frobenius norm of
/// the residual drops to `tol`.
///
/// 2x2 problems (scalar pair states) are routed through a stack-allocated
/// fast path; the synthesis loops of the Monte Carlo schemes solve millions
/// of those per run.
pub fn solve_dare(
    prob: &LqProblem,
    tol: f64,
    max_iter: usize,
) -> Result<RiccatiSolution, RiccatiError> {
    prob.validate()?;
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(RiccatiError::InvalidParameter(format!(
            "tol must be positive and finite, got {tol}"
        )));
    }
    if max_iter == 0 {
        return Err(RiccatiError::InvalidParameter("max_iter must be nonzero".into()));
    }
    let (n, m) = prob.dims();
    if n == 2 && m == 2 {
        return solve_dare_2x2(prob, tol, max_iter);
    }
    solve_dare_dynamic(prob, tol, max_iter)
}

pub(crate) fn solve_dare_dynamic(
    prob: &LqProblem,
    tol: f64,
    max_iter: usize,
) -> Result<RiccatiSolution, RiccatiError> {
    let mut pi = symmetrize(&prob.q);
    let mut resid = f64::INFINITY;
    for it in 1..=max_iter {
        let next = dare_map(&prob.a, &prob.b, &prob.q, &prob.r, &pi)?;
        resid = (&next - &pi).norm();
        pi = next;
        if resid <= tol {
            let k = gain_from(&prob.a, &prob.b, &prob.r, &pi)?;
            let check = dare_map(&prob.a, &prob.b, &prob.q, &prob.r, &pi)?;
            let residual_norm = (&check - &pi).norm();
            return Ok(RiccatiSolution { pi, k, residual_norm, iterations: it });
        }
    }
    Err(RiccatiError::NonConvergence { iterations: max_iter, residual: resid })
}

fn mat2(m: &DMatrix<f64>) -> Matrix2<f64> {
    Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)])
}

fn sym2(m: &Matrix2<f64>) -> Matrix2<f64> {
    0.5 * (m + m.transpose())
}

fn solve_dare_2x2(
    prob: &LqProblem,
    tol: f64,
    max_iter: usize,
) -> Result<RiccatiSolution, RiccatiError> {
    let a = mat2(&prob.a);
    let b = mat2(&prob.b);
    let q = sym2(&mat2(&prob.q));
    let r = sym2(&mat2(&prob.r));

    let step = |pi: &Matrix2<f64>| -> Result<(Matrix2<f64>, Matrix2<f64>), RiccatiError> {
        let bt_pi = b.transpose() * pi;
        let s = sym2(&(r + bt_pi * b));
        let s_inv = s.try_inverse().ok_or(RiccatiError::SingularInnerSolve)?;
        let k = s_inv * (bt_pi * a);
        let a_cl = a - b * k;
        Ok((sym2(&(q + a.transpose() * pi * a_cl)), k))
    };

    let mut pi = q;
    let mut resid = f64::INFINITY;
    for it in 1..=max_iter {
        let (next, _) = step(&pi)?;
        resid = (next - pi).norm();
        pi = next;
        if resid <= tol {
            let (check, k) = step(&pi)?;
            let residual_norm = (check - pi).norm();
            let to_dyn = |m: &Matrix2<f64>| {
                DMatrix::from_fn(2, 2, |i, j| m[(i, j)])
            };
            return Ok(RiccatiSolution {
                pi: to_dyn(&pi),
                k: to_dyn(&k),
                residual_norm,
                iterations: it,
            });
        }
    }
    Err(RiccatiError::NonConvergence { iterations: max_iter, residual: resid })
}

/// Structured doubling solver. Converges quadratically (each sweep squares the
/// closed-loop propagator), so large alignment problems finish in a few dozen
/// sweeps where the fixed-point iteration would need thousands. Opt-in: in
/// directions the cost does not see (e.g. the consensus mode of pair problems)
/// doubling amplifies roundoff to ~1e-8, while the fixed-point path keeps it
/// at machine precision.
pub fn solve_dare_doubling(
    prob: &LqProblem,
    tol: f64,
    max_iter: usize,
) -> Result<RiccatiSolution, RiccatiError> {
    prob.validate()?;
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(RiccatiError::InvalidParameter(format!(
            "tol must be positive and finite, got {tol}"
        )));
    }
    let n = prob.a.nrows();
    let rinv_bt = solve_sym(&symmetrize(&prob.r), &prob.b.transpose())?;
    let mut g = symmetrize(&(&prob.b * rinv_bt));
    let mut h = symmetrize(&prob.q);
    let mut a = prob.a.clone();
    let eye = DMatrix::<f64>::identity(n, n);

    let mut delta = f64::INFINITY;
    let mut converged = 0usize;
    for it in 1..=max_iter {
        let w = &eye + &g * &h;
        let lu = w.lu();
        let wia = lu.solve(&a).ok_or(RiccatiError::SingularInnerSolve)?;
        let wig = lu.solve(&g).ok_or(RiccatiError::SingularInnerSolve)?;
        let a_next = &a * &wia;
        let g_next = symmetrize(&(&g + &a * &wig * a.transpose()));
        let h_next = symmetrize(&(&h + a.transpose() * &h * &wia));
        delta = (&h_next - &h).norm();
        a = a_next;
        g = g_next;
        h = h_next;
        if delta <= tol * h.norm().max(1.0) {
            converged = it;
            break;
        }
    }
    if converged == 0 {
        return Err(RiccatiError::NonConvergence { iterations: max_iter, residual: delta });
    }
    let k = gain_from(&prob.a, &prob.b, &prob.r, &h)?;
    let check = dare_map(&prob.a, &prob.b, &prob.q, &prob.r, &h)?;
    let residual_norm = (&check - &h).norm();
    Ok(RiccatiSolution { pi: h, k, residual_norm, iterations: converged })
}

/// Feedback gain for a given value matrix: `K = (R + B'pi B)^{-1} B'pi A`.
pub fn feedback_gain(prob: &LqProblem, pi: &DMatrix<f64>) -> Result<DMatrix<f64>, RiccatiError> {
    prob.validate()?;
    let n = prob.a.nrows();
    if pi.shape() != (n, n) {
        return Err(RiccatiError::DimensionMismatch(format!(
            "pi must be {n}x{n}, got {}x{}",
            pi.nrows(),
            pi.ncols()
        )));
    }
    gain_from(&prob.a, &prob.b, &prob.r, pi)
}

/// Closed-form value coefficients of the continuous-time limit equation
/// `2 A~ pi - pi^2 / gamma + I = 0` for the symmetric exchange generator
/// `A~ = [[-p, p], [p, -p]]` (per coordinate).
pub fn analytic_binary_riccati(p: f64, gamma: f64) -> Result<BinaryOracle, RiccatiError> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(RiccatiError::InvalidParameter(format!(
            "gamma must be positive and finite, got {gamma}"
        )));
    }
    if !(p >= 0.0) || !p.is_finite() {
        return Err(RiccatiError::InvalidParameter(format!(
            "interaction strength p must be nonnegative and finite, got {p}"
        )));
    }
    let sg = gamma.sqrt();
    let pi_d = 0.5 * sg * (1.0 - 2.0 * sg * p + (1.0 + 4.0 * gamma * p * p).sqrt());
    let pi_o = sg - pi_d;
    Ok(BinaryOracle { pi_d, pi_o, p, gamma })
}

/// Feedback pair `(u, u_star)` of the closed-form law
/// `u = -(pi_d v + pi_o v_star) / gamma` and symmetrically for `u_star`.
/// Swapping the agents swaps the controls exactly.
pub fn analytic_binary_feedback(
    v: &DVector<f64>,
    v_star: &DVector<f64>,
    oracle: &BinaryOracle,
) -> Result<(DVector<f64>, DVector<f64>), RiccatiError> {
    if v.len() != v_star.len() {
        return Err(RiccatiError::DimensionMismatch(format!(
            "v and v_star must have equal length, got {} and {}",
            v.len(),
            v_star.len()
        )));
    }
    let inv_g = 1.0 / oracle.gamma;
    let u = -inv_g * (oracle.pi_d * v + oracle.pi_o * v_star);
    let u_star = -inv_g * (oracle.pi_o * v + oracle.pi_d * v_star);
    Ok((u, u_star))
}

/// Explicit-Euler embedding of the symmetric exchange dynamics: one step of
/// length `dt` of `s' = A~ s + u` with running cost `|s|^2 + gamma |u|^2`,
/// all scaled by `dt`. Its DARE solution converges to the closed-form limit
/// coefficients as `dt -> 0`, at first order.
pub fn embedded_exchange_problem(
    p: f64,
    gamma: f64,
    dt: f64,
    d: usize,
) -> Result<LqProblem, RiccatiError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(RiccatiError::InvalidParameter(format!(
            "dt must be positive and finite, got {dt}"
        )));
    }
    if d == 0 {
        return Err(RiccatiError::InvalidParameter("d must be at least 1".into()));
    }
    let n = 2 * d;
    let mut a = DMatrix::identity(n, n);
    for i in 0..d {
        a[(i, i)] -= dt * p;
        a[(i, d + i)] += dt * p;
        a[(d + i, i)] += dt * p;
        a[(d + i, d + i)] -= dt * p;
    }
    let b = DMatrix::identity(n, n) * dt;
    let q = DMatrix::identity(n, n) * dt;
    let r = DMatrix::identity(n, n) * (dt * gamma);
    LqProblem::new(a, b, q, r)
}

/// Cost of running the feedback `u = -K s` for `steps` steps of
/// `s' = A s + B u`, accumulating the quadratic stage cost on the
/// pre-update state.
pub fn closed_loop_cost(
    prob: &LqProblem,
    k: &DMatrix<f64>,
    s0: &DVector<f64>,
    steps: usize,
) -> f64 {
    let mut s = s0.clone();
    let mut cost = 0.0;
    for _ in 0..steps {
        let u = -k * &s;
        cost += (&prob.q * &s).dot(&s) + (&prob.r * &u).dot(&u);
        s = &prob.a * &s + &prob.b * &u;
    }
    cost
}

fn rollout_cost(prob: &LqProblem, s0: &DVector<f64>, u_seq: &[DVector<f64>]) -> f64 {
    let mut s = s0.clone();
    let mut cost = 0.0;
    for u in u_seq {
        cost += (&prob.q * &s).dot(&s) + (&prob.r * u).dot(u);
        s = &prob.a * &s + &prob.b * u;
    }
    cost
}

/// Gradient of the finite-horizon cost with respect to the whole control
/// sequence, via the adjoint recursion.
fn rollout_gradient(prob: &LqProblem, s0: &DVector<f64>, u_seq: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let t = u_seq.len();
    let mut states = Vec::with_capacity(t + 1);
    states.push(s0.clone());
    for u in u_seq {
        let s = states.last().unwrap();
        states.push(&prob.a * s + &prob.b * u);
    }
    let mut grads = vec![DVector::zeros(prob.b.ncols()); t];
    let mut lambda = DVector::zeros(prob.a.nrows());
    for step in (0..t).rev() {
        grads[step] = 2.0 * &prob.r * &u_seq[step] + prob.b.transpose() * &lambda;
        lambda = 2.0 * &prob.q * &states[step] + prob.a.transpose() * lambda;
    }
    grads
}

/// Minimize the finite-horizon cost directly over the control sequence
/// (`steps * m` free variables). The problem is an unconstrained convex
/// quadratic, solved by conjugate gradients with exact adjoint gradients;
/// independent of any Riccati recursion.
pub fn finite_horizon_optimum(
    prob: &LqProblem,
    s0: &DVector<f64>,
    steps: usize,
    grad_tol: f64,
) -> Result<(f64, usize), RiccatiError> {
    prob.validate()?;
    if steps == 0 {
        return Ok((0.0, 0));
    }
    let m = prob.b.ncols();
    let flat = |seq: &[DVector<f64>]| -> DVector<f64> {
        DVector::from_iterator(steps * m, seq.iter().flat_map(|u| u.iter().copied()))
    };
    let unflat = |v: &DVector<f64>| -> Vec<DVector<f64>> {
        (0..steps).map(|t| v.rows(t * m, m).into_owned()).collect()
    };

    let zero_seq = vec![DVector::zeros(m); steps];
    let g0 = flat(&rollout_gradient(prob, s0, &zero_seq));
    // gradient is affine in u, so H v = grad(v) - grad(0) exactly
    let hessian_vec = |v: &DVector<f64>| -> DVector<f64> {
        flat(&rollout_gradient(prob, s0, &unflat(v))) - &g0
    };

    let mut u = DVector::zeros(steps * m);
    let mut r = -&g0;
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let stop = (grad_tol * g0.norm()).max(1e-300);
    let mut iterations = 0;
    for _ in 0..steps * m {
        if rs.sqrt() <= stop {
            break;
        }
        let hp = hessian_vec(&p);
        let denom = p.dot(&hp);
        if !(denom > 0.0) {
            return Err(RiccatiError::InvalidParameter(
                "finite-horizon cost lost positive curvature".into(),
            ));
        }
        let alpha = rs / denom;
        u += alpha * &p;
        r -= alpha * hp;
        let rs_next = r.dot(&r);
        p = &r + (rs_next / rs) * p;
        rs = rs_next;
        iterations += 1;
    }
    Ok((rollout_cost(prob, s0, &unflat(&u)), iterations))
}
