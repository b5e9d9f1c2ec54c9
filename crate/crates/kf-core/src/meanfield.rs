//! Semi-Lagrangian solver for the 1-D opinion mean-field equation in
//! conservation form on `[-1, 1]`: densities are pushed forward along the
//! interaction field plus a feedback control field reconstructed from a
//! binary control law by quadrature. Serves as the grazing-limit reference
//! for the Monte Carlo runs.

use crate::kinetic::{Controller, KineticError};
use crate::models::{kernel_sznajd, ModelKind, ModelSpec, Order, PairState};
use crate::neural::batch_evaluate;
use crate::sdre::{dsdre_control, SdreError};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub const DOMAIN_LO: f64 = -1.0;
pub const DOMAIN_HI: f64 = 1.0;
pub const DEFAULT_GRID: usize = 400;
pub const DEFAULT_DT: f64 = 0.01;

#[derive(Debug, Error)]
pub enum MeanFieldError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("density lost its mass (integral {mass:e}); cannot renormalize")]
    MassLoss { mass: f64 },
    #[error("binary control tabulation failed: {0}")]
    Tabulation(#[from] SdreError),
    #[error(transparent)]
    Controller(#[from] KineticError),
    #[error("mean-field solver requires a first-order model, got {0:?}")]
    WrongModel(ModelKind),
}

/// Density values on a uniform grid over `[-1, 1]`, kept at unit mass under
/// the trapezoid rule.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    pub nodes: DVector<f64>,
    pub values: DVector<f64>,
    pub time: f64,
}

pub fn uniform_grid(m: usize) -> DVector<f64> {
    assert!(m >= 2, "grid needs at least two nodes");
    let h = (DOMAIN_HI - DOMAIN_LO) / (m - 1) as f64;
    DVector::from_fn(m, |i, _| DOMAIN_LO + h * i as f64)
}

/// Trapezoid quadrature weights for the uniform grid: `h/2, h, ..., h, h/2`.
pub fn trapezoid_weights(m: usize) -> DVector<f64> {
    let h = (DOMAIN_HI - DOMAIN_LO) / (m - 1) as f64;
    let mut w = DVector::from_element(m, h);
    w[0] = 0.5 * h;
    w[m - 1] = 0.5 * h;
    w
}

impl GridDensity {
    /// Wrap raw nonnegative values and normalize them to unit mass.
    pub fn new_normalized(values: DVector<f64>, time: f64) -> Result<Self, MeanFieldError> {
        if values.len() < 2 {
            return Err(MeanFieldError::InvalidGrid("need at least two nodes".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MeanFieldError::InvalidGrid(
                "density values must be finite and nonnegative".into(),
            ));
        }
        let mut density =
            GridDensity { nodes: uniform_grid(values.len()), values, time };
        density.renormalize()?;
        Ok(density)
    }

    /// Truncated symmetric bimodal Gaussian mixture
    /// `0.5 N(-0.3, 0.1^2) + 0.5 N(0.3, 0.1^2)`, renormalized on the domain.
    pub fn bimodal_default(m: usize) -> Self {
        let nodes = uniform_grid(m);
        let gauss = |x: f64, mu: f64| {
            let z = (x - mu) / 0.1;
            (-0.5 * z * z).exp()
        };
        let values = nodes.map(|x| 0.5 * gauss(x, -0.3) + 0.5 * gauss(x, 0.3));
        GridDensity::new_normalized(values, 0.0).expect("bimodal default has positive mass")
    }

    pub fn mass(&self) -> f64 {
        trapezoid_weights(self.nodes.len()).dot(&self.values)
    }

    pub fn renormalize(&mut self) -> Result<(), MeanFieldError> {
        let mass = self.mass();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(MeanFieldError::MassLoss { mass });
        }
        self.values /= mass;
        Ok(())
    }
}

/// Binary feedback law tabulated on the grid: entry `(i, j)` is the control
/// the first agent of the pair `(x_i, x_j)` receives. Built once per run;
/// reconstruction is then a quadrature against the current density.
#[derive(Debug, Clone)]
pub struct MfController {
    pub nodes: DVector<f64>,
    pub table: DMatrix<f64>,
}

impl MfController {
    /// Tabulate a pair controller at interaction strength `epsilon` on all
    /// node pairs. The model must be first-order.
    pub fn tabulate(
        ctrl: &Controller,
        spec: &ModelSpec,
        nodes: &DVector<f64>,
        epsilon: f64,
    ) -> Result<Self, MeanFieldError> {
        if !matches!(spec.order, Order::First) {
            return Err(MeanFieldError::WrongModel(spec.kind));
        }
        let m = nodes.len();
        let mut table = DMatrix::zeros(m, m);
        match ctrl {
            Controller::Zero => {}
            Controller::ExactDsdre => {
                for i in 0..m {
                    for j in 0..m {
                        let pair = PairState::first_order(
                            DVector::from_element(1, nodes[i]),
                            DVector::from_element(1, nodes[j]),
                            epsilon,
                        );
                        let u = dsdre_control(spec, &pair)?;
                        table[(i, j)] = u[0];
                    }
                }
            }
            Controller::NnControl(net) | Controller::NnStateUpdate(net) => {
                let mut inputs = DMatrix::zeros(m * m, 3);
                for i in 0..m {
                    for j in 0..m {
                        inputs[(i * m + j, 0)] = nodes[i];
                        inputs[(i * m + j, 1)] = nodes[j];
                        inputs[(i * m + j, 2)] = epsilon;
                    }
                }
                let out = batch_evaluate(net, &inputs);
                let state_update = matches!(ctrl, Controller::NnStateUpdate(_));
                let ModelKind::Sznajd { beta } = spec.kind else {
                    return Err(MeanFieldError::WrongModel(spec.kind));
                };
                for i in 0..m {
                    for j in 0..m {
                        let y = out[(i * m + j, 0)];
                        table[(i, j)] = if state_update {
                            // post-state net: recover the implied control from
                            // x' = x + eps*P(x)(x_j - x) + eps*u
                            let drift = kernel_sznajd(nodes[i], beta) * (nodes[j] - nodes[i]);
                            (y - nodes[i]) / epsilon - drift
                        } else {
                            y
                        };
                    }
                }
            }
        }
        Ok(MfController { nodes: nodes.clone(), table })
    }
}

/// Mean-field control field: `u(x_i) = sum_j w_j u_binary(x_i, x_j) f(x_j)`.
pub fn reconstruct_mf_control(ctrl: &MfController, density: &GridDensity) -> DVector<f64> {
    assert_eq!(
        ctrl.nodes.len(),
        density.nodes.len(),
        "controller table and density live on different grids"
    );
    let w = trapezoid_weights(density.nodes.len());
    let weighted = w.component_mul(&density.values);
    &ctrl.table * weighted
}

/// Interaction field `P[f](x_i) = sum_j w_j beta (1 - x_i^2)(x_j - x_i) f(x_j)`.
pub fn interaction_field(density: &GridDensity, beta: f64) -> DVector<f64> {
    let m = density.nodes.len();
    let w = trapezoid_weights(m);
    DVector::from_fn(m, |i, _| {
        let xi = density.nodes[i];
        let p = kernel_sznajd(xi, beta);
        let mut total = 0.0;
        for j in 0..m {
            total += w[j] * p * (density.nodes[j] - xi) * density.values[j];
        }
        total
    })
}

/// One semi-Lagrangian step for the conservation form: trace the
/// characteristic foot `x - dt*field(x)` backward, interpolate linearly (feet
/// clamped to the domain), weight by the Jacobian `1 - dt*field'(x)` of the
/// backward map so converging characteristics concentrate mass, renormalize.
pub fn mf_step(
    density: &GridDensity,
    velocity_field: &DVector<f64>,
    dt: f64,
) -> Result<GridDensity, MeanFieldError> {
    let m = density.nodes.len();
    assert_eq!(velocity_field.len(), m, "field must live on the density grid");
    if !(dt > 0.0) {
        return Err(MeanFieldError::InvalidGrid("dt must be positive".into()));
    }
    let h = (DOMAIN_HI - DOMAIN_LO) / (m - 1) as f64;
    let mut values = DVector::zeros(m);
    for i in 0..m {
        let foot = (density.nodes[i] - dt * velocity_field[i]).clamp(DOMAIN_LO, DOMAIN_HI);
        let cell = (((foot - DOMAIN_LO) / h).floor() as usize).min(m - 2);
        let theta = ((foot - density.nodes[cell]) / h).clamp(0.0, 1.0);
        let interp = (1.0 - theta) * density.values[cell] + theta * density.values[cell + 1];
        let dv = if i == 0 {
            (velocity_field[1] - velocity_field[0]) / h
        } else if i == m - 1 {
            (velocity_field[m - 1] - velocity_field[m - 2]) / h
        } else {
            (velocity_field[i + 1] - velocity_field[i - 1]) / (2.0 * h)
        };
        values[i] = interp * (1.0 - dt * dv).max(0.0);
    }
    let mut next = GridDensity { nodes: density.nodes.clone(), values, time: density.time + dt };
    next.renormalize()?;
    Ok(next)
}

/// Time-trapezoid of `integral (x^2 + gamma u^2) f dx` along a trajectory.
/// `controls[k]` is the control field active at `densities[k]`.
pub fn mf_cost(densities: &[GridDensity], controls: &[DVector<f64>], gamma: f64) -> f64 {
    assert_eq!(densities.len(), controls.len(), "one control field per density");
    if densities.len() < 2 {
        return 0.0;
    }
    let w = trapezoid_weights(densities[0].nodes.len());
    let stage: Vec<f64> = densities
        .iter()
        .zip(controls)
        .map(|(f, u)| {
            let mut g = 0.0;
            for j in 0..f.nodes.len() {
                let x = f.nodes[j];
                g += w[j] * (x * x + gamma * u[j] * u[j]) * f.values[j];
            }
            g
        })
        .collect();
    let mut cost = 0.0;
    for k in 0..densities.len() - 1 {
        let dt = densities[k + 1].time - densities[k].time;
        cost += 0.5 * dt * (stage[k] + stage[k + 1]);
    }
    cost
}

#[derive(Debug, Clone)]
pub struct MfRun {
    /// Density after every step, including the initial datum.
    pub densities: Vec<GridDensity>,
    /// Control field active at each density (zeros when uncontrolled).
    pub controls: Vec<DVector<f64>>,
    pub cost: f64,
}

/// Drive the opinion mean-field dynamics for `n_steps` of length `dt`,
/// optionally under a tabulated feedback law; `gamma` enters the reported
/// cost only.
pub fn evolve_opinion_density(
    f0: GridDensity,
    beta: f64,
    gamma: f64,
    controller: Option<&MfController>,
    dt: f64,
    n_steps: usize,
) -> Result<MfRun, MeanFieldError> {
    let m = f0.nodes.len();
    let mut densities = Vec::with_capacity(n_steps + 1);
    let mut controls = Vec::with_capacity(n_steps + 1);
    let mut current = f0;
    for _ in 0..n_steps {
        let u = match controller {
            Some(c) => reconstruct_mf_control(c, &current),
            None => DVector::zeros(m),
        };
        let field = interaction_field(&current, beta) + &u;
        let next = mf_step(&current, &field, dt)?;
        densities.push(current);
        controls.push(u);
        current = next;
    }
    let u_final = match controller {
        Some(c) => reconstruct_mf_control(c, &current),
        None => DVector::zeros(m),
    };
    densities.push(current);
    controls.push(u_final);
    let cost = mf_cost(&densities, &controls, gamma);
    Ok(MfRun { densities, controls, cost })
}
