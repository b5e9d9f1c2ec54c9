//! Direct-simulation Monte Carlo engine for the controlled binary dynamics.
//!
//! Each step draws a random perfect matching, lets every matched pair interact
//! with probability `dt/epsilon` (certainty in the `dt = epsilon` regime), and
//! advances positions by free transport with the pre-interaction velocities.
//! The Nanbu variant applies the full-state pair map in one shot instead of
//! splitting transport from interaction. Controllers are pluggable: exact
//! per-pair Riccati feedback, a trained network surrogate (control values or
//! post-interaction velocities), or no control.

use crate::models::{
    cost_matrices, kernel_cucker_smale, kernel_sznajd, morse_terms, ModelError, ModelKind,
    ModelSpec, Order, PairState,
};
use crate::neural::{batch_evaluate, load_model, NetworkParams, NeuralError};
use crate::rng::{substream, Purpose};
use crate::sdre::{dsdre_control, SdreError};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KineticError {
    #[error("invalid kinetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("controller failed at step {step} on pair ({i}, {j}): {source}")]
    Controller {
        step: u64,
        i: usize,
        j: usize,
        source: SdreError,
    },
    #[error("non-finite state at step {step} (first offending particle {particle})")]
    NonFiniteState {
        step: u64,
        particle: usize,
        snapshot: Box<ParticleSnapshot>,
    },
    #[error("controller network could not be loaded: {0}")]
    Network(#[from] NeuralError),
    #[error("controller network has wrong shape: {0}")]
    NetworkShape(String),
}

/// Monte Carlo sample of the kinetic density. Second-order models fill both
/// matrices; first-order models keep the state in `positions` and leave
/// `velocities` with zero columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub positions: DMatrix<f64>,
    pub velocities: DMatrix<f64>,
    pub time: f64,
    pub step_index: u64,
}

impl ParticleEnsemble {
    pub fn n(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_second_order(&self) -> bool {
        self.velocities.ncols() > 0
    }

    /// The coordinates binary interactions act on: velocities for
    /// second-order models, the state itself for first-order ones.
    pub fn interaction_coords(&self) -> &DMatrix<f64> {
        if self.is_second_order() {
            &self.velocities
        } else {
            &self.positions
        }
    }

    /// Mean squared deviation of the interaction coordinates from their
    /// ensemble mean.
    pub fn dispersion(&self) -> f64 {
        let coords = self.interaction_coords();
        let n = coords.nrows();
        let mean = coords.row_mean();
        let mut total = 0.0;
        for r in 0..n {
            total += (coords.row(r) - &mean).norm_squared();
        }
        total / n as f64
    }

    pub fn mean_velocity(&self) -> DVector<f64> {
        self.interaction_coords().row_mean().transpose()
    }

    pub fn all_finite(&self) -> Option<usize> {
        for r in 0..self.n() {
            let pos_ok = self.positions.row(r).iter().all(|v| v.is_finite());
            let vel_ok = self.velocities.row(r).iter().all(|v| v.is_finite());
            if !(pos_ok && vel_ok) {
                return Some(r);
            }
        }
        None
    }
}

/// Raw particle states captured during a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSnapshot {
    pub step: u64,
    pub time: f64,
    pub positions: DMatrix<f64>,
    pub velocities: DMatrix<f64>,
}

impl ParticleSnapshot {
    fn of(ens: &ParticleEnsemble) -> Self {
        ParticleSnapshot {
            step: ens.step_index,
            time: ens.time,
            positions: ens.positions.clone(),
            velocities: ens.velocities.clone(),
        }
    }
}

/// Per-step aggregates: quadratic stage-cost sums over the interacting pairs
/// (unit-rate `Q`, `R`), dispersion and mean of the interaction coordinates
/// after the step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub time: f64,
    pub n_interactions: usize,
    pub state_quad: f64,
    pub control_quad: f64,
    pub consensus: f64,
    pub mean_velocity: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

/// Initial phase-space distribution; the dimension must match `d` (first
/// order) or `2d` (second order, positions first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialDistribution {
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    IsotropicGaussian { mean: Vec<f64>, std: f64 },
    /// Independent 1-D Gaussian mixtures, one per coordinate.
    CoordinateMixtures { coordinates: Vec<Vec<MixtureComponent>> },
}

impl InitialDistribution {
    pub fn dim(&self) -> usize {
        match self {
            InitialDistribution::UniformBox { lo, .. } => lo.len(),
            InitialDistribution::IsotropicGaussian { mean, .. } => mean.len(),
            InitialDistribution::CoordinateMixtures { coordinates } => coordinates.len(),
        }
    }

    pub fn validate(&self, expected_dim: usize) -> Result<(), KineticError> {
        let bad = |msg: String| Err(KineticError::InvalidConfig(msg));
        if self.dim() != expected_dim {
            return bad(format!(
                "initial distribution has dimension {}, phase space needs {expected_dim}",
                self.dim()
            ));
        }
        match self {
            InitialDistribution::UniformBox { lo, hi } => {
                if lo.len() != hi.len() {
                    return bad("uniform box bounds have different lengths".into());
                }
                for (a, b) in lo.iter().zip(hi) {
                    if !(a.is_finite() && b.is_finite() && a <= b) {
                        return bad(format!("invalid box interval [{a}, {b}]"));
                    }
                }
            }
            InitialDistribution::IsotropicGaussian { mean, std } => {
                if !mean.iter().all(|m| m.is_finite()) || !(std.is_finite() && *std >= 0.0) {
                    return bad("gaussian parameters must be finite with std >= 0".into());
                }
            }
            InitialDistribution::CoordinateMixtures { coordinates } => {
                for comps in coordinates {
                    if comps.is_empty() {
                        return bad("empty mixture".into());
                    }
                    let total: f64 = comps.iter().map(|c| c.weight).sum();
                    if !(total > 0.0) {
                        return bad("mixture weights must sum to a positive value".into());
                    }
                    for c in comps {
                        if !(c.weight >= 0.0 && c.mean.is_finite() && c.std >= 0.0) {
                            return bad("invalid mixture component".into());
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn sample_into(&self, out: &mut [f64], rng: &mut impl Rng) {
        match self {
            InitialDistribution::UniformBox { lo, hi } => {
                for (c, slot) in out.iter_mut().enumerate() {
                    *slot = if hi[c] > lo[c] {
                        rng.gen_range(lo[c]..hi[c])
                    } else {
                        lo[c]
                    };
                }
            }
            InitialDistribution::IsotropicGaussian { mean, std } => {
                for (c, slot) in out.iter_mut().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    *slot = mean[c] + std * z;
                }
            }
            InitialDistribution::CoordinateMixtures { coordinates } => {
                for (c, slot) in out.iter_mut().enumerate() {
                    let comps = &coordinates[c];
                    let total: f64 = comps.iter().map(|k| k.weight).sum();
                    let mut pick = rng.gen_range(0.0..total);
                    let mut chosen = &comps[comps.len() - 1];
                    for k in comps {
                        if pick < k.weight {
                            chosen = k;
                            break;
                        }
                        pick -= k.weight;
                    }
                    let z: f64 = rng.sample(StandardNormal);
                    *slot = chosen.mean + chosen.std * z;
                }
            }
        }
    }
}

/// Controller selection as it appears in config files (networks referenced by
/// path); [`ControllerSpec::load`] resolves it into a runtime [`Controller`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControllerSpec {
    ExactDsdre,
    NnControl { model_file: PathBuf },
    NnStateUpdate { model_file: PathBuf },
    Zero,
}

impl ControllerSpec {
    pub fn load(&self) -> Result<Controller, KineticError> {
        Ok(match self {
            ControllerSpec::ExactDsdre => Controller::ExactDsdre,
            ControllerSpec::Zero => Controller::Zero,
            ControllerSpec::NnControl { model_file } => {
                Controller::NnControl(load_model(model_file)?)
            }
            ControllerSpec::NnStateUpdate { model_file } => {
                Controller::NnStateUpdate(load_model(model_file)?)
            }
        })
    }
}

#[derive(Debug, Clone)]
pub enum Controller {
    /// Solve the frozen Riccati equation for every interacting pair.
    ExactDsdre,
    /// Network predicting the stacked pair control `(u, u_star)`.
    NnControl(NetworkParams),
    /// Network predicting the post-interaction controlled coordinates.
    NnStateUpdate(NetworkParams),
    Zero,
}

impl Controller {
    pub fn name(&self) -> &'static str {
        match self {
            Controller::ExactDsdre => "exact_dsdre",
            Controller::NnControl(_) => "nn_control",
            Controller::NnStateUpdate(_) => "nn_state_update",
            Controller::Zero => "zero",
        }
    }

    fn check_shape(&self, spec: &ModelSpec) -> Result<(), KineticError> {
        let net = match self {
            Controller::NnControl(p) | Controller::NnStateUpdate(p) => p,
            _ => return Ok(()),
        };
        let want_in = spec.state_dim() + 1;
        let want_out = spec.control_dim();
        if net.arch.input_dim() != want_in || net.arch.output_dim() != want_out {
            return Err(KineticError::NetworkShape(format!(
                "network maps {} -> {}, model needs {} -> {}",
                net.arch.input_dim(),
                net.arch.output_dim(),
                want_in,
                want_out
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Interaction step on velocities, then free transport with the
    /// pre-interaction velocities.
    SplitTransportInteraction,
    /// Full-state pair map applied in one update; non-interacting particles
    /// are left untouched.
    NanbuSimultaneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KineticConfig {
    pub model: ModelSpec,
    pub controller: ControllerSpec,
    pub initial: InitialDistribution,
    pub n_particles: usize,
    pub dt: f64,
    pub epsilon: f64,
    pub n_steps: usize,
    pub scheme: Scheme,
    pub seed: u64,
    pub snapshot_every: usize,
}

impl KineticConfig {
    pub fn validate(&self) -> Result<(), KineticError> {
        self.model.validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(KineticError::InvalidConfig("dt must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(KineticError::InvalidConfig("epsilon must be positive".into()));
        }
        if self.dt > self.epsilon {
            return Err(KineticError::InvalidConfig(format!(
                "dt = {} exceeds epsilon = {}; the interaction probability dt/epsilon must not exceed 1",
                self.dt, self.epsilon
            )));
        }
        if self.n_particles < 2 {
            return Err(KineticError::InvalidConfig("need at least 2 particles".into()));
        }
        if self.n_steps == 0 {
            return Err(KineticError::InvalidConfig("n_steps must be at least 1".into()));
        }
        if self.snapshot_every == 0 {
            return Err(KineticError::InvalidConfig("snapshot_every must be at least 1".into()));
        }
        self.initial.validate(self.model.state_dim() / 2)?;
        Ok(())
    }
}

/// Draw `n` i.i.d. samples from `dist`; per-particle RNG substreams make the
/// result independent of iteration order and reproducible from the seed.
pub fn sample_initial(
    spec: &ModelSpec,
    dist: &InitialDistribution,
    n: usize,
    seed: u64,
) -> Result<ParticleEnsemble, KineticError> {
    spec.validate()?;
    let phase_dim = spec.state_dim() / 2;
    dist.validate(phase_dim)?;
    let d = spec.d;
    let vel_cols = match spec.order {
        Order::First => 0,
        Order::Second => d,
    };
    let mut positions = DMatrix::zeros(n, d);
    let mut velocities = DMatrix::zeros(n, vel_cols);
    let mut buf = vec![0.0; phase_dim];
    for i in 0..n {
        let mut rng = substream(seed, Purpose::InitialCondition, 0, i as u64);
        dist.sample_into(&mut buf, &mut rng);
        for c in 0..d {
            positions[(i, c)] = buf[c];
        }
        for c in 0..vel_cols {
            velocities[(i, c)] = buf[d + c];
        }
    }
    Ok(ParticleEnsemble { positions, velocities, time: 0.0, step_index: 0 })
}

/// Uniform random perfect matching: shuffle the indices and pair neighbours.
/// With odd `n` the last index stays unpaired for this step.
pub fn pair_particles(n: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    assert!(n >= 2, "need at least two particles to pair");
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    (0..n / 2).map(|k| (perm[2 * k], perm[2 * k + 1])).collect()
}

/// Drift increment of the controlled coordinates for each pair member over
/// one interaction of length `dt` (the `A s - s` part of the frozen map,
/// restricted to the rows controls act on).
fn interaction_drift(spec: &ModelSpec, pair: &PairState) -> (DVector<f64>, DVector<f64>) {
    let dt = pair.dt;
    match spec.kind {
        ModelKind::Sznajd { beta } => {
            let p1 = kernel_sznajd(pair.x[0], beta);
            let p2 = kernel_sznajd(pair.x_star[0], beta);
            let di = (&pair.x_star - &pair.x) * (dt * p1);
            let dj = (&pair.x - &pair.x_star) * (dt * p2);
            (di, dj)
        }
        ModelKind::CuckerSmale => {
            let p = kernel_cucker_smale(&pair.x, &pair.x_star);
            let di = (&pair.v_star - &pair.v) * (dt * p);
            let dj = (&pair.v - &pair.v_star) * (dt * p);
            (di, dj)
        }
        ModelKind::QuasiMorse { .. } => {
            let (p_x, p_v1) = morse_terms(&pair.x, &pair.x_star, &pair.v, spec);
            let (_, p_v2) = morse_terms(&pair.x, &pair.x_star, &pair.v_star, spec);
            let di = (&pair.x_star - &pair.x) * (dt * p_x) + &pair.v * (dt * p_v1);
            let dj = (&pair.x - &pair.x_star) * (dt * p_x) + &pair.v_star * (dt * p_v2);
            (di, dj)
        }
    }
}

enum BatchControl {
    /// Stacked `(u, u_star)` per pair.
    Controls(Vec<DVector<f64>>),
    /// Post-interaction controlled coordinates per pair.
    PostStates(Vec<DVector<f64>>),
}

fn evaluate_controller(
    ctrl: &Controller,
    spec: &ModelSpec,
    pairs: &[PairState],
) -> Result<BatchControl, (usize, SdreError)> {
    let m = spec.control_dim();
    match ctrl {
        Controller::Zero => Ok(BatchControl::Controls(
            pairs.iter().map(|_| DVector::zeros(m)).collect(),
        )),
        Controller::ExactDsdre => {
            let mut out = Vec::with_capacity(pairs.len());
            for (k, pair) in pairs.iter().enumerate() {
                out.push(dsdre_control(spec, pair).map_err(|e| (k, e))?);
            }
            Ok(BatchControl::Controls(out))
        }
        Controller::NnControl(net) => Ok(BatchControl::Controls(net_batch(net, spec, pairs))),
        Controller::NnStateUpdate(net) => Ok(BatchControl::PostStates(net_batch(net, spec, pairs))),
    }
}

fn net_batch(net: &NetworkParams, spec: &ModelSpec, pairs: &[PairState]) -> Vec<DVector<f64>> {
    let kappa = spec.state_dim();
    let mut inputs = DMatrix::zeros(pairs.len(), kappa + 1);
    for (r, pair) in pairs.iter().enumerate() {
        let s = pair.stacked();
        for c in 0..kappa {
            inputs[(r, c)] = s[c];
        }
        inputs[(r, kappa)] = pair.dt;
    }
    let out = batch_evaluate(net, &inputs);
    (0..pairs.len()).map(|r| out.row(r).transpose()).collect()
}

/// Advance the ensemble by one step. Pure: the input ensemble is untouched.
pub fn mc_step(
    ens: &ParticleEnsemble,
    cfg: &KineticConfig,
    ctrl: &Controller,
) -> Result<(ParticleEnsemble, StepStats), KineticError> {
    let spec = &cfg.model;
    let d = spec.d;
    let n = ens.n();
    let step = ens.step_index;
    let eps = cfg.epsilon;
    let second_order = matches!(spec.order, Order::Second);

    let all_pairs = {
        let mut rng = substream(cfg.seed, Purpose::Pairing, step, 0);
        pair_particles(n, &mut rng)
    };

    // interaction coin per pair; certainty in the dt = epsilon regime
    let prob = cfg.dt / eps;
    let chosen: Vec<(usize, usize)> = all_pairs
        .iter()
        .enumerate()
        .filter(|(k, _)| {
            prob >= 1.0 || {
                let mut rng = substream(cfg.seed, Purpose::Interaction, step, *k as u64);
                rng.gen_bool(prob)
            }
        })
        .map(|(_, &p)| p)
        .collect();

    let pair_states: Vec<PairState> = chosen
        .iter()
        .map(|&(i, j)| {
            let xi = ens.positions.row(i).transpose();
            let xj = ens.positions.row(j).transpose();
            if second_order {
                PairState::second_order(
                    xi,
                    xj,
                    ens.velocities.row(i).transpose(),
                    ens.velocities.row(j).transpose(),
                    eps,
                )
            } else {
                PairState::first_order(xi, xj, eps)
            }
        })
        .collect();

    let controls = evaluate_controller(ctrl, spec, &pair_states).map_err(|(k, source)| {
        KineticError::Controller { step, i: chosen[k].0, j: chosen[k].1, source }
    })?;

    let (q_unit, r_unit) = cost_matrices(spec, 1.0);
    let mut state_quad = 0.0;
    let mut control_quad = 0.0;

    let mut positions = ens.positions.clone();
    let mut velocities = ens.velocities.clone();

    // controlled coordinates live in `velocities` (second order) or
    // `positions` (first order)
    macro_rules! coords {
        () => {
            if second_order { &mut velocities } else { &mut positions }
        };
    }

    for (k, (&(i, j), pair)) in chosen.iter().zip(&pair_states).enumerate() {
        let (drift_i, drift_j) = interaction_drift(spec, pair);
        let (ci, cj) = if second_order {
            (&pair.v, &pair.v_star)
        } else {
            (&pair.x, &pair.x_star)
        };

        let (new_i, new_j, u_full) = match &controls {
            BatchControl::Controls(us) => {
                let u = &us[k];
                let ui = u.rows(0, d);
                let uj = u.rows(d, d);
                (ci + &drift_i + ui * eps, cj + &drift_j + uj * eps, u.clone())
            }
            BatchControl::PostStates(posts) => {
                let post = &posts[k];
                let new_i = post.rows(0, d).into_owned();
                let new_j = post.rows(d, d).into_owned();
                // the control the network implies, recovered from the exact
                // drift: post = c + drift + eps*u
                let mut u = DVector::zeros(2 * d);
                u.rows_mut(0, d).copy_from(&((&new_i - ci - &drift_i) / eps));
                u.rows_mut(d, d).copy_from(&((&new_j - cj - &drift_j) / eps));
                (new_i, new_j, u)
            }
        };

        let s = pair.stacked();
        state_quad += (q_unit.clone() * &s).dot(&s);
        control_quad += (r_unit.clone() * &u_full).dot(&u_full);

        {
            let target = coords!();
            target.row_mut(i).copy_from(&new_i.transpose());
            target.row_mut(j).copy_from(&new_j.transpose());
        }

        if second_order && matches!(cfg.scheme, Scheme::NanbuSimultaneous) {
            // transport rows of the full-state map, at time-n states
            let xi = &pair.x + &pair.v * eps;
            let xj = &pair.x_star + &pair.v_star * eps;
            positions.row_mut(i).copy_from(&xi.transpose());
            positions.row_mut(j).copy_from(&xj.transpose());
        }
    }

    if second_order && matches!(cfg.scheme, Scheme::SplitTransportInteraction) {
        // free flow for every particle with the pre-interaction velocities
        positions += ens.velocities.clone() * cfg.dt;
    }

    let next = ParticleEnsemble {
        positions,
        velocities,
        time: ens.time + cfg.dt,
        step_index: step + 1,
    };
    if let Some(particle) = next.all_finite() {
        return Err(KineticError::NonFiniteState {
            step,
            particle,
            snapshot: Box::new(ParticleSnapshot::of(&next)),
        });
    }
    let stats = StepStats {
        step: step + 1,
        time: next.time,
        n_interactions: chosen.len(),
        state_quad,
        control_quad,
        consensus: next.dispersion(),
        mean_velocity: next.mean_velocity(),
    };
    Ok((next, stats))
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub snapshots: Vec<ParticleSnapshot>,
    pub steps: Vec<StepStats>,
    pub final_state: ParticleEnsemble,
    pub wall_seconds: f64,
}

/// Run the configured number of steps, emitting the initial state, every
/// `snapshot_every`-th step, and the final state.
pub fn simulate_with(cfg: &KineticConfig, ctrl: &Controller) -> Result<SimulationOutput, KineticError> {
    cfg.validate()?;
    ctrl.check_shape(&cfg.model)?;
    let start = std::time::Instant::now();
    let mut ens = sample_initial(&cfg.model, &cfg.initial, cfg.n_particles, cfg.seed)?;
    let mut snapshots = vec![ParticleSnapshot::of(&ens)];
    let mut steps = Vec::with_capacity(cfg.n_steps);
    for k in 1..=cfg.n_steps {
        let (next, stats) = mc_step(&ens, cfg, ctrl)?;
        ens = next;
        steps.push(stats);
        if k % cfg.snapshot_every == 0 || k == cfg.n_steps {
            snapshots.push(ParticleSnapshot::of(&ens));
        }
    }
    Ok(SimulationOutput {
        snapshots,
        steps,
        final_state: ens,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Like [`simulate_with`], loading the controller from the config.
pub fn simulate(cfg: &KineticConfig) -> Result<SimulationOutput, KineticError> {
    let ctrl = cfg.controller.load()?;
    simulate_with(cfg, &ctrl)
}
