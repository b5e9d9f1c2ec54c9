//! Run configuration: a single TOML file (or a named preset) validated up
//! front, with `key=value` command-line overrides applied onto the raw
//! document before deserialization so typos surface as unknown-key errors.

use kf_core::kinetic::{
    ControllerSpec, InitialDistribution, KineticConfig, MixtureComponent, Scheme,
};
use kf_core::models::{ModelKind, ModelSpec, Order, Target};
use kf_core::neural::{Activation, Architecture, SurrogateKind, TrainConfig};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Configuration problems exit with code 2; runtime failures with 3.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

pub fn config_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

pub fn runtime_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub model: ModelSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub kinetic: KineticSection,
    #[serde(default)]
    pub meanfield: MeanfieldSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub bench: BenchSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `sznajd`, `cucker_smale`, or `quasi_morse`.
    pub kind: String,
    #[serde(default)]
    pub d: Option<usize>,
    pub gamma: f64,
    /// Opinion kernel coefficient (sznajd only).
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub morse_c: Option<f64>,
    #[serde(default)]
    pub morse_p: Option<f64>,
    #[serde(default)]
    pub morse_l: Option<f64>,
    #[serde(default)]
    pub morse_alpha: Option<f64>,
    #[serde(default)]
    pub morse_beta: Option<f64>,
    /// `zero` or `pair_mean`; defaults to the model's canonical target.
    #[serde(default)]
    pub target: Option<String>,
    /// Uniform sampling-box bounds applied to every coordinate.
    #[serde(default)]
    pub domain_lo: Option<f64>,
    #[serde(default)]
    pub domain_hi: Option<f64>,
}

impl ModelSection {
    pub fn to_spec(&self) -> Result<ModelSpec> {
        let mut spec = match self.kind.as_str() {
            "sznajd" => {
                if let Some(d) = self.d {
                    if d != 1 {
                        return Err(CliError::Config(format!(
                            "the opinion model is one-dimensional, got model.d = {d}"
                        )));
                    }
                }
                ModelSpec::sznajd(self.beta.unwrap_or(-1.0), self.gamma)
            }
            "cucker_smale" => {
                let d = self.d.ok_or_else(|| {
                    CliError::Config("model.d is required for cucker_smale".into())
                })?;
                ModelSpec::cucker_smale(d, self.gamma)
            }
            "quasi_morse" => {
                let mut spec = ModelSpec::quasi_morse(self.gamma);
                if let ModelKind::QuasiMorse { c, p, l, alpha, beta } = &mut spec.kind {
                    *c = self.morse_c.unwrap_or(*c);
                    *p = self.morse_p.unwrap_or(*p);
                    *l = self.morse_l.unwrap_or(*l);
                    *alpha = self.morse_alpha.unwrap_or(*alpha);
                    *beta = self.morse_beta.unwrap_or(*beta);
                }
                if let Some(d) = self.d {
                    spec.d = d;
                    let lo = spec.domain_lo[0];
                    let hi = spec.domain_hi[0];
                    spec.domain_lo = DVector::from_element(4 * d, lo);
                    spec.domain_hi = DVector::from_element(4 * d, hi);
                }
                spec
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown model.kind {other:?} (expected sznajd, cucker_smale, or quasi_morse)"
                )))
            }
        };
        if let Some(t) = &self.target {
            spec.target = match t.as_str() {
                "zero" => Target::Zero,
                "pair_mean" => Target::PairMean,
                other => {
                    return Err(CliError::Config(format!(
                        "unknown model.target {other:?} (expected zero or pair_mean)"
                    )))
                }
            };
        }
        let n = spec.state_dim();
        if let Some(lo) = self.domain_lo {
            spec.domain_lo = DVector::from_element(n, lo);
        }
        if let Some(hi) = self.domain_hi {
            spec.domain_hi = DVector::from_element(n, hi);
        }
        spec.validate().map_err(config_err)?;
        Ok(spec)
    }
}

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_samples: usize,
    pub dt_min: f64,
    pub dt_max: f64,
    pub seed: u64,
    pub train_fraction: f64,
    /// Dataset CSV path; defaults to `<output_dir>/dataset.csv`.
    pub file: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            n_samples: 1000,
            dt_min: 0.001,
            dt_max: 1.0,
            seed: 0,
            train_fraction: 0.8,
            file: None,
        }
    }
}

impl DatasetSection {
    pub fn csv_path(&self, out: &Path) -> PathBuf {
        self.file.clone().unwrap_or_else(|| out.join("dataset.csv"))
    }

    pub fn meta_path(&self, out: &Path) -> PathBuf {
        let mut p = self.csv_path(out);
        p.set_extension("meta.json");
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(CliError::Config("dataset.n_samples must be at least 1".into()));
        }
        if !(self.dt_min > 0.0 && self.dt_max >= self.dt_min) {
            return Err(CliError::Config(format!(
                "dataset dt range must satisfy 0 < dt_min <= dt_max, got [{}, {}]",
                self.dt_min, self.dt_max
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CliError::Config(format!(
                "dataset.train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    /// `control` (pair feedback) or `next_velocity` (post-interaction state).
    pub surrogate: String,
    /// Architecture preset name (see `kf train --help`); overrides `hidden`.
    pub preset: Option<String>,
    /// Explicit hidden layer widths when no preset is given.
    pub hidden: Vec<usize>,
    /// `dense` or `lstm` (first layer an LSTM cell).
    pub layer: String,
    pub activation: String,
    /// LSTM cell activation (sigma).
    pub cell_activation: String,
    /// LSTM gate activation (rho).
    pub gate_activation: String,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    /// Trained model path; defaults to `<output_dir>/model.json`.
    pub model_file: Option<PathBuf>,
    /// Architecture preset names compared by `kf tune`.
    pub candidates: Vec<String>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            surrogate: "control".into(),
            preset: None,
            hidden: Vec::new(),
            layer: "dense".into(),
            activation: "softplus".into(),
            cell_activation: "tanh".into(),
            gate_activation: "sigmoid".into(),
            epochs: 200,
            learning_rate: 0.01,
            batch_size: 100,
            patience: 20,
            seed: 0,
            model_file: None,
            candidates: Vec::new(),
        }
    }
}

pub fn parse_activation(name: &str) -> Result<Activation> {
    Ok(match name {
        "identity" => Activation::Identity,
        "tanh" => Activation::Tanh,
        "relu" => Activation::ReLU,
        "softplus" => Activation::Softplus,
        "elu" => Activation::Elu,
        "sigmoid" => Activation::Sigmoid,
        other => {
            return Err(CliError::Config(format!(
                "unknown activation {other:?} (identity, tanh, relu, softplus, elu, sigmoid)"
            )))
        }
    })
}

/// Architectures named after the reference experiments; `input`/`output`
/// are fixed by the model and surrogate kind.
pub fn preset_architecture(name: &str, input: usize, output: usize) -> Result<Architecture> {
    use Activation::{Elu, ReLU, Sigmoid, Softplus, Tanh};
    Ok(match name {
        "test1-u-fnn" => Architecture::feedforward(input, &[100], output, Softplus),
        "test1-u-rnn" => Architecture::lstm_first(input, &[100], output, Tanh, Sigmoid, Tanh),
        "test1-xprime-fnn" => Architecture::feedforward(input, &[60, 60], output, Tanh),
        "test1-xprime-rnn" => Architecture::lstm_first(input, &[100], output, Tanh, Softplus, Tanh),
        "test2-u-fnn" => Architecture::feedforward(input, &[100], output, Softplus),
        "test2-u-rnn" => Architecture::lstm_first(input, &[100], output, ReLU, Sigmoid, ReLU),
        "test2-sv-fnn" => Architecture::feedforward(input, &[100, 100, 100], output, ReLU),
        "test2-sv-rnn" => Architecture::lstm_first(input, &[100], output, ReLU, Sigmoid, ReLU),
        "test3-u-fnn" => Architecture::feedforward(input, &[100, 100, 100], output, Softplus),
        "test3-u-rnn" => {
            Architecture::lstm_first(input, &[100; 5], output, Softplus, Softplus, Softplus)
        }
        "test3-sv-fnn" => {
            Architecture::feedforward(input, &[100, 100, 100, 100], output, Softplus)
        }
        "test3-sv-rnn" => {
            Architecture::lstm_first(input, &[100, 100, 100], output, Softplus, Softplus, Elu)
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown architecture preset {other:?}; valid presets: {}",
                ARCHITECTURE_PRESETS.join(", ")
            )))
        }
    })
}

pub const ARCHITECTURE_PRESETS: &[&str] = &[
    "test1-u-fnn",
    "test1-u-rnn",
    "test1-xprime-fnn",
    "test1-xprime-rnn",
    "test2-u-fnn",
    "test2-u-rnn",
    "test2-sv-fnn",
    "test2-sv-rnn",
    "test3-u-fnn",
    "test3-u-rnn",
    "test3-sv-fnn",
    "test3-sv-rnn",
];

impl TrainingSection {
    pub fn surrogate_kind(&self) -> Result<SurrogateKind> {
        Ok(match self.surrogate.as_str() {
            "control" => SurrogateKind::Control,
            "next_velocity" => SurrogateKind::NextVelocity,
            other => {
                return Err(CliError::Config(format!(
                    "unknown training.surrogate {other:?} (control or next_velocity)"
                )))
            }
        })
    }

    pub fn architecture(&self, input: usize, output: usize) -> Result<Architecture> {
        if let Some(name) = &self.preset {
            return preset_architecture(name, input, output);
        }
        if self.hidden.is_empty() {
            return Err(CliError::Config(
                "training needs either a preset name or explicit hidden layer widths".into(),
            ));
        }
        let act = parse_activation(&self.activation)?;
        Ok(match self.layer.as_str() {
            "dense" => Architecture::feedforward(input, &self.hidden, output, act),
            "lstm" => Architecture::lstm_first(
                input,
                &self.hidden,
                output,
                parse_activation(&self.cell_activation)?,
                parse_activation(&self.gate_activation)?,
                act,
            ),
            other => {
                return Err(CliError::Config(format!(
                    "unknown training.layer {other:?} (dense or lstm)"
                )))
            }
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CliError::Config(
                "training.epochs and training.batch_size must be positive".into(),
            ));
        }
        Ok(TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            early_stop_patience: self.patience,
            ..TrainConfig::default()
        })
    }

    pub fn model_path(&self, out: &Path) -> PathBuf {
        self.model_file.clone().unwrap_or_else(|| out.join("model.json"))
    }
}

// ---------------------------------------------------------------------------
// kinetic
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KineticSection {
    /// `exact_dsdre`, `nn_control`, `nn_state_update`, or `zero`.
    pub controller: String,
    /// Model file for the network controllers; defaults to the training
    /// section's model path.
    pub model_file: Option<PathBuf>,
    pub n_particles: usize,
    pub dt: f64,
    pub epsilon: f64,
    pub n_steps: usize,
    /// `split` (interaction then transport) or `nanbu` (simultaneous).
    pub scheme: String,
    pub seed: u64,
    pub snapshot_every: usize,
    /// `uniform` (sampling box), `gaussian`, or `bimodal` (first order only).
    pub initial: String,
    pub initial_mean: f64,
    pub initial_std: f64,
}

impl Default for KineticSection {
    fn default() -> Self {
        KineticSection {
            controller: "exact_dsdre".into(),
            model_file: None,
            n_particles: 1000,
            dt: 0.05,
            epsilon: 0.05,
            n_steps: 100,
            scheme: "split".into(),
            seed: 0,
            snapshot_every: 10,
            initial: "uniform".into(),
            initial_mean: 0.0,
            initial_std: 1.0,
        }
    }
}

pub fn bimodal_mixture() -> Vec<MixtureComponent> {
    vec![
        MixtureComponent { weight: 0.5, mean: -0.3, std: 0.1 },
        MixtureComponent { weight: 0.5, mean: 0.3, std: 0.1 },
    ]
}

impl KineticSection {
    pub fn controller_spec_for(&self, name: &str, model_file: PathBuf) -> Result<ControllerSpec> {
        Ok(match name {
            "exact_dsdre" => ControllerSpec::ExactDsdre,
            "zero" => ControllerSpec::Zero,
            "nn_control" => ControllerSpec::NnControl { model_file },
            "nn_state_update" => ControllerSpec::NnStateUpdate { model_file },
            other => {
                return Err(CliError::Config(format!(
                    "unknown controller {other:?} (exact_dsdre, nn_control, nn_state_update, zero)"
                )))
            }
        })
    }

    pub fn initial_distribution(&self, spec: &ModelSpec) -> Result<InitialDistribution> {
        let half = spec.state_dim() / 2;
        Ok(match self.initial.as_str() {
            "uniform" => InitialDistribution::UniformBox {
                lo: (0..half).map(|i| spec.domain_lo[i]).collect(),
                hi: (0..half).map(|i| spec.domain_hi[i]).collect(),
            },
            "gaussian" => InitialDistribution::IsotropicGaussian {
                mean: vec![self.initial_mean; half],
                std: self.initial_std,
            },
            "bimodal" => {
                if !matches!(spec.order, Order::First) {
                    return Err(CliError::Config(
                        "the bimodal initial condition is for first-order models".into(),
                    ));
                }
                InitialDistribution::CoordinateMixtures {
                    coordinates: vec![bimodal_mixture(); half],
                }
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown kinetic.initial {other:?} (uniform, gaussian, bimodal)"
                )))
            }
        })
    }

    pub fn to_kinetic_config(
        &self,
        spec: &ModelSpec,
        model_file: PathBuf,
    ) -> Result<KineticConfig> {
        let scheme = match self.scheme.as_str() {
            "split" => Scheme::SplitTransportInteraction,
            "nanbu" => Scheme::NanbuSimultaneous,
            other => {
                return Err(CliError::Config(format!(
                    "unknown kinetic.scheme {other:?} (split or nanbu)"
                )))
            }
        };
        let cfg = KineticConfig {
            model: spec.clone(),
            controller: self.controller_spec_for(&self.controller, model_file)?,
            initial: self.initial_distribution(spec)?,
            n_particles: self.n_particles,
            dt: self.dt,
            epsilon: self.epsilon,
            n_steps: self.n_steps,
            scheme,
            seed: self.seed,
            snapshot_every: self.snapshot_every,
        };
        cfg.validate().map_err(config_err)?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// meanfield
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeanfieldSection {
    pub grid: usize,
    pub dt: f64,
    pub t_end: f64,
    /// Interaction strength embedded in the tabulated binary feedback.
    pub epsilon: f64,
    /// `none`, `exact_dsdre`, `nn_control`, `nn_state_update`, or `zero`.
    pub controller: String,
    pub model_file: Option<PathBuf>,
    /// Keep every k-th step in the emitted CSVs.
    pub output_every: usize,
}

impl Default for MeanfieldSection {
    fn default() -> Self {
        MeanfieldSection {
            grid: 400,
            dt: 0.01,
            t_end: 1.0,
            epsilon: 0.01,
            controller: "none".into(),
            model_file: None,
            output_every: 10,
        }
    }
}

// ---------------------------------------------------------------------------
// oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub p_values: Vec<f64>,
    pub gamma_values: Vec<f64>,
    pub dt_values: Vec<f64>,
    /// Max-norm error bound at the finest step size.
    pub tol_at_finest: f64,
    /// Tolerance of the frozen diagonal spot value at p = gamma = 1.
    pub spot_tol: f64,
    pub ocp_horizon: usize,
    pub ocp_dt: f64,
    pub ocp_rel_tol: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            p_values: vec![0.5, 1.0, 2.0],
            gamma_values: vec![0.5, 1.0, 2.0],
            dt_values: vec![1e-2, 1e-3, 1e-4],
            tol_at_finest: 1e-3,
            spot_tol: 1e-6,
            ocp_horizon: 200,
            ocp_dt: 0.01,
            ocp_rel_tol: 0.01,
        }
    }
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    /// Controller names; networks load `model_file`.
    pub controllers: Vec<String>,
    pub batch_sizes: Vec<usize>,
    /// Per-agent dimensions; empty means the model's own `d`.
    pub dims: Vec<usize>,
    pub repetitions: usize,
    pub n_steps: usize,
    pub budget_seconds: f64,
    pub model_file: Option<PathBuf>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            controllers: vec!["zero".into(), "exact_dsdre".into()],
            batch_sizes: vec![100, 1000],
            dims: Vec::new(),
            repetitions: 5,
            n_steps: 10,
            budget_seconds: 120.0,
            model_file: None,
        }
    }
}

// ---------------------------------------------------------------------------
// presets and resolution
// ---------------------------------------------------------------------------

fn base_config(model: ModelSection) -> RunConfig {
    RunConfig {
        output_dir: default_output_dir(),
        model,
        dataset: DatasetSection::default(),
        training: TrainingSection::default(),
        kinetic: KineticSection::default(),
        meanfield: MeanfieldSection::default(),
        oracle: OracleSection::default(),
        bench: BenchSection::default(),
    }
}

/// Bundled experiment configurations mirroring the reference parameter
/// tables: `test1` (opinion), `test2` (alignment), `test3` (swarming).
pub fn preset(name: &str) -> Result<RunConfig> {
    match name {
        "test1" => {
            let mut cfg = base_config(ModelSection {
                kind: "sznajd".into(),
                d: Some(1),
                gamma: 0.05,
                beta: Some(-1.0),
                morse_c: None,
                morse_p: None,
                morse_l: None,
                morse_alpha: None,
                morse_beta: None,
                target: None,
                domain_lo: None,
                domain_hi: None,
            });
            cfg.dataset.n_samples = 100_000;
            cfg.dataset.dt_min = 0.01;
            cfg.dataset.dt_max = 0.01;
            cfg.training.preset = Some("test1-u-fnn".into());
            cfg.kinetic.n_particles = 100_000;
            cfg.kinetic.dt = 0.01;
            cfg.kinetic.epsilon = 0.01;
            cfg.kinetic.n_steps = 100;
            cfg.kinetic.initial = "bimodal".into();
            Ok(cfg)
        }
        "test2" => {
            let mut cfg = base_config(ModelSection {
                kind: "cucker_smale".into(),
                d: Some(15),
                gamma: 0.01,
                beta: None,
                morse_c: None,
                morse_p: None,
                morse_l: None,
                morse_alpha: None,
                morse_beta: None,
                target: None,
                domain_lo: None,
                domain_hi: None,
            });
            cfg.dataset.n_samples = 100_000;
            cfg.training.preset = Some("test2-u-fnn".into());
            cfg.kinetic.n_particles = 10_000;
            cfg.kinetic.dt = 0.05;
            cfg.kinetic.epsilon = 0.05;
            cfg.kinetic.n_steps = 100;
            cfg.kinetic.initial = "uniform".into();
            Ok(cfg)
        }
        "test3" => {
            let mut cfg = base_config(ModelSection {
                kind: "quasi_morse".into(),
                d: Some(3),
                gamma: 0.01,
                beta: None,
                morse_c: None,
                morse_p: None,
                morse_l: None,
                morse_alpha: None,
                morse_beta: None,
                target: None,
                domain_lo: None,
                domain_hi: None,
            });
            cfg.dataset.n_samples = 100_000;
            cfg.training.preset = Some("test3-u-fnn".into());
            cfg.kinetic.n_particles = 10_000;
            cfg.kinetic.dt = 0.02;
            cfg.kinetic.epsilon = 0.02;
            cfg.kinetic.n_steps = 40;
            cfg.kinetic.initial = "gaussian".into();
            Ok(cfg)
        }
        other => Err(CliError::Config(format!(
            "unknown preset {other:?} (test1, test2, test3)"
        ))),
    }
}

/// Parse an override value with TOML scalar semantics, falling back to a
/// plain string (so paths need no quoting).
fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(v) = toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        if let Some(v) = v.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        CliError::Config(format!("override {spec:?} is not of the form key=value"))
    })?;
    let segments: Vec<&str> = path.trim().split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::Config(format!("override key {path:?} has empty segments")));
    }
    let mut table = doc;
    for seg in &segments[..segments.len() - 1] {
        table = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                CliError::Config(format!("override key {path:?} descends into a non-table"))
            })?;
    }
    table.insert(segments.last().unwrap().to_string(), parse_override_value(raw.trim()));
    Ok(())
}

/// Build the run configuration from a preset or a TOML file, apply
/// `key=value` overrides, then validate strictly (unknown keys are errors).
pub fn resolve(
    preset_name: Option<&str>,
    file: Option<&Path>,
    overrides: &[String],
) -> Result<RunConfig> {
    let mut doc: toml::Table = match (preset_name, file) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config(
                "pass either --preset or --config, not both".into(),
            ))
        }
        (None, None) => {
            return Err(CliError::Config(
                "a configuration is required: --preset <name> or --config <file>".into(),
            ))
        }
        (Some(p), None) => {
            let cfg = preset(p)?;
            let text = toml::to_string(&cfg).map_err(config_err)?;
            toml::from_str(&text).map_err(config_err)?
        }
        (None, Some(f)) => {
            let text = std::fs::read_to_string(f).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", f.display()))
            })?;
            toml::from_str(&text).map_err(config_err)?
        }
    };
    for ov in overrides {
        apply_override(&mut doc, ov)?;
    }
    let mut cfg: RunConfig =
        toml::Value::Table(doc).try_into().map_err(config_err)?;
    if let Ok(dir) = std::env::var("KF_OUTPUT_DIR") {
        if !dir.is_empty() {
            cfg.output_dir = PathBuf::from(dir);
        }
    }
    Ok(cfg)
}

/// Text appended to `--help`: the complete key reference.
pub const CONFIG_KEY_HELP: &str = "\
CONFIGURATION
  A run is described by one TOML file (--config) or a bundled preset
  (--preset test1|test2|test3). Trailing key=value arguments override
  individual keys, e.g. `kinetic.n_particles=500`. Unknown keys are errors.
  KF_OUTPUT_DIR overrides output_dir. All outputs land in output_dir and are
  overwritten deterministically; every command writes a manifest echoing the
  full configuration.

KEYS
  output_dir                 output directory (default: out)

  model.kind                 sznajd | cucker_smale | quasi_morse
  model.d                    agents' dimension (sznajd fixes 1)
  model.gamma                control penalty
  model.beta                 opinion kernel coefficient (sznajd)
  model.morse_c/p/l/alpha/beta   swarming potential parameters
  model.target               zero | pair_mean (default: model's canonical)
  model.domain_lo/hi         sampling box bounds applied to all coordinates

  dataset.n_samples          records to generate (default 1000)
  dataset.dt_min/dt_max      step-length sampling range (default 0.001..1.0)
  dataset.seed               generation seed
  dataset.train_fraction     train share of the split (default 0.8)
  dataset.file               CSV path (default <output_dir>/dataset.csv)

  training.surrogate         control | next_velocity
  training.preset            architecture preset (test1-u-fnn, test1-u-rnn,
                             test1-xprime-fnn, test1-xprime-rnn, test2-u-fnn,
                             test2-u-rnn, test2-sv-fnn, test2-sv-rnn,
                             test3-u-fnn, test3-u-rnn, test3-sv-fnn,
                             test3-sv-rnn)
  training.hidden            explicit hidden widths, e.g. [100, 100]
  training.layer             dense | lstm (first layer an LSTM cell)
  training.activation        identity|tanh|relu|softplus|elu|sigmoid
  training.cell_activation   LSTM cell activation
  training.gate_activation   LSTM gate activation
  training.epochs            (default 200)
  training.learning_rate     Adam step size (default 0.01)
  training.batch_size        (default 100)
  training.patience          early-stop patience, 0 disables (default 20)
  training.seed              init/shuffle seed
  training.model_file        output model path (default <output_dir>/model.json)
  training.candidates        preset names compared by `kf tune`

  kinetic.controller         exact_dsdre | nn_control | nn_state_update | zero
  kinetic.model_file         network file for the nn controllers
  kinetic.n_particles        ensemble size (default 1000)
  kinetic.dt                 time step (default 0.05)
  kinetic.epsilon            interaction strength, dt <= epsilon
  kinetic.n_steps            (default 100)
  kinetic.scheme             split | nanbu
  kinetic.seed               simulation seed
  kinetic.snapshot_every     snapshot cadence in steps (default 10)
  kinetic.initial            uniform | gaussian | bimodal
  kinetic.initial_mean/std   gaussian parameters

  meanfield.grid             nodes on [-1, 1] (default 400)
  meanfield.dt               solver step (default 0.01)
  meanfield.t_end            horizon (default 1.0)
  meanfield.epsilon          strength embedded in the tabulated feedback
  meanfield.controller       none | exact_dsdre | nn_control | nn_state_update | zero
  meanfield.model_file       network file when applicable
  meanfield.output_every     CSV row cadence in steps (default 10)

  oracle.p_values            kernel strengths (default [0.5, 1, 2])
  oracle.gamma_values        penalties (default [0.5, 1, 2])
  oracle.dt_values           embeddings (default [1e-2, 1e-3, 1e-4])
  oracle.tol_at_finest       max-norm bound at the finest dt (default 1e-3)
  oracle.spot_tol            frozen diagonal spot tolerance (default 1e-6)
  oracle.ocp_horizon/ocp_dt  brute-force comparison horizon (default 200 x 0.01)
  oracle.ocp_rel_tol         allowed cost gap (default 0.01)

  bench.controllers          names as in kinetic.controller (default [zero, exact_dsdre])
  bench.batch_sizes          ensemble sizes (default [100, 1000])
  bench.dims                 dimensions to scan (default: the model's d)
  bench.repetitions          timed runs per cell, median kept (default 5)
  bench.n_steps              steps per timed run (default 10)
  bench.budget_seconds       per-cell censoring budget (default 120)
  bench.model_file           network file for nn entries

EXIT CODES
  0 success; 2 configuration error; 3 runtime failure.
";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_and_validate() {
        for name in ["test1", "test2", "test3"] {
            let cfg = resolve(Some(name), None, &[]).unwrap();
            let spec = cfg.model.to_spec().unwrap();
            spec.validate().unwrap();
        }
        assert!(matches!(preset("test4"), Err(CliError::Config(_))));
    }

    #[test]
    fn overrides_reach_nested_keys_and_reject_unknown_ones() {
        let cfg = resolve(
            Some("test1"),
            None,
            &["kinetic.n_particles=42".into(), "model.gamma=0.5".into()],
        )
        .unwrap();
        assert_eq!(cfg.kinetic.n_particles, 42);
        assert_eq!(cfg.model.gamma, 0.5);

        let err = resolve(Some("test1"), None, &["kinetic.n_particle=42".into()]);
        assert!(matches!(err, Err(CliError::Config(_))), "typo must be fatal");
    }

    #[test]
    fn override_values_parse_arrays_and_strings() {
        let cfg = resolve(
            Some("test1"),
            None,
            &["bench.batch_sizes=[8, 16]".into(), "output_dir=/tmp/kf-out".into()],
        )
        .unwrap();
        assert_eq!(cfg.bench.batch_sizes, vec![8, 16]);
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/kf-out"));
    }

    #[test]
    fn architecture_presets_have_the_advertised_shapes() {
        let a = preset_architecture("test2-u-fnn", 13, 6).unwrap();
        assert_eq!(a.layer_sizes, vec![13, 100, 6]);
        let a = preset_architecture("test3-u-rnn", 13, 6).unwrap();
        assert_eq!(a.layer_sizes.len(), 7);
        assert_eq!(a.layer_kinds[0], kf_core::neural::LayerKind::LstmCell);
        for name in ARCHITECTURE_PRESETS {
            preset_architecture(name, 5, 2).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn model_section_rejects_bad_kinds_and_dimensions() {
        let mut cfg = resolve(Some("test2"), None, &[]).unwrap();
        cfg.model.kind = "flocking".into();
        assert!(matches!(cfg.model.to_spec(), Err(CliError::Config(_))));
        cfg.model.kind = "cucker_smale".into();
        cfg.model.d = None;
        assert!(matches!(cfg.model.to_spec(), Err(CliError::Config(_))));
    }
}
