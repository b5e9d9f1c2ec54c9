//! Subcommand implementations. Every command resolves the configuration,
//! does its work under `output_dir`, and finishes by writing a manifest that
//! echoes the exact configuration, the seed, the engine parallelism, and
//! wall-clock seconds per phase.

use crate::config::{
    config_err, preset_architecture, runtime_err, CliError, RunConfig,
};
use kf_core::dataio::{
    self, read_dataset_csv, snapshot_file_name, timestamp_utc, write_dataset_csv, write_json,
    write_manifest, DatasetMeta, RunManifest,
};
use kf_core::diagnostics::{
    bench_controllers, consensus_metric, density_snapshot, running_cost, BenchConfig, BenchEntry,
    Projection,
};
use kf_core::kinetic::{simulate, Controller, ParticleEnsemble, ParticleSnapshot};
use kf_core::meanfield::{evolve_opinion_density, uniform_grid, GridDensity, MfController};
use kf_core::models::{ModelKind, ModelSpec};
use kf_core::neural::{
    relative_rmse, save_model, select_rows, train, training_matrices, tune, InputScaling,
};
use kf_core::riccati::{
    analytic_binary_riccati, closed_loop_cost, embedded_exchange_problem, finite_horizon_optimum,
    solve_dare,
};
use kf_core::sdre::{generate_dataset, split_indices, RICCATI_MAX_ITER, RICCATI_TOL};
use nalgebra::DVector;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

type Result<T> = std::result::Result<T, CliError>;

/// Phase timings and output paths gathered while a command runs.
struct RunLog {
    wall_seconds: BTreeMap<String, f64>,
    outputs: Vec<PathBuf>,
}

impl RunLog {
    fn new() -> Self {
        RunLog { wall_seconds: BTreeMap::new(), outputs: Vec::new() }
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.wall_seconds
            .insert(phase.to_string(), start.elapsed().as_secs_f64());
        Ok(out)
    }

    fn output(&mut self, path: PathBuf) -> PathBuf {
        self.outputs.push(path.clone());
        path
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn finish(
    command: &str,
    cfg: &RunConfig,
    seed: u64,
    threads: usize,
    log: RunLog,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        config: serde_json::to_value(cfg).map_err(runtime_err)?,
        seed,
        threads,
        wall_seconds: log.wall_seconds,
        outputs: log.outputs.iter().map(|p| p.display().to_string()).collect(),
        generated_at: timestamp_utc(),
    };
    let path = cfg.output_dir.join(format!("manifest_{command}.json"));
    write_manifest(&path, &manifest).map_err(runtime_err)?;
    println!("manifest: {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn cmd_gen_data(cfg: &RunConfig, threads: usize) -> Result<()> {
    cfg.dataset.validate()?;
    let spec = cfg.model.to_spec()?;
    ensure_dir(&cfg.output_dir)?;
    let mut log = RunLog::new();

    let ds = log.time("generate", || {
        generate_dataset(
            &spec,
            cfg.dataset.n_samples,
            (cfg.dataset.dt_min, cfg.dataset.dt_max),
            cfg.dataset.seed,
        )
        .map_err(runtime_err)
    })?;
    let (train_idx, val_idx) =
        split_indices(ds.records.len(), cfg.dataset.train_fraction, cfg.dataset.seed);

    let csv_path = cfg.dataset.csv_path(&cfg.output_dir);
    let meta_path = cfg.dataset.meta_path(&cfg.output_dir);
    log.time("write", || {
        write_dataset_csv(&csv_path, &spec, &ds).map_err(runtime_err)?;
        let meta = DatasetMeta {
            model: spec.clone(),
            seed: cfg.dataset.seed,
            n_samples: cfg.dataset.n_samples,
            dt_range: (cfg.dataset.dt_min, cfg.dataset.dt_max),
            train_indices: train_idx.clone(),
            val_indices: val_idx.clone(),
            failed_solves: ds.failed_solves,
            generated_at: timestamp_utc(),
        };
        write_json(&meta_path, &meta).map_err(runtime_err)
    })?;
    log.output(csv_path.clone());
    log.output(meta_path);
    println!(
        "generated {} records ({} train / {} validation, {} resampled solves) -> {}",
        ds.records.len(),
        train_idx.len(),
        val_idx.len(),
        ds.failed_solves,
        csv_path.display()
    );
    finish("gen-data", cfg, cfg.dataset.seed, threads, log)
}

// ---------------------------------------------------------------------------
// train / tune
// ---------------------------------------------------------------------------

struct SplitSets {
    train: kf_core::neural::SupervisedSet,
    val: kf_core::neural::SupervisedSet,
}

fn load_split_sets(cfg: &RunConfig, spec: &ModelSpec) -> Result<SplitSets> {
    let csv_path = cfg.dataset.csv_path(&cfg.output_dir);
    if !csv_path.exists() {
        return Err(CliError::Config(format!(
            "dataset {} does not exist; run `kf gen-data` first",
            csv_path.display()
        )));
    }
    let ds = read_dataset_csv(&csv_path, spec).map_err(config_err)?;
    if ds.records.len() < 2 {
        return Err(CliError::Config(format!(
            "dataset {} has {} records; training needs at least 2 for a split",
            csv_path.display(),
            ds.records.len()
        )));
    }
    let kind = cfg.training.surrogate_kind()?;
    let (inputs, targets) = training_matrices(spec, &ds.records, kind);
    let scaling =
        InputScaling::from_sampling_box(spec, (cfg.dataset.dt_min, cfg.dataset.dt_max));
    let (train_idx, val_idx) =
        split_indices(ds.records.len(), cfg.dataset.train_fraction, cfg.dataset.seed);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(CliError::Config(
            "train/validation split left one side empty; adjust dataset.train_fraction".into(),
        ));
    }
    Ok(SplitSets {
        train: select_rows(&inputs, &targets, &train_idx, &scaling),
        val: select_rows(&inputs, &targets, &val_idx, &scaling),
    })
}

pub fn cmd_train(cfg: &RunConfig, threads: usize) -> Result<()> {
    let spec = cfg.model.to_spec()?;
    let arch = cfg
        .training
        .architecture(spec.state_dim() + 1, 2 * spec.d)?;
    arch.validate().map_err(config_err)?;
    let train_cfg = cfg.training.train_config()?;
    ensure_dir(&cfg.output_dir)?;
    let mut log = RunLog::new();

    let sets = log.time("load", || load_split_sets(cfg, &spec))?;
    let (params, history) = log.time("train", || {
        train(&arch, &sets.train, &sets.val, &train_cfg).map_err(runtime_err)
    })?;

    let model_path = cfg.training.model_path(&cfg.output_dir);
    let history_path = cfg.output_dir.join("history.json");
    log.time("write", || {
        save_model(&params, &model_path).map_err(runtime_err)?;
        write_json(&history_path, &history).map_err(runtime_err)
    })?;
    log.output(model_path.clone());
    log.output(history_path);

    let val_rmse = relative_rmse(&params, &sets.val.inputs, &sets.val.targets);
    let last = history.epochs.last().unwrap();
    println!(
        "trained {} parameters over {} epochs (best epoch {}): val mse {:.6e}, val relative rmse {:.4}% -> {}",
        arch.n_params(),
        history.epochs.len() - 1,
        history.best_epoch,
        last.val_mse,
        100.0 * val_rmse,
        model_path.display()
    );
    finish("train", cfg, cfg.training.seed, threads, log)
}

#[derive(Serialize)]
struct TuneRow {
    name: String,
    n_params: usize,
    val_rel_rmse: Option<f64>,
    error: Option<String>,
    best: bool,
}

pub fn cmd_tune(cfg: &RunConfig, threads: usize) -> Result<()> {
    if cfg.training.candidates.is_empty() {
        return Err(CliError::Config(
            "tune needs training.candidates, a list of architecture preset names".into(),
        ));
    }
    let spec = cfg.model.to_spec()?;
    let (input, output) = (spec.state_dim() + 1, 2 * spec.d);
    let candidates = cfg
        .training
        .candidates
        .iter()
        .map(|name| preset_architecture(name, input, output))
        .collect::<Result<Vec<_>>>()?;
    let train_cfg = cfg.training.train_config()?;
    ensure_dir(&cfg.output_dir)?;
    let mut log = RunLog::new();

    let sets = log.time("load", || load_split_sets(cfg, &spec))?;
    let (_, best_params, report) = log.time("tune", || {
        tune(&candidates, &sets.train, &sets.val, &train_cfg).map_err(runtime_err)
    })?;

    let rows: Vec<TuneRow> = report
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| TuneRow {
            name: cfg.training.candidates[i].clone(),
            n_params: e.n_params,
            val_rel_rmse: e.val_rel_rmse,
            error: e.error.clone(),
            best: i == report.best_index,
        })
        .collect();
    for row in &rows {
        match row.val_rel_rmse {
            Some(r) => println!(
                "candidate {}: {} parameters, val relative rmse {:.4}%{}",
                row.name,
                row.n_params,
                100.0 * r,
                if row.best { "  <- best" } else { "" }
            ),
            None => println!(
                "candidate {}: failed ({})",
                row.name,
                row.error.as_deref().unwrap_or("unknown")
            ),
        }
    }

    let model_path = cfg.training.model_path(&cfg.output_dir);
    let report_path = cfg.output_dir.join("tune_report.json");
    log.time("write", || {
        save_model(&best_params, &model_path).map_err(runtime_err)?;
        write_json(&report_path, &rows).map_err(runtime_err)
    })?;
    log.output(model_path);
    log.output(report_path);
    finish("tune", cfg, cfg.training.seed, threads, log)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// Resolve the network file for nn controllers and fail early (as a
/// configuration error) when it is missing.
fn resolved_model_file(
    cfg: &RunConfig,
    section_file: &Option<PathBuf>,
    controller: &str,
) -> Result<PathBuf> {
    let path = section_file
        .clone()
        .unwrap_or_else(|| cfg.training.model_path(&cfg.output_dir));
    if controller.starts_with("nn_") && !path.exists() {
        return Err(CliError::Config(format!(
            "controller {controller} needs a trained network, but {} does not exist; run `kf train` first",
            path.display()
        )));
    }
    Ok(path)
}

#[derive(Serialize)]
struct SimulationSummary {
    controller: String,
    scheme: String,
    n_particles: usize,
    n_steps: usize,
    dt: f64,
    epsilon: f64,
    seed: u64,
    running_cost: f64,
    final_consensus: f64,
    final_time: f64,
}

fn snapshot_ensemble(snap: &ParticleSnapshot) -> ParticleEnsemble {
    ParticleEnsemble {
        positions: snap.positions.clone(),
        velocities: snap.velocities.clone(),
        time: snap.time,
        step_index: snap.step,
    }
}

pub fn cmd_simulate(
    cfg: &RunConfig,
    controller_override: Option<&str>,
    threads: usize,
) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(name) = controller_override {
        cfg.kinetic.controller = name.to_string();
    }
    let spec = cfg.model.to_spec()?;
    let model_file =
        resolved_model_file(&cfg, &cfg.kinetic.model_file, &cfg.kinetic.controller)?;
    let run_cfg = cfg.kinetic.to_kinetic_config(&spec, model_file)?;
    ensure_dir(&cfg.output_dir)?;
    let snap_dir = cfg.output_dir.join("snapshots");
    ensure_dir(&snap_dir)?;
    let mut log = RunLog::new();

    let out = log.time("simulate", || simulate(&run_cfg).map_err(runtime_err))?;

    let write_start = Instant::now();
    let paths = dataio::write_snapshots(&snap_dir, &out.snapshots).map_err(runtime_err)?;
    log.outputs.extend(paths);

    // binned summaries of the same snapshots, for plotting
    let projections: Vec<Projection> = if spec.d == 1 {
        vec![Projection::Coordinate(0)]
    } else {
        vec![Projection::Norm, Projection::Coordinate(0)]
    };
    let summaries = out
        .snapshots
        .iter()
        .map(|snap| {
            density_snapshot(
                &snapshot_ensemble(snap),
                spec.target,
                &projections,
                Some(snap_dir.join(snapshot_file_name(snap.step))),
            )
            .map_err(runtime_err)
        })
        .collect::<Result<Vec<_>>>()?;
    let summaries_path = cfg.output_dir.join("summaries.json");
    dataio::write_summaries_json(&summaries_path, &summaries).map_err(runtime_err)?;
    log.output(summaries_path);

    let steps_path = cfg.output_dir.join("steps.csv");
    {
        let mut w = BufWriter::new(File::create(&steps_path).map_err(runtime_err)?);
        use std::io::Write;
        writeln!(w, "step,time,n_interactions,state_quad,control_quad,consensus")
            .map_err(runtime_err)?;
        for s in &out.steps {
            writeln!(
                w,
                "{},{:.16e},{},{:.16e},{:.16e},{:.16e}",
                s.step, s.time, s.n_interactions, s.state_quad, s.control_quad, s.consensus
            )
            .map_err(runtime_err)?;
        }
        w.flush().map_err(runtime_err)?;
    }
    log.output(steps_path);

    let summary = SimulationSummary {
        controller: cfg.kinetic.controller.clone(),
        scheme: cfg.kinetic.scheme.clone(),
        n_particles: run_cfg.n_particles,
        n_steps: run_cfg.n_steps,
        dt: run_cfg.dt,
        epsilon: run_cfg.epsilon,
        seed: run_cfg.seed,
        running_cost: running_cost(&out.steps, run_cfg.dt, run_cfg.n_particles),
        final_consensus: consensus_metric(&out.final_state, spec.target),
        final_time: out.final_state.time,
    };
    let summary_path = cfg.output_dir.join("summary.json");
    write_json(&summary_path, &summary).map_err(runtime_err)?;
    log.output(summary_path);
    log.wall_seconds.insert("write".into(), write_start.elapsed().as_secs_f64());

    println!(
        "simulated {} particles for {} steps with {}: running cost {:.6e}, final consensus {:.6e}",
        run_cfg.n_particles,
        run_cfg.n_steps,
        cfg.kinetic.controller,
        summary.running_cost,
        summary.final_consensus
    );
    finish("simulate", &cfg, cfg.kinetic.seed, threads, log)
}

// ---------------------------------------------------------------------------
// mf1d
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct MeanFieldSummary {
    controller: String,
    grid: usize,
    dt: f64,
    n_steps: usize,
    epsilon: f64,
    cost: f64,
    final_mass: f64,
}

pub fn cmd_mf1d(cfg: &RunConfig, threads: usize) -> Result<()> {
    let spec = cfg.model.to_spec()?;
    let ModelKind::Sznajd { beta } = spec.kind else {
        return Err(CliError::Config(
            "mf1d solves the one-dimensional opinion dynamics; set model.kind = \"sznajd\""
                .into(),
        ));
    };
    let mf = &cfg.meanfield;
    if mf.grid < 2 {
        return Err(CliError::Config(format!(
            "meanfield.grid must be at least 2, got {}",
            mf.grid
        )));
    }
    if !(mf.dt > 0.0) || !(mf.t_end > 0.0) || !(mf.epsilon > 0.0) {
        return Err(CliError::Config(
            "meanfield.dt, t_end, and epsilon must all be positive".into(),
        ));
    }
    if mf.output_every == 0 {
        return Err(CliError::Config("meanfield.output_every must be at least 1".into()));
    }
    let n_steps = (mf.t_end / mf.dt).round() as usize;
    if n_steps == 0 {
        return Err(CliError::Config(format!(
            "horizon t_end = {} is shorter than one step dt = {}",
            mf.t_end, mf.dt
        )));
    }
    ensure_dir(&cfg.output_dir)?;
    let mut log = RunLog::new();

    let controller = log.time("tabulate", || match mf.controller.as_str() {
        "none" => Ok(None),
        name => {
            let model_file = resolved_model_file(cfg, &mf.model_file, name)?;
            let spec_ctrl = cfg.kinetic.controller_spec_for(name, model_file)?;
            let ctrl: Controller = spec_ctrl.load().map_err(runtime_err)?;
            let nodes = uniform_grid(mf.grid);
            MfController::tabulate(&ctrl, &spec, &nodes, mf.epsilon)
                .map(Some)
                .map_err(runtime_err)
        }
    })?;

    let run = log.time("evolve", || {
        evolve_opinion_density(
            GridDensity::bimodal_default(mf.grid),
            beta,
            spec.gamma,
            controller.as_ref(),
            mf.dt,
            n_steps,
        )
        .map_err(runtime_err)
    })?;

    let write_start = Instant::now();
    let keep: Vec<usize> = (0..run.densities.len())
        .filter(|k| k % mf.output_every == 0 || *k == run.densities.len() - 1)
        .collect();
    let densities: Vec<GridDensity> = keep.iter().map(|&k| run.densities[k].clone()).collect();
    let controls: Vec<DVector<f64>> = keep.iter().map(|&k| run.controls[k].clone()).collect();

    let density_path = cfg.output_dir.join("density.csv");
    dataio::write_density_csv(
        BufWriter::new(File::create(&density_path).map_err(runtime_err)?),
        &densities,
    )
    .map_err(runtime_err)?;
    log.output(density_path);

    let control_path = cfg.output_dir.join("control.csv");
    dataio::write_control_field_csv(
        BufWriter::new(File::create(&control_path).map_err(runtime_err)?),
        &densities,
        &controls,
    )
    .map_err(runtime_err)?;
    log.output(control_path);

    let summary = MeanFieldSummary {
        controller: mf.controller.clone(),
        grid: mf.grid,
        dt: mf.dt,
        n_steps,
        epsilon: mf.epsilon,
        cost: run.cost,
        final_mass: run.densities.last().unwrap().mass(),
    };
    let summary_path = cfg.output_dir.join("mf_summary.json");
    write_json(&summary_path, &summary).map_err(runtime_err)?;
    log.output(summary_path);
    log.wall_seconds.insert("write".into(), write_start.elapsed().as_secs_f64());

    println!(
        "evolved the opinion density on {} nodes for {} steps ({}): cost {:.6e}, final mass {:.12}",
        mf.grid, n_steps, mf.controller, run.cost, summary.final_mass
    );
    finish("mf1d", cfg, 0, threads, log)
}

// ---------------------------------------------------------------------------
// oracle
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct OracleCell {
    p: f64,
    gamma: f64,
    dt: f64,
    max_norm_error: f64,
    iterations: usize,
    pass: bool,
}

#[derive(Serialize)]
struct OcpCell {
    p: f64,
    gamma: f64,
    feedback_cost: f64,
    direct_optimum: f64,
    relative_gap: f64,
    pass: bool,
}

#[derive(Serialize)]
struct OracleReport {
    spot_value: f64,
    spot_reference: f64,
    spot_pass: bool,
    cells: Vec<OracleCell>,
    ocp: Vec<OcpCell>,
    pass: bool,
}

/// Verify the solver against the closed-form limit: embedded-problem
/// solutions must approach the analytic coefficients as dt shrinks, and the
/// stationary feedback must be near-optimal against a direct finite-horizon
/// minimization. Any failed cell is a runtime failure (exit 3).
pub fn cmd_oracle(cfg: &RunConfig, threads: usize) -> Result<()> {
    let o = &cfg.oracle;
    if o.p_values.is_empty() || o.gamma_values.is_empty() || o.dt_values.len() < 2 {
        return Err(CliError::Config(
            "oracle needs p_values, gamma_values, and at least two dt_values".into(),
        ));
    }
    if o.p_values.iter().any(|p| !(*p > 0.0))
        || o.gamma_values.iter().any(|g| !(*g > 0.0))
        || o.dt_values.iter().any(|dt| !(*dt > 0.0))
    {
        return Err(CliError::Config(
            "oracle p_values, gamma_values, and dt_values must all be positive".into(),
        ));
    }
    let mut dts = o.dt_values.clone();
    dts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if !(o.tol_at_finest > 0.0) || !(o.spot_tol > 0.0) || !(o.ocp_rel_tol > 0.0) {
        return Err(CliError::Config("oracle tolerances must be positive".into()));
    }
    if o.ocp_horizon == 0 || !(o.ocp_dt > 0.0) {
        return Err(CliError::Config(
            "oracle.ocp_horizon must be positive and oracle.ocp_dt > 0".into(),
        ));
    }
    ensure_dir(&cfg.output_dir)?;
    let mut log = RunLog::new();

    // frozen diagonal value coefficient at p = gamma = 1
    let spot_reference = 0.618_034_0;
    let spot_value = analytic_binary_riccati(1.0, 1.0).map_err(runtime_err)?.pi_d;
    let spot_pass = (spot_value - spot_reference).abs() <= o.spot_tol;
    println!(
        "spot value pi_d(1, 1) = {spot_value:.10} vs {spot_reference} ... {}",
        if spot_pass { "ok" } else { "FAIL" }
    );

    let mut cells = Vec::new();
    log.time("convergence", || {
        for &p in &o.p_values {
            for &gamma in &o.gamma_values {
                let oracle = analytic_binary_riccati(p, gamma).map_err(runtime_err)?;
                let target = oracle.pi_matrix(1);
                let mut prev = f64::INFINITY;
                for (k, &dt) in dts.iter().enumerate() {
                    let prob = embedded_exchange_problem(p, gamma, dt, 1).map_err(runtime_err)?;
                    let sol =
                        solve_dare(&prob, RICCATI_TOL, RICCATI_MAX_ITER).map_err(runtime_err)?;
                    let err = (&sol.pi - &target).abs().max();
                    let finest = k == dts.len() - 1;
                    let pass = err < prev && (!finest || err <= o.tol_at_finest);
                    println!(
                        "oracle p={p} gamma={gamma} dt={dt:.0e}: max-norm error {err:.3e} ({} iterations) ... {}",
                        sol.iterations,
                        if pass { "ok" } else { "FAIL" }
                    );
                    cells.push(OracleCell {
                        p,
                        gamma,
                        dt,
                        max_norm_error: err,
                        iterations: sol.iterations,
                        pass,
                    });
                    prev = err;
                }
            }
        }
        Ok(())
    })?;

    let mut ocp = Vec::new();
    log.time("ocp", || {
        let s0 = DVector::from_column_slice(&[1.0, -1.0]);
        for &p in &o.p_values {
            for &gamma in &o.gamma_values {
                let prob =
                    embedded_exchange_problem(p, gamma, o.ocp_dt, 1).map_err(runtime_err)?;
                let sol = solve_dare(&prob, RICCATI_TOL, RICCATI_MAX_ITER).map_err(runtime_err)?;
                let feedback_cost = closed_loop_cost(&prob, &sol.k, &s0, o.ocp_horizon);
                let (direct_optimum, _) =
                    finite_horizon_optimum(&prob, &s0, o.ocp_horizon, 1e-10)
                        .map_err(runtime_err)?;
                let relative_gap = (feedback_cost - direct_optimum) / direct_optimum;
                let pass = relative_gap >= -1e-9 && relative_gap <= o.ocp_rel_tol;
                println!(
                    "ocp p={p} gamma={gamma}: feedback {feedback_cost:.8e} vs direct {direct_optimum:.8e}, gap {relative_gap:.3e} ... {}",
                    if pass { "ok" } else { "FAIL" }
                );
                ocp.push(OcpCell { p, gamma, feedback_cost, direct_optimum, relative_gap, pass });
            }
        }
        Ok(())
    })?;

    let pass = spot_pass && cells.iter().all(|c| c.pass) && ocp.iter().all(|c| c.pass);
    let report = OracleReport { spot_value, spot_reference, spot_pass, cells, ocp, pass };
    let report_path = cfg.output_dir.join("oracle_report.json");
    write_json(&report_path, &report).map_err(runtime_err)?;
    log.output(report_path);
    finish("oracle", cfg, 0, threads, log)?;
    if !pass {
        return Err(CliError::Runtime(
            "oracle verification failed; see oracle_report.json".into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

pub fn cmd_bench(cfg: &RunConfig, threads: usize) -> Result<()> {
    let b = &cfg.bench;
    if b.controllers.is_empty() {
        return Err(CliError::Config("bench.controllers must not be empty".into()));
    }
    if b.batch_sizes.is_empty() || b.batch_sizes.iter().any(|&n| n == 0) {
        return Err(CliError::Config("bench.batch_sizes must be positive".into()));
    }
    if b.repetitions == 0 || b.n_steps == 0 {
        return Err(CliError::Config(
            "bench.repetitions and bench.n_steps must be positive".into(),
        ));
    }
    if !(b.budget_seconds > 0.0) {
        return Err(CliError::Config("bench.budget_seconds must be positive".into()));
    }
    let spec = cfg.model.to_spec()?;

    let mut entries = Vec::with_capacity(b.controllers.len());
    for name in &b.controllers {
        let model_file = resolved_model_file(cfg, &b.model_file, name)?;
        let spec_ctrl = cfg.kinetic.controller_spec_for(name, model_file)?;
        let ctrl = spec_ctrl.load().map_err(runtime_err)?;
        entries.push(BenchEntry::fixed(name, ctrl));
    }
    let bench_cfg = BenchConfig {
        batch_sizes: b.batch_sizes.clone(),
        dims: if b.dims.is_empty() { vec![spec.d] } else { b.dims.clone() },
        repetitions: b.repetitions,
        n_steps: b.n_steps,
        dt: cfg.kinetic.dt,
        epsilon: cfg.kinetic.epsilon,
        seed: cfg.kinetic.seed,
        cell_budget: Duration::from_secs_f64(b.budget_seconds),
    };
    ensure_dir(&cfg.output_dir)?;
    let mut log = RunLog::new();

    let report = log.time("bench", || {
        bench_controllers(&spec, &entries, &bench_cfg).map_err(runtime_err)
    })?;
    for c in &report.cells {
        match (c.median_seconds, c.speedup_vs_exact) {
            (Some(t), Some(s)) => println!(
                "bench {} d={} N={}: median {t:.3e} s, {s:.1}x vs exact_dsdre",
                c.controller, c.d, c.n_particles
            ),
            (Some(t), None) => println!(
                "bench {} d={} N={}: median {t:.3e} s",
                c.controller, c.d, c.n_particles
            ),
            (None, _) => println!(
                "bench {} d={} N={}: censored (budget {} s)",
                c.controller, c.d, c.n_particles, b.budget_seconds
            ),
        }
    }

    let csv_path = cfg.output_dir.join("bench.csv");
    report
        .write_csv(BufWriter::new(File::create(&csv_path).map_err(runtime_err)?))
        .map_err(runtime_err)?;
    log.output(csv_path);
    finish("bench", cfg, cfg.kinetic.seed, threads, log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::resolve;

    fn scratch_config(dir: &Path) -> RunConfig {
        let mut cfg = resolve(Some("test1"), None, &[]).unwrap();
        cfg.output_dir = dir.to_path_buf();
        cfg.dataset.n_samples = 40;
        cfg.training.preset = None;
        cfg.training.hidden = vec![8];
        cfg.training.epochs = 3;
        cfg
    }

    #[test]
    fn gen_data_then_train_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = scratch_config(dir.path());
        cmd_gen_data(&cfg, 1).unwrap();
        assert!(cfg.dataset.csv_path(dir.path()).exists());
        assert!(cfg.dataset.meta_path(dir.path()).exists());
        cmd_train(&cfg, 1).unwrap();
        assert!(cfg.training.model_path(dir.path()).exists());
        let manifest =
            dataio::read_manifest(dir.path().join("manifest_train.json")).unwrap();
        assert_eq!(manifest.command, "train");
        assert_eq!(manifest.threads, 1);
        assert!(manifest.wall_seconds.contains_key("train"));
    }

    #[test]
    fn training_without_a_dataset_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = scratch_config(dir.path());
        match cmd_train(&cfg, 1) {
            Err(CliError::Config(msg)) => assert!(msg.contains("gen-data"), "{msg}"),
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn oracle_report_written_even_when_a_tolerance_is_corrupted() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = scratch_config(dir.path());
        cfg.oracle.p_values = vec![1.0];
        cfg.oracle.gamma_values = vec![1.0];
        cfg.oracle.dt_values = vec![1e-2, 1e-3];
        cfg.oracle.ocp_horizon = 50;
        cmd_oracle(&cfg, 1).unwrap();

        cfg.oracle.tol_at_finest = 1e-30;
        match cmd_oracle(&cfg, 1) {
            Err(CliError::Runtime(_)) => {}
            other => panic!("corrupted tolerance must fail the run, got {other:?}"),
        }
        let report_path = dir.path().join("oracle_report.json");
        assert!(report_path.exists(), "report must be written before failing");
    }
}
