//! File formats: dataset CSV with a JSON metadata sidecar, particle snapshot
//! CSV, grid density and control-field CSV, histogram summaries, and run
//! manifests. All floats are written with 17 significant digits so files
//! round-trip bit-exactly.

use crate::diagnostics::DensitySnapshot;
use crate::kinetic::ParticleSnapshot;
use crate::meanfield::GridDensity;
use crate::models::{ModelSpec, PairState};
use crate::sdre::{DataRecord, Dataset};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("malformed file: {0}")]
    Format(String),
}

pub fn timestamp_utc() -> String {
    time::OffsetDateTime::now_utc()
        .format(&time::format_description::well_known::Rfc3339)
        .unwrap_or_else(|_| "unknown".to_string())
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_field(field: &str, row: usize) -> Result<f64, DataIoError> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|e| DataIoError::Format(format!("row {row}: bad float {field:?}: {e}")))
}

// ---------------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------------

fn dataset_header(kappa: usize, mu: usize) -> Vec<String> {
    let mut h: Vec<String> = (1..=kappa).map(|i| format!("s_{i}")).collect();
    h.push("dt".to_string());
    h.extend((1..=mu).map(|i| format!("u_{i}")));
    h.extend((1..=kappa).map(|i| format!("sp_{i}")));
    h
}

/// One row per record: stacked pair state, step length, control, stacked
/// post-interaction state.
pub fn write_dataset_csv<P: AsRef<Path>>(
    path: P,
    spec: &ModelSpec,
    ds: &Dataset,
) -> Result<(), DataIoError> {
    let kappa = spec.state_dim();
    let mu = spec.control_dim();
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(dataset_header(kappa, mu))?;
    for rec in &ds.records {
        let mut row = Vec::with_capacity(2 * kappa + mu + 1);
        let s = rec.state.stacked();
        row.extend(s.iter().map(|x| fmt(*x)));
        row.push(fmt(rec.state.dt));
        row.extend(rec.control.iter().map(|x| fmt(*x)));
        let sp = rec.next_state.stacked();
        row.extend(sp.iter().map(|x| fmt(*x)));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv<P: AsRef<Path>>(
    path: P,
    spec: &ModelSpec,
) -> Result<Dataset, DataIoError> {
    let kappa = spec.state_dim();
    let mu = spec.control_dim();
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let expected = dataset_header(kappa, mu);
    let got: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if got != expected {
        return Err(DataIoError::Format(format!(
            "dataset header mismatch: expected {expected:?}, got {got:?}"
        )));
    }
    let mut records = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        if row.len() != expected.len() {
            return Err(DataIoError::Format(format!(
                "row {i}: expected {} fields, got {}",
                expected.len(),
                row.len()
            )));
        }
        let nums: Vec<f64> = row
            .iter()
            .map(|f| parse_field(f, i))
            .collect::<Result<_, _>>()?;
        let s = DVector::from_iterator(kappa, nums[..kappa].iter().copied());
        let dt = nums[kappa];
        let u = DVector::from_iterator(mu, nums[kappa + 1..kappa + 1 + mu].iter().copied());
        let sp = DVector::from_iterator(kappa, nums[kappa + 1 + mu..].iter().copied());
        records.push(DataRecord {
            state: PairState::from_stacked(spec, &s, dt),
            control: u,
            next_state: PairState::from_stacked(spec, &sp, dt),
        });
    }
    Ok(Dataset { records, failed_solves: 0 })
}

/// Sidecar metadata written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub model: ModelSpec,
    pub seed: u64,
    pub n_samples: usize,
    pub dt_range: (f64, f64),
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub failed_solves: usize,
    pub generated_at: String,
}

pub fn write_json<P: AsRef<Path>, T: Serialize>(path: P, value: &T) -> Result<(), DataIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<P: AsRef<Path>, T: for<'de> Deserialize<'de>>(path: P) -> Result<T, DataIoError> {
    let mut text = String::new();
    BufReader::new(File::open(path)?).read_to_string(&mut text)?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// particle snapshots
// ---------------------------------------------------------------------------

pub fn snapshot_file_name(step: u64) -> String {
    format!("snapshot_{step:08}.csv")
}

/// Rows `t, particle_id, x_1..x_dx, v_1..v_dv`; velocity columns are present
/// only for second-order states.
pub fn write_snapshot_csv<W: Write>(w: W, snap: &ParticleSnapshot) -> Result<(), DataIoError> {
    let dx = snap.positions.ncols();
    let dv = snap.velocities.ncols();
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string(), "particle_id".to_string()];
    header.extend((1..=dx).map(|i| format!("x_{i}")));
    header.extend((1..=dv).map(|i| format!("v_{i}")));
    out.write_record(header)?;
    for p in 0..snap.positions.nrows() {
        let mut row = vec![fmt(snap.time), p.to_string()];
        row.extend(snap.positions.row(p).iter().map(|x| fmt(*x)));
        row.extend(snap.velocities.row(p).iter().map(|x| fmt(*x)));
        out.write_record(row)?;
    }
    out.flush()?;
    Ok(())
}

/// Emit one CSV per snapshot into `dir`, named by step index.
pub fn write_snapshots<P: AsRef<Path>>(
    dir: P,
    snaps: &[ParticleSnapshot],
) -> Result<Vec<std::path::PathBuf>, DataIoError> {
    let mut paths = Vec::with_capacity(snaps.len());
    for snap in snaps {
        let path = dir.as_ref().join(snapshot_file_name(snap.step));
        write_snapshot_csv(BufWriter::new(File::create(&path)?), snap)?;
        paths.push(path);
    }
    Ok(paths)
}

// ---------------------------------------------------------------------------
// grid densities and control fields
// ---------------------------------------------------------------------------

/// Rows `t, x, f` over all snapshots and nodes.
pub fn write_density_csv<W: Write>(w: W, densities: &[GridDensity]) -> Result<(), DataIoError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "x", "f"])?;
    for f in densities {
        for j in 0..f.nodes.len() {
            out.write_record([fmt(f.time), fmt(f.nodes[j]), fmt(f.values[j])])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Rows `t, x, u`: the reconstructed control field along a density trajectory.
pub fn write_control_field_csv<W: Write>(
    w: W,
    densities: &[GridDensity],
    controls: &[DVector<f64>],
) -> Result<(), DataIoError> {
    if densities.len() != controls.len() {
        return Err(DataIoError::Format(format!(
            "{} densities but {} control fields",
            densities.len(),
            controls.len()
        )));
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "x", "u"])?;
    for (f, u) in densities.iter().zip(controls) {
        for j in 0..f.nodes.len() {
            out.write_record([fmt(f.time), fmt(f.nodes[j]), fmt(u[j])])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Histogram/moment summaries as a JSON array for external plotting.
pub fn write_summaries_json<P: AsRef<Path>>(
    path: P,
    summaries: &[DensitySnapshot],
) -> Result<(), DataIoError> {
    write_json(path, &summaries)
}

// ---------------------------------------------------------------------------
// run manifests
// ---------------------------------------------------------------------------

/// Echo of a finished run: the exact configuration, seed, engine
/// parallelism, and wall-clock seconds per phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub threads: usize,
    pub wall_seconds: BTreeMap<String, f64>,
    pub outputs: Vec<String>,
    pub generated_at: String,
}

pub fn write_manifest<P: AsRef<Path>>(path: P, m: &RunManifest) -> Result<(), DataIoError> {
    write_json(path, m)
}

pub fn read_manifest<P: AsRef<Path>>(path: P) -> Result<RunManifest, DataIoError> {
    read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetic::{sample_initial, InitialDistribution};
    use crate::models::Target;
    use crate::sdre::{generate_dataset, split_indices};
    use nalgebra::DMatrix;

    #[test]
    fn dataset_csv_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::cucker_smale(1, 0.1);
        let ds = generate_dataset(&spec, 25, (0.01, 0.2), 42).unwrap();
        let path = dir.path().join("data.csv");
        write_dataset_csv(&path, &spec, &ds).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("s_1,s_2,s_3,s_4,dt,u_1,u_2,sp_1,sp_2,sp_3,sp_4"));
        assert_eq!(text.lines().count(), 26);

        let back = read_dataset_csv(&path, &spec).unwrap();
        assert_eq!(back.records.len(), ds.records.len());
        for (a, b) in ds.records.iter().zip(&back.records) {
            assert_eq!(a.state.stacked(), b.state.stacked());
            assert_eq!(a.state.dt, b.state.dt);
            assert_eq!(a.control, b.control);
            assert_eq!(a.next_state.stacked(), b.next_state.stacked());
        }
    }

    #[test]
    fn dataset_reader_rejects_foreign_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.csv");
        std::fs::write(&path, "a,b,c\n1,2,3\n").unwrap();
        let spec = ModelSpec::sznajd(-1.0, 0.05);
        let err = read_dataset_csv(&path, &spec).unwrap_err();
        assert!(matches!(err, DataIoError::Format(_)), "got {err:?}");
    }

    #[test]
    fn dataset_meta_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::sznajd(-1.0, 0.05);
        let (train, val) = split_indices(10, 0.8, 3);
        let meta = DatasetMeta {
            model: spec,
            seed: 3,
            n_samples: 10,
            dt_range: (0.01, 0.1),
            train_indices: train,
            val_indices: val,
            failed_solves: 1,
            generated_at: timestamp_utc(),
        };
        let path = dir.path().join("data.meta.json");
        write_json(&path, &meta).unwrap();
        let back: DatasetMeta = read_json(&path).unwrap();
        assert_eq!(back, meta);
        assert!(back.generated_at.contains('T'), "timestamp: {}", back.generated_at);
    }

    #[test]
    fn snapshot_csv_lists_every_particle() {
        let spec = ModelSpec::cucker_smale(2, 0.1);
        let ens = sample_initial(
            &spec,
            &InitialDistribution::UniformBox { lo: vec![-1.0; 4], hi: vec![1.0; 4] },
            7,
            1,
        )
        .unwrap();
        let snap = ParticleSnapshot {
            step: 3,
            time: 0.15,
            positions: ens.positions.clone(),
            velocities: ens.velocities.clone(),
        };
        let mut buf = Vec::new();
        write_snapshot_csv(&mut buf, &snap).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,particle_id,x_1,x_2,v_1,v_2");
        assert_eq!(text.lines().count(), 8);
        let first: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(first[1], "0");
        assert_eq!(first[2].parse::<f64>().unwrap(), ens.positions[(0, 0)]);
    }

    #[test]
    fn first_order_snapshots_have_no_velocity_columns() {
        let snap = ParticleSnapshot {
            step: 0,
            time: 0.0,
            positions: DMatrix::from_column_slice(2, 1, &[0.5, -0.5]),
            velocities: DMatrix::zeros(2, 0),
        };
        let mut buf = Vec::new();
        write_snapshot_csv(&mut buf, &snap).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,particle_id,x_1");
    }

    #[test]
    fn density_and_control_csv_cover_the_whole_grid() {
        let f0 = GridDensity::bimodal_default(21);
        let f1 = {
            let mut f = f0.clone();
            f.time = 0.01;
            f
        };
        let controls = vec![DVector::zeros(21), DVector::from_element(21, 0.5)];
        let mut buf = Vec::new();
        write_density_csv(&mut buf, &[f0.clone(), f1.clone()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,x,f");
        assert_eq!(text.lines().count(), 1 + 2 * 21);

        let mut buf = Vec::new();
        write_control_field_csv(&mut buf, &[f0, f1], &controls).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 21);
        assert!(text.lines().last().unwrap().ends_with(&format!(",{}", fmt(0.5))));
    }

    #[test]
    fn manifest_round_trips_with_phases() {
        let dir = tempfile::tempdir().unwrap();
        let mut wall = BTreeMap::new();
        wall.insert("simulate".to_string(), 1.25);
        wall.insert("write".to_string(), 0.01);
        let m = RunManifest {
            command: "simulate".to_string(),
            config: serde_json::json!({"n_particles": 100, "seed": 7}),
            seed: 7,
            threads: 1,
            wall_seconds: wall,
            outputs: vec!["snapshots/snapshot_00000000.csv".to_string()],
            generated_at: timestamp_utc(),
        };
        let path = dir.path().join("manifest.json");
        write_manifest(&path, &m).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.config["n_particles"], 100);
        assert_eq!(back.wall_seconds["simulate"], 1.25);
        assert_eq!(back.outputs.len(), 1);
    }

    #[test]
    fn summaries_serialize_as_a_json_array() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::cucker_smale(1, 0.1);
        let ens = sample_initial(
            &spec,
            &InitialDistribution::UniformBox { lo: vec![-1.0; 2], hi: vec![1.0; 2] },
            50,
            2,
        )
        .unwrap();
        let snap = crate::diagnostics::density_snapshot(
            &ens,
            Target::PairMean,
            &[crate::diagnostics::Projection::Norm],
            None,
        )
        .unwrap();
        let path = dir.path().join("summaries.json");
        write_summaries_json(&path, &[snap]).unwrap();
        let value: serde_json::Value = read_json(&path).unwrap();
        assert!(value.is_array());
        assert_eq!(value[0]["histograms"][0][0], "norm");
    }
}
