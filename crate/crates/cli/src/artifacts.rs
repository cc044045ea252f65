//! Result files: CSV tables, the JSON manifest, and atomic writes.
//!
//! Every float is printed with 17 significant digits, enough to reproduce
//! the exact bit pattern when parsed back. A gain table written here and
//! read with [`parse_gains_csv`] yields a schedule that is value-identical
//! to the one that produced it, so downstream runs (`simulate --gains`)
//! see precisely the solver's output, not a rounded copy.
//!
//! Files land via a temp-file-then-rename in the target directory: readers
//! polling a result directory never observe a half-written table.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;
use steer_core::riccati::RiccatiSolution;
use steer_core::sim::Trajectory;
use steer_core::{GainSchedule, ModelError, TimeGrid};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("malformed table: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn format_err(msg: impl Into<String>) -> ArtifactError {
    ArtifactError::Format(msg.into())
}

/// 17 significant digits: the smallest count that round-trips every f64.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_float(field: &str, row: usize, col: &str) -> Result<f64, ArtifactError> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| format_err(format!("row {row}: column {col} is not a number: {field:?}")))
}

/// Write `bytes` to `path` through a temp file in the same directory, so
/// the final name only ever holds complete content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::other(format!("{} has no file name", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn into_bytes(wtr: csv::Writer<Vec<u8>>) -> Vec<u8> {
    wtr.into_inner().expect("in-memory csv writer cannot fail")
}

/// `t, k1, .., k_{mn}`: one row per grid interval, gains flattened row by
/// row (`k1 = K[0,0]`, then across the first row, then the next).
pub fn gains_csv(k: &GainSchedule) -> Vec<u8> {
    let (m, n) = k.gain(0).shape();
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend((1..=m * n).map(|i| format!("k{i}")));
    wtr.write_record(&header).expect("header");
    for j in 0..k.grid().steps() {
        let mut row = vec![fmt17(k.grid().t(j))];
        let gain = k.gain(j);
        for i in 0..m {
            for l in 0..n {
                row.push(fmt17(gain[(i, l)]));
            }
        }
        wtr.write_record(&row).expect("row");
    }
    into_bytes(wtr)
}

/// Read a gain table back into a schedule for an n-state, m-input problem
/// ending at `horizon`. The row times are the interval left endpoints; the
/// horizon closes the grid.
pub fn parse_gains_csv(
    bytes: &[u8],
    horizon: f64,
    n: usize,
    m: usize,
) -> Result<GainSchedule, ArtifactError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes);
    let header = rdr.headers()?.clone();
    let want = 1 + m * n;
    let expected_col = |i: usize| {
        if i == 0 {
            "t".to_string()
        } else {
            format!("k{i}")
        }
    };
    let header_ok = header.len() == want
        && (0..want).all(|i| header.get(i) == Some(expected_col(i).as_str()));
    if !header_ok {
        return Err(format_err(format!(
            "gain table header {:?} does not match a {m}x{n} gain (expected t, k1..k{})",
            header,
            m * n
        )));
    }
    let mut times = Vec::new();
    let mut gains = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != want {
            return Err(format_err(format!(
                "row {idx} has {} fields, expected {want}",
                record.len()
            )));
        }
        times.push(parse_float(&record[0], idx, "t")?);
        let mut gain = DMatrix::zeros(m, n);
        for i in 0..m {
            for l in 0..n {
                let col = 1 + i * n + l;
                gain[(i, l)] = parse_float(&record[col], idx, &format!("k{col}"))?;
            }
        }
        gains.push(gain);
    }
    if gains.is_empty() {
        return Err(format_err("gain table has no rows"));
    }
    match times.last() {
        Some(&last) if last < horizon => times.push(horizon),
        Some(&last) => {
            return Err(format_err(format!(
                "last gain time {last} does not precede the horizon {horizon}"
            )))
        }
        None => unreachable!("nonempty gains imply nonempty times"),
    }
    Ok(GainSchedule::new(TimeGrid::from_times(times)?, gains)?)
}

/// `t, sigma11, sigma12, .., sigmann`: upper triangle of each covariance
/// sample, one row per grid time.
pub fn covariance_csv(
    grid: &TimeGrid,
    sigmas: &[DMatrix<f64>],
) -> Result<Vec<u8>, ArtifactError> {
    if sigmas.len() != grid.len() {
        return Err(format_err(format!(
            "{} covariance samples on a grid with {} times",
            sigmas.len(),
            grid.len()
        )));
    }
    let n = sigmas[0].nrows();
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    for i in 1..=n {
        for j in i..=n {
            header.push(format!("sigma{i}{j}"));
        }
    }
    wtr.write_record(&header).expect("header");
    for (k, sigma) in sigmas.iter().enumerate() {
        let mut row = vec![fmt17(grid.t(k))];
        for i in 0..n {
            for j in i..n {
                row.push(fmt17(sigma[(i, j)]));
            }
        }
        wtr.write_record(&row).expect("row");
    }
    Ok(into_bytes(wtr))
}

/// The two solution factors and their normalizers along the grid:
/// `t, pi11.., h11.., c, chat`, upper triangles only.
pub fn factors_csv(sol: &RiccatiSolution, c: &[f64], chat: &[f64]) -> Vec<u8> {
    let n = sol.pi[0].nrows();
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    for name in ["pi", "h"] {
        for i in 1..=n {
            for j in i..=n {
                header.push(format!("{name}{i}{j}"));
            }
        }
    }
    header.push("c".into());
    header.push("chat".into());
    wtr.write_record(&header).expect("header");
    for k in 0..sol.grid.len() {
        let mut row = vec![fmt17(sol.grid.t(k))];
        for mat in [&sol.pi[k], &sol.h[k]] {
            for i in 0..n {
                for j in i..n {
                    row.push(fmt17(mat[(i, j)]));
                }
            }
        }
        row.push(fmt17(c[k]));
        row.push(fmt17(chat[k]));
        wtr.write_record(&row).expect("row");
    }
    into_bytes(wtr)
}

/// `path_id, t, x1.., u1..`: every sampled state with the control applied
/// on the interval it opens. The terminal row repeats the last interval's
/// control so each row stays full width.
pub fn paths_csv(trajs: &[Trajectory]) -> Vec<u8> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let (n, m) = match trajs.first() {
        Some(t) => (t.state(0).len(), t.control(0).len()),
        None => (0, 0),
    };
    let mut header = vec!["path_id".to_string(), "t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    wtr.write_record(&header).expect("header");
    for (id, traj) in trajs.iter().enumerate() {
        let grid = traj.grid();
        for j in 0..grid.len() {
            let mut row = vec![id.to_string(), fmt17(grid.t(j))];
            row.extend(traj.state(j).iter().map(|v| fmt17(*v)));
            let u = traj.control(j.min(grid.steps() - 1));
            row.extend(u.iter().map(|v| fmt17(*v)));
            wtr.write_record(&row).expect("row");
        }
    }
    into_bytes(wtr)
}

/// A scalar field over a 1-D mesh and time grid: `t, x, <column>` with the
/// node coordinate in the middle, times in outer order.
pub fn profile_csv(
    coords: &[f64],
    grid: &TimeGrid,
    slices: &[nalgebra::DVector<f64>],
    column: &str,
) -> Result<Vec<u8>, ArtifactError> {
    if slices.len() != grid.len() {
        return Err(format_err(format!(
            "{} field slices on a grid with {} times",
            slices.len(),
            grid.len()
        )));
    }
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["t", "x", column]).expect("header");
    for (k, slice) in slices.iter().enumerate() {
        if slice.len() != coords.len() {
            return Err(format_err(format!(
                "slice {k} has {} values for {} mesh nodes",
                slice.len(),
                coords.len()
            )));
        }
        let t = fmt17(grid.t(k));
        for (x, v) in coords.iter().zip(slice.iter()) {
            wtr.write_record([t.clone(), fmt17(*x), fmt17(*v)])
                .expect("row");
        }
    }
    Ok(into_bytes(wtr))
}

/// Fixed-schema run summary. One of these lands next to the tables for
/// every run that got as far as a solver — including runs that then failed
/// to converge, which record their final residuals and a non-`converged`
/// status.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub method: String,
    pub n: usize,
    pub m: usize,
    #[serde(rename = "N")]
    pub steps: usize,
    pub tol: f64,
    pub iterations: usize,
    pub residuals: BTreeMap<String, f64>,
    pub objective: Option<f64>,
    pub wall_ms: u64,
    pub status: String,
}

impl Manifest {
    pub fn to_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        bytes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn seventeen_digits_round_trip_the_bit_pattern() {
        let mut probes = vec![
            0.0,
            1.0 / 3.0,
            2.625,
            -1.4142135623730951,
            1e-300,
            6.02e23,
            f64::MIN_POSITIVE,
            f64::MAX,
        ];
        // A crude multiplicative generator to sweep magnitudes without
        // pulling in a RNG dependency.
        let mut x = 0.123456789_f64;
        for k in 0..200 {
            x = (x * 997.0).fract();
            probes.push((x - 0.5) * 10f64.powi((k % 60) - 30));
        }
        for p in probes {
            let back: f64 = fmt17(p).parse().expect("parse back");
            assert_eq!(back.to_bits(), p.to_bits(), "value {p:e}");
        }
    }

    fn sample_schedule() -> GainSchedule {
        let grid = TimeGrid::uniform(1.0, 7).expect("grid");
        let gains = (0..7)
            .map(|k| {
                DMatrix::from_row_slice(
                    1,
                    2,
                    &[(k as f64 + 0.1).sin() * 3.7, 1.0 / (k as f64 + 3.0)],
                )
            })
            .collect();
        GainSchedule::new(grid, gains).expect("schedule")
    }

    #[test]
    fn gain_table_round_trip_is_bitwise() {
        let k = sample_schedule();
        let bytes = gains_csv(&k);
        let back = parse_gains_csv(&bytes, 1.0, 2, 1).expect("parse");
        assert_eq!(back.grid().steps(), k.grid().steps());
        for j in 0..=k.grid().steps() {
            assert_eq!(back.grid().t(j).to_bits(), k.grid().t(j).to_bits());
        }
        for j in 0..k.grid().steps() {
            for (a, b) in back.gain(j).iter().zip(k.gain(j).iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn gain_parser_checks_shape_and_horizon() {
        let k = sample_schedule();
        let bytes = gains_csv(&k);
        // Wrong declared shape: the 1x2 table cannot be a 2x2 gain.
        assert!(parse_gains_csv(&bytes, 1.0, 2, 2).is_err());
        // Horizon at or before the last row time leaves no final interval.
        assert!(parse_gains_csv(&bytes, 6.0 / 7.0, 2, 1).is_err());

        let mangled = String::from_utf8(bytes).unwrap().replace("k2", "q2");
        assert!(parse_gains_csv(mangled.as_bytes(), 1.0, 2, 1).is_err());
    }

    #[test]
    fn covariance_table_has_one_row_per_time() {
        let grid = TimeGrid::uniform(2.0, 3).expect("grid");
        let sigmas: Vec<DMatrix<f64>> = (0..4)
            .map(|k| DMatrix::from_row_slice(2, 2, &[1.0 + k as f64, 0.25, 0.25, 2.0]))
            .collect();
        let bytes = covariance_csv(&grid, &sigmas).expect("table");
        let text = String::from_utf8(bytes).expect("utf8");
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "t,sigma11,sigma12,sigma22");
        assert!(lines[1].starts_with("0.0000000000000000e0,1.0000000000000000e0"));

        let short = covariance_csv(&grid, &sigmas[..2]);
        assert!(short.is_err(), "sample count must match the grid");
    }

    #[test]
    fn terminal_path_row_repeats_the_closing_control() {
        let grid = TimeGrid::uniform(1.0, 2).expect("grid");
        let states = vec![
            DVector::from_row_slice(&[0.0]),
            DVector::from_row_slice(&[0.5]),
            DVector::from_row_slice(&[1.0]),
        ];
        let controls = vec![
            DVector::from_row_slice(&[10.0]),
            DVector::from_row_slice(&[20.0]),
        ];
        let traj = Trajectory::new(grid, states, controls).expect("trajectory");
        let text = String::from_utf8(paths_csv(&[traj])).expect("utf8");
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path_id,t,x1,u1");
        assert_eq!(lines.len(), 4);
        assert!(lines[2].ends_with(&fmt17(20.0)));
        assert!(
            lines[3].ends_with(&fmt17(20.0)),
            "terminal row carries the last interval's control"
        );
    }

    #[test]
    fn profile_rows_sweep_nodes_within_each_time() {
        let grid = TimeGrid::uniform(1.0, 1).expect("grid");
        let coords = [-1.0, 0.0, 1.0];
        let slices = vec![
            DVector::from_row_slice(&[1.0, 2.0, 3.0]),
            DVector::from_row_slice(&[4.0, 5.0, 6.0]),
        ];
        let bytes = profile_csv(&coords, &grid, &slices, "rho").expect("table");
        let text = String::from_utf8(bytes).expect("utf8");
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x,rho");
        assert_eq!(lines.len(), 7);
        assert!(lines[1].contains(&fmt17(-1.0)));
        assert!(lines[4].starts_with(&fmt17(1.0)));
    }

    #[test]
    fn atomic_write_leaves_only_the_final_file() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("table.csv");
        write_atomic(&path, b"one").expect("write");
        write_atomic(&path, b"two").expect("overwrite");
        assert_eq!(fs::read(&path).expect("read"), b"two");
        let entries: Vec<_> = fs::read_dir(dir.path())
            .expect("read dir")
            .map(|e| e.expect("entry").file_name())
            .collect();
        assert_eq!(entries, vec![std::ffi::OsString::from("table.csv")]);
    }

    #[test]
    fn manifest_serializes_with_the_fixed_key_set() {
        let manifest = Manifest {
            config_sha256: "ab".repeat(32),
            method: "sdp".into(),
            n: 2,
            m: 1,
            steps: 100,
            tol: 1e-6,
            iterations: 1234,
            residuals: BTreeMap::from([("primal".to_string(), 1e-7)]),
            objective: Some(3.25),
            wall_ms: 42,
            status: "converged".into(),
        };
        let value: serde_json::Value =
            serde_json::from_slice(&manifest.to_json()).expect("json");
        let obj = value.as_object().expect("object");
        // serde_json sorts keys on parse, so compare as a sorted set.
        let keys: Vec<&str> = obj.keys().map(|s| s.as_str()).collect();
        assert_eq!(
            keys,
            [
                "N",
                "config_sha256",
                "iterations",
                "m",
                "method",
                "n",
                "objective",
                "residuals",
                "status",
                "tol",
                "wall_ms"
            ]
        );
        assert_eq!(obj["N"], 100);

        let unconverged = Manifest {
            objective: None,
            status: "iteration_cap".into(),
            ..manifest
        };
        let value: serde_json::Value =
            serde_json::from_slice(&unconverged.to_json()).expect("json");
        assert!(value["objective"].is_null());
    }
}
