//! Percent error indexes over a run, plus CSV import and export.
//!
//! Both indexes work on relative errors (estimate minus truth over truth)
//! across a shared sample range. The range drops the final grid point, so a
//! run of n steps contributes samples 0 through n - 1, and by default also
//! skips sample 0, where the estimators still sit on their initial guesses.

use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::Path;

use nalgebra::DVector;

use crate::decomposition::DecompositionRun;
use crate::error::{Error, Result};
use crate::integrate::Trajectory;
use crate::orchestrator::RunRecord;

#[derive(Clone, Copy, Debug)]
pub struct IndexOptions {
    /// leave out the first retained sample, where estimates equal the guess
    pub skip_first: bool,
}

impl Default for IndexOptions {
    fn default() -> Self {
        IndexOptions { skip_first: true }
    }
}

/// Retained sample indexes for a trajectory with `len` grid points.
pub fn sample_range(len: usize, opts: &IndexOptions) -> Result<RangeInclusive<usize>> {
    if len < 2 {
        return Err(Error::Config(format!(
            "need at least two grid points to form a sample range, got {len}"
        )));
    }
    let start = if opts.skip_first { 1 } else { 0 };
    let end = len - 2;
    if end < start {
        return Err(Error::Config(format!(
            "sample range is empty for {len} grid points"
        )));
    }
    Ok(start..=end)
}

fn relative_errors(
    truth: &Trajectory,
    estimate: &Trajectory,
    opts: &IndexOptions,
) -> Result<Vec<DVector<f64>>> {
    if truth.len() != estimate.len() {
        return Err(Error::DimensionMismatch {
            context: "error index grids",
            expected: truth.len(),
            actual: estimate.len(),
        });
    }
    let range = sample_range(truth.len(), opts)?;
    let mut out = Vec::with_capacity(range.end() - range.start() + 1);
    for j in range {
        let t = &truth.states[j];
        let e = &estimate.states[j];
        if t.len() != e.len() {
            return Err(Error::DimensionMismatch {
                context: "error index states",
                expected: t.len(),
                actual: e.len(),
            });
        }
        let mut rel = DVector::zeros(t.len());
        for i in 0..t.len() {
            if t[i].abs() < 1e-12 {
                return Err(Error::ZeroReference {
                    index: i,
                    value: t[i],
                    time: truth.times[j],
                });
            }
            rel[i] = (e[i] - t[i]) / t[i];
        }
        out.push(rel);
    }
    Ok(out)
}

/// Per-state percent index: 100 sqrt(mean over samples of squared relative
/// error), one value per state component.
pub fn sigma_indexes(
    truth: &Trajectory,
    estimate: &Trajectory,
    opts: &IndexOptions,
) -> Result<Vec<f64>> {
    let rel = relative_errors(truth, estimate, opts)?;
    let nx = rel[0].len();
    let m = rel.len() as f64;
    Ok((0..nx)
        .map(|i| {
            let mean_sq = rel.iter().map(|r| r[i] * r[i]).sum::<f64>() / m;
            100.0 * mean_sq.sqrt()
        })
        .collect())
}

/// Overall percent index: 100 times the mean over samples of the per-sample
/// root mean square relative error across states.
pub fn rmse_index(
    truth: &Trajectory,
    estimate: &Trajectory,
    opts: &IndexOptions,
) -> Result<f64> {
    let rel = relative_errors(truth, estimate, opts)?;
    let m = rel.len() as f64;
    let sum: f64 = rel
        .iter()
        .map(|r| (r.norm_squared() / r.len() as f64).sqrt())
        .sum();
    Ok(100.0 * sum / m)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// One row per grid point: time, truth, measurements, reported estimate.
pub fn export_run_csv(path: &Path, record: &RunRecord, labels: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["time".to_string()];
    header.extend(labels.iter().map(|l| format!("truth_{l}")));
    header.extend((0..record.measurements[0].len()).map(|i| format!("meas_{i}")));
    header.extend(labels.iter().map(|l| format!("est_{l}")));
    w.write_record(&header)?;
    for j in 0..record.truth.len() {
        let mut row = vec![fmt(record.truth.times[j])];
        row.extend(record.truth.states[j].iter().map(|&v| fmt(v)));
        row.extend(record.measurements[j].iter().map(|&v| fmt(v)));
        row.extend(record.estimate.states[j].iter().map(|&v| fmt(v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per fast grid point: time, truth, reduced solution, composite.
pub fn export_decomposition_csv(
    path: &Path,
    run: &DecompositionRun,
    labels: &[&str],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["time".to_string()];
    header.extend(labels.iter().map(|l| format!("truth_{l}")));
    header.extend(labels.iter().map(|l| format!("slow_{l}")));
    header.extend(labels.iter().map(|l| format!("composite_{l}")));
    w.write_record(&header)?;
    for j in 0..run.truth.len() {
        let mut row = vec![fmt(run.truth.times[j])];
        row.extend(run.truth.states[j].iter().map(|&v| fmt(v)));
        row.extend(run.slow_dense.states[j].iter().map(|&v| fmt(v)));
        row.extend(run.composite.states[j].iter().map(|&v| fmt(v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Headers and numeric rows of a CSV written by the exporters.
pub fn import_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        let row: std::result::Result<Vec<f64>, _> =
            record.iter().map(|s| s.parse::<f64>()).collect();
        rows.push(row.map_err(|e| Error::Config(format!("non-numeric CSV cell: {e}")))?);
    }
    Ok((headers, rows))
}

/// Human-readable run summary with the resolved configuration appended.
pub fn format_run_summary(
    record: &RunRecord,
    labels: &[&str],
    opts: &IndexOptions,
    config_echo: &str,
) -> Result<String> {
    let sigma = sigma_indexes(&record.truth, &record.estimate, opts)?;
    let rmse = rmse_index(&record.truth, &record.estimate, opts)?;
    let range = sample_range(record.truth.len(), opts)?;
    let mut s = String::new();
    let _ = writeln!(s, "scheme: {}", record.scheme);
    for (label, value) in labels.iter().zip(&sigma) {
        let _ = writeln!(s, "sigma_{label}: {value:.6} %");
    }
    let _ = writeln!(s, "rmse: {rmse:.6} %");
    let _ = writeln!(s, "mhe_solves: {}", record.mhe_solves);
    let _ = writeln!(s, "mhe_nonconverged: {}", record.mhe_nonconverged);
    let _ = writeln!(
        s,
        "open_loop_predictions: {}",
        record.open_loop_predictions
    );
    let _ = writeln!(s, "messages: {}", record.messages.len());
    let _ = writeln!(s, "estimator_seconds: {:.6}", record.estimator_seconds);
    let _ = writeln!(
        s,
        "samples: indexes {}..={} of {} grid points",
        range.start(),
        range.end(),
        record.truth.len()
    );
    let _ = writeln!(s, "-- configuration --");
    s.push_str(config_echo);
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn traj(samples: &[[f64; 2]]) -> Trajectory {
        Trajectory {
            times: (0..samples.len()).map(|i| i as f64 * 0.1).collect(),
            states: samples
                .iter()
                .map(|s| DVector::from_column_slice(s))
                .collect(),
        }
    }

    #[test]
    fn indexes_match_hand_computation() {
        let truth = traj(&[[1.0, 2.0], [1.0, 2.0], [2.0, 4.0], [1.0, 1.0]]);
        let est = traj(&[[9.0, 9.0], [1.1, 1.8], [2.2, 4.4], [7.0, 7.0]]);
        // retained samples are 1 and 2; relative errors are 0.1 and -0.1 for
        // state 0, -0.1 and 0.1 for state 1
        let opts = IndexOptions::default();
        let sigma = sigma_indexes(&truth, &est, &opts).unwrap();
        assert_relative_eq!(sigma[0], 10.0, max_relative = 1e-12);
        assert_relative_eq!(sigma[1], 10.0, max_relative = 1e-12);
        let rmse = rmse_index(&truth, &est, &opts).unwrap();
        assert_relative_eq!(rmse, 10.0, max_relative = 1e-12);
    }

    #[test]
    fn first_sample_enters_when_not_skipped() {
        let truth = traj(&[[1.0, 1.0], [1.0, 1.0], [5.0, 5.0]]);
        let est = traj(&[[1.2, 1.2], [1.0, 1.0], [9.0, 9.0]]);
        let opts = IndexOptions { skip_first: false };
        // retained samples 0 and 1: errors 0.2 and 0
        let sigma = sigma_indexes(&truth, &est, &opts).unwrap();
        let expect = 100.0 * (0.04_f64 / 2.0).sqrt();
        assert_relative_eq!(sigma[0], expect, max_relative = 1e-12);
    }

    #[test]
    fn indexes_ignore_sample_order() {
        let truth_a = traj(&[[1.0, 2.0], [1.5, 2.5], [2.0, 3.0], [2.5, 3.5], [9.0, 9.0]]);
        let est_a = traj(&[[1.1, 2.2], [1.4, 2.6], [2.2, 2.9], [2.4, 3.6], [0.0, 0.0]]);
        // swap the two interior samples of both records
        let truth_b = traj(&[[1.0, 2.0], [2.0, 3.0], [1.5, 2.5], [2.5, 3.5], [9.0, 9.0]]);
        let est_b = traj(&[[1.1, 2.2], [2.2, 2.9], [1.4, 2.6], [2.4, 3.6], [0.0, 0.0]]);
        let opts = IndexOptions { skip_first: false };
        let sa = sigma_indexes(&truth_a, &est_a, &opts).unwrap();
        let sb = sigma_indexes(&truth_b, &est_b, &opts).unwrap();
        for (a, b) in sa.iter().zip(&sb) {
            assert_relative_eq!(a, b, max_relative = 1e-14);
        }
        let ra = rmse_index(&truth_a, &est_a, &opts).unwrap();
        let rb = rmse_index(&truth_b, &est_b, &opts).unwrap();
        assert_relative_eq!(ra, rb, max_relative = 1e-14);
    }

    #[test]
    fn zero_reference_is_reported_with_its_location() {
        let truth = traj(&[[1.0, 1.0], [1.0, 0.0], [1.0, 1.0]]);
        let est = traj(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]);
        let opts = IndexOptions::default();
        match sigma_indexes(&truth, &est, &opts) {
            Err(Error::ZeroReference { index, time, .. }) => {
                assert_eq!(index, 1);
                assert_relative_eq!(time, 0.1, max_relative = 1e-12);
            }
            other => panic!("expected a zero-reference error, got {other:?}"),
        }
    }

    #[test]
    fn last_grid_point_is_dropped() {
        let range = sample_range(6, &IndexOptions::default()).unwrap();
        assert_eq!(range, 1..=4);
        let range = sample_range(6, &IndexOptions { skip_first: false }).unwrap();
        assert_eq!(range, 0..=4);
        assert!(sample_range(2, &IndexOptions::default()).is_err());
        assert!(sample_range(2, &IndexOptions { skip_first: false }).is_ok());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("twoscale_metrics_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.csv");

        let values = [
            0.1_f64 + 0.2,
            1.0 / 3.0,
            -5010.121457,
            306.17686296931583,
            1e-12,
            2.5,
        ];
        {
            let mut w = csv::Writer::from_path(&path).unwrap();
            w.write_record(["a", "b", "c", "d", "e", "f"]).unwrap();
            let row: Vec<String> = values.iter().map(|&v| fmt(v)).collect();
            w.write_record(&row).unwrap();
            w.flush().unwrap();
        }
        let (headers, rows) = import_csv(&path).unwrap();
        assert_eq!(headers.len(), 6);
        assert_eq!(rows.len(), 1);
        for (orig, read) in values.iter().zip(&rows[0]) {
            assert_eq!(orig.to_bits(), read.to_bits());
        }
    }
}
