//! Radius-halving drivers for exact and noisy recovery.
//!
//! One phase contracts a radius bound `R >= ||x_in - x*||_2` to `R/2` by
//! projected steps along oracle-certified directions inside the l1 ball
//! `||x - x_in||_1 <= sqrt(2s) R`. A failed certification check ends the
//! phase early and returns the hard-thresholded iterate — which is exactly
//! what the contract wants, because checks only fail once the iterate is
//! already well inside the radius (or the radius promise was broken).
//! Drivers chain phases, halving `R` each time; the noisy driver also
//! maintains a halving guess of the noise floor and keeps the last iterate
//! whose phases all certified.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::oracle::{run_oracle, DeltaSource, OracleConfig, ResidualDelta};
use crate::stream::{child_seed, substream};
use crate::vecops::{hard_threshold, l1_norm, l2_norm, project_l1_ball, trunc, SparseSignal};

/// Driver configuration wrapping the oracle constants.
#[derive(Debug, Clone)]
pub struct RecoveryConfig {
    pub oracle: OracleConfig,
    /// Initial radius bound, at least `||x*||_2`.
    pub r0: f64,
    /// Exact-mode target radius.
    pub target_r: f64,
    /// Noisy-mode upper bound on the noise floor.
    pub r1: f64,
    /// Noise-floor multiple kept between the radius and the guess.
    pub c_xi: f64,
    /// Optional floor on the per-phase iteration count.
    pub t_override: Option<usize>,
    /// Trial-count factor for the noisy phase (`10` in the printed routine).
    pub n_trials_factor: f64,
    /// Overall failure budget, split across phases (and guesses).
    pub delta: f64,
}

impl RecoveryConfig {
    pub fn exact(oracle: OracleConfig, r0: f64, target_r: f64) -> Self {
        RecoveryConfig {
            oracle,
            r0,
            target_r,
            r1: 0.0,
            c_xi: 4.0,
            t_override: None,
            n_trials_factor: 10.0,
            delta: 0.1,
        }
    }

    pub fn noisy(oracle: OracleConfig, r0: f64, r1: f64) -> Self {
        RecoveryConfig {
            oracle,
            r0,
            target_r: 0.0,
            r1,
            c_xi: 4.0,
            t_override: None,
            n_trials_factor: 10.0,
            delta: 0.1,
        }
    }

    fn validate_exact(&self) -> Result<()> {
        if !(self.target_r > 0.0 && self.r0 >= self.target_r) {
            return Err(Error::arg(format!(
                "exact mode needs r0 >= target_r > 0, got r0={} target_r={}",
                self.r0, self.target_r
            )));
        }
        Ok(())
    }

    fn validate_noisy(&self) -> Result<()> {
        if !(self.r1 > 0.0 && self.r0 > 0.0) {
            return Err(Error::arg(format!(
                "noisy mode needs r0 > 0 and r1 > 0, got r0={} r1={}",
                self.r0, self.r1
            )));
        }
        if !(self.c_xi >= 1.0) {
            return Err(Error::arg(format!("c_xi must be >= 1, got {}", self.c_xi)));
        }
        Ok(())
    }

    /// Per-phase iteration count: `ceil(6 C2^2/C_prog^2)` exact,
    /// `ceil(100 C2^2/C_prog^2)` noisy, never below `t_override`.
    pub fn phase_iterations(&self, noisy: bool) -> usize {
        let c2 = self.oracle.c2;
        let cp = self.oracle.c_prog;
        let factor = if noisy { 100.0 } else { 6.0 };
        let printed = (factor * c2 * c2 / (cp * cp)).ceil() as usize;
        printed.max(self.t_override.unwrap_or(0)).max(1)
    }

    /// Projected-step scale `eta = C_prog / (2 C2^2)`.
    pub fn step_scale(&self) -> f64 {
        self.oracle.c_prog / (2.0 * self.oracle.c2 * self.oracle.c2)
    }

    /// Independent trials per noisy phase, `ceil(factor * ln(d/delta))`.
    pub fn noisy_trials(&self, d: usize) -> usize {
        ((self.n_trials_factor * (d as f64 / self.delta).ln()).ceil() as usize).max(3)
    }
}

/// One phase of the driver, as recorded for auditing and benchmarks.
#[derive(Debug, Clone, Serialize)]
pub struct PhaseRecord {
    pub phase: usize,
    pub radius: f64,
    /// Oracle calls consumed by this phase (across trials, when noisy).
    pub iterations: usize,
    pub oracle_samples: u64,
    /// True when the phase ended on a failed certification check rather
    /// than by exhausting its iteration budget.
    pub ended_by_check: bool,
    /// Noisy phases: whether aggregation found a majority cluster.
    pub certified: bool,
    /// `||x_t - x*||_2` after each passed iteration (exact mode, when the
    /// ground truth is supplied).
    pub iterate_distances: Vec<f64>,
    /// Distance of the pre-rounding iterate to the truth.
    pub pre_round_distance: Option<f64>,
    /// Distance of the returned (hard-thresholded) point to the truth.
    pub distance_out: Option<f64>,
}

/// Per-run log: one record per phase, radii halving between them.
#[derive(Debug, Default, Clone, Serialize)]
pub struct RunTrace {
    pub phases: Vec<PhaseRecord>,
}

/// Final output of a driver run.
#[derive(Debug)]
pub struct RecoveryReport {
    pub signal: SparseSignal,
    pub trace: RunTrace,
    /// Total rows sampled by all oracle calls.
    pub oracle_samples: u64,
    /// Total oracle calls.
    pub iterations: u64,
    /// Noisy mode: `c_xi` times the last certified guess.
    pub r_final: Option<f64>,
}

fn validate_instance(a: &DenseMatrix, b: &[f64], x_in: &[f64], s: usize) -> Result<()> {
    if b.len() != a.nrows() {
        return Err(Error::dim(format!(
            "response length {} vs {} rows",
            b.len(),
            a.nrows()
        )));
    }
    if x_in.len() != a.ncols() {
        return Err(Error::dim(format!(
            "iterate length {} vs {} columns",
            x_in.len(),
            a.ncols()
        )));
    }
    if s == 0 || s > a.ncols() {
        return Err(Error::arg(format!("sparsity {s} out of range")));
    }
    Ok(())
}

fn distance_to(x: &[f64], truth: Option<&[f64]>) -> Option<f64> {
    truth.map(|t| {
        x.iter()
            .zip(t)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    })
}

/// One exact-setting halving phase. Given `||x_in - x*||_2 <= radius` and
/// `b = A x*`, returns an `s`-sparse point within `radius/2` of `x*` with
/// probability `1 - T delta`.
pub fn half_radius_sparse(
    x_in: &[f64],
    radius: f64,
    a: &DenseMatrix,
    b: &[f64],
    cfg: &RecoveryConfig,
    rng: &mut ChaCha8Rng,
    truth: Option<&[f64]>,
) -> Result<(Vec<f64>, PhaseRecord)> {
    let s = cfg.oracle.s;
    validate_instance(a, b, x_in, s)?;
    if !(radius > 0.0) {
        return Err(Error::arg(format!("radius must be > 0, got {radius}")));
    }

    let t_max = cfg.phase_iterations(false);
    let eta = cfg.step_scale();
    let ball_radius = (2.0 * s as f64).sqrt() * radius;
    let trunc_level = cfg.oracle.trunc_level(false);

    let mut x = x_in.to_vec();
    let mut record = PhaseRecord {
        phase: 0,
        radius,
        iterations: 0,
        oracle_samples: 0,
        ended_by_check: false,
        certified: true,
        iterate_distances: Vec::new(),
        pre_round_distance: None,
        distance_out: None,
    };

    for _t in 0..t_max {
        let mut residual = ResidualDelta::new(a, &x, b, radius);
        let out = run_oracle(
            &mut residual,
            a,
            &cfg.oracle,
            cfg.oracle.restarts_exact(),
            rng,
            None,
        )?;
        record.iterations += 1;
        record.oracle_samples += out.samples;

        // Certification checks recomputed from the returned weights; the
        // touched residual entries are already memoized.
        let phi2_fresh: f64 = out
            .weights
            .support()
            .map(|(i, wi)| {
                let di = residual.get(i);
                wi * di * di
            })
            .sum();
        let trunc_norm = l2_norm(&trunc(&out.gamma, trunc_level)?);
        if phi2_fresh < cfg.oracle.c_prog || trunc_norm > cfg.oracle.c2 {
            record.ended_by_check = true;
            break;
        }

        let stepped: Vec<f64> = x
            .iter()
            .zip(&out.gamma)
            .map(|(xi, gi)| xi - eta * radius * gi)
            .collect();
        x = project_l1_ball(&stepped, x_in, ball_radius)?;
        debug_assert!(
            l1_norm(&x.iter().zip(x_in).map(|(a, b)| a - b).collect::<Vec<_>>())
                <= ball_radius * (1.0 + 1e-9)
        );
        if let Some(dist) = distance_to(&x, truth) {
            record.iterate_distances.push(dist);
        }
    }

    record.pre_round_distance = distance_to(&x, truth);
    let rounded = hard_threshold(&x, s)?;
    record.distance_out = distance_to(&rounded, truth);
    Ok((rounded, record))
}

/// Geometric majority vote: the first point with at least `0.51 k` points
/// within `2R/3` of it. When at least `0.51 k` points lie within `R/3` of
/// some unknown center, the returned point is within `R` of that center.
pub fn aggregate(points: &[Vec<f64>], radius: f64) -> Result<Option<Vec<f64>>> {
    if points.is_empty() {
        return Err(Error::arg("aggregate needs at least one point"));
    }
    let d = points[0].len();
    if !points.iter().all(|p| p.len() == d) {
        return Err(Error::dim("aggregate points must share a dimension"));
    }
    if !(radius >= 0.0) {
        return Err(Error::arg(format!("radius must be >= 0, got {radius}")));
    }
    let k = points.len() as f64;
    let near = 2.0 * radius / 3.0;
    for cand in points {
        let count = points
            .iter()
            .filter(|p| {
                let d2: f64 = cand
                    .iter()
                    .zip(p.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2.sqrt() <= near
            })
            .count() as f64;
        if count >= 0.51 * k {
            return Ok(Some(cand.clone()));
        }
    }
    Ok(None)
}

/// One noisy halving phase: independent trials of the strong-oracle loop,
/// aggregated by geometric majority. `certified` in the record reports
/// whether aggregation found its cluster; an uncertified phase returns the
/// thresholded input unchanged.
pub fn half_radius_sparse_noisy(
    x_in: &[f64],
    radius: f64,
    r_xi_guess: f64,
    a: &DenseMatrix,
    b: &[f64],
    cfg: &RecoveryConfig,
    rng: &mut ChaCha8Rng,
    truth: Option<&[f64]>,
) -> Result<(Vec<f64>, PhaseRecord)> {
    let s = cfg.oracle.s;
    validate_instance(a, b, x_in, s)?;
    if !(radius > 0.0) {
        return Err(Error::arg(format!("radius must be > 0, got {radius}")));
    }
    if radius < cfg.c_xi * r_xi_guess * (1.0 - 1e-12) {
        return Err(Error::arg(format!(
            "noisy phase requires radius >= c_xi * r_xi_guess ({radius} < {} * {r_xi_guess})",
            cfg.c_xi
        )));
    }

    let d = a.ncols();
    let t_max = cfg.phase_iterations(true);
    let eta = cfg.step_scale();
    let ball_radius = (2.0 * s as f64).sqrt() * radius;
    let trunc_level = cfg.oracle.trunc_level(true);
    let n_trials = cfg.noisy_trials(d);
    let base_seed = rng.next_u64();

    let trials: Vec<(Vec<f64>, usize, u64)> = (0..n_trials)
        .into_par_iter()
        .map(|j| -> Result<(Vec<f64>, usize, u64)> {
            let mut trial_rng = substream(child_seed(base_seed, j as u64), 0);
            let mut x = x_in.to_vec();
            let mut calls = 0usize;
            let mut samples = 0u64;
            for _t in 0..t_max {
                let mut residual = ResidualDelta::new(a, &x, b, radius);
                let out = run_oracle(
                    &mut residual,
                    a,
                    &cfg.oracle,
                    cfg.oracle.restarts_noisy(),
                    &mut trial_rng,
                    None,
                )?;
                calls += 1;
                samples += out.samples;

                let phi2_fresh: f64 = out
                    .weights
                    .support()
                    .map(|(i, wi)| {
                        let di = residual.get(i);
                        wi * di * di
                    })
                    .sum();
                let trunc_norm = l2_norm(&trunc(&out.gamma, trunc_level)?);
                let weight_bound_ok = out.weights.l1() <= 12.0 * cfg.oracle.l + 1e-12;
                if phi2_fresh < cfg.oracle.c_prog || trunc_norm > cfg.oracle.c2 || !weight_bound_ok
                {
                    let x_rounded = hard_threshold(&x, s)?;
                    return Ok((x_rounded, calls, samples));
                }

                let stepped: Vec<f64> = x
                    .iter()
                    .zip(&out.gamma)
                    .map(|(xi, gi)| xi - eta * radius * gi)
                    .collect();
                x = project_l1_ball(&stepped, x_in, ball_radius)?;
            }
            Ok((x, calls, samples))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut record = PhaseRecord {
        phase: 0,
        radius,
        iterations: trials.iter().map(|t| t.1).sum(),
        oracle_samples: trials.iter().map(|t| t.2).sum(),
        ended_by_check: false,
        certified: false,
        iterate_distances: Vec::new(),
        pre_round_distance: None,
        distance_out: None,
    };

    let points: Vec<Vec<f64>> = trials.into_iter().map(|t| t.0).collect();
    let aggregated = aggregate(&points, radius / 2.0)?;
    record.certified = aggregated.is_some();
    let candidate = match aggregated {
        Some(z) => z,
        None => x_in.to_vec(),
    };
    record.pre_round_distance = distance_to(&candidate, truth);
    let rounded = hard_threshold(&candidate, s)?;
    record.distance_out = distance_to(&rounded, truth);
    Ok((rounded, record))
}

/// Exact recovery: starting from zero, runs `ceil(log2(r0/target_r))`
/// halving phases with the failure budget split across them and the
/// per-call oracle budget split across each phase's iterations.
pub fn recover_exact(
    a: &DenseMatrix,
    b: &[f64],
    cfg: &RecoveryConfig,
    rng: &mut ChaCha8Rng,
    truth: Option<&[f64]>,
) -> Result<RecoveryReport> {
    cfg.validate_exact()?;
    let d = a.ncols();
    validate_instance(a, b, &vec![0.0; d], cfg.oracle.s)?;

    let phases = ((cfg.r0 / cfg.target_r).log2().ceil() as usize).max(1);
    let t_max = cfg.phase_iterations(false);
    let mut phase_cfg = cfg.clone();
    phase_cfg.oracle.delta = (cfg.delta / (phases as f64 * t_max as f64)).clamp(1e-9, 0.49);

    let mut x = vec![0.0; d];
    let mut radius = cfg.r0;
    let mut trace = RunTrace::default();
    let mut samples = 0u64;
    let mut iterations = 0u64;
    for phase in 0..phases {
        let (next, mut record) = half_radius_sparse(&x, radius, a, b, &phase_cfg, rng, truth)?;
        record.phase = phase;
        samples += record.oracle_samples;
        iterations += record.iterations as u64;
        trace.phases.push(record);
        x = next;
        radius /= 2.0;
    }

    Ok(RecoveryReport {
        signal: SparseSignal::from_dense(&x)?,
        trace,
        oracle_samples: samples,
        iterations,
        r_final: None,
    })
}

/// Noisy recovery with an unknown noise floor: runs the phase-halving
/// driver down to `c_xi * R_guess` for a halving sequence of guesses,
/// keeping the last iterate whose phases all certified. Returns that
/// iterate and `r_final = c_xi * (last certified guess)`.
pub fn recover_noisy(
    a: &DenseMatrix,
    b: &[f64],
    cfg: &RecoveryConfig,
    rng: &mut ChaCha8Rng,
    truth: Option<&[f64]>,
) -> Result<RecoveryReport> {
    cfg.validate_noisy()?;
    let d = a.ncols();
    validate_instance(a, b, &vec![0.0; d], cfg.oracle.s)?;

    // Guess levels halve until certification fails; the failure budget is
    // split over a fixed number of levels, since failures below the floor
    // are the expected stopping signal rather than budget consumers.
    const MAX_GUESS_LEVELS: usize = 24;
    let level_delta = cfg.delta / 8.0;

    let mut best_x = vec![0.0; d];
    let mut best_r_final = cfg.r0;
    let mut trace = RunTrace::default();
    let mut samples = 0u64;
    let mut iterations = 0u64;
    let mut r_guess = cfg.r1;

    for _level in 0..MAX_GUESS_LEVELS {
        let target = cfg.c_xi * r_guess;
        if target >= cfg.r0 {
            // The zero iterate already certifies this level.
            best_r_final = best_r_final.min(target.max(cfg.r0));
            r_guess /= 2.0;
            continue;
        }
        let phases = ((cfg.r0 / target).log2().ceil() as usize).max(1);
        let t_max = cfg.phase_iterations(true);
        let mut phase_cfg = cfg.clone();
        phase_cfg.delta = (level_delta / phases as f64).clamp(1e-9, 0.49);
        phase_cfg.oracle.delta = (phase_cfg.delta
            / (t_max as f64 * cfg.noisy_trials(d) as f64))
            .clamp(1e-6, 0.49);

        let mut x = vec![0.0; d];
        let mut radius = cfg.r0;
        let mut level_certified = true;
        let mut level_trace = Vec::new();
        for phase in 0..phases {
            let (next, mut record) =
                half_radius_sparse_noisy(&x, radius, r_guess, a, b, &phase_cfg, rng, truth)?;
            record.phase = phase;
            samples += record.oracle_samples;
            iterations += record.iterations as u64;
            let certified = record.certified;
            level_trace.push(record);
            if !certified {
                level_certified = false;
                break;
            }
            x = next;
            radius /= 2.0;
        }
        trace.phases.extend(level_trace);

        if level_certified {
            best_x = x;
            best_r_final = target;
            r_guess /= 2.0;
        } else {
            break;
        }
    }

    Ok(RecoveryReport {
        signal: SparseSignal::from_dense(&best_x)?,
        trace,
        oracle_samples: samples,
        iterations,
        r_final: Some(best_r_final),
    })
}
