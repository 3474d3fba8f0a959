//! Analytical model of a reassembly buffer as a single-server queue with
//! Erlang-2 arrivals and deterministic service.
//!
//! A two-fragment request is complete once both fragments have arrived, so
//! with exponential gaps of rate `lambda` before each fragment the request
//! inter-arrival time is the sum of two exponential stages. The request rate
//! is therefore `lambda / 2` and the load is `rho = lambda / (2 mu)`.
//! Kingman's approximation with `ca^2 = 1/2` and `cs^2 = 0` gives a mean wait
//! of `rho / (4 mu (1 - rho))`.

use std::io::Write;

use rand::distr::Distribution;
use rand_distr::Exp;
use serde::Serialize;
use thiserror::Error;

use crate::engine::{substream, Stream};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("queue is unstable at rho = {0}")]
    Unstable(f64),
    #[error("rates must be positive and finite")]
    BadRate,
    #[error("csv output failed: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueModel {
    /// Rate of each exponential arrival stage, per microsecond.
    pub lambda: f64,
    /// Service rate, per microsecond.
    pub mu: f64,
}

impl QueueModel {
    pub const K: u32 = 2;

    pub fn new(lambda: f64, mu: f64) -> Result<Self, OracleError> {
        if !(lambda > 0.0 && mu > 0.0 && lambda.is_finite() && mu.is_finite()) {
            return Err(OracleError::BadRate);
        }
        Ok(Self { lambda, mu })
    }

    /// Model with the given load and service rate.
    pub fn from_rho(rho: f64, mu: f64) -> Result<Self, OracleError> {
        Self::new(2.0 * rho * mu, mu)
    }

    /// Request arrival rate: the reciprocal of the mean Erlang-2 gap.
    pub fn lambda_eff(&self) -> f64 {
        self.lambda / 2.0
    }

    pub fn rho(&self) -> f64 {
        self.lambda_eff() / self.mu
    }

    pub fn ca(&self) -> f64 {
        std::f64::consts::FRAC_1_SQRT_2
    }

    pub fn cs(&self) -> f64 {
        0.0
    }

    fn check_stable(&self) -> Result<(), OracleError> {
        if self.rho() >= 1.0 {
            Err(OracleError::Unstable(self.rho()))
        } else {
            Ok(())
        }
    }
}

/// Kingman's mean waiting time, in microseconds.
pub fn kingman_wait(model: &QueueModel) -> Result<f64, OracleError> {
    model.check_stable()?;
    let rho = model.rho();
    let general = rho / (1.0 - rho) * (model.ca().powi(2) + model.cs().powi(2)) / 2.0 / model.mu;
    debug_assert!((general - rho / (4.0 * model.mu * (1.0 - rho))).abs() < 1e-12);
    Ok(general)
}

/// Mean wait (excluding service) of `n` FIFO requests with Erlang-2
/// inter-arrivals and deterministic service, via the Lindley recursion.
pub fn simulate_gd1(model: &QueueModel, n: usize, seed: u64) -> Result<f64, OracleError> {
    model.check_stable()?;
    if n == 0 {
        return Ok(0.0);
    }
    let mut rng = substream(seed, Stream::Arrival, 0);
    let stage = Exp::new(model.lambda).map_err(|_| OracleError::BadRate)?;
    let service = 1.0 / model.mu;
    let mut wait = 0.0f64;
    let mut total = 0.0f64;
    for _ in 1..n {
        let gap = stage.sample(&mut rng) + stage.sample(&mut rng);
        wait = (wait + service - gap).max(0.0);
        total += wait;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleRow {
    pub rho: f64,
    pub analytic_wait: f64,
    pub empirical_wait: f64,
    pub rel_error: f64,
}

pub fn oracle_sweep(mu: f64, rhos: &[f64], n: usize, seed: u64) -> Result<Vec<OracleRow>, OracleError> {
    rhos.iter()
        .map(|&rho| {
            let model = QueueModel::from_rho(rho, mu)?;
            let analytic_wait = kingman_wait(&model)?;
            let empirical_wait = simulate_gd1(&model, n, seed)?;
            Ok(OracleRow {
                rho,
                analytic_wait,
                empirical_wait,
                rel_error: (empirical_wait - analytic_wait).abs() / analytic_wait,
            })
        })
        .collect()
}

pub fn write_oracle_csv<W: Write>(out: W, rows: &[OracleRow]) -> Result<(), OracleError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| OracleError::Csv(e.to_string());
    w.write_record(["rho", "analytic_wait", "empirical_wait", "rel_error"]).map_err(err)?;
    for r in rows {
        w.write_record([
            format!("{:.4}", r.rho),
            format!("{:.6}", r.analytic_wait),
            format!("{:.6}", r.empirical_wait),
            format!("{:.6}", r.rel_error),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| OracleError::Csv(e.to_string()))
}
