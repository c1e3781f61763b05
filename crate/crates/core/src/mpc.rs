//! Full-state-feedback receding-horizon controller.
//!
//! Each solve is a single-shooting problem over piecewise-constant controls,
//! squashed into the bounds by `u = ½ u_max (1 + tanh v)` and minimised over
//! the unconstrained `v` with L-BFGS.

use crate::column::{ColumnParams, Controls, FeedConditions};
use crate::error::SimError;
use crate::lbfgs::{minimize, LbfgsConfig};
use crate::sim::{open_loop_cost, OpenLoopWorkspace, TrackingCost};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcpConfig {
    /// Control interval, min.
    pub dt: f64,
    /// Prediction horizon, min.
    pub horizon: f64,
    /// Integration step inside the prediction, min.
    pub h: f64,
    pub max_iterations: usize,
    pub grad_tol: f64,
    pub warm_shift: bool,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self { dt: 0.5, horizon: 20.0, h: 0.005, max_iterations: 50, grad_tol: 1e-8, warm_shift: true }
    }
}

impl OcpConfig {
    pub fn intervals(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// Grid points including both ends.
    pub fn points(&self) -> usize {
        self.intervals() + 1
    }

    pub fn steps_per_interval(&self) -> usize {
        (self.dt / self.h).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.into()));
        if !(self.dt > 0.0 && self.h > 0.0 && self.horizon >= self.dt) {
            return bad("dt, h must be positive and the horizon at least one interval");
        }
        if ((self.intervals() as f64) * self.dt - self.horizon).abs() > 1e-9 {
            return bad("horizon must be a multiple of dt");
        }
        if ((self.steps_per_interval() as f64) * self.h - self.dt).abs() > 1e-9 {
            return bad("dt must be a multiple of h");
        }
        Ok(())
    }
}

/// Piecewise-constant `[L_T, V_B]`, one entry per interval.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSequence(pub Vec<Controls<f64>>);

impl ControlSequence {
    pub fn constant(u: Controls<f64>, intervals: usize) -> Self {
        Self(vec![u; intervals])
    }

    /// Drops the first interval and repeats the last one.
    pub fn shifted(&self) -> Self {
        let mut v = self.0[1.min(self.0.len())..].to_vec();
        if let Some(last) = self.0.last() {
            v.push(*last);
        }
        Self(v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcpSolution {
    pub controls: ControlSequence,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_inf: f64,
}

fn squash(v: f64, u_max: f64) -> f64 {
    0.5 * u_max * (1.0 + v.tanh())
}

/// Inverse of [`squash`], keeping `v` finite for controls on or past the bounds.
fn unsquash(u: f64, u_max: f64) -> f64 {
    let r = (2.0 * u / u_max - 1.0).clamp(-1.0 + 1e-12, 1.0 - 1e-12);
    r.atanh()
}

/// Optimal piecewise-constant controls from `z0` with the feed held at `feed`.
pub fn solve_ocp(
    z0: &[f64],
    feed: &FeedConditions<f64>,
    warm_start: &ControlSequence,
    config: &OcpConfig,
    params: &ColumnParams<f64>,
    cost: &TrackingCost<f64>,
) -> Result<OcpSolution, SimError> {
    config.validate()?;
    let n_int = config.intervals();
    if warm_start.0.len() != n_int {
        return Err(SimError::Config(format!("warm start has {} intervals, expected {n_int}", warm_start.0.len())));
    }
    let m = config.steps_per_interval();
    let u_max = params.u_max;
    let v0: Vec<f64> = warm_start.0.iter().flat_map(|u| [unsquash(u.reflux, u_max[0]), unsquash(u.boilup, u_max[1])]).collect();
    let mut ws = OpenLoopWorkspace::new(z0.len());
    let mut controls = vec![Controls::new(0.0, 0.0); n_int];
    let mut du = vec![[0.0; 2]; n_int];
    let objective = |v: &[f64], g: &mut [f64]| -> Result<f64, SimError> {
        for (i, u) in controls.iter_mut().enumerate() {
            *u = Controls::new(squash(v[2 * i], u_max[0]), squash(v[2 * i + 1], u_max[1]));
        }
        let j = open_loop_cost(z0, feed, &controls, m, config.h, params, cost, &mut ws, Some(&mut du))?;
        for i in 0..n_int {
            for c in 0..2 {
                let t = v[2 * i + c].tanh();
                g[2 * i + c] = du[i][c] * 0.5 * u_max[c] * (1.0 - t * t);
            }
        }
        Ok(j)
    };
    let cfg = LbfgsConfig { max_iterations: config.max_iterations, grad_tol: config.grad_tol, ..LbfgsConfig::default() };
    let r = minimize(objective, &v0, &cfg)?;
    if !r.converged {
        log::debug!("MPC solve stopped after {} iterations with |grad| = {:e}", r.iterations, r.grad_inf);
    }
    let controls = r.x.chunks(2).map(|c| Controls::new(squash(c[0], u_max[0]), squash(c[1], u_max[1]))).collect();
    Ok(OcpSolution {
        controls: ControlSequence(controls),
        cost: r.f,
        iterations: r.iterations,
        converged: r.converged,
        grad_inf: r.grad_inf,
    })
}

/// Receding-horizon controller with shift-and-hold warm starts.
#[derive(Clone, Debug)]
pub struct MpcController {
    pub config: OcpConfig,
    pub params: ColumnParams<f64>,
    pub cost: TrackingCost<f64>,
    warm: ControlSequence,
    last: Controls<f64>,
    pub solves: usize,
    pub failures: usize,
    pub inner_iterations: usize,
}

impl MpcController {
    pub fn new(config: OcpConfig, params: ColumnParams<f64>) -> Result<Self, SimError> {
        config.validate()?;
        let nominal = params.nominal_controls();
        Ok(Self {
            config,
            cost: TrackingCost::standard(&params),
            warm: ControlSequence::constant(nominal, config.intervals()),
            last: nominal,
            params,
            solves: 0,
            failures: 0,
            inner_iterations: 0,
        })
    }

    /// Solves from the plant state and returns the first interval's controls.
    pub fn step(&mut self, z: &[f64], feed: &FeedConditions<f64>, time: f64) -> Controls<f64> {
        self.solves += 1;
        match solve_ocp(z, feed, &self.warm, &self.config, &self.params, &self.cost) {
            Ok(sol) => {
                self.inner_iterations += sol.iterations;
                let u = sol.controls.0[0];
                self.warm = if self.config.warm_shift { sol.controls.shifted() } else { sol.controls };
                self.last = u;
                u
            }
            Err(e) => {
                self.failures += 1;
                log::warn!("MPC solve failed at t = {time} min, holding previous controls: {e}");
                self.last
            }
        }
    }
}
