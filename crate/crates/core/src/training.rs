//! Stochastic closed-loop training with RMSProp, optional elastic-net
//! regularisation, and the regularise → prune → retrain workflow.

use std::time::Instant;

use rand::Rng;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::column::ColumnParams;
use crate::error::TrainError;
use crate::policy::{prune_selection, NeuralPolicy, PolicyParams, Selection};
use crate::sampling::{rng_for, InitialConditionPool, NoisePool};
use crate::sim::{batch_cost_gradient, CostSample, SimConfig, TrackingCost};

/// Selection entries below this magnitude are pruned.
pub const PRUNE_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, decay: 0.9, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RmsPropState {
    pub nu: Vec<f64>,
    pub steps: usize,
}

impl RmsPropState {
    pub fn new(n: usize) -> Self {
        Self { nu: vec![0.0; n], steps: 0 }
    }
}

/// `ν ← ρν + (1−ρ)g²`, `θ ← θ − η g / (√ν + ε)`; entries flagged in `frozen` are left alone.
pub fn rmsprop_step(
    state: &mut RmsPropState,
    theta: &mut [f64],
    grad: &[f64],
    hyper: &RmsPropConfig,
    frozen: Option<&[bool]>,
) -> Result<(), TrainError> {
    if let Some((index, value)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(TrainError::NonFinite { iteration: state.steps, index, value: *value });
    }
    for i in 0..theta.len() {
        if frozen.is_some_and(|f| f[i]) {
            continue;
        }
        let g = grad[i];
        state.nu[i] = hyper.decay * state.nu[i] + (1.0 - hyper.decay) * g * g;
        theta[i] -= hyper.learning_rate * g / (state.nu[i].sqrt() + hyper.epsilon);
    }
    state.steps += 1;
    Ok(())
}

/// `λ1 (λ2 ‖θ‖₁ + ½ (1 − λ2) ‖θ‖²)` and its (sub)gradient, with `sign(0) = 0`.
pub fn elastic_net_penalty(theta: &[f64], l1: f64, l2: f64) -> (f64, Vec<f64>) {
    let mut abs = 0.0;
    let mut sq = 0.0;
    let grad = theta
        .iter()
        .map(|&t| {
            abs += t.abs();
            sq += t * t;
            let sign = if t > 0.0 {
                1.0
            } else if t < 0.0 {
                -1.0
            } else {
                0.0
            };
            l1 * (l2 * sign + (1.0 - l2) * t)
        })
        .collect();
    (l1 * (l2 * abs + 0.5 * (1.0 - l2) * sq), grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub iterations: usize,
    pub samples: usize,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(Preset::Desk),
            "paper" => Some(Preset::Paper),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }

    pub fn phases(self) -> Vec<Phase> {
        let (a, b) = match self {
            Preset::Desk => (500, 200),
            Preset::Paper => (2000, 750),
        };
        vec![Phase { iterations: a, samples: 1, weight: 1.0 }, Phase { iterations: b, samples: 2, weight: 0.5 }]
    }

    pub fn pool_size(self) -> usize {
        match self {
            Preset::Desk => 200,
            Preset::Paper => 1000,
        }
    }

    /// Per-sample horizon, min. The full preset needs about an hour so that
    /// the slow composition mode shows up in the cost.
    pub fn horizon(self) -> f64 {
        match self {
            Preset::Desk => 10.0,
            Preset::Paper => 60.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phases: Vec<Phase>,
    pub rmsprop: RmsPropConfig,
    /// `(λ1, λ2)`.
    pub elastic_net: Option<(f64, f64)>,
    /// Seed of the pool-sampling stream.
    pub seed: u64,
    pub t_f: f64,
    pub h: f64,
    pub checkpoint: usize,
}

impl TrainConfig {
    pub fn from_preset(preset: Preset, seed: u64) -> Self {
        Self {
            phases: preset.phases(),
            rmsprop: RmsPropConfig::default(),
            elastic_net: None,
            seed,
            t_f: preset.horizon(),
            h: 0.005,
            checkpoint: 200,
        }
    }

    pub fn total_iterations(&self) -> usize {
        self.phases.iter().map(|p| p.iterations).sum()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.phases.is_empty() || self.phases.iter().any(|p| p.iterations == 0 || p.samples == 0 || !(p.weight > 0.0)) {
            return bad("every phase needs iterations > 0, samples > 0 and a positive weight");
        }
        if let Some((l1, l2)) = self.elastic_net {
            if !(l1 >= 0.0) || !(0.0..=1.0).contains(&l2) {
                return bad("elastic net needs λ1 ≥ 0 and 0 ≤ λ2 ≤ 1");
            }
        }
        Ok(())
    }

    fn sim(&self) -> SimConfig {
        SimConfig { h: self.h, t_f: self.t_f, checkpoint: self.checkpoint }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainRecord {
    /// Sampled objective per iteration (including the penalty when one is configured).
    pub objective: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub wall_ms: Vec<f64>,
    pub final_theta: Vec<f64>,
    pub selection: Option<Selection>,
}

impl TrainRecord {
    /// `iteration,objective,grad_norm,wall_ms` lines; wall time is written as 0 unless `timings`.
    pub fn to_csv(&self, timings: bool) -> String {
        let mut s = String::from("iteration,objective,grad_norm,wall_ms\n");
        for i in 0..self.objective.len() {
            let w = if timings { self.wall_ms[i] } else { 0.0 };
            s += &format!("{},{},{},{}\n", i + 1, self.objective[i], self.grad_norm[i], w);
        }
        s
    }
}

/// Trailing moving average with the window shortened at the start.
pub fn moving_average(v: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(v.len());
    let mut acc = 0.0;
    for i in 0..v.len() {
        acc += v[i];
        if i >= w {
            acc -= v[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

pub struct TrainingPools<'a> {
    pub initial: &'a InitialConditionPool,
    pub noise: &'a NoisePool,
}

/// Runs the phase schedule from the policy's current parameters.
pub fn train(
    policy: &NeuralPolicy<f64>,
    pools: &TrainingPools<'_>,
    config: &TrainConfig,
    params: &ColumnParams<f64>,
    frozen: Option<&[bool]>,
    pool: Option<&ThreadPool>,
) -> Result<(PolicyParams<f64>, TrainRecord), TrainError> {
    config.validate()?;
    if pools.initial.is_empty() || pools.noise.is_empty() {
        return Err(TrainError::Config("training pools must not be empty".into()));
    }
    let sim = config.sim();
    let cost = TrackingCost::standard(params);
    let mut current = policy.clone();
    let mut theta = current.params.flatten();
    if frozen.is_some_and(|f| f.len() != theta.len()) {
        return Err(TrainError::Config("frozen mask length differs from the parameter count".into()));
    }
    let mut opt = RmsPropState::new(theta.len());
    let mut rng = rng_for(config.seed, 21);
    let mut record = TrainRecord::default();
    let start = Instant::now();
    let mut iteration = 0;
    for phase in &config.phases {
        for _ in 0..phase.iterations {
            let samples: Vec<CostSample<f64>> = (0..phase.samples)
                .map(|_| {
                    let i = rng.gen_range(0..pools.initial.len());
                    let j = rng.gen_range(0..pools.noise.len());
                    CostSample {
                        z0: pools.initial.states[i].clone(),
                        feed: pools.initial.feeds[i],
                        eta: pools.noise.samples[j].clone(),
                        weight: phase.weight,
                    }
                })
                .collect();
            let (mut phi, mut grad) = batch_cost_gradient(&samples, &current, &sim, params, &cost, pool)
                .map_err(|source| TrainError::Simulation { iteration, source })?;
            if let Some((l1, l2)) = config.elastic_net {
                let (pen, pg) = elastic_net_penalty(&theta, l1, l2);
                phi += pen;
                grad.iter_mut().zip(&pg).for_each(|(g, p)| *g += p);
            }
            if let Some(f) = frozen {
                grad.iter_mut().zip(f).filter(|(_, fr)| **fr).for_each(|(g, _)| *g = 0.0);
            }
            rmsprop_step(&mut opt, &mut theta, &grad, &config.rmsprop, frozen).map_err(|e| match e {
                TrainError::NonFinite { index, value, .. } => TrainError::NonFinite { iteration, index, value },
                other => other,
            })?;
            current.params.assign(&theta);
            record.objective.push(phi);
            record.grad_norm.push(grad.iter().map(|g| g * g).sum::<f64>().sqrt());
            record.wall_ms.push(start.elapsed().as_secs_f64() * 1e3);
            iteration += 1;
            if iteration % 100 == 0 {
                log::info!("iteration {iteration}: objective {phi:.3e}");
            }
        }
    }
    record.final_theta = theta;
    Ok((current.params, record))
}

/// Outcome of the two-phase selection workflow.
#[derive(Clone, Debug)]
pub struct RegularisedOutcome {
    pub params: PolicyParams<f64>,
    pub selection: Selection,
    pub penalised: TrainRecord,
    pub retrained: TrainRecord,
}

/// Phase A trains with the elastic net; small selection entries are then
/// pruned, and phase B retrains from the original initial guess with the
/// whole selection vector frozen at its pruned values and no penalty.
pub fn regularized_workflow(
    policy: &NeuralPolicy<f64>,
    pools: &TrainingPools<'_>,
    config: &TrainConfig,
    params: &ColumnParams<f64>,
    pool: Option<&ThreadPool>,
) -> Result<RegularisedOutcome, TrainError> {
    if config.elastic_net.is_none() {
        return Err(TrainError::Config("the regularised workflow needs elastic-net weights".into()));
    }
    let (penalised_params, mut penalised) = train(policy, pools, config, params, None, pool)?;
    let (pruned, selection) = prune_selection(&penalised_params, &policy.spec, PRUNE_TOLERANCE);
    if selection.kept.is_empty() {
        let max_abs = penalised_params.selection.iter().fold(0.0f64, |m, h| m.max(h.abs()));
        return Err(TrainError::EmptySelection { max_abs });
    }
    penalised.selection = Some(selection.clone());

    let mut restart = policy.clone();
    restart.params.selection.clone_from(&pruned.selection);
    let n_sel = restart.params.selection.len();
    let frozen: Vec<bool> = (0..policy.spec.param_len()).map(|i| i < n_sel).collect();
    let retrain_config = TrainConfig { elastic_net: None, ..config.clone() };
    let (final_params, mut retrained) = train(&restart, pools, &retrain_config, params, Some(&frozen), pool)?;
    retrained.selection = Some(selection.clone());
    Ok(RegularisedOutcome { params: final_params, selection, penalised, retrained })
}
