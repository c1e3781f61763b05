//! Disturbance sequences, closed-loop evaluation runs and the cumulative
//! objective comparison between controllers.

use rand::Rng;
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::column::{temperature_unchecked, ColumnParams, ColumnState, FeedConditions, NoiseSpec};
use crate::error::{EvalError, SimError};
use crate::mpc::MpcController;
use crate::policy::{NeuralPolicy, Tape};
use crate::sampling::{draw_noise, extreme_noise, rng_for, RegionData};
use crate::sim::{rk4_step, ClosedLoop, ConstantController, PolicyController, Rk4Workspace, RunningCost, TrackingCost, Trajectory};

/// Nominal start-up before the first disturbance, min.
pub const START_UP: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    #[serde(rename = "F")]
    Rate,
    #[serde(rename = "zF")]
    Composition,
    #[serde(rename = "qF")]
    LiquidFraction,
}

impl Channel {
    pub fn label(self) -> &'static str {
        match self {
            Channel::Rate => "F",
            Channel::Composition => "zF",
            Channel::LiquidFraction => "qF",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Channel::Rate, Channel::Composition, Channel::LiquidFraction].into_iter().find(|c| c.label() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceEvent {
    pub time: f64,
    pub channel: Channel,
    pub level: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceRanges {
    pub rate: [f64; 2],
    pub composition: [f64; 2],
    pub liquid_fraction: [f64; 2],
    pub levels: usize,
    pub gap: [f64; 2],
    pub gap_levels: usize,
}

impl Default for DisturbanceRanges {
    fn default() -> Self {
        Self {
            rate: [0.8, 1.2],
            composition: [0.4, 0.6],
            liquid_fraction: [0.8, 1.0],
            levels: 15,
            gap: [0.5, 10.0],
            gap_levels: 10,
        }
    }
}

fn linspace(range: [f64; 2], n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![range[0]];
    }
    (0..n).map(|i| range[0] + (range[1] - range[0]) * i as f64 / (n - 1) as f64).collect()
}

impl DisturbanceRanges {
    pub fn grid(&self, channel: Channel) -> Vec<f64> {
        let r = match channel {
            Channel::Rate => self.rate,
            Channel::Composition => self.composition,
            Channel::LiquidFraction => self.liquid_fraction,
        };
        linspace(r, self.levels)
    }

    pub fn gaps(&self) -> Vec<f64> {
        linspace(self.gap, self.gap_levels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSequence {
    pub seed: u64,
    pub start: f64,
    /// Run length, rounded up to a whole number of 0.5-min control intervals.
    pub duration: f64,
    pub nominal: FeedConditions<f64>,
    pub events: Vec<DisturbanceEvent>,
}

impl DisturbanceSequence {
    /// Feed in force at `t`; an event takes effect at the first time `≥` its own.
    pub fn feed_at(&self, t: f64) -> FeedConditions<f64> {
        let mut f = self.nominal;
        for e in self.events.iter().take_while(|e| e.time <= t + 1e-9) {
            match e.channel {
                Channel::Rate => f.rate = e.level,
                Channel::Composition => f.composition = e.level,
                Channel::LiquidFraction => f.liquid_fraction = e.level,
            }
        }
        f
    }
}

/// Random steps on one feed channel at a time. The first event fires at the
/// end of start-up, and the run ends one further gap after the last event.
pub fn generate_disturbance_sequence(
    seed: u64,
    ranges: &DisturbanceRanges,
    n_events: usize,
    nominal: FeedConditions<f64>,
) -> DisturbanceSequence {
    let mut rng = rng_for(seed, 0);
    let gaps = ranges.gaps();
    let channels = [Channel::Rate, Channel::Composition, Channel::LiquidFraction];
    let mut t = START_UP;
    let mut events = Vec::with_capacity(n_events);
    for _ in 0..n_events {
        let channel = channels[rng.gen_range(0..3)];
        let grid = ranges.grid(channel);
        let level = grid[rng.gen_range(0..grid.len())];
        events.push(DisturbanceEvent { time: t, channel, level });
        t += gaps[rng.gen_range(0..gaps.len())];
    }
    let duration = (t / 0.5 - 1e-9).ceil() * 0.5;
    DisturbanceSequence { seed, start: START_UP, duration, nominal, events }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NoiseMode {
    None,
    /// One draw from the given seed held for the whole run.
    ConstantBias,
    /// A given bias vector held for the whole run.
    Fixed(Vec<f64>),
    /// Fresh draw at every integration step.
    PerStep,
    /// Every slot at `±bound`, signs drawn once.
    Extreme,
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub noise: NoiseMode,
    pub noise_spec: NoiseSpec,
    /// Multipliers applied to `[L_T, V_B]` between controller and plant.
    pub plant_gain: [f64; 2],
    pub seed: u64,
    pub h: f64,
    /// Keep every n-th grid point in the returned trajectory.
    pub record_every: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            noise: NoiseMode::None,
            noise_spec: NoiseSpec::default(),
            plant_gain: [1.0, 1.0],
            seed: 0,
            h: 0.005,
            record_every: 20,
        }
    }
}

pub const MISMATCH_GAIN: [f64; 2] = [1.1, 0.9];

pub enum EvalController<'a> {
    Mpc(&'a mut MpcController),
    Policy(&'a NeuralPolicy<f64>),
}

#[derive(Clone, Debug)]
pub struct ClosedLoopRun {
    pub trajectory: Trajectory<f64>,
    /// Trapezoid integral of the stage cost on the full integration grid after start-up.
    pub objective: f64,
    /// Bias vector used (all zeros for noise-free and per-step runs).
    pub bias: Vec<f64>,
}

/// Simulates the sequence from the equimolar state. Stage cost and recorded
/// controls use the controller's commanded values; the plant receives them
/// scaled by `plant_gain`. MPC always sees the exact state and feed.
pub fn simulate_closed_loop(
    controller: EvalController<'_>,
    seq: &DisturbanceSequence,
    opts: &RunOptions,
    params: &ColumnParams<f64>,
) -> Result<ClosedLoopRun, SimError> {
    let h = opts.h;
    let n = (seq.duration / h).round() as usize;
    let n_meas = params.measurement_len();
    let mut rng = rng_for(opts.seed, 7);
    let bias = match &opts.noise {
        NoiseMode::None | NoiseMode::PerStep => vec![0.0; n_meas],
        NoiseMode::ConstantBias => draw_noise(&opts.noise_spec, params.n_stages, &mut rng),
        NoiseMode::Fixed(v) => {
            opts.noise_spec.check(v, params.n_stages)?;
            v.clone()
        }
        NoiseMode::Extreme => extreme_noise(&opts.noise_spec, params.n_stages, &mut rng),
    };
    let cost = TrackingCost::standard(params);
    let every = opts.record_every.max(1);
    let mut traj = Trajectory::with_capacity(0.0, h * every as f64, params.state_len(), n / every + 1);
    let mut z = ColumnState::equimolar(params).into_vec();
    let mut next = z.clone();
    let mut ws = Rk4Workspace::new(z.len());
    let gain = opts.plant_gain;
    let mpc_every = match &controller {
        EvalController::Mpc(m) => (m.config.dt / h).round().max(1.0) as usize,
        EvalController::Policy(_) => 1,
    };
    let start_index = (seq.start / h).round() as usize;
    let mut policy_ctl = match &controller {
        EvalController::Policy(p) => Some(PolicyController::new(p, bias.clone())?),
        EvalController::Mpc(_) => None,
    };
    let mut mpc = match controller {
        EvalController::Mpc(m) => Some(m),
        EvalController::Policy(_) => None,
    };
    let mut held = params.nominal_controls();
    let mut objective = 0.0;
    let mut prev_cost = 0.0;
    for k in 0..=n {
        let t = k as f64 * h;
        let feed = seq.feed_at(t);
        if let (NoiseMode::PerStep, Some(pc)) = (&opts.noise, policy_ctl.as_mut()) {
            pc.eta = draw_noise(&opts.noise_spec, params.n_stages, &mut rng);
        }
        let u = match (&mut mpc, &mut policy_ctl) {
            (Some(m), _) => {
                if k % mpc_every == 0 {
                    held = m.step(&z, &feed, t);
                }
                held
            }
            (None, Some(pc)) => crate::sim::Controller::control(pc, &z, &feed),
            (None, None) => unreachable!("one controller is always present"),
        };
        let l = cost.value(&z, &u);
        if k % every == 0 {
            traj.push(&z, u, l);
        }
        if k > start_index {
            objective += 0.5 * h * (prev_cost + l);
        }
        prev_cost = l;
        if k == n {
            break;
        }
        let res = match policy_ctl.as_mut() {
            Some(pc) => {
                let mut cl = ClosedLoop { controller: pc, feed, params, gain };
                rk4_step(&z, h, &mut ws, &mut next, &mut cl)
            }
            None => {
                let mut c = ConstantController(held);
                let mut cl = ClosedLoop { controller: &mut c, feed, params, gain };
                rk4_step(&z, h, &mut ws, &mut next, &mut cl)
            }
        };
        if let Err(source) = res {
            log::error!("integration failed at t = {t} min: {source}");
            return Err(SimError::Integration { time: t, source });
        }
        std::mem::swap(&mut z, &mut next);
    }
    Ok(ClosedLoopRun { trajectory: traj, objective, bias })
}

/// Trapezoid integral of the recorded stage cost from `exclude_before` to the end.
pub fn cumulative_objective(traj: &Trajectory<f64>, exclude_before: f64) -> Result<f64, EvalError> {
    let t1 = traj.time(traj.len().saturating_sub(1));
    if traj.is_empty() || exclude_before < traj.t0 || exclude_before > t1 {
        return Err(EvalError::Window { start: exclude_before, t0: traj.t0, t1 });
    }
    Ok(traj.integral_from(exclude_before))
}

/// MPC run on a 0.1-min log grid, reduced to the states and feed the pools are drawn from.
pub fn estimate_operating_region(
    seq: &DisturbanceSequence,
    mpc: &mut MpcController,
    params: &ColumnParams<f64>,
    h: f64,
) -> Result<(RegionData, ClosedLoopRun), SimError> {
    let opts = RunOptions { h, record_every: (0.1 / h).round() as usize, ..RunOptions::default() };
    let run = simulate_closed_loop(EvalController::Mpc(mpc), seq, &opts, params)?;
    Ok((region_from_trajectory(&run.trajectory, seq, params), run))
}

pub fn region_from_trajectory(traj: &Trajectory<f64>, seq: &DisturbanceSequence, params: &ColumnParams<f64>) -> RegionData {
    let n = params.n_stages;
    let mut region = RegionData { time: vec![], temperatures: vec![], holdups: vec![], feed: vec![] };
    for k in 0..traj.len() {
        let t = traj.time(k);
        let z = traj.state(k);
        region.time.push(t);
        region.holdups.push(z[..n].to_vec());
        region.temperatures.push(z[n..].iter().map(|&x| temperature_unchecked(x, params)).collect());
        region.feed.push(seq.feed_at(t));
    }
    region
}

/// Probabilities reported per stage for violin-style summaries.
pub const QUANTILE_LEVELS: [f64; 7] = [0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0];

/// Linear-interpolation quantiles of each stage temperature.
pub fn temperature_quantiles(region: &RegionData) -> Vec<[f64; 7]> {
    let stages = region.temperatures.first().map_or(0, Vec::len);
    (0..stages)
        .map(|j| {
            let mut col: Vec<f64> = region.temperatures.iter().map(|r| r[j]).collect();
            col.sort_by(f64::total_cmp);
            QUANTILE_LEVELS.map(|p| {
                let pos = p * (col.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                col[lo] + (pos - lo as f64) * (col[hi] - col[lo])
            })
        })
        .collect()
}

/// Range of policy outputs over noisy measurements at each recorded point.
#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub time: Vec<f64>,
    pub min: Vec<[f64; 2]>,
    pub max: Vec<[f64; 2]>,
    pub std: Vec<[f64; 2]>,
}

impl Envelope {
    /// Mean of `max − min` over time and both controls.
    pub fn mean_width(&self) -> f64 {
        let total: f64 = self.min.iter().zip(&self.max).map(|(a, b)| (b[0] - a[0]) + (b[1] - a[1])).sum();
        total / (2 * self.min.len().max(1)) as f64
    }
}

/// Evaluates `policy` on `n_draws` noisy measurements of each recorded state.
pub fn control_noise_envelope(
    policy: &NeuralPolicy<f64>,
    traj: &Trajectory<f64>,
    seq: &DisturbanceSequence,
    spec: &NoiseSpec,
    n_draws: usize,
    seed: u64,
) -> Envelope {
    let mut rng = rng_for(seed, 11);
    let mut tape = Tape::new(&policy.spec);
    let n_stages = policy.column.n_stages;
    let mut env = Envelope { time: vec![], min: vec![], max: vec![], std: vec![] };
    for k in 0..traj.len() {
        let t = traj.time(k);
        let z = traj.state(k);
        let feed = seq.feed_at(t);
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n_draws {
            let eta = draw_noise(spec, n_stages, &mut rng);
            let u = policy.evaluate(z, &feed, &eta, &mut tape).to_array();
            for c in 0..2 {
                lo[c] = lo[c].min(u[c]);
                hi[c] = hi[c].max(u[c]);
                sum[c] += u[c];
                sq[c] += u[c] * u[c];
            }
        }
        let nd = n_draws.max(1) as f64;
        let std = [0, 1].map(|c| ((sq[c] / nd - (sum[c] / nd).powi(2)).max(0.0)).sqrt());
        env.time.push(t);
        env.min.push(lo);
        env.max.push(hi);
        env.std.push(std);
    }
    env
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub controller: String,
    pub nominal: f64,
    pub bias: Option<f64>,
    pub avg_bias: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.controller == name)
    }

    /// Fixed-width text table, one controller per line.
    pub fn render(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut s = format!("{:<14}{:>12}{:>12}{:>16}\n", "controller", "no noise", "with noise", "averaged noise");
        for r in &self.rows {
            s += &format!("{:<14}{:>12}{:>12}{:>16}\n", r.controller, cell(Some(r.nominal)), cell(r.bias), cell(r.avg_bias));
        }
        s
    }

    /// `policy,mode,objective` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("policy,mode,objective\n");
        for r in &self.rows {
            s += &format!("{},nominal,{}\n", r.controller, r.nominal);
            if let Some(v) = r.bias {
                s += &format!("{},bias,{}\n", r.controller, v);
            }
            if let Some(v) = r.avg_bias {
                s += &format!("{},avg-bias,{}\n", r.controller, v);
            }
        }
        s
    }
}

/// Bias vectors shared by every policy in a comparison.
pub fn bias_draws(spec: &NoiseSpec, n_stages: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, 13);
    (0..n).map(|_| draw_noise(spec, n_stages, &mut rng)).collect()
}

/// Post-start-up objectives of each policy without noise, under the first
/// bias draw, and averaged over all draws. `mpc_nominal`, if given, becomes
/// a row without noise entries.
#[allow(clippy::too_many_arguments)]
pub fn run_table4(
    policies: &[(String, NeuralPolicy<f64>)],
    mpc_nominal: Option<f64>,
    seq: &DisturbanceSequence,
    n_bias_draws: usize,
    seed: u64,
    base: &RunOptions,
    params: &ColumnParams<f64>,
    pool: Option<&ThreadPool>,
) -> Result<EvalReport, EvalError> {
    let draws = bias_draws(&base.noise_spec, params.n_stages, n_bias_draws, seed);
    let jobs: Vec<(usize, Option<usize>)> = (0..policies.len())
        .flat_map(|p| std::iter::once((p, None)).chain((0..draws.len()).map(move |d| (p, Some(d)))))
        .collect();
    let run = |&(p, d): &(usize, Option<usize>)| {
        let noise = d.map_or(NoiseMode::None, |i| NoiseMode::Fixed(draws[i].clone()));
        let opts = RunOptions { noise, record_every: usize::MAX, ..base.clone() };
        simulate_closed_loop(EvalController::Policy(&policies[p].1), seq, &opts, params).map(|r| r.objective)
    };
    let results: Vec<Result<f64, SimError>> = match pool {
        Some(tp) => tp.install(|| jobs.par_iter().map(run).collect()),
        None => jobs.iter().map(run).collect(),
    };
    let mut rows = Vec::new();
    if let Some(j) = mpc_nominal {
        rows.push(ReportRow { controller: "mpc".into(), nominal: j, bias: None, avg_bias: None });
    }
    let mut it = results.into_iter();
    for (name, _) in policies {
        let nominal = it.next().expect("job per policy")?;
        let mut noisy = Vec::with_capacity(draws.len());
        for _ in 0..draws.len() {
            noisy.push(it.next().expect("job per draw")?);
        }
        let avg = (!noisy.is_empty()).then(|| noisy.iter().sum::<f64>() / noisy.len() as f64);
        rows.push(ReportRow { controller: name.clone(), nominal, bias: noisy.first().copied(), avg_bias: avg });
    }
    Ok(EvalReport { rows })
}

/// Policies evaluated on a shared sequence in parallel, in input order.
pub fn evaluate_policies(
    policies: &[(String, NeuralPolicy<f64>)],
    seq: &DisturbanceSequence,
    opts: &RunOptions,
    params: &ColumnParams<f64>,
    pool: Option<&ThreadPool>,
) -> Result<Vec<ClosedLoopRun>, EvalError> {
    let run = |(_, p): &(String, NeuralPolicy<f64>)| simulate_closed_loop(EvalController::Policy(p), seq, opts, params);
    let results: Vec<Result<ClosedLoopRun, SimError>> = match pool {
        Some(tp) => tp.install(|| policies.par_iter().map(run).collect()),
        None => policies.iter().map(run).collect(),
    };
    results.into_iter().map(|r| r.map_err(EvalError::from)).collect()
}
