//! Subcommand definitions and handlers.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use colflux_core::column::{derivatives, steady_state, stage_temperature, ColumnParams};
use colflux_core::mpc::MpcController;
use colflux_core::policy::{self, init_params, selected_labels, NeuralPolicy, PolicyKind, PolicyMeta};
use colflux_core::sampling::{build_initial_pool, build_noise_pool, NoisePool};
use colflux_core::scenarios::{
    bias_draws, control_noise_envelope, estimate_operating_region, evaluate_policies, generate_disturbance_sequence,
    run_table4, simulate_closed_loop, temperature_quantiles, DisturbanceRanges, DisturbanceSequence, EvalController,
    NoiseMode, RunOptions, MISMATCH_GAIN,
};
use colflux_core::training::{moving_average, regularized_workflow, train, Phase, Preset, TrainConfig, TrainRecord, TrainingPools};
use colflux_core::sim::Trajectory;
use rayon::ThreadPool;
use serde::Serialize;

use crate::config::{env_seed, FileConfig, Settings};
use crate::io::{self, write_bytes};
use crate::manifest::{blob_digest, write_manifest, ManifestBuilder};
use crate::plot::{emit_plot, PlotKind};

#[derive(Debug, Parser)]
#[command(name = "colflux", version, about = "Closed-loop training and evaluation of distillation column controllers")]
pub struct Cli {
    /// JSON file with setting overrides.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for batch gradients and scenario runs (default: available cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Nominal steady state at the nominal controls and feed.
    SteadyState(SteadyStateArgs),
    /// Random feed disturbance sequence.
    GenDisturbances(GenArgs),
    /// MPC run over a sequence, logged as operating-region data.
    Region(RegionArgs),
    /// Initial-condition and noise pools from region data.
    Pools(PoolsArgs),
    /// Trains a neural policy.
    Train(TrainArgs),
    /// MPC closed-loop run over a sequence.
    MpcRun(MpcRunArgs),
    /// Closed-loop evaluation of policies under one scenario.
    Evaluate(EvaluateArgs),
    /// Objectives without noise, under one bias draw and averaged over draws.
    Table4(Table4Args),
    /// SVG plot of a trajectory file.
    Plot(PlotArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SteadyState(_) => "steady-state",
            Command::GenDisturbances(_) => "gen-disturbances",
            Command::Region(_) => "region",
            Command::Pools(_) => "pools",
            Command::Train(_) => "train",
            Command::MpcRun(_) => "mpc-run",
            Command::Evaluate(_) => "evaluate",
            Command::Table4(_) => "table4",
            Command::Plot(_) => "plot",
        }
    }

    /// Files that must exist before the command runs.
    pub fn inputs(&self) -> Vec<&Path> {
        match self {
            Command::SteadyState(_) | Command::GenDisturbances(_) => vec![],
            Command::Region(a) => vec![a.sequence.as_path()],
            Command::Pools(a) => vec![a.region.as_path()],
            Command::Train(a) => vec![a.initial.as_path(), a.noise.as_path()],
            Command::MpcRun(a) => vec![a.sequence.as_path()],
            Command::Evaluate(a) => {
                let mut v: Vec<&Path> = a.policies.iter().map(PathBuf::as_path).collect();
                v.push(&a.sequence);
                v.extend(a.reference.as_deref());
                v
            }
            Command::Table4(a) => {
                let mut v: Vec<&Path> = a.policies.iter().map(PathBuf::as_path).collect();
                v.push(&a.sequence);
                v
            }
            Command::Plot(a) => vec![a.traj.as_path()],
        }
    }

    fn seed(&self) -> Option<u64> {
        match self {
            Command::GenDisturbances(a) => a.seed,
            Command::Pools(a) => a.seed,
            Command::Train(a) => a.seed,
            Command::Evaluate(a) => a.seed,
            Command::Table4(a) => a.seed,
            _ => None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SteadyStateArgs {
    /// CSV with columns `stage, M, x, T`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of events (default from settings).
    #[arg(long)]
    pub events: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct RegionArgs {
    #[arg(long)]
    pub sequence: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-stage temperature quantiles.
    #[arg(long)]
    pub quantiles: Option<PathBuf>,
    /// Full MPC trajectory.
    #[arg(long)]
    pub traj: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PoolsArgs {
    #[arg(long)]
    pub region: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Initial-condition pool CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Noise pool CSV (default: `<out>` with a `.noise.csv` suffix).
    #[arg(long)]
    pub noise_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyArg {
    All,
    AllNoNoise,
    Reg,
    Sel,
}

impl From<PolicyArg> for PolicyKind {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::All => PolicyKind::All,
            PolicyArg::AllNoNoise => PolicyKind::AllNoNoise,
            PolicyArg::Reg => PolicyKind::Reg,
            PolicyArg::Sel => PolicyKind::Sel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetArg {
    Desk,
    Paper,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub policy: PolicyArg,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: PresetArg,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub initial: PathBuf,
    #[arg(long)]
    pub noise: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-iteration objective CSV.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Write measured wall times into the record instead of zeros.
    #[arg(long)]
    pub timings: bool,
    /// Iterations of the first phase (one sample per iteration).
    #[arg(long)]
    pub phase_a: Option<usize>,
    /// Iterations of the second phase (two samples per iteration).
    #[arg(long)]
    pub phase_b: Option<usize>,
    /// Per-sample horizon, min.
    #[arg(long)]
    pub horizon: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct MpcRunArgs {
    #[arg(long)]
    pub sequence: PathBuf,
    /// Trajectory CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Apply the multiplicative input error between controller and plant.
    #[arg(long)]
    pub mismatch: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Nominal,
    Bias,
    AvgBias,
    Extreme,
    Mismatch,
}

impl Mode {
    fn label(self) -> &'static str {
        match self {
            Mode::Nominal => "nominal",
            Mode::Bias => "bias",
            Mode::AvgBias => "avg-bias",
            Mode::Extreme => "extreme",
            Mode::Mismatch => "mismatch",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub policies: Vec<PathBuf>,
    #[arg(long)]
    pub sequence: PathBuf,
    #[arg(long, value_enum, default_value = "nominal")]
    pub mode: Mode,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Summary CSV `policy,mode,objective,envelope_width`.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-policy trajectories `<policy>.csv`.
    #[arg(long)]
    pub traj_dir: Option<PathBuf>,
    /// Trajectory CSV whose states every policy's noise envelope is evaluated on
    /// (default: each policy's own nominal trajectory).
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct Table4Args {
    #[arg(long, num_args = 1.., required = true)]
    pub policies: Vec<PathBuf>,
    #[arg(long)]
    pub sequence: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Objective of an MPC run to list as a reference row.
    #[arg(long)]
    pub mpc_objective: Option<f64>,
    /// Run the MPC on the sequence for the reference row.
    #[arg(long, conflicts_with = "mpc_objective")]
    pub with_mpc: bool,
    /// CSV `policy,mode,objective`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PlotArgs {
    #[arg(long)]
    pub traj: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "temperature")]
    pub kind: PlotKind,
}

impl Serialize for PlotKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match self {
            PlotKind::Temperature => "temperature",
            PlotKind::Controls => "controls",
        })
    }
}

/// Input problems that map to the usage exit code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

struct Ctx {
    settings: Settings,
    pool: ThreadPool,
    started: Instant,
}

impl Ctx {
    fn manifest(&self, cmd: &Command) -> Result<ManifestBuilder> {
        Ok(ManifestBuilder::new(cmd.name(), serde_json::to_value(cmd)?, &self.settings))
    }

    fn finish(&self, out: &Path, m: ManifestBuilder) -> Result<()> {
        let manifest = m.build(self.started.elapsed().as_secs_f64())?;
        write_manifest(out, &manifest)?;
        Ok(())
    }

    fn pool(&self) -> Option<&ThreadPool> {
        Some(&self.pool)
    }

    fn run_options(&self, mode: Mode, seed: u64) -> RunOptions {
        RunOptions {
            noise: match mode {
                Mode::Nominal | Mode::Mismatch | Mode::AvgBias => NoiseMode::None,
                Mode::Bias => NoiseMode::Fixed(bias_draws(&self.settings.noise, self.settings.column.n_stages, 1, seed).remove(0)),
                Mode::Extreme => NoiseMode::Extreme,
            },
            noise_spec: self.settings.noise,
            plant_gain: if mode == Mode::Mismatch { MISMATCH_GAIN } else { [1.0, 1.0] },
            seed,
            h: self.settings.h,
            record_every: self.settings.record_every,
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    for p in cli.command.inputs() {
        if !p.is_file() {
            return Err(UsageError(format!("input file {} does not exist", p.display())).into());
        }
    }
    let file = match &cli.config {
        Some(p) if !p.is_file() => return Err(UsageError(format!("config file {} does not exist", p.display())).into()),
        Some(p) => FileConfig::load(p).map_err(|e| UsageError(format!("{e:#}")))?,
        None => FileConfig::default(),
    };
    let env = env_seed().map_err(|e| UsageError(format!("{e:#}")))?;
    let settings = Settings::resolve(&file, cli.command.seed(), env);
    settings.column.validate()?;
    let workers = cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(UsageError("--workers must be at least 1".into()).into());
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
    let ctx = Ctx { settings, pool, started: Instant::now() };
    log::info!("{} with {workers} worker(s)", cli.command.name());
    match &cli.command {
        Command::SteadyState(a) => steady(&ctx, &cli.command, a),
        Command::GenDisturbances(a) => gen(&ctx, &cli.command, a),
        Command::Region(a) => region(&ctx, &cli.command, a),
        Command::Pools(a) => pools(&ctx, &cli.command, a),
        Command::Train(a) => train_cmd(&ctx, &cli.command, a),
        Command::MpcRun(a) => mpc_run(&ctx, &cli.command, a),
        Command::Evaluate(a) => evaluate(&ctx, &cli.command, a),
        Command::Table4(a) => table4(&ctx, &cli.command, a),
        Command::Plot(a) => plot(&ctx, &cli.command, a),
    }
}

fn steady(ctx: &Ctx, cmd: &Command, a: &SteadyStateArgs) -> Result<()> {
    let p = &ctx.settings.column;
    let (u, feed) = (p.nominal_controls(), p.nominal_feed());
    let ss = steady_state(p, &u, &feed)?;
    let res = derivatives(&ss, &u, &feed, p)?.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let x = ss.compositions();
    let n = p.n_stages;
    println!("x_1 = {:.6}", x[0]);
    println!("x_{n} = {:.6}", x[n - 1]);
    println!("residual = {res:.3e}");
    if let Some(out) = &a.out {
        let mut s = String::from("stage,M,x,T\n");
        for (i, (m, xi)) in ss.holdups().iter().zip(x).enumerate() {
            s += &format!("{},{},{},{}\n", i + 1, m, xi, stage_temperature(*xi, p)?);
        }
        write_bytes(out, s.as_bytes())?;
        let mut m = ctx.manifest(cmd)?;
        m.artifacts.push(out.clone());
        m.results = serde_json::json!({ "x_1": x[0], "x_top": x[n - 1], "residual": res });
        ctx.finish(out, m)?;
    }
    Ok(())
}

fn gen(ctx: &Ctx, cmd: &Command, a: &GenArgs) -> Result<()> {
    let s = &ctx.settings;
    let events = a.events.unwrap_or(s.events);
    let seq = generate_disturbance_sequence(s.seed, &DisturbanceRanges::default(), events, s.column.nominal_feed());
    io::write_sequence(&a.out, &seq)?;
    println!("{} events over {} min", seq.events.len(), seq.duration);
    let mut m = ctx.manifest(cmd)?;
    m.seeds.insert("sequence".into(), s.seed);
    m.artifacts.push(a.out.clone());
    m.results = serde_json::json!({ "duration": seq.duration, "events": seq.events.len() });
    ctx.finish(&a.out, m)
}

fn trajectory_csv(traj: &Trajectory<f64>, params: &ColumnParams<f64>) -> Result<String> {
    let mut buf = Vec::new();
    traj.write_csv(&mut buf, params)?;
    Ok(String::from_utf8(buf)?)
}

fn bounds_respected(traj: &Trajectory<f64>, params: &ColumnParams<f64>) -> bool {
    traj.controls.iter().all(|u| u.within_bounds(&params.u_max))
}

fn region(ctx: &Ctx, cmd: &Command, a: &RegionArgs) -> Result<()> {
    let s = &ctx.settings;
    let seq = io::read_sequence(&a.sequence)?;
    let mut mpc = MpcController::new(s.mpc, s.column.clone())?;
    let (data, run) = estimate_operating_region(&seq, &mut mpc, &s.column, s.h)?;
    write_bytes(&a.out, io::region_csv(&data, s.column.n_stages).as_bytes())?;
    let mut m = ctx.manifest(cmd)?;
    m.inputs.push(a.sequence.clone());
    m.artifacts.push(a.out.clone());
    if let Some(q) = &a.quantiles {
        write_bytes(q, io::quantile_csv(&temperature_quantiles(&data)).as_bytes())?;
        m.artifacts.push(q.clone());
    }
    if let Some(t) = &a.traj {
        write_bytes(t, trajectory_csv(&run.trajectory, &s.column)?.as_bytes())?;
        m.artifacts.push(t.clone());
    }
    println!("objective {:.6} ({} solves, {} failures)", run.objective, mpc.solves, mpc.failures);
    m.results = serde_json::json!({
        "objective": run.objective,
        "solves": mpc.solves,
        "failures": mpc.failures,
        "inner_iterations": mpc.inner_iterations,
    });
    ctx.finish(&a.out, m)
}

fn pools(ctx: &Ctx, cmd: &Command, a: &PoolsArgs) -> Result<()> {
    let s = &ctx.settings;
    if a.n == 0 {
        return Err(UsageError("--n must be positive".into()).into());
    }
    let n = s.column.n_stages;
    let region = io::read_region(&a.region, n)?;
    let source = blob_digest(&std::fs::read(&a.region)?);
    let initial = build_initial_pool(&region, a.n, s.seed, &s.column, &source)?;
    let noise = build_noise_pool(&s.noise, n, a.n, s.seed)?;
    let noise_out = a.noise_out.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".noise.csv");
        PathBuf::from(p)
    });
    write_bytes(&a.out, io::initial_pool_csv(&initial, n).as_bytes())?;
    write_bytes(&noise_out, io::noise_pool_csv(&noise, n).as_bytes())?;
    let mut m = ctx.manifest(cmd)?;
    m.seeds.insert("pools".into(), s.seed);
    m.inputs.push(a.region.clone());
    m.artifacts.extend([a.out.clone(), noise_out]);
    ctx.finish(&a.out, m)
}

fn concat_records(a: &TrainRecord, b: &TrainRecord) -> TrainRecord {
    let cat = |x: &[f64], y: &[f64]| x.iter().chain(y).copied().collect::<Vec<_>>();
    TrainRecord {
        objective: cat(&a.objective, &b.objective),
        grad_norm: cat(&a.grad_norm, &b.grad_norm),
        wall_ms: cat(&a.wall_ms, &b.wall_ms),
        final_theta: b.final_theta.clone(),
        selection: b.selection.clone(),
    }
}

fn train_cmd(ctx: &Ctx, cmd: &Command, a: &TrainArgs) -> Result<()> {
    let s = &ctx.settings;
    let n = s.column.n_stages;
    let kind = PolicyKind::from(a.policy);
    let preset = Preset::from(a.preset);
    let initial = io::read_initial_pool(&a.initial, n)?;
    let noise = if kind.training_noise() {
        io::read_noise_pool(&a.noise, n)?
    } else {
        let file = io::read_noise_pool(&a.noise, n)?;
        NoisePool::zeros(file.len(), s.column.measurement_len())
    };
    let mut config = TrainConfig::from_preset(preset, s.seed);
    config.h = s.h;
    if let Some(h) = a.horizon {
        config.t_f = h;
    }
    let defaults = preset.phases();
    let iters = [a.phase_a, a.phase_b];
    config.phases = defaults
        .iter()
        .zip(iters)
        .map(|(p, it)| Phase { iterations: it.unwrap_or(p.iterations), ..*p })
        .filter(|p| p.iterations > 0)
        .collect();
    if config.phases.is_empty() {
        return Err(UsageError("at least one training phase needs iterations".into()).into());
    }
    let spec = kind.spec(&s.column);
    let policy = NeuralPolicy::new(spec.clone(), init_params(&spec, s.seed), s.column.clone())?;
    let pools = TrainingPools { initial: &initial, noise: &noise };
    let (params, record, phase_a_len, pruning) = if kind.regularised() {
        config.elastic_net = Some((s.lambda1, s.lambda2));
        let out = regularized_workflow(&policy, &pools, &config, &s.column, ctx.pool())?;
        let len = out.penalised.objective.len();
        // one-based input positions kept after pruning
        let kept: Vec<usize> = out.selection.kept.iter().map(|i| i + 1).collect();
        (out.params, concat_records(&out.penalised, &out.retrained), Some(len), Some(kept))
    } else {
        let (p, r) = train(&policy, &pools, &config, &s.column, None, ctx.pool())?;
        (p, r, None, None)
    };
    let meta = PolicyMeta {
        name: kind.name().into(),
        seed: s.seed,
        iterations: record.objective.len(),
        training_noise: kind.training_noise(),
        preset: preset.name().into(),
        selected: selected_labels(&spec, &params, n),
    };
    write_bytes(&a.out, &policy::serialize(&params, &spec, &meta)?)?;
    let mut m = ctx.manifest(cmd)?;
    m.seeds.insert("init".into(), s.seed);
    m.seeds.insert("sampling".into(), s.seed);
    m.inputs.extend([a.initial.clone(), a.noise.clone()]);
    m.artifacts.push(a.out.clone());
    if let Some(r) = &a.record {
        write_bytes(r, record.to_csv(a.timings).as_bytes())?;
        m.artifacts.push(r.clone());
    }
    let smooth = moving_average(&record.objective, 50);
    println!("{} iterations, smoothed objective {:.4e}", record.objective.len(), smooth.last().copied().unwrap_or(f64::NAN));
    if kind.regularised() {
        println!("selected: {}", meta.selected.join(" "));
    }
    m.results = serde_json::json!({
        "iterations": record.objective.len(),
        "phase_a_iterations": phase_a_len,
        "kept_after_pruning": pruning,
        "final_smoothed_objective": smooth.last(),
        "selected": meta.selected,
    });
    ctx.finish(&a.out, m)
}

fn mpc_run(ctx: &Ctx, cmd: &Command, a: &MpcRunArgs) -> Result<()> {
    let s = &ctx.settings;
    let seq = io::read_sequence(&a.sequence)?;
    let mut mpc = MpcController::new(s.mpc, s.column.clone())?;
    let mode = if a.mismatch { Mode::Mismatch } else { Mode::Nominal };
    let opts = ctx.run_options(mode, s.seed);
    let run = simulate_closed_loop(EvalController::Mpc(&mut mpc), &seq, &opts, &s.column)?;
    write_bytes(&a.out, trajectory_csv(&run.trajectory, &s.column)?.as_bytes())?;
    let bounds = bounds_respected(&run.trajectory, &s.column);
    println!("objective {:.6} ({} solves, {} failures, bounds respected: {bounds})", run.objective, mpc.solves, mpc.failures);
    let mut m = ctx.manifest(cmd)?;
    m.inputs.push(a.sequence.clone());
    m.artifacts.push(a.out.clone());
    m.results = serde_json::json!({
        "objective": run.objective,
        "bounds_respected": bounds,
        "solves": mpc.solves,
        "failures": mpc.failures,
        "inner_iterations": mpc.inner_iterations,
    });
    ctx.finish(&a.out, m)
}

fn load_policies(paths: &[PathBuf], column: &ColumnParams<f64>) -> Result<Vec<(String, NeuralPolicy<f64>)>> {
    let mut out: Vec<(String, NeuralPolicy<f64>)> = Vec::new();
    for p in paths {
        let name = p.file_stem().and_then(|s| s.to_str()).ok_or_else(|| anyhow!("bad policy path {}", p.display()))?;
        if out.iter().any(|(n, _)| n == name) {
            return Err(UsageError(format!("two policies named {name}")).into());
        }
        let bytes = std::fs::read(p)?;
        let (params, spec, _) = policy::deserialize(&bytes).with_context(|| format!("loading {}", p.display()))?;
        out.push((name.to_string(), NeuralPolicy::new(spec, params, column.clone())?));
    }
    Ok(out)
}

/// Reads a trajectory written by `Trajectory::write_csv`.
pub fn read_trajectory(path: &Path, n: usize) -> Result<Trajectory<f64>> {
    let (header, rows) = io::read_numeric_csv(path)?;
    let idx = |c: &str| header.iter().position(|h| h == c).ok_or_else(|| anyhow!("{}: missing column {c}", path.display()));
    let (t, m1, x1, l, v, c) = (idx("t")?, idx("M_1")?, idx("x_1")?, idx("L_T")?, idx("V_B")?, idx("stage_cost")?);
    if rows.is_empty() {
        bail!("{} has no rows", path.display());
    }
    let h = if rows.len() > 1 { rows[1][t] - rows[0][t] } else { 1.0 };
    let mut traj = Trajectory::with_capacity(rows[0][t], h, 2 * n, rows.len());
    for r in &rows {
        let z: Vec<f64> = r[m1..m1 + n].iter().chain(&r[x1..x1 + n]).copied().collect();
        traj.push(&z, colflux_core::Controls::new(r[l], r[v]), r[c]);
    }
    Ok(traj)
}

fn evaluate(ctx: &Ctx, cmd: &Command, a: &EvaluateArgs) -> Result<()> {
    let s = &ctx.settings;
    let seq: DisturbanceSequence = io::read_sequence(&a.sequence)?;
    let policies = load_policies(&a.policies, &s.column)?;
    let mut m = ctx.manifest(cmd)?;
    m.seeds.insert("noise".into(), s.seed);
    m.inputs.extend(a.policies.iter().cloned());
    m.inputs.push(a.sequence.clone());
    let mut objectives = vec![0.0; policies.len()];
    let mut widths: Vec<Option<f64>> = vec![None; policies.len()];
    if a.mode == Mode::AvgBias {
        let draws = bias_draws(&s.noise, s.column.n_stages, s.bias_draws, s.seed);
        for d in &draws {
            let opts = RunOptions { noise: NoiseMode::Fixed(d.clone()), record_every: usize::MAX, ..ctx.run_options(Mode::Nominal, s.seed) };
            for (o, r) in objectives.iter_mut().zip(evaluate_policies(&policies, &seq, &opts, &s.column, ctx.pool())?) {
                *o += r.objective / draws.len() as f64;
            }
        }
    } else {
        let opts = ctx.run_options(a.mode, s.seed);
        let runs = evaluate_policies(&policies, &seq, &opts, &s.column, ctx.pool())?;
        let reference = a.reference.as_deref().map(|p| read_trajectory(p, s.column.n_stages)).transpose()?;
        if let Some(p) = &a.reference {
            m.inputs.push(p.clone());
        }
        for (i, ((name, pol), run)) in policies.iter().zip(&runs).enumerate() {
            objectives[i] = run.objective;
            let mut csv = trajectory_csv(&run.trajectory, &s.column)?;
            if a.mode == Mode::Nominal && s.envelope_draws > 0 {
                let on = reference.as_ref().unwrap_or(&run.trajectory);
                let env = control_noise_envelope(pol, on, &seq, &s.noise, s.envelope_draws, s.seed);
                widths[i] = Some(env.mean_width());
                if reference.is_none() {
                    csv = io::append_envelope(&csv, &env)?;
                }
            }
            if let Some(dir) = &a.traj_dir {
                let p = dir.join(format!("{name}.csv"));
                write_bytes(&p, csv.as_bytes())?;
                m.artifacts.push(p);
            }
        }
    }
    let mut out = String::from("policy,mode,objective,envelope_width\n");
    let mut results = serde_json::Map::new();
    for (((name, _), o), w) in policies.iter().zip(&objectives).zip(&widths) {
        out += &format!("{name},{},{o},{}\n", a.mode.label(), w.map_or(String::new(), |w| w.to_string()));
        println!("{name:<14} {:<10} {o:.6}", a.mode.label());
        results.insert(name.clone(), serde_json::json!({ "objective": o, "envelope_width": w }));
    }
    write_bytes(&a.out, out.as_bytes())?;
    m.artifacts.insert(0, a.out.clone());
    m.results = serde_json::Value::Object(results);
    ctx.finish(&a.out, m)
}

fn table4(ctx: &Ctx, cmd: &Command, a: &Table4Args) -> Result<()> {
    let s = &ctx.settings;
    let seq = io::read_sequence(&a.sequence)?;
    let policies = load_policies(&a.policies, &s.column)?;
    let mpc = if a.with_mpc {
        let mut mpc = MpcController::new(s.mpc, s.column.clone())?;
        let opts = RunOptions { record_every: usize::MAX, ..ctx.run_options(Mode::Nominal, s.seed) };
        Some(simulate_closed_loop(EvalController::Mpc(&mut mpc), &seq, &opts, &s.column)?.objective)
    } else {
        a.mpc_objective
    };
    let base = ctx.run_options(Mode::Nominal, s.seed);
    let report = run_table4(&policies, mpc, &seq, s.bias_draws, s.seed, &base, &s.column, ctx.pool())?;
    print!("{}", report.render());
    write_bytes(&a.out, report.to_csv().as_bytes())?;
    let mut m = ctx.manifest(cmd)?;
    m.seeds.insert("noise".into(), s.seed);
    m.inputs.extend(a.policies.iter().cloned());
    m.inputs.push(a.sequence.clone());
    m.artifacts.push(a.out.clone());
    m.results = serde_json::to_value(&report)?;
    ctx.finish(&a.out, m)
}

fn plot(ctx: &Ctx, cmd: &Command, a: &PlotArgs) -> Result<()> {
    let p = &ctx.settings.column;
    let (header, rows) = io::read_numeric_csv(&a.traj)?;
    let svg = emit_plot(&header, &rows, a.kind, [p.t_boil_light, p.t_boil_heavy])?;
    write_bytes(&a.out, svg.as_bytes())?;
    let mut m = ctx.manifest(cmd)?;
    m.inputs.push(a.traj.clone());
    m.artifacts.push(a.out.clone());
    ctx.finish(&a.out, m)
}
