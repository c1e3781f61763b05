//! Fixed-step RK4 closed-loop simulation, trapezoid cost quadrature and the
//! discrete adjoint of both.
//!
//! The policy is re-evaluated at every RK stage, so the integrated vector
//! field is `g(z) = f(z, κ(h(z) + η))`. Reverse sweeps recompute each step's
//! stages from stored states; the closed-loop sweep keeps only every K-th
//! state and recomputes one segment at a time.

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::column::{rhs_into, rhs_vjp, temperature_unchecked, ColumnParams, Controls, FeedConditions};
use crate::error::{ModelError, SimError};
use crate::policy::{NeuralPolicy, Tape};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    /// Integration step, min.
    pub h: f64,
    /// Horizon, min.
    pub t_f: f64,
    /// Steps between stored states in the reverse sweep.
    pub checkpoint: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { h: 0.005, t_f: 20.0, checkpoint: 200 }
    }
}

impl SimConfig {
    pub fn with_horizon(t_f: f64) -> Self {
        Self { t_f, ..Self::default() }
    }

    /// Number of steps; `t_f` must be a whole multiple of `h`.
    pub fn steps(&self) -> Result<usize, SimError> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(SimError::Config(format!("step h = {} must be positive", self.h)));
        }
        if !(self.t_f >= 0.0) || self.checkpoint == 0 {
            return Err(SimError::Config("horizon must be non-negative and checkpoint interval positive".into()));
        }
        let n = (self.t_f / self.h).round();
        if (n * self.h - self.t_f).abs() > 1e-9 * self.t_f.max(1.0) {
            return Err(SimError::Config(format!("t_f = {} is not a multiple of h = {}", self.t_f, self.h)));
        }
        Ok(n as usize)
    }
}

/// Quadrature integrand `l(z, u)`.
pub trait RunningCost<T>: Sync {
    fn value(&self, z: &[T], u: &Controls<T>) -> T;
    /// Accumulates `scale · ∂l/∂z` into `z_bar`; returns `scale · ∂l/∂u`.
    fn vjp(&self, z: &[T], u: &Controls<T>, scale: T, z_bar: &mut [T]) -> [T; 2];
}

/// `(x_1 − x_b)² + (x_NT − x_t)² + w[(V_B − V_B0)² + (L_T − L_T0)²]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackingCost<T> {
    pub n_stages: usize,
    pub x_bottom: T,
    pub x_top: T,
    pub control_weight: T,
    pub u_ref: [T; 2],
}

impl<T: Scalar> TrackingCost<T> {
    pub fn standard(params: &ColumnParams<T>) -> Self {
        Self {
            n_stages: params.n_stages,
            x_bottom: T::lit(0.01),
            x_top: T::lit(0.99),
            control_weight: T::lit(0.001),
            u_ref: params.nominal_controls().to_array(),
        }
    }
}

impl<T: Scalar> RunningCost<T> for TrackingCost<T> {
    #[inline]
    fn value(&self, z: &[T], u: &Controls<T>) -> T {
        let n = self.n_stages;
        let eb = z[n] - self.x_bottom;
        let et = z[2 * n - 1] - self.x_top;
        let dl = u.reflux - self.u_ref[0];
        let dv = u.boilup - self.u_ref[1];
        eb * eb + et * et + self.control_weight * (dv * dv + dl * dl)
    }

    #[inline]
    fn vjp(&self, z: &[T], u: &Controls<T>, scale: T, z_bar: &mut [T]) -> [T; 2] {
        let n = self.n_stages;
        let two = T::lit(2.0);
        z_bar[n] = z_bar[n] + scale * two * (z[n] - self.x_bottom);
        z_bar[2 * n - 1] = z_bar[2 * n - 1] + scale * two * (z[2 * n - 1] - self.x_top);
        let c = scale * two * self.control_weight;
        [c * (u.reflux - self.u_ref[0]), c * (u.boilup - self.u_ref[1])]
    }
}

/// Integrand identically one.
#[derive(Clone, Copy, Debug, Default)]
pub struct UnitCost;

impl<T: Scalar> RunningCost<T> for UnitCost {
    fn value(&self, _: &[T], _: &Controls<T>) -> T {
        T::one()
    }

    fn vjp(&self, _: &[T], _: &Controls<T>, _: T, _: &mut [T]) -> [T; 2] {
        [T::zero(); 2]
    }
}

/// Trapezoid weight of grid point `k` out of `0..=n`.
#[inline]
fn trapezoid_weight<T: Scalar>(k: usize, n: usize) -> T {
    if n == 0 {
        T::zero()
    } else if k == 0 || k == n {
        T::lit(0.5)
    } else {
        T::one()
    }
}

/// A vector field evaluated at the four RK stages of a step.
pub trait Dynamics<T> {
    fn eval(&mut self, stage: usize, z: &[T], out: &mut [T]) -> Result<(), ModelError>;
}

/// A vector field that can also pull an adjoint back through the stage
/// most recently evaluated with the same index.
pub trait AdjointDynamics<T>: Dynamics<T> {
    fn vjp(&mut self, stage: usize, z: &[T], adj: &[T], z_bar: &mut [T]) -> Result<(), ModelError>;
}

impl<T, F> Dynamics<T> for F
where
    F: FnMut(usize, &[T], &mut [T]) -> Result<(), ModelError>,
{
    fn eval(&mut self, stage: usize, z: &[T], out: &mut [T]) -> Result<(), ModelError> {
        self(stage, z, out)
    }
}

/// Scratch buffers for one RK4 step and its reverse.
#[derive(Clone, Debug)]
pub struct Rk4Workspace<T> {
    stage: [Vec<T>; 4],
    k: [Vec<T>; 4],
    k_bar: [Vec<T>; 4],
    s_bar: Vec<T>,
    next: Vec<T>,
}

impl<T: Scalar> Rk4Workspace<T> {
    pub fn new(dim: usize) -> Self {
        let v = || vec![T::zero(); dim];
        Self {
            stage: [v(), v(), v(), v()],
            k: [v(), v(), v(), v()],
            k_bar: [v(), v(), v(), v()],
            s_bar: v(),
            next: v(),
        }
    }
}

/// One classical RK4 step of `dyn_` from `z` into `out`.
pub fn rk4_step<T: Scalar, D: Dynamics<T> + ?Sized>(
    z: &[T],
    h: T,
    ws: &mut Rk4Workspace<T>,
    out: &mut [T],
    dyn_: &mut D,
) -> Result<(), ModelError> {
    let half = h * T::lit(0.5);
    let Rk4Workspace { stage, k, .. } = ws;
    stage[0].copy_from_slice(z);
    dyn_.eval(0, &stage[0], &mut k[0])?;
    for i in 0..z.len() {
        stage[1][i] = z[i] + half * k[0][i];
    }
    dyn_.eval(1, &stage[1], &mut k[1])?;
    for i in 0..z.len() {
        stage[2][i] = z[i] + half * k[1][i];
    }
    dyn_.eval(2, &stage[2], &mut k[2])?;
    for i in 0..z.len() {
        stage[3][i] = z[i] + h * k[2][i];
    }
    dyn_.eval(3, &stage[3], &mut k[3])?;
    let sixth = h / T::lit(6.0);
    let two = T::lit(2.0);
    for i in 0..z.len() {
        out[i] = z[i] + sixth * (k[0][i] + two * k[1][i] + two * k[2][i] + k[3][i]);
    }
    Ok(())
}

/// Pulls `lam_out` (adjoint of the step result) back to `z_bar` (overwritten),
/// recomputing the step's stages first.
pub fn rk4_step_vjp<T: Scalar, D: AdjointDynamics<T> + ?Sized>(
    z: &[T],
    h: T,
    ws: &mut Rk4Workspace<T>,
    lam_out: &[T],
    z_bar: &mut [T],
    dyn_: &mut D,
) -> Result<(), ModelError> {
    let mut next = std::mem::take(&mut ws.next);
    let res = rk4_step(z, h, ws, &mut next, dyn_);
    ws.next = next;
    res?;
    let half = h * T::lit(0.5);
    let sixth = h / T::lit(6.0);
    let third = h / T::lit(3.0);
    let Rk4Workspace { stage, k_bar, s_bar, .. } = ws;
    for i in 0..z.len() {
        let l = lam_out[i];
        k_bar[0][i] = sixth * l;
        k_bar[1][i] = third * l;
        k_bar[2][i] = third * l;
        k_bar[3][i] = sixth * l;
        z_bar[i] = l;
    }
    // Stage s was formed as z + c_s k_{s-1}.
    let coupling = [T::zero(), half, half, h];
    for s in (0..4).rev() {
        s_bar.iter_mut().for_each(|v| *v = T::zero());
        dyn_.vjp(s, &stage[s], &k_bar[s], s_bar)?;
        for i in 0..z.len() {
            z_bar[i] = z_bar[i] + s_bar[i];
        }
        if s > 0 {
            for i in 0..z.len() {
                k_bar[s - 1][i] = k_bar[s - 1][i] + coupling[s] * s_bar[i];
            }
        }
    }
    Ok(())
}

/// Feedback law evaluated on the (true) state; measurement noise, if any, is
/// the controller's business.
pub trait Controller<T> {
    fn control(&mut self, z: &[T], feed: &FeedConditions<T>) -> Controls<T>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantController<T>(pub Controls<T>);

impl<T: Scalar> Controller<T> for ConstantController<T> {
    fn control(&mut self, _: &[T], _: &FeedConditions<T>) -> Controls<T> {
        self.0
    }
}

/// A neural policy fed noisy measurements with noise vector `eta`.
#[derive(Clone, Debug)]
pub struct PolicyController<'a, T> {
    pub policy: &'a NeuralPolicy<T>,
    /// Additive noise on all measurement slots.
    pub eta: Vec<T>,
    tape: Tape<T>,
}

impl<'a, T: Scalar> PolicyController<'a, T> {
    pub fn new(policy: &'a NeuralPolicy<T>, eta: Vec<T>) -> Result<Self, SimError> {
        let want = policy.column.measurement_len();
        if eta.len() != want {
            return Err(SimError::PolicyShape(format!("noise vector has {} entries, expected {want}", eta.len())));
        }
        Ok(Self { policy, eta, tape: Tape::new(&policy.spec) })
    }
}

impl<T: Scalar> Controller<T> for PolicyController<'_, T> {
    fn control(&mut self, z: &[T], feed: &FeedConditions<T>) -> Controls<T> {
        self.policy.evaluate(z, feed, &self.eta, &mut self.tape)
    }
}

/// Column under a controller; the plant receives `gain ∘ u`.
pub struct ClosedLoop<'a, T, C: ?Sized> {
    pub controller: &'a mut C,
    pub feed: FeedConditions<T>,
    pub params: &'a ColumnParams<T>,
    pub gain: [T; 2],
}

impl<T: Scalar, C: Controller<T> + ?Sized> Dynamics<T> for ClosedLoop<'_, T, C> {
    fn eval(&mut self, _: usize, z: &[T], out: &mut [T]) -> Result<(), ModelError> {
        let u = self.controller.control(z, &self.feed);
        let plant = Controls::new(self.gain[0] * u.reflux, self.gain[1] * u.boilup);
        rhs_into(z, &plant, &self.feed, self.params, out)
    }
}

/// One RK4 step of the column under `controller`.
pub fn step_rk4<T: Scalar, C: Controller<T>>(
    z: &[T],
    controller: &mut C,
    feed: &FeedConditions<T>,
    params: &ColumnParams<T>,
    h: T,
) -> Result<Vec<T>, ModelError> {
    let mut ws = Rk4Workspace::new(z.len());
    let mut out = vec![T::zero(); z.len()];
    let mut cl = ClosedLoop { controller, feed: *feed, params, gain: [T::one(); 2] };
    rk4_step(z, h, &mut ws, &mut out, &mut cl)?;
    Ok(out)
}

/// States, controls and stage cost on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub t0: f64,
    pub h: f64,
    pub dim: usize,
    /// Row-major, one state per grid point.
    pub states: Vec<T>,
    pub controls: Vec<Controls<T>>,
    pub stage_cost: Vec<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn with_capacity(t0: f64, h: f64, dim: usize, points: usize) -> Self {
        Self {
            t0,
            h,
            dim,
            states: Vec::with_capacity(points * dim),
            controls: Vec::with_capacity(points),
            stage_cost: Vec::with_capacity(points),
        }
    }

    pub fn push(&mut self, z: &[T], u: Controls<T>, cost: T) {
        self.states.extend_from_slice(z);
        self.controls.push(u);
        self.stage_cost.push(cost);
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.h
    }

    pub fn state(&self, k: usize) -> &[T] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    /// Every `every`-th grid point.
    pub fn decimate(&self, every: usize) -> Self {
        let every = every.max(1);
        let mut out = Self::with_capacity(self.t0, self.h * every as f64, self.dim, self.len() / every + 1);
        for k in (0..self.len()).step_by(every) {
            out.push(self.state(k), self.controls[k], self.stage_cost[k]);
        }
        out
    }

    /// Trapezoid integral of the stored stage cost over grid points with `t ≥ t_start`.
    pub fn integral_from(&self, t_start: f64) -> T {
        let first = ((t_start - self.t0) / self.h - 1e-9).ceil().max(0.0) as usize;
        let mut acc = T::zero();
        for k in first.max(1)..self.len() {
            if k > first {
                acc = acc + T::lit(0.5 * self.h) * (self.stage_cost[k - 1] + self.stage_cost[k]);
            }
        }
        acc
    }

    /// CSV with columns `t, M_1..M_N, x_1..x_N, T_1..T_N, L_T, V_B, stage_cost`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W, params: &ColumnParams<T>) -> std::io::Result<()> {
        let n = self.dim / 2;
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("M_{i}")));
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.extend((1..=n).map(|i| format!("T_{i}")));
        header.extend(["L_T", "V_B", "stage_cost"].map(String::from));
        writeln!(w, "{}", header.join(","))?;
        let mut line = String::new();
        for k in 0..self.len() {
            use std::fmt::Write as _;
            line.clear();
            let _ = write!(line, "{}", self.time(k));
            let z = self.state(k);
            for v in z {
                let _ = write!(line, ",{}", v.to_f64_lossy());
            }
            for x in &z[n..] {
                let _ = write!(line, ",{}", temperature_unchecked(*x, params).to_f64_lossy());
            }
            let u = self.controls[k];
            let _ = write!(
                line,
                ",{},{},{}",
                u.reflux.to_f64_lossy(),
                u.boilup.to_f64_lossy(),
                self.stage_cost[k].to_f64_lossy()
            );
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// One training trajectory: initial state, feed and noise held constant, and its weight.
#[derive(Clone, Debug, PartialEq)]
pub struct CostSample<T> {
    pub z0: Vec<T>,
    pub feed: FeedConditions<T>,
    pub eta: Vec<T>,
    pub weight: T,
}

impl<T: Scalar> CostSample<T> {
    pub fn validate(&self, params: &ColumnParams<T>) -> Result<(), SimError> {
        if self.z0.len() != params.state_len() {
            return Err(ModelError::Shape { expected: params.state_len(), got: self.z0.len() }.into());
        }
        if self.eta.len() != params.measurement_len() {
            return Err(ModelError::Shape { expected: params.measurement_len(), got: self.eta.len() }.into());
        }
        if !(self.weight > T::zero()) {
            return Err(SimError::Config("sample weight must be positive".into()));
        }
        Ok(())
    }
}

fn integration_error(step: usize, h: f64) -> impl FnOnce(ModelError) -> SimError {
    move |source| SimError::Integration { time: step as f64 * h, source }
}

/// Simulates `controller` from `z0` with fixed feed and returns the trajectory and its cost.
pub fn rollout<T: Scalar, C: Controller<T>, L: RunningCost<T>>(
    z0: &[T],
    feed: &FeedConditions<T>,
    controller: &mut C,
    config: &SimConfig,
    params: &ColumnParams<T>,
    cost: &L,
) -> Result<(Trajectory<T>, T), SimError> {
    let n = config.steps()?;
    if z0.len() != params.state_len() {
        return Err(ModelError::Shape { expected: params.state_len(), got: z0.len() }.into());
    }
    let dim = z0.len();
    let h = T::lit(config.h);
    let mut traj = Trajectory::with_capacity(0.0, config.h, dim, n + 1);
    let mut ws = Rk4Workspace::new(dim);
    let mut z = z0.to_vec();
    let mut next = vec![T::zero(); dim];
    let mut j = T::zero();
    for k in 0..=n {
        let u = controller.control(&z, feed);
        let l = cost.value(&z, &u);
        traj.push(&z, u, l);
        j = j + trapezoid_weight::<T>(k, n) * h * l;
        if k == n {
            break;
        }
        let mut cl = ClosedLoop { controller: &mut *controller, feed: *feed, params, gain: [T::one(); 2] };
        rk4_step(&z, h, &mut ws, &mut next, &mut cl).map_err(integration_error(k, config.h))?;
        std::mem::swap(&mut z, &mut next);
    }
    Ok((traj, j))
}

/// Closed-loop policy dynamics with reverse-mode support. Parameter
/// gradients accumulate into `grad`.
struct PolicyDynamics<'a, T> {
    policy: &'a NeuralPolicy<T>,
    feed: &'a FeedConditions<T>,
    eta: &'a [T],
    params: &'a ColumnParams<T>,
    tapes: [Tape<T>; 4],
    controls: [Controls<T>; 4],
    input_bar: Vec<T>,
    grad: Vec<T>,
}

impl<T: Scalar> Dynamics<T> for PolicyDynamics<'_, T> {
    #[inline]
    fn eval(&mut self, stage: usize, z: &[T], out: &mut [T]) -> Result<(), ModelError> {
        let u = self.policy.evaluate(z, self.feed, self.eta, &mut self.tapes[stage]);
        self.controls[stage] = u;
        rhs_into(z, &u, self.feed, self.params, out)
    }
}

impl<T: Scalar> AdjointDynamics<T> for PolicyDynamics<'_, T> {
    fn vjp(&mut self, stage: usize, z: &[T], adj: &[T], z_bar: &mut [T]) -> Result<(), ModelError> {
        let u_bar = rhs_vjp(z, &self.controls[stage], self.feed, self.params, adj, z_bar)?;
        self.pull_controls(stage, z, u_bar, z_bar);
        Ok(())
    }
}

impl<T: Scalar> PolicyDynamics<'_, T> {
    /// Back-propagates a control adjoint through the policy evaluation recorded in `tapes[slot]`.
    fn pull_controls(&mut self, slot: usize, z: &[T], u_bar: [T; 2], z_bar: &mut [T]) {
        self.input_bar.iter_mut().for_each(|v| *v = T::zero());
        self.policy.params.backward(&self.policy.spec, &mut self.tapes[slot], u_bar, &mut self.grad, &mut self.input_bar);
        self.policy.inputs_to_state(z, self.feed, &self.input_bar, z_bar);
    }
}

/// Cost of one sample and its exact gradient with respect to the policy's `θ̄`.
pub fn cost_gradient<T: Scalar, L: RunningCost<T>>(
    sample: &CostSample<T>,
    policy: &NeuralPolicy<T>,
    config: &SimConfig,
    params: &ColumnParams<T>,
    cost: &L,
) -> Result<(T, Vec<T>), SimError> {
    let n = config.steps()?;
    sample.validate(params)?;
    let dim = sample.z0.len();
    let h = T::lit(config.h);
    let kc = config.checkpoint;
    let mut d = PolicyDynamics {
        policy,
        feed: &sample.feed,
        eta: &sample.eta,
        params,
        tapes: std::array::from_fn(|_| Tape::new(&policy.spec)),
        controls: [Controls::new(T::zero(), T::zero()); 4],
        input_bar: vec![T::zero(); policy.spec.n_inputs()],
        grad: vec![T::zero(); policy.spec.param_len()],
    };
    let mut ws = Rk4Workspace::new(dim);

    // Forward sweep: cost and checkpoints.
    let mut checkpoints: Vec<Vec<T>> = Vec::with_capacity(n / kc + 1);
    let mut z = sample.z0.clone();
    let mut next = vec![T::zero(); dim];
    let mut cost_tape = Tape::new(&policy.spec);
    let mut j = T::zero();
    for k in 0..=n {
        if k % kc == 0 {
            checkpoints.push(z.clone());
        }
        let u = policy.evaluate(&z, &sample.feed, &sample.eta, &mut cost_tape);
        j = j + trapezoid_weight::<T>(k, n) * h * cost.value(&z, &u);
        if k == n {
            break;
        }
        rk4_step(&z, h, &mut ws, &mut next, &mut d).map_err(integration_error(k, config.h))?;
        std::mem::swap(&mut z, &mut next);
    }

    // Reverse sweep, one checkpoint segment at a time.
    let mut lam = vec![T::zero(); dim];
    let mut lam_prev = vec![T::zero(); dim];
    let mut seg = vec![T::zero(); (kc + 1) * dim];
    let add_cost_term = |d: &mut PolicyDynamics<'_, T>, z: &[T], k: usize, lam: &mut [T]| {
        // Stage 0's tape is free between steps.
        let u = d.policy.evaluate(z, d.feed, d.eta, &mut d.tapes[0]);
        let u_bar = cost.vjp(z, &u, trapezoid_weight::<T>(k, n) * h, lam);
        d.pull_controls(0, z, u_bar, lam);
    };
    for (s, cp) in checkpoints.iter().enumerate().rev() {
        let start = s * kc;
        let end = (start + kc).min(n);
        if start == end {
            continue;
        }
        seg[..dim].copy_from_slice(cp);
        for k in start..end {
            let i = k - start;
            let (done, rest) = seg.split_at_mut((i + 1) * dim);
            rk4_step(&done[i * dim..], h, &mut ws, &mut rest[..dim], &mut d).map_err(integration_error(k, config.h))?;
        }
        for k in (start + 1..=end).rev() {
            let i = k - start;
            add_cost_term(&mut d, &seg[i * dim..(i + 1) * dim], k, &mut lam);
            let zp = &seg[(i - 1) * dim..i * dim];
            rk4_step_vjp(zp, h, &mut ws, &lam, &mut lam_prev, &mut d).map_err(integration_error(k - 1, config.h))?;
            std::mem::swap(&mut lam, &mut lam_prev);
        }
    }
    if n > 0 {
        add_cost_term(&mut d, &sample.z0, 0, &mut lam);
    }
    Ok((j, d.grad))
}

/// Weighted sum of sample costs and gradients. Samples may be evaluated on
/// `pool`; the reduction always runs in sample order.
pub fn batch_cost_gradient<T: Scalar, L: RunningCost<T>>(
    samples: &[CostSample<T>],
    policy: &NeuralPolicy<T>,
    config: &SimConfig,
    params: &ColumnParams<T>,
    cost: &L,
    pool: Option<&ThreadPool>,
) -> Result<(T, Vec<T>), SimError> {
    if samples.is_empty() {
        return Err(SimError::Config("batch needs at least one sample".into()));
    }
    let eval = |(i, s): (usize, &CostSample<T>)| {
        cost_gradient(s, policy, config, params, cost).map_err(|e| SimError::Sample { index: i, source: Box::new(e) })
    };
    let results: Vec<_> = match pool {
        Some(p) => p.install(|| samples.par_iter().enumerate().map(eval).collect()),
        None => samples.iter().enumerate().map(eval).collect(),
    };
    let mut phi = T::zero();
    let mut grad = vec![T::zero(); policy.spec.param_len()];
    for (r, s) in results.into_iter().zip(samples) {
        let (j, g) = r?;
        phi = phi + s.weight * j;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a = *a + s.weight * *b;
        }
    }
    Ok((phi, grad))
}

/// Piecewise-constant open-loop controls, each held for `steps_per_interval` steps.
struct OpenLoopDynamics<'a, T> {
    u: Controls<T>,
    feed: &'a FeedConditions<T>,
    params: &'a ColumnParams<T>,
    u_bar: [T; 2],
}

impl<T: Scalar> Dynamics<T> for OpenLoopDynamics<'_, T> {
    #[inline]
    fn eval(&mut self, _: usize, z: &[T], out: &mut [T]) -> Result<(), ModelError> {
        rhs_into(z, &self.u, self.feed, self.params, out)
    }
}

impl<T: Scalar> AdjointDynamics<T> for OpenLoopDynamics<'_, T> {
    fn vjp(&mut self, _: usize, z: &[T], adj: &[T], z_bar: &mut [T]) -> Result<(), ModelError> {
        let ub = rhs_vjp(z, &self.u, self.feed, self.params, adj, z_bar)?;
        self.u_bar[0] = self.u_bar[0] + ub[0];
        self.u_bar[1] = self.u_bar[1] + ub[1];
        Ok(())
    }
}

/// Reusable buffers for open-loop cost evaluations.
#[derive(Clone, Debug)]
pub struct OpenLoopWorkspace<T> {
    rk: Rk4Workspace<T>,
    states: Vec<T>,
    lam: Vec<T>,
    lam_prev: Vec<T>,
}

impl<T: Scalar> OpenLoopWorkspace<T> {
    pub fn new(dim: usize) -> Self {
        Self { rk: Rk4Workspace::new(dim), states: Vec::new(), lam: vec![T::zero(); dim], lam_prev: vec![T::zero(); dim] }
    }
}

/// Cost of an open-loop control sequence; with `grad` set, also its gradient
/// with respect to each interval's `[L_T, V_B]`. The stage cost at an interval
/// boundary uses the control of the interval that starts there; the final
/// point uses the last interval's control.
#[allow(clippy::too_many_arguments)]
pub fn open_loop_cost<T: Scalar, L: RunningCost<T>>(
    z0: &[T],
    feed: &FeedConditions<T>,
    controls: &[Controls<T>],
    steps_per_interval: usize,
    h: T,
    params: &ColumnParams<T>,
    cost: &L,
    ws: &mut OpenLoopWorkspace<T>,
    grad: Option<&mut [[T; 2]]>,
) -> Result<T, SimError> {
    let dim = z0.len();
    let m = steps_per_interval;
    let n = controls.len() * m;
    let interval = |k: usize| (k / m.max(1)).min(controls.len().saturating_sub(1));
    if controls.is_empty() || m == 0 {
        return Ok(T::zero());
    }
    let hf = h.to_f64_lossy();
    let mut d = OpenLoopDynamics { u: controls[0], feed, params, u_bar: [T::zero(); 2] };
    ws.states.clear();
    ws.states.extend_from_slice(z0);
    ws.states.resize((n + 1) * dim, T::zero());
    let mut j = T::zero();
    for k in 0..=n {
        let u = controls[interval(k)];
        j = j + trapezoid_weight::<T>(k, n) * h * cost.value(&ws.states[k * dim..(k + 1) * dim], &u);
        if k == n {
            break;
        }
        d.u = u;
        let (done, rest) = ws.states.split_at_mut((k + 1) * dim);
        rk4_step(&done[k * dim..], h, &mut ws.rk, &mut rest[..dim], &mut d).map_err(integration_error(k, hf))?;
    }
    let Some(grad) = grad else { return Ok(j) };
    grad.iter_mut().for_each(|g| *g = [T::zero(); 2]);
    ws.lam.iter_mut().for_each(|v| *v = T::zero());
    for k in (0..=n).rev() {
        let z = &ws.states[k * dim..(k + 1) * dim];
        let iv = interval(k);
        let ub = cost.vjp(z, &controls[iv], trapezoid_weight::<T>(k, n) * h, &mut ws.lam);
        grad[iv][0] = grad[iv][0] + ub[0];
        grad[iv][1] = grad[iv][1] + ub[1];
        if k == 0 {
            break;
        }
        let ip = interval(k - 1);
        d.u = controls[ip];
        d.u_bar = [T::zero(); 2];
        let zp = &ws.states[(k - 1) * dim..k * dim];
        rk4_step_vjp(zp, h, &mut ws.rk, &ws.lam, &mut ws.lam_prev, &mut d).map_err(integration_error(k - 1, hf))?;
        std::mem::swap(&mut ws.lam, &mut ws.lam_prev);
        grad[ip][0] = grad[ip][0] + d.u_bar[0];
        grad[ip][1] = grad[ip][1] + d.u_bar[1];
    }
    Ok(j)
}

/// Final state of an open-loop run (used to advance a plant by one interval).
pub fn open_loop_final<T: Scalar>(
    z0: &[T],
    feed: &FeedConditions<T>,
    u: Controls<T>,
    steps: usize,
    h: T,
    params: &ColumnParams<T>,
) -> Result<Vec<T>, ModelError> {
    let mut ws = Rk4Workspace::new(z0.len());
    let mut d = OpenLoopDynamics { u, feed, params, u_bar: [T::zero(); 2] };
    let mut z = z0.to_vec();
    let mut next = z.clone();
    for _ in 0..steps {
        rk4_step(&z, h, &mut ws, &mut next, &mut d)?;
        std::mem::swap(&mut z, &mut next);
    }
    Ok(z)
}
