//! Binary distillation column with constant molar flows, linearised liquid
//! dynamics and LV level control.
//!
//! Stages are numbered from the bottom: stage 1 is the reboiler and stage
//! `N_T` the total condenser. Internally all indices are zero-based, and a
//! state is stored as the flat vector `[M_1..M_NT, x_1..x_NT]`.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::scalar::Scalar;

/// Holdups below this value (kmol) are treated as an integration failure.
pub const MIN_HOLDUP: f64 = 1e-6;

const DOMAIN_TOL: f64 = 1e-12;

/// Column constants. JSON keys follow the customary symbols (`N_T`, `alpha`, `tau_L`, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct ColumnParams<T> {
    #[serde(rename = "N_T")]
    pub n_stages: usize,
    /// One-based feed stage.
    #[serde(rename = "N_F")]
    pub feed_stage: usize,
    #[serde(rename = "F0")]
    pub feed_rate: T,
    #[serde(rename = "zF0")]
    pub feed_composition: T,
    #[serde(rename = "qF0")]
    pub feed_liquid_fraction: T,
    pub alpha: T,
    #[serde(rename = "tau_L")]
    pub tau_l: T,
    #[serde(rename = "lambda_K2")]
    pub lambda_k2: T,
    #[serde(rename = "M0")]
    pub holdup_nominal: T,
    /// Nominal liquid flow leaving stages at or below the feed.
    #[serde(rename = "L0_below")]
    pub liquid_below: T,
    /// Nominal liquid flow leaving stages above the feed.
    #[serde(rename = "L0_above")]
    pub liquid_above: T,
    #[serde(rename = "V0")]
    pub vapour_nominal: T,
    #[serde(rename = "T_bL")]
    pub t_boil_light: T,
    #[serde(rename = "T_bH")]
    pub t_boil_heavy: T,
    #[serde(rename = "K_D")]
    pub k_distillate: T,
    #[serde(rename = "K_B")]
    pub k_bottoms: T,
    #[serde(rename = "D0")]
    pub distillate_nominal: T,
    #[serde(rename = "B0")]
    pub bottoms_nominal: T,
    /// Upper bounds on `[L_T, V_B]`.
    pub u_max: [T; 2],
}

impl<T: Scalar> Default for ColumnParams<T> {
    fn default() -> Self {
        let c = T::lit;
        Self {
            n_stages: 25,
            feed_stage: 13,
            feed_rate: c(1.0),
            feed_composition: c(0.5),
            feed_liquid_fraction: c(1.0),
            alpha: c(1.75),
            tau_l: c(0.063),
            lambda_k2: c(0.0),
            holdup_nominal: c(0.5),
            liquid_below: c(3.564),
            liquid_above: c(2.564),
            vapour_nominal: c(3.065),
            t_boil_light: c(341.9),
            t_boil_heavy: c(357.4),
            k_distillate: c(10.0),
            k_bottoms: c(10.0),
            distillate_nominal: c(0.5),
            bottoms_nominal: c(0.5),
            u_max: [c(2.75), c(3.25)],
        }
    }
}

impl<T: Scalar> ColumnParams<T> {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidParams(m.to_string()));
        if self.n_stages < 3 {
            return bad("N_T must be at least 3");
        }
        if self.feed_stage <= 1 || self.feed_stage >= self.n_stages {
            return bad("N_F must satisfy 1 < N_F < N_T");
        }
        if self.alpha <= T::one() {
            return bad("alpha must exceed 1");
        }
        if self.t_boil_heavy <= self.t_boil_light {
            return bad("T_bH must exceed T_bL");
        }
        let positive = [
            self.feed_rate,
            self.tau_l,
            self.holdup_nominal,
            self.liquid_below,
            self.liquid_above,
            self.vapour_nominal,
            self.distillate_nominal,
            self.bottoms_nominal,
            self.u_max[0],
            self.u_max[1],
        ];
        if positive.iter().any(|v| !(*v > T::zero())) {
            return bad("flows, holdups, tau_L and u_max must be positive");
        }
        Ok(())
    }

    /// Number of state variables (`2 N_T`).
    pub fn state_len(&self) -> usize {
        2 * self.n_stages
    }

    /// Number of candidate measurements (`N_T + 5`).
    pub fn measurement_len(&self) -> usize {
        self.n_stages + 5
    }

    /// Nominal controls: reflux equal to the nominal rectifying liquid flow, boilup equal to `V0`.
    pub fn nominal_controls(&self) -> Controls<T> {
        Controls::new(self.liquid_above, self.vapour_nominal)
    }

    pub fn nominal_feed(&self) -> FeedConditions<T> {
        FeedConditions::new(self.feed_rate, self.feed_composition, self.feed_liquid_fraction)
    }

    fn feed_index(&self) -> usize {
        self.feed_stage - 1
    }

    #[inline]
    fn nominal_liquid(&self, k: usize) -> T {
        if k <= self.feed_index() {
            self.liquid_below
        } else {
            self.liquid_above
        }
    }

    pub fn boiling_span(&self) -> T {
        self.t_boil_heavy - self.t_boil_light
    }

    /// Converts to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ColumnParams<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        ColumnParams {
            n_stages: self.n_stages,
            feed_stage: self.feed_stage,
            feed_rate: c(self.feed_rate),
            feed_composition: c(self.feed_composition),
            feed_liquid_fraction: c(self.feed_liquid_fraction),
            alpha: c(self.alpha),
            tau_l: c(self.tau_l),
            lambda_k2: c(self.lambda_k2),
            holdup_nominal: c(self.holdup_nominal),
            liquid_below: c(self.liquid_below),
            liquid_above: c(self.liquid_above),
            vapour_nominal: c(self.vapour_nominal),
            t_boil_light: c(self.t_boil_light),
            t_boil_heavy: c(self.t_boil_heavy),
            k_distillate: c(self.k_distillate),
            k_bottoms: c(self.k_bottoms),
            distillate_nominal: c(self.distillate_nominal),
            bottoms_nominal: c(self.bottoms_nominal),
            u_max: [c(self.u_max[0]), c(self.u_max[1])],
        }
    }
}

/// Per-stage holdups and light-component liquid mole fractions, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnState<T> {
    z: Vec<T>,
}

impl<T: Scalar> ColumnState<T> {
    pub fn from_flat(z: Vec<T>) -> Result<Self, ModelError> {
        if !z.len().is_multiple_of(2) || z.len() < 6 {
            return Err(ModelError::Shape { expected: 2 * (z.len() / 2).max(3), got: z.len() });
        }
        Ok(Self { z })
    }

    pub fn from_parts(holdups: &[T], compositions: &[T]) -> Result<Self, ModelError> {
        if holdups.len() != compositions.len() {
            return Err(ModelError::Shape { expected: holdups.len(), got: compositions.len() });
        }
        let mut z = holdups.to_vec();
        z.extend_from_slice(compositions);
        Self::from_flat(z)
    }

    /// Equimolar start-up state: `x_i = 0.5` and nominal holdups on every stage.
    pub fn equimolar(params: &ColumnParams<T>) -> Self {
        let n = params.n_stages;
        let mut z = vec![params.holdup_nominal; n];
        z.extend(std::iter::repeat_n(T::lit(0.5), n));
        Self { z }
    }

    pub fn n_stages(&self) -> usize {
        self.z.len() / 2
    }

    pub fn holdups(&self) -> &[T] {
        &self.z[..self.n_stages()]
    }

    pub fn compositions(&self) -> &[T] {
        &self.z[self.n_stages()..]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.z
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.z
    }

    pub fn into_vec(self) -> Vec<T> {
        self.z
    }

    /// Checks `M > 0` and `x` in `[0, 1]`.
    pub fn validate(&self) -> Result<(), ModelError> {
        for (k, m) in self.holdups().iter().enumerate() {
            if !(*m > T::zero()) {
                return Err(ModelError::Singular { stage: k + 1, holdup: m.to_f64_lossy() });
            }
        }
        for x in self.compositions() {
            check_fraction(*x)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedConditions<T> {
    /// `F`, kmol/min.
    pub rate: T,
    /// `z_F`.
    pub composition: T,
    /// `q_F`.
    pub liquid_fraction: T,
}

impl<T: Scalar> FeedConditions<T> {
    pub fn new(rate: T, composition: T, liquid_fraction: T) -> Self {
        Self { rate, composition, liquid_fraction }
    }

    pub fn cast<U: Scalar>(&self) -> FeedConditions<U> {
        FeedConditions {
            rate: U::lit(self.rate.to_f64_lossy()),
            composition: U::lit(self.composition.to_f64_lossy()),
            liquid_fraction: U::lit(self.liquid_fraction.to_f64_lossy()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Controls<T> {
    /// `L_T`, kmol/min.
    pub reflux: T,
    /// `V_B`, kmol/min.
    pub boilup: T,
}

impl<T: Scalar> Controls<T> {
    pub fn new(reflux: T, boilup: T) -> Self {
        Self { reflux, boilup }
    }

    pub fn to_array(self) -> [T; 2] {
        [self.reflux, self.boilup]
    }

    pub fn from_array(u: [T; 2]) -> Self {
        Self::new(u[0], u[1])
    }

    /// `0 <= L_T <= u_max[0]` and `0 <= V_B <= u_max[1]`.
    pub fn within_bounds(&self, u_max: &[T; 2]) -> bool {
        self.reflux >= T::zero()
            && self.reflux <= u_max[0]
            && self.boilup >= T::zero()
            && self.boilup <= u_max[1]
    }
}

/// Internal flows of the column at a given state.
#[derive(Clone, Debug, PartialEq)]
pub struct Flows<T> {
    /// `L_i`; the last entry is the reflux.
    pub liquid: Vec<T>,
    /// `V_i`; the condenser entry repeats `V_{N_T-1}`.
    pub vapour: Vec<T>,
    pub distillate: T,
    pub bottoms: T,
}

fn check_fraction<T: Scalar>(x: T) -> Result<(), ModelError> {
    let tol = T::lit(DOMAIN_TOL);
    if x < -tol || x > T::one() + tol || x.is_nan() {
        return Err(ModelError::Domain { value: x.to_f64_lossy() });
    }
    Ok(())
}

#[inline(always)]
fn equilibrium<T: Scalar>(x: T, alpha: T) -> T {
    alpha * x / (T::one() + (alpha - T::one()) * x)
}

#[inline(always)]
fn equilibrium_slope<T: Scalar>(x: T, alpha: T) -> T {
    let d = T::one() + (alpha - T::one()) * x;
    alpha / (d * d)
}

/// Constant-relative-volatility vapour–liquid equilibrium.
pub fn vle<T: Scalar>(x: T, alpha: T) -> Result<T, ModelError> {
    check_fraction(x)?;
    Ok(equilibrium(x, alpha))
}

/// Linear bubble-point temperature between the pure-component boiling points.
pub fn stage_temperature<T: Scalar>(x: T, params: &ColumnParams<T>) -> Result<T, ModelError> {
    check_fraction(x)?;
    Ok(temperature_unchecked(x, params))
}

#[inline(always)]
pub(crate) fn temperature_unchecked<T: Scalar>(x: T, params: &ColumnParams<T>) -> T {
    x * params.t_boil_light + (T::one() - x) * params.t_boil_heavy
}

/// Vapour flow leaving zero-based stage `k` (valid for `k < N_T - 1`).
#[inline(always)]
fn vapour<T: Scalar>(k: usize, boilup: T, feed_vapour: T, feed_index: usize) -> T {
    if k >= feed_index {
        boilup + feed_vapour
    } else {
        boilup
    }
}

struct FlowLaw<'a, T> {
    p: &'a ColumnParams<T>,
    m: &'a [T],
    boilup: T,
    reflux: T,
    feed_vapour: T,
    feed_index: usize,
    inv_tau: T,
}

impl<'a, T: Scalar> FlowLaw<'a, T> {
    fn new(p: &'a ColumnParams<T>, z: &'a [T], u: &Controls<T>, feed: &FeedConditions<T>) -> Self {
        let n = p.n_stages;
        Self {
            p,
            m: &z[..n],
            boilup: u.boilup,
            reflux: u.reflux,
            feed_vapour: (T::one() - feed.liquid_fraction) * feed.rate,
            feed_index: p.feed_index(),
            inv_tau: T::one() / p.tau_l,
        }
    }

    #[inline(always)]
    fn v(&self, k: usize) -> T {
        vapour(k, self.boilup, self.feed_vapour, self.feed_index)
    }

    /// Liquid leaving zero-based stage `k`.
    #[inline(always)]
    fn l(&self, k: usize) -> T {
        let n = self.p.n_stages;
        if k == n - 1 {
            return self.reflux;
        }
        let mut l = self.p.nominal_liquid(k) + (self.m[k] - self.p.holdup_nominal) * self.inv_tau;
        if k >= 1 {
            l = l + self.p.lambda_k2 * (self.v(k - 1) - self.p.vapour_nominal);
        }
        l
    }

    fn distillate(&self) -> T {
        let n = self.p.n_stages;
        self.p.distillate_nominal + self.p.k_distillate * (self.m[n - 1] - self.p.holdup_nominal)
    }

    fn bottoms(&self) -> T {
        self.p.bottoms_nominal + self.p.k_bottoms * (self.m[0] - self.p.holdup_nominal)
    }
}

/// Liquid and vapour flows, distillate and bottoms. Negative flows are returned as computed.
pub fn internal_flows<T: Scalar>(
    state: &ColumnState<T>,
    controls: &Controls<T>,
    feed: &FeedConditions<T>,
    params: &ColumnParams<T>,
) -> Flows<T> {
    let n = params.n_stages;
    let law = FlowLaw::new(params, state.as_slice(), controls, feed);
    let liquid = (0..n).map(|k| law.l(k)).collect();
    let mut vapour: Vec<T> = (0..n - 1).map(|k| law.v(k)).collect();
    vapour.push(vapour[n - 2]);
    Flows { liquid, vapour, distillate: law.distillate(), bottoms: law.bottoms() }
}

fn check_shape<T: Scalar>(z: &[T], params: &ColumnParams<T>) -> Result<(), ModelError> {
    if z.len() != params.state_len() {
        return Err(ModelError::Shape { expected: params.state_len(), got: z.len() });
    }
    Ok(())
}

fn check_holdups<T: Scalar>(z: &[T], n: usize) -> Result<(), ModelError> {
    let guard = T::lit(MIN_HOLDUP);
    for (k, m) in z[..n].iter().enumerate() {
        if !(*m >= guard) {
            return Err(ModelError::Singular { stage: k + 1, holdup: m.to_f64_lossy() });
        }
    }
    Ok(())
}

/// Per-stage total and light-component balances, `(dM_k, d(M x)_k)`.
#[inline(always)]
fn stage_balances<T: Scalar>(
    law: &FlowLaw<'_, T>,
    x: &[T],
    feed: &FeedConditions<T>,
    k: usize,
    y_below: T,
    y_here: T,
) -> (T, T) {
    let n = law.p.n_stages;
    if k == 0 {
        let l_up = law.l(1);
        let v = law.v(0);
        let b = law.bottoms();
        (l_up - v - b, l_up * x[1] - v * y_here - b * x[0])
    } else if k == n - 1 {
        let v = law.v(n - 2);
        let lt = law.reflux;
        let d = law.distillate();
        (v - lt - d, v * y_below - (lt + d) * x[k])
    } else {
        let l_up = law.l(k + 1);
        let l = law.l(k);
        let v_below = law.v(k - 1);
        let v = law.v(k);
        let mut dm = l_up - l + v_below - v;
        let mut dmx = l_up * x[k + 1] + v_below * y_below - l * x[k] - v * y_here;
        if k == law.feed_index {
            dm = dm + feed.rate;
            dmx = dmx + feed.rate * feed.composition;
        }
        (dm, dmx)
    }
}

/// Right-hand side `dz/dt` written into `out` (same layout as the state).
pub fn rhs_into<T: Scalar>(
    z: &[T],
    controls: &Controls<T>,
    feed: &FeedConditions<T>,
    params: &ColumnParams<T>,
    out: &mut [T],
) -> Result<(), ModelError> {
    check_shape(z, params)?;
    let n = params.n_stages;
    check_holdups(z, n)?;
    let law = FlowLaw::new(params, z, controls, feed);
    let (m, x) = z.split_at(n);
    let (dm_out, dx_out) = out.split_at_mut(n);
    let mut y_below = T::zero();
    for k in 0..n {
        let y_here = equilibrium(x[k], params.alpha);
        let (dm, dmx) = stage_balances(&law, x, feed, k, y_below, y_here);
        dm_out[k] = dm;
        dx_out[k] = (dmx - x[k] * dm) / m[k];
        y_below = y_here;
    }
    Ok(())
}

/// Time derivative of the column state.
pub fn derivatives<T: Scalar>(
    state: &ColumnState<T>,
    controls: &Controls<T>,
    feed: &FeedConditions<T>,
    params: &ColumnParams<T>,
) -> Result<ColumnState<T>, ModelError> {
    let mut out = vec![T::zero(); state.as_slice().len()];
    rhs_into(state.as_slice(), controls, feed, params, &mut out)?;
    Ok(ColumnState { z: out })
}

/// Vector–Jacobian product of [`rhs_into`]: accumulates `adjᵀ ∂f/∂z` into `z_bar`
/// and returns `adjᵀ ∂f/∂[L_T, V_B]`.
pub fn rhs_vjp<T: Scalar>(
    z: &[T],
    controls: &Controls<T>,
    feed: &FeedConditions<T>,
    params: &ColumnParams<T>,
    adj: &[T],
    z_bar: &mut [T],
) -> Result<[T; 2], ModelError> {
    check_shape(z, params)?;
    let n = params.n_stages;
    check_holdups(z, n)?;
    let law = FlowLaw::new(params, z, controls, feed);
    let alpha = params.alpha;
    let (m, x) = z.split_at(n);
    let (adj_m, adj_x) = adj.split_at(n);
    let (m_bar, x_bar) = z_bar.split_at_mut(n);

    // c_k: adjoint of the component balance d(Mx)_k; e_k: adjoint of the total balance dM_k.
    let c = |k: usize| adj_x[k] / m[k];
    let e = |k: usize| adj_m[k] - x[k] * c(k);
    let y = |k: usize| equilibrium(x[k], alpha);

    let mut reflux_bar = T::zero();
    let mut boilup_bar = T::zero();
    let mut y_below = T::zero();
    for k in 0..n {
        let y_here = y(k);
        let ck = c(k);
        let ek = e(k);
        let (dm, dmx) = stage_balances(&law, x, feed, k, y_below, y_here);
        let dx = (dmx - x[k] * dm) / m[k];
        m_bar[k] = m_bar[k] - dx * ck;
        x_bar[k] = x_bar[k] - ck * dm;

        // Liquid leaving stage k feeds stage k-1.
        if k >= 1 {
            let l_bar = e(k - 1) - ek + x[k] * (c(k - 1) - ck);
            let l = law.l(k);
            x_bar[k] = x_bar[k] + l * (c(k - 1) - ck);
            if k == n - 1 {
                reflux_bar = reflux_bar + l_bar;
            } else {
                m_bar[k] = m_bar[k] + l_bar * law.inv_tau;
                boilup_bar = boilup_bar + params.lambda_k2 * l_bar;
            }
        }
        // Vapour leaving stage k rises to stage k+1.
        if k <= n - 2 {
            let v = law.v(k);
            let ck_up = c(k + 1);
            let v_bar = ck_up * y_here - ck * y_here + e(k + 1) - ek;
            boilup_bar = boilup_bar + v_bar;
            let y_bar = v * (ck_up - ck);
            x_bar[k] = x_bar[k] + y_bar * equilibrium_slope(x[k], alpha);
        }
        if k == 0 {
            let b = law.bottoms();
            x_bar[0] = x_bar[0] - ck * b;
            let b_bar = -ek - ck * x[0];
            m_bar[0] = m_bar[0] + params.k_bottoms * b_bar;
        }
        if k == n - 1 {
            let d = law.distillate();
            x_bar[k] = x_bar[k] - ck * d;
            let d_bar = -ek - ck * x[k];
            m_bar[k] = m_bar[k] + params.k_distillate * d_bar;
        }
        y_below = y_here;
    }
    Ok([reflux_bar, boilup_bar])
}

/// The 30 candidate measurements `[T_1..T_NT, F, T_F, q_F, M_1, M_NT]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementVector<T>(pub Vec<T>);

/// Slot layout of the measurement vector for a column with `n` stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeasurementKind {
    Temperature,
    Flow,
    LiquidFraction,
    Holdup,
}

pub fn measurement_kind(slot: usize, n_stages: usize) -> Option<MeasurementKind> {
    use MeasurementKind::*;
    match slot {
        s if s < n_stages => Some(Temperature),
        s if s == n_stages => Some(Flow),
        s if s == n_stages + 1 => Some(Temperature),
        s if s == n_stages + 2 => Some(LiquidFraction),
        s if s == n_stages + 3 || s == n_stages + 4 => Some(Holdup),
        _ => None,
    }
}

/// Human-readable label of a one-based-named measurement slot, e.g. `T5` or `qF`.
pub fn measurement_label(slot: usize, n_stages: usize) -> String {
    match slot {
        s if s < n_stages => format!("T{}", s + 1),
        s if s == n_stages => "F".into(),
        s if s == n_stages + 1 => "TF".into(),
        s if s == n_stages + 2 => "qF".into(),
        s if s == n_stages + 3 => "M1".into(),
        s if s == n_stages + 4 => format!("M{n_stages}"),
        s => format!("?{s}"),
    }
}

/// Noise-free measurement map.
pub fn measure<T: Scalar>(
    state: &ColumnState<T>,
    feed: &FeedConditions<T>,
    params: &ColumnParams<T>,
) -> MeasurementVector<T> {
    let n = params.n_stages;
    let mut v = Vec::with_capacity(n + 5);
    v.extend(state.compositions().iter().map(|&x| temperature_unchecked(x, params)));
    v.push(feed.rate);
    v.push(temperature_unchecked(feed.composition, params));
    v.push(feed.liquid_fraction);
    v.push(state.holdups()[0]);
    v.push(state.holdups()[n - 1]);
    MeasurementVector(v)
}

/// Truncated zero-mean normal noise of one measurement class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseClass {
    pub sigma: f64,
    pub bound: f64,
}

/// Measurement noise per class; the temperature standard deviation is `0.015 (T_bH - T_bL)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub temperature: NoiseClass,
    pub flow: NoiseClass,
    pub liquid_fraction: NoiseClass,
    pub holdup: NoiseClass,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::for_column(&ColumnParams::<f64>::default())
    }
}

impl NoiseSpec {
    pub fn for_column(params: &ColumnParams<f64>) -> Self {
        let other = NoiseClass { sigma: 0.03, bound: 0.1 };
        Self {
            temperature: NoiseClass { sigma: 0.015 * params.boiling_span(), bound: 0.775 },
            flow: other,
            liquid_fraction: other,
            holdup: other,
        }
    }

    pub fn class(&self, kind: MeasurementKind) -> NoiseClass {
        match kind {
            MeasurementKind::Temperature => self.temperature,
            MeasurementKind::Flow => self.flow,
            MeasurementKind::LiquidFraction => self.liquid_fraction,
            MeasurementKind::Holdup => self.holdup,
        }
    }

    /// Per-slot classes for a column with `n_stages` stages.
    pub fn classes(&self, n_stages: usize) -> Vec<NoiseClass> {
        (0..n_stages + 5)
            .map(|s| self.class(measurement_kind(s, n_stages).expect("slot in range")))
            .collect()
    }

    pub fn check(&self, eta: &[f64], n_stages: usize) -> Result<(), ModelError> {
        if eta.len() != n_stages + 5 {
            return Err(ModelError::Shape { expected: n_stages + 5, got: eta.len() });
        }
        for (index, (v, cls)) in eta.iter().zip(self.classes(n_stages)).enumerate() {
            if !(v.abs() <= cls.bound * (1.0 + 1e-12)) {
                return Err(ModelError::NoiseBound { index, value: *v, bound: cls.bound });
            }
        }
        Ok(())
    }
}

/// Adds a noise realisation to a measurement vector. No clamping is applied afterwards.
pub fn apply_noise<T: Scalar>(
    meas: &MeasurementVector<T>,
    eta: &[T],
    spec: &NoiseSpec,
) -> Result<MeasurementVector<T>, ModelError> {
    let n = meas.0.len().saturating_sub(5);
    let eta64: Vec<f64> = eta.iter().map(|v| v.to_f64_lossy()).collect();
    spec.check(&eta64, n)?;
    Ok(MeasurementVector(meas.0.iter().zip(eta).map(|(&m, &e)| m + e).collect()))
}

/// Damped Newton on the right-hand side, falling back to long-horizon integration.
pub fn steady_state(
    params: &ColumnParams<f64>,
    controls: &Controls<f64>,
    feed: &FeedConditions<f64>,
) -> Result<ColumnState<f64>, ModelError> {
    params.validate()?;
    let start = ColumnState::equimolar(params);
    if let Ok(s) = newton_polish(params, controls, feed, start.z.clone(), 200) {
        return Ok(s);
    }
    let mut z = start.z;
    let h = 0.01;
    let mut k1 = vec![0.0; z.len()];
    let mut k2 = k1.clone();
    let mut k3 = k1.clone();
    let mut k4 = k1.clone();
    let mut tmp = k1.clone();
    for _ in 0..(2000.0 / h) as usize {
        rhs_into(&z, controls, feed, params, &mut k1)?;
        for i in 0..z.len() {
            tmp[i] = z[i] + 0.5 * h * k1[i];
        }
        rhs_into(&tmp, controls, feed, params, &mut k2)?;
        for i in 0..z.len() {
            tmp[i] = z[i] + 0.5 * h * k2[i];
        }
        rhs_into(&tmp, controls, feed, params, &mut k3)?;
        for i in 0..z.len() {
            tmp[i] = z[i] + h * k3[i];
        }
        rhs_into(&tmp, controls, feed, params, &mut k4)?;
        for i in 0..z.len() {
            z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    newton_polish(params, controls, feed, z, 200)
}

fn residual_norm(r: &[f64]) -> f64 {
    r.iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn newton_polish(
    params: &ColumnParams<f64>,
    controls: &Controls<f64>,
    feed: &FeedConditions<f64>,
    mut z: Vec<f64>,
    max_iter: usize,
) -> Result<ColumnState<f64>, ModelError> {
    let dim = z.len();
    let mut r = vec![0.0; dim];
    rhs_into(&z, controls, feed, params, &mut r)?;
    let mut norm = residual_norm(&r);
    for _ in 0..max_iter {
        if norm < 1e-12 {
            break;
        }
        let mut jac = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        let mut unit = vec![0.0; dim];
        let mut row = vec![0.0; dim];
        for i in 0..dim {
            unit.iter_mut().for_each(|v| *v = 0.0);
            row.iter_mut().for_each(|v| *v = 0.0);
            unit[i] = 1.0;
            rhs_vjp(&z, controls, feed, params, &unit, &mut row)?;
            for j in 0..dim {
                jac[(i, j)] = row[j];
            }
        }
        let rhs = nalgebra::DVector::from_iterator(dim, r.iter().map(|v| -v));
        let Some(step) = jac.lu().solve(&rhs) else { break };
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-6 {
            let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
            let valid = trial[dim / 2..].iter().all(|x| (0.0..=1.0).contains(x))
                && trial[..dim / 2].iter().all(|m| *m > MIN_HOLDUP);
            if valid {
                let mut rt = vec![0.0; dim];
                if rhs_into(&trial, controls, feed, params, &mut rt).is_ok() {
                    let nt = residual_norm(&rt);
                    if nt < norm || nt < 1e-12 {
                        z = trial;
                        r = rt;
                        norm = nt;
                        accepted = true;
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if norm < 1e-10 {
        Ok(ColumnState { z })
    } else {
        Err(ModelError::NoConvergence { residual: norm, iterations: max_iter })
    }
}
