//! Feed-forward control policy with a diagonal measurement-selection layer.
//!
//! Given selected, normalised measurements `s`, the network input is `H ∘ s`;
//! hidden layers apply an element-wise activation and the output layer maps
//! through `u = ½ u_max ∘ (1 + N)` with `N = 2σ(a) − 1 ∈ (−1, 1)`, which
//! keeps both controls strictly inside `(0, u_max)` for every parameter value.
//!
//! The optimiser works on the flat vector `θ̄ = vec(H, W⁰, b⁰, W¹, b¹, …)`
//! with row-major weights.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::column::{measurement_label, temperature_unchecked, ColumnParams, Controls, FeedConditions};
use crate::error::PolicyError;
use crate::scalar::{sigmoid, Scalar};

pub const POLICY_FILE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline(always)]
    fn apply<T: Scalar>(self, a: T) -> T {
        match self {
            Activation::Sigmoid => sigmoid(a),
            Activation::Tanh => a.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline(always)]
    fn slope_from_output<T: Scalar>(self, o: T) -> T {
        match self {
            Activation::Sigmoid => o * (T::one() - o),
            Activation::Tanh => T::one() - o * o,
        }
    }
}

mod one_based {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[usize], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|i| i + 1))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<usize>, D::Error> {
        let raw = Vec::<usize>::deserialize(d)?;
        raw.into_iter()
            .map(|i| i.checked_sub(1).ok_or_else(|| serde::de::Error::custom("measurement slots are one-based")))
            .collect()
    }
}

/// Architecture of a policy. `inputs` holds measurement slots (zero-based in
/// memory, one-based in files: `T_5` is slot 5).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    #[serde(with = "one_based")]
    pub inputs: Vec<usize>,
    pub hidden: Vec<usize>,
    pub activations: Vec<Activation>,
    pub u_max: [f64; 2],
}

impl PolicySpec {
    pub fn new(inputs: Vec<usize>, hidden: Vec<usize>, u_max: [f64; 2]) -> Self {
        let activations = vec![Activation::Sigmoid; hidden.len()];
        Self { inputs, hidden, activations, u_max }
    }

    pub fn validate(&self, n_measurements: usize) -> Result<(), PolicyError> {
        let err = |m: String| Err(PolicyError::Spec(m));
        if self.inputs.is_empty() {
            return err("at least one input is required".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return err("at least one non-empty hidden layer is required".into());
        }
        if self.activations.len() != self.hidden.len() {
            return err(format!(
                "{} activations for {} hidden layers",
                self.activations.len(),
                self.hidden.len()
            ));
        }
        let mut seen = vec![false; n_measurements];
        for &i in &self.inputs {
            if i >= n_measurements {
                return err(format!("input slot {} out of range", i + 1));
            }
            if std::mem::replace(&mut seen[i], true) {
                return err(format!("input slot {} repeated", i + 1));
            }
        }
        if !(self.u_max[0] > 0.0 && self.u_max[1] > 0.0) {
            return err("u_max must be positive".into());
        }
        Ok(())
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.len()
    }

    /// `(fan_in, fan_out)` of every affine layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.n_inputs()];
        widths.extend(&self.hidden);
        widths.push(2);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Network parameters, excluding the selection vector.
    pub fn network_len(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Length of `θ̄`.
    pub fn param_len(&self) -> usize {
        self.n_inputs() + self.network_len()
    }
}

/// Named controller configurations compared in the case study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    All,
    AllNoNoise,
    Reg,
    Sel,
}

/// Zero-based temperature slots of the manually selected controller (`T_5, T_10, T_16, T_21`).
pub const SELECTED_TEMPERATURES: [usize; 4] = [4, 9, 15, 20];

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [PolicyKind::All, PolicyKind::AllNoNoise, PolicyKind::Reg, PolicyKind::Sel];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::All => "all",
            PolicyKind::AllNoNoise => "all-no-noise",
            PolicyKind::Reg => "reg",
            PolicyKind::Sel => "sel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn spec(self, column: &ColumnParams<f64>) -> PolicySpec {
        match self {
            PolicyKind::Sel => PolicySpec::new(SELECTED_TEMPERATURES.to_vec(), vec![150], column.u_max),
            _ => PolicySpec::new((0..column.measurement_len()).collect(), vec![30], column.u_max),
        }
    }

    pub fn training_noise(self) -> bool {
        !matches!(self, PolicyKind::AllNoNoise)
    }

    pub fn regularised(self) -> bool {
        matches!(self, PolicyKind::Reg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out × n_in`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams<T> {
    /// Diagonal of `H`.
    pub selection: Vec<T>,
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> PolicyParams<T> {
    pub fn zeros(spec: &PolicySpec) -> Self {
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(n_in, n_out)| Layer {
                n_in,
                n_out,
                weights: vec![T::zero(); n_in * n_out],
                bias: vec![T::zero(); n_out],
            })
            .collect();
        Self { selection: vec![T::one(); spec.n_inputs()], layers }
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut v = self.selection.clone();
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn unflatten(spec: &PolicySpec, flat: &[T]) -> Result<Self, PolicyError> {
        if flat.len() != spec.param_len() {
            return Err(PolicyError::Length { expected: spec.param_len(), got: flat.len() });
        }
        let mut out = Self::zeros(spec);
        out.assign(flat);
        Ok(out)
    }

    /// Overwrites all parameters from a flat vector of the right length.
    pub fn assign(&mut self, flat: &[T]) {
        let n = self.selection.len();
        self.selection.copy_from_slice(&flat[..n]);
        let mut at = n;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
    }

    pub fn cast<U: Scalar>(&self) -> PolicyParams<U> {
        let c = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64_lossy())).collect::<Vec<U>>();
        PolicyParams {
            selection: c(&self.selection),
            layers: self
                .layers
                .iter()
                .map(|l| Layer { n_in: l.n_in, n_out: l.n_out, weights: c(&l.weights), bias: c(&l.bias) })
                .collect(),
        }
    }
}

/// Glorot-uniform weights, zero biases and an all-ones selection vector.
pub fn init_params<T: Scalar>(spec: &PolicySpec, seed: u64) -> PolicyParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = PolicyParams::zeros(spec);
    for l in &mut p.layers {
        let a = (6.0 / (l.n_in + l.n_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a);
        for w in &mut l.weights {
            *w = T::lit(dist.sample(&mut rng));
        }
    }
    p
}

/// Normalises a full measurement vector: temperatures (including `T_F`) map
/// to `(T − T_bL)/(T_bH − T_bL)`, the remaining entries pass through.
pub fn normalize_inputs<T: Scalar>(meas: &[T], column: &ColumnParams<T>) -> Vec<T> {
    let n = column.n_stages;
    let span = column.boiling_span();
    meas.iter()
        .enumerate()
        .map(|(slot, &m)| if slot < n || slot == n + 1 { (m - column.t_boil_light) / span } else { m })
        .collect()
}

/// Normalised, noisy value of one measurement slot and its derivative with
/// respect to the state entry it depends on (if any).
#[inline(always)]
pub(crate) fn input_slot<T: Scalar>(
    slot: usize,
    z: &[T],
    feed: &FeedConditions<T>,
    eta: T,
    column: &ColumnParams<T>,
) -> (T, Option<(usize, T)>) {
    let n = column.n_stages;
    let span = column.boiling_span();
    let temp = |x: T| (temperature_unchecked(x, column) + eta - column.t_boil_light) / span;
    match slot {
        s if s < n => (temp(z[n + s]), Some((n + s, (column.t_boil_light - column.t_boil_heavy) / span))),
        s if s == n => (feed.rate + eta, None),
        s if s == n + 1 => (temp(feed.composition), None),
        s if s == n + 2 => (feed.liquid_fraction + eta, None),
        s if s == n + 3 => (z[0] + eta, Some((0, T::one()))),
        _ => (z[n - 1] + eta, Some((n - 1, T::one()))),
    }
}

/// Activations recorded by a forward pass, reused by [`PolicyParams::backward`].
#[derive(Clone, Debug)]
pub struct Tape<T> {
    /// Selected, normalised measurements before `H`.
    pub input: Vec<T>,
    /// `acts[0] = H ∘ input`; `acts[l + 1]` is the output of hidden layer `l`.
    acts: Vec<Vec<T>>,
    out_sigmoid: [T; 2],
    deltas: Vec<Vec<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new(spec: &PolicySpec) -> Self {
        let mut widths = vec![spec.n_inputs()];
        widths.extend(&spec.hidden);
        Self {
            input: vec![T::zero(); spec.n_inputs()],
            acts: widths.iter().map(|&w| vec![T::zero(); w]).collect(),
            out_sigmoid: [T::zero(); 2],
            deltas: widths.iter().map(|&w| vec![T::zero(); w]).collect(),
        }
    }
}

impl<T: Scalar> PolicyParams<T> {
    /// Evaluates the policy on `tape.input`, recording activations.
    pub fn forward_tape(&self, spec: &PolicySpec, tape: &mut Tape<T>) -> Controls<T> {
        for ((a, h), s) in tape.acts[0].iter_mut().zip(&self.selection).zip(&tape.input) {
            *a = *h * *s;
        }
        let n_hidden = spec.hidden.len();
        for (l, layer) in self.layers[..n_hidden].iter().enumerate() {
            let act = spec.activations[l];
            let (before, after) = tape.acts.split_at_mut(l + 1);
            let x = &before[l];
            for (j, out) in after[0].iter_mut().enumerate() {
                let row = &layer.weights[j * layer.n_in..(j + 1) * layer.n_in];
                let mut a = layer.bias[j];
                for (w, xi) in row.iter().zip(x) {
                    a = a + *w * *xi;
                }
                *out = act.apply(a);
            }
        }
        let last = &self.layers[n_hidden];
        let x = &tape.acts[n_hidden];
        let mut u = [T::zero(); 2];
        for (j, uj) in u.iter_mut().enumerate() {
            let row = &last.weights[j * last.n_in..(j + 1) * last.n_in];
            let mut a = last.bias[j];
            for (w, xi) in row.iter().zip(x) {
                a = a + *w * *xi;
            }
            let s = sigmoid(a);
            tape.out_sigmoid[j] = s;
            // ½ u_max (1 + (2σ − 1)) = u_max σ
            *uj = T::lit(spec.u_max[j]) * s;
        }
        Controls::from_array(u)
    }

    /// Reverse pass for a control adjoint `u_bar`: accumulates `∂/∂θ̄` into
    /// `grad` (flat layout) and `∂/∂input` into `input_bar`.
    pub fn backward(&self, spec: &PolicySpec, tape: &mut Tape<T>, u_bar: [T; 2], grad: &mut [T], input_bar: &mut [T]) {
        let n_hidden = spec.hidden.len();
        let n_sel = self.selection.len();
        let offsets = self.layer_offsets();

        let last = &self.layers[n_hidden];
        let mut a_bar = [T::zero(); 2];
        for j in 0..2 {
            let s = tape.out_sigmoid[j];
            a_bar[j] = u_bar[j] * T::lit(spec.u_max[j]) * s * (T::one() - s);
        }
        {
            let off = offsets[n_hidden];
            let x = &tape.acts[n_hidden];
            let delta = &mut tape.deltas[n_hidden];
            delta.iter_mut().for_each(|d| *d = T::zero());
            for j in 0..2 {
                let aj = a_bar[j];
                let row = j * last.n_in;
                for i in 0..last.n_in {
                    grad[off + row + i] = grad[off + row + i] + aj * x[i];
                    delta[i] = delta[i] + last.weights[row + i] * aj;
                }
                grad[off + last.weights.len() + j] = grad[off + last.weights.len() + j] + aj;
            }
        }
        for l in (0..n_hidden).rev() {
            let layer = &self.layers[l];
            let act = spec.activations[l];
            let off = offsets[l];
            let (lower, upper) = tape.deltas.split_at_mut(l + 1);
            let delta_out = &mut upper[0];
            for (d, o) in delta_out.iter_mut().zip(&tape.acts[l + 1]) {
                *d = *d * act.slope_from_output(*o);
            }
            let x = &tape.acts[l];
            let delta_in = &mut lower[l];
            delta_in.iter_mut().for_each(|d| *d = T::zero());
            for j in 0..layer.n_out {
                let aj = delta_out[j];
                let row = j * layer.n_in;
                for i in 0..layer.n_in {
                    grad[off + row + i] = grad[off + row + i] + aj * x[i];
                    delta_in[i] = delta_in[i] + layer.weights[row + i] * aj;
                }
                grad[off + layer.weights.len() + j] = grad[off + layer.weights.len() + j] + aj;
            }
        }
        let d0 = &tape.deltas[0];
        for i in 0..n_sel {
            grad[i] = grad[i] + d0[i] * tape.input[i];
            input_bar[i] = input_bar[i] + d0[i] * self.selection[i];
        }
    }

    /// Start of each layer's weights inside `θ̄`.
    fn layer_offsets(&self) -> Vec<usize> {
        let mut at = self.selection.len();
        self.layers
            .iter()
            .map(|l| {
                let o = at;
                at += l.weights.len() + l.bias.len();
                o
            })
            .collect()
    }
}

/// Evaluates the policy on already selected, normalised inputs.
pub fn forward<T: Scalar>(params: &PolicyParams<T>, spec: &PolicySpec, selected: &[T]) -> Result<Controls<T>, PolicyError> {
    if selected.len() != spec.n_inputs() || params.selection.len() != spec.n_inputs() {
        return Err(PolicyError::Length { expected: spec.n_inputs(), got: selected.len() });
    }
    let mut tape = Tape::new(spec);
    tape.input.copy_from_slice(selected);
    Ok(params.forward_tape(spec, &mut tape))
}

/// A policy bound to its spec and the column constants used for input normalisation.
#[derive(Clone, Debug)]
pub struct NeuralPolicy<T> {
    pub spec: PolicySpec,
    pub params: PolicyParams<T>,
    pub column: ColumnParams<T>,
}

impl<T: Scalar> NeuralPolicy<T> {
    pub fn new(spec: PolicySpec, params: PolicyParams<T>, column: ColumnParams<T>) -> Result<Self, PolicyError> {
        spec.validate(column.measurement_len())?;
        if params.flatten().len() != spec.param_len() {
            return Err(PolicyError::Length { expected: spec.param_len(), got: params.flatten().len() });
        }
        Ok(Self { spec, params, column })
    }

    /// Fills `tape.input` from the state, feed and measurement noise.
    #[inline]
    pub fn load_inputs(&self, z: &[T], feed: &FeedConditions<T>, eta: &[T], tape: &mut Tape<T>) {
        for (k, &slot) in self.spec.inputs.iter().enumerate() {
            tape.input[k] = input_slot(slot, z, feed, eta[slot], &self.column).0;
        }
    }

    pub fn evaluate(&self, z: &[T], feed: &FeedConditions<T>, eta: &[T], tape: &mut Tape<T>) -> Controls<T> {
        self.load_inputs(z, feed, eta, tape);
        self.params.forward_tape(&self.spec, tape)
    }

    /// Chains an input adjoint back to the state.
    #[inline]
    pub fn inputs_to_state(&self, z: &[T], feed: &FeedConditions<T>, input_bar: &[T], z_bar: &mut [T]) {
        for (k, &slot) in self.spec.inputs.iter().enumerate() {
            if let (_, Some((idx, d))) = input_slot(slot, z, feed, T::zero(), &self.column) {
                z_bar[idx] = z_bar[idx] + d * input_bar[k];
            }
        }
    }
}

/// Outcome of thresholding the selection vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    /// Surviving positions within `spec.inputs`.
    pub kept: Vec<usize>,
    /// Measurement slots of the survivors.
    pub slots: Vec<usize>,
}

/// Zeroes every selection entry with `|H_ii| < tol`.
pub fn prune_selection<T: Scalar>(params: &PolicyParams<T>, spec: &PolicySpec, tol: f64) -> (PolicyParams<T>, Selection) {
    let mut out = params.clone();
    let mut kept = Vec::new();
    for (i, h) in out.selection.iter_mut().enumerate() {
        if h.abs() < T::lit(tol) {
            *h = T::zero();
        } else {
            kept.push(i);
        }
    }
    if kept.is_empty() {
        log::warn!("selection pruning at tolerance {tol} removed every measurement");
    }
    let slots = kept.iter().map(|&i| spec.inputs[i]).collect();
    (out, Selection { kept, slots })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub iterations: usize,
    #[serde(default)]
    pub training_noise: bool,
    #[serde(default)]
    pub preset: String,
    /// Labels of the measurements the policy uses.
    #[serde(default)]
    pub selected: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    #[serde(rename = "W")]
    weights: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    version: u32,
    spec: PolicySpec,
    #[serde(rename = "H")]
    selection: Vec<f64>,
    layers: Vec<LayerFile>,
    meta: PolicyMeta,
}

/// Fills `meta.selected` from the spec and the non-zero selection entries.
pub fn selected_labels(spec: &PolicySpec, params: &PolicyParams<f64>, n_stages: usize) -> Vec<String> {
    spec.inputs
        .iter()
        .zip(&params.selection)
        .filter(|(_, h)| **h != 0.0)
        .map(|(&s, _)| measurement_label(s, n_stages))
        .collect()
}

pub fn serialize(params: &PolicyParams<f64>, spec: &PolicySpec, meta: &PolicyMeta) -> Result<Vec<u8>, PolicyError> {
    let file = PolicyFile {
        version: POLICY_FILE_VERSION,
        spec: spec.clone(),
        selection: params.selection.clone(),
        layers: params
            .layers
            .iter()
            .map(|l| LayerFile { weights: l.weights.chunks(l.n_in).map(<[f64]>::to_vec).collect(), b: l.bias.clone() })
            .collect(),
        meta: meta.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&file)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn deserialize(bytes: &[u8]) -> Result<(PolicyParams<f64>, PolicySpec, PolicyMeta), PolicyError> {
    let file: PolicyFile = serde_json::from_slice(bytes)?;
    if file.version != POLICY_FILE_VERSION {
        return Err(PolicyError::Version(file.version));
    }
    let spec = file.spec;
    let shapes = spec.layer_shapes();
    if file.selection.len() != spec.n_inputs() {
        return Err(PolicyError::Format(format!("H has {} entries for {} inputs", file.selection.len(), spec.n_inputs())));
    }
    if file.layers.len() != shapes.len() {
        return Err(PolicyError::Format(format!("{} layers, expected {}", file.layers.len(), shapes.len())));
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for (l, ((n_in, n_out), lf)) in shapes.into_iter().zip(file.layers).enumerate() {
        if lf.weights.len() != n_out || lf.weights.iter().any(|r| r.len() != n_in) || lf.b.len() != n_out {
            return Err(PolicyError::Format(format!("layer {l} does not match shape {n_out}x{n_in}")));
        }
        layers.push(Layer { n_in, n_out, weights: lf.weights.concat(), bias: lf.b });
    }
    Ok((PolicyParams { selection: file.selection, layers }, spec, file.meta))
}
