//! Multi-layer recurrent stacks: single layer, conventional stacking and gated feedback.
//!
//! All three architectures share one step function. A layer `j` combines
//!
//! * its bottom input (the one-hot symbol for the first layer, `h_t^{j-1}` above it,
//!   optionally concatenated with the symbol when skip connections are on),
//! * unit-wise gates fed by the same layer's previous state (or by every layer's
//!   previous state, see [`UnitGateSource`]),
//! * a candidate recurrent term `s = Σ_i g^{i→j} U^{i→j} h_{t-1}^i`.
//!
//! Single and stacked layers have exactly one source (`i = j`) with `g = 1`. In the
//! gated-feedback stack every layer listens to every layer, each path scaled by a
//! scalar global reset gate `g^{i→j} = σ(w·h_t^{j-1} + u·h*_{t-1})`.

use serde::{Deserialize, Serialize};

use crate::cells::{core_backward, core_forward, CoreCache, UnitKind};
use crate::error::{check_len, Error, Result};
use crate::numerics::{
    add_assign, axpy, dot, log_sum_exp, matvec, matvec_acc, matvec_t_acc, outer_acc, sigmoid, softmax_slice, Real, Rng, Tensor1, Tensor2,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Single,
    Stacked,
    #[serde(alias = "gf")]
    GatedFeedback,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Single => "single",
            Arch::Stacked => "stacked",
            Arch::GatedFeedback => "gated_feedback",
        })
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Arch::Single),
            "stacked" => Ok(Arch::Stacked),
            "gated_feedback" | "gf" | "gated-feedback" => Ok(Arch::GatedFeedback),
            other => Err(Error::config("arch", format!("unknown architecture `{other}`"))),
        }
    }
}

/// What the LSTM/GRU unit-wise gates read from the previous timestep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitGateSource {
    /// `h_{t-1}^j` only.
    #[default]
    SameLayer,
    /// `h*_{t-1}`, every layer's previous state (gated-feedback stacks only).
    AllLayers,
}

/// Unit gates read the same layer's previous state unless a config opts out.
pub const DEFAULT_UNIT_GATE_SOURCE: UnitGateSource = UnitGateSource::SameLayer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub unit: UnitKind,
    pub units_per_layer: Vec<usize>,
    pub input_vocab: usize,
    /// Zero means no readout layer (e.g. an encoder).
    pub output_vocab: usize,
    #[serde(default)]
    pub freeze_gates_to_one: bool,
    /// Symbol fed to every layer and every layer read by the output.
    #[serde(default)]
    pub skip_connections: bool,
    /// Output reads the concatenation of all layers instead of the top one.
    #[serde(default)]
    pub readout_all_layers: bool,
    #[serde(default)]
    pub unit_gate_source: UnitGateSource,
    /// No biases anywhere: they stay zero and are excluded from the parameter list.
    #[serde(default)]
    pub strict: bool,
}

impl ModelConfig {
    pub fn new(arch: Arch, unit: UnitKind, units_per_layer: Vec<usize>, input_vocab: usize, output_vocab: usize) -> Self {
        ModelConfig {
            arch,
            unit,
            units_per_layer,
            input_vocab,
            output_vocab,
            freeze_gates_to_one: false,
            skip_connections: false,
            readout_all_layers: false,
            unit_gate_source: DEFAULT_UNIT_GATE_SOURCE,
            strict: false,
        }
    }

    pub fn layers(&self) -> usize {
        self.units_per_layer.len()
    }

    pub fn total_units(&self) -> usize {
        self.units_per_layer.iter().sum()
    }

    pub fn is_gated_feedback(&self) -> bool {
        self.arch == Arch::GatedFeedback
    }

    pub fn validate(&self) -> Result<()> {
        if self.units_per_layer.is_empty() {
            return Err(Error::config("units_per_layer", "at least one layer is required"));
        }
        if self.units_per_layer.contains(&0) {
            return Err(Error::config("units_per_layer", "layer sizes must be positive"));
        }
        if self.arch == Arch::Single && self.layers() != 1 {
            return Err(Error::config("units_per_layer", "a single-layer model has exactly one layer"));
        }
        if self.freeze_gates_to_one && !self.is_gated_feedback() {
            return Err(Error::config("freeze_gates_to_one", "only meaningful for gated_feedback"));
        }
        if self.unit_gate_source == UnitGateSource::AllLayers && !self.is_gated_feedback() {
            return Err(Error::config("unit_gate_source", "all_layers requires gated_feedback"));
        }
        if self.input_vocab == 0 {
            return Err(Error::config("input_vocab", "must be positive"));
        }
        Ok(())
    }

    pub(crate) fn layer_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.layers());
        let mut acc = 0;
        for &u in &self.units_per_layer {
            off.push(acc);
            acc += u;
        }
        off
    }

    /// Dense part of layer `j`'s bottom input (the layer below).
    pub(crate) fn dense_input(&self, j: usize) -> usize {
        if j == 0 {
            0
        } else {
            self.units_per_layer[j - 1]
        }
    }

    /// Whether layer `j` sees the one-hot input symbol.
    pub(crate) fn sees_symbol(&self, j: usize) -> bool {
        j == 0 || self.skip_connections
    }

    pub fn layer_input_dim(&self, j: usize) -> usize {
        self.dense_input(j) + if self.sees_symbol(j) { self.input_vocab } else { 0 }
    }

    /// Layers whose previous state feeds layer `j`'s candidate.
    pub fn sources(&self, j: usize) -> Vec<usize> {
        if self.is_gated_feedback() {
            (0..self.layers()).collect()
        } else {
            vec![j]
        }
    }

    pub(crate) fn gate_source_dim(&self, j: usize) -> usize {
        match self.unit_gate_source {
            UnitGateSource::SameLayer => self.units_per_layer[j],
            UnitGateSource::AllLayers => self.total_units(),
        }
    }

    pub fn reads_all_layers(&self) -> bool {
        self.readout_all_layers || self.skip_connections
    }

    pub fn readout_dim(&self) -> usize {
        if self.reads_all_layers() {
            self.total_units()
        } else {
            *self.units_per_layer.last().unwrap()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// Input weights per block, `units × layer_input_dim`.
    pub w: Vec<Tensor2>,
    pub b: Vec<Tensor1>,
    /// Recurrent weights of the unit-wise gates, `units × gate_source_dim`.
    pub u_gate: Vec<Tensor2>,
    /// Candidate recurrent weights `U^{i→j}`, one per entry of `ModelConfig::sources(j)`.
    pub u_rec: Vec<Tensor2>,
}

/// Global reset gate parameters, indexed `[target j][source i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub w: Vec<Vec<Tensor1>>,
    pub u: Vec<Vec<Tensor1>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
    pub gates: Option<GateParams>,
    pub out_w: Tensor2,
    pub out_b: Tensor1,
    strict: bool,
}

impl ParamSet {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let unit = cfg.unit;
        let layers = (0..cfg.layers())
            .map(|j| {
                let n = cfg.units_per_layer[j];
                LayerParams {
                    w: (0..unit.n_blocks()).map(|_| Tensor2::zeros(n, cfg.layer_input_dim(j))).collect(),
                    b: (0..unit.n_blocks()).map(|_| Tensor1::zeros(n)).collect(),
                    u_gate: (0..unit.n_unit_gates()).map(|_| Tensor2::zeros(n, cfg.gate_source_dim(j))).collect(),
                    u_rec: cfg.sources(j).into_iter().map(|i| Tensor2::zeros(n, cfg.units_per_layer[i])).collect(),
                }
            })
            .collect();
        let gates = cfg.is_gated_feedback().then(|| {
            let l = cfg.layers();
            GateParams {
                w: (0..l).map(|j| (0..l).map(|_| Tensor1::zeros(cfg.layer_input_dim(j))).collect()).collect(),
                u: (0..l).map(|_| (0..l).map(|_| Tensor1::zeros(cfg.total_units())).collect()).collect(),
            }
        });
        ParamSet {
            layers,
            gates,
            out_w: Tensor2::zeros(cfg.output_vocab, cfg.readout_dim()),
            out_b: Tensor1::zeros(cfg.output_vocab),
            strict: cfg.strict,
        }
    }

    /// Uniform `±1/√fan_in` weights, zero gate parameters, LSTM forget bias 1.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let mut p = ParamSet::zeros(cfg);
        let fill = |m: &mut Tensor2, rng: &mut Rng| {
            let s = 1.0 / (m.cols().max(1) as Real).sqrt();
            m.data.iter_mut().for_each(|v| *v = rng.uniform_range(-s, s));
        };
        for layer in &mut p.layers {
            for m in layer.w.iter_mut().chain(&mut layer.u_gate).chain(&mut layer.u_rec) {
                fill(m, rng);
            }
            if !cfg.strict {
                for (k, b) in layer.b.iter_mut().enumerate() {
                    b.data.iter_mut().for_each(|v| *v = cfg.unit.initial_bias(k));
                }
            }
        }
        fill(&mut p.out_w, rng);
        p
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    /// Visits every learnable block in the canonical order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &[Real])) {
        let strict = self.strict;
        for (j, layer) in self.layers.iter().enumerate() {
            for (k, w) in layer.w.iter().enumerate() {
                f(&format!("layer{j}.w{k}"), &w.data);
            }
            if !strict {
                for (k, b) in layer.b.iter().enumerate() {
                    f(&format!("layer{j}.b{k}"), &b.data);
                }
            }
            for (k, u) in layer.u_gate.iter().enumerate() {
                f(&format!("layer{j}.u_gate{k}"), &u.data);
            }
            for (s, u) in layer.u_rec.iter().enumerate() {
                f(&format!("layer{j}.u_rec{s}"), &u.data);
            }
        }
        if let Some(g) = &self.gates {
            for (j, row) in g.w.iter().enumerate() {
                for (i, w) in row.iter().enumerate() {
                    f(&format!("gate.w.{i}->{j}"), &w.data);
                }
            }
            for (j, row) in g.u.iter().enumerate() {
                for (i, u) in row.iter().enumerate() {
                    f(&format!("gate.u.{i}->{j}"), &u.data);
                }
            }
        }
        f("out.w", &self.out_w.data);
        if !strict {
            f("out.b", &self.out_b.data);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [Real])) {
        let strict = self.strict;
        for (j, layer) in self.layers.iter_mut().enumerate() {
            for (k, w) in layer.w.iter_mut().enumerate() {
                f(&format!("layer{j}.w{k}"), &mut w.data);
            }
            if !strict {
                for (k, b) in layer.b.iter_mut().enumerate() {
                    f(&format!("layer{j}.b{k}"), &mut b.data);
                }
            }
            for (k, u) in layer.u_gate.iter_mut().enumerate() {
                f(&format!("layer{j}.u_gate{k}"), &mut u.data);
            }
            for (s, u) in layer.u_rec.iter_mut().enumerate() {
                f(&format!("layer{j}.u_rec{s}"), &mut u.data);
            }
        }
        if let Some(g) = &mut self.gates {
            for (j, row) in g.w.iter_mut().enumerate() {
                for (i, w) in row.iter_mut().enumerate() {
                    f(&format!("gate.w.{i}->{j}"), &mut w.data);
                }
            }
            for (j, row) in g.u.iter_mut().enumerate() {
                for (i, u) in row.iter_mut().enumerate() {
                    f(&format!("gate.u.{i}->{j}"), &mut u.data);
                }
            }
        }
        f("out.w", &mut self.out_w.data);
        if !strict {
            f("out.b", &mut self.out_b.data);
        }
    }

    /// Names and lengths of each block, in flat order.
    pub fn manifest(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |name, v| out.push((name.to_string(), v.len())));
        out
    }

    pub fn len(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, v| n += v.len());
        n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<Real> {
        let mut out = Vec::with_capacity(self.len());
        self.visit(&mut |_, v| out.extend_from_slice(v));
        out
    }

    pub fn set_flat(&mut self, values: &[Real]) -> Result<()> {
        check_len("ParamSet::set_flat", self.len(), values.len())?;
        let mut off = 0;
        self.visit_mut(&mut |_, v| {
            let n = v.len();
            v.copy_from_slice(&values[off..off + n]);
            off += n;
        });
        Ok(())
    }

    pub fn zeros_like(&self) -> ParamSet {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// Sets every stored value (biases included, even in strict mode).
    pub fn fill(&mut self, value: Real) {
        let strict = self.strict;
        self.strict = false;
        self.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x = value));
        self.strict = strict;
    }

    pub fn scale(&mut self, a: Real) {
        self.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x *= a));
    }

    /// `self += other`, block by block.
    pub fn add_assign(&mut self, other: &ParamSet) {
        let flat = other.to_flat();
        let mut off = 0;
        self.visit_mut(&mut |_, v| {
            add_assign(v, &flat[off..off + v.len()]);
            off += v.len();
        });
    }

    pub fn global_norm(&self) -> Real {
        let mut sq = 0.0;
        self.visit(&mut |_, v| sq += v.iter().map(|x| x * x).sum::<Real>());
        sq.sqrt()
    }
}

/// Exact number of learnable scalars for a configuration.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    ParamSet::zeros(cfg).len()
}

/// Parameter counts grouped into input weights, unit-gate recurrence, candidate
/// recurrence, biases, global gates and readout.
pub fn parameter_breakdown(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let p = ParamSet::zeros(cfg);
    let mut groups: Vec<(String, usize)> = Vec::new();
    p.visit(&mut |name, v| {
        let group = match name.split_once('.') {
            Some((layer, rest)) if layer.starts_with("layer") => {
                let kind = rest.trim_end_matches(|c: char| c.is_ascii_digit());
                format!("{layer}.{kind}")
            }
            Some(("gate", rest)) => format!("gate.{}", &rest[..1]),
            _ => name.to_string(),
        };
        match groups.iter_mut().find(|(g, _)| *g == group) {
            Some((_, n)) => *n += v.len(),
            None => groups.push((group, v.len())),
        }
    });
    groups
}

/// One row of the paper's character-level model-size table.
#[derive(Clone, Debug, PartialEq)]
pub struct CapacityRow {
    pub label: &'static str,
    pub unit: UnitKind,
    pub arch: Arch,
    pub units_per_layer: Vec<usize>,
}

/// The character-level model sizes, grouped by unit type. "Large" rows are
/// gated-feedback stacks with the stacked row's width and are not
/// capacity-matched.
pub fn paper_capacity_rows() -> Vec<CapacityRow> {
    let row = |label, unit, arch, l: usize, n: usize| CapacityRow { label, unit, arch, units_per_layer: vec![n; l] };
    vec![
        row("single", UnitKind::Tanh, Arch::Single, 1, 1000),
        row("stacked", UnitKind::Tanh, Arch::Stacked, 3, 390),
        row("gated_feedback", UnitKind::Tanh, Arch::GatedFeedback, 3, 303),
        row("single", UnitKind::Gru, Arch::Single, 1, 540),
        row("stacked", UnitKind::Gru, Arch::Stacked, 3, 228),
        row("gated_feedback", UnitKind::Gru, Arch::GatedFeedback, 3, 165),
        row("gated_feedback_large", UnitKind::Gru, Arch::GatedFeedback, 3, 228),
        row("single", UnitKind::Lstm, Arch::Single, 1, 456),
        row("stacked", UnitKind::Lstm, Arch::Stacked, 3, 191),
        row("gated_feedback", UnitKind::Lstm, Arch::GatedFeedback, 3, 140),
        row("gated_feedback_large", UnitKind::Lstm, Arch::GatedFeedback, 3, 191),
    ]
}

/// Accounting used to compare model sizes: no biases, the symbol and every layer
/// wired to every layer and to the output in multi-layer stacks, and unit gates
/// reading every layer in gated-feedback stacks.
pub fn paper_capacity_config(row: &CapacityRow, vocab: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(row.arch, row.unit, row.units_per_layer.clone(), vocab, vocab);
    cfg.strict = true;
    cfg.skip_connections = row.arch != Arch::Single;
    if row.arch == Arch::GatedFeedback {
        cfg.unit_gate_source = UnitGateSource::AllLayers;
    }
    cfg
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub h: Tensor1,
    /// Memory cell, present iff the unit is LSTM.
    pub c: Option<Tensor1>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackState {
    pub layers: Vec<CellState>,
}

impl StackState {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        StackState {
            layers: cfg
                .units_per_layer
                .iter()
                .map(|&n| CellState { h: Tensor1::zeros(n), c: cfg.unit.has_memory_cell().then(|| Tensor1::zeros(n)) })
                .collect(),
        }
    }

    /// Concatenation of every layer's hidden vector.
    pub fn h_star(&self) -> Vec<Real> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.h.data);
        }
        out
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        check_len("state layer count", cfg.layers(), self.layers.len())?;
        for (l, &n) in self.layers.iter().zip(&cfg.units_per_layer) {
            check_len("state h size", n, l.h.len())?;
            match (&l.c, cfg.unit.has_memory_cell()) {
                (Some(c), true) => check_len("state c size", n, c.len())?,
                (None, false) => {}
                _ => return Err(Error::config("state", "memory cell presence does not match the unit kind")),
            }
        }
        Ok(())
    }

    /// Flattened `h` then `c` of each layer.
    pub fn to_flat(&self) -> Vec<Real> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.h.data);
            if let Some(c) = &l.c {
                out.extend_from_slice(&c.data);
            }
        }
        out
    }

    pub fn from_flat(cfg: &ModelConfig, values: &[Real]) -> Result<Self> {
        let mut st = StackState::zeros(cfg);
        let expected: usize = st.to_flat().len();
        check_len("StackState::from_flat", expected, values.len())?;
        let mut off = 0;
        for l in &mut st.layers {
            let n = l.h.len();
            l.h.data.copy_from_slice(&values[off..off + n]);
            off += n;
            if let Some(c) = &mut l.c {
                c.data.copy_from_slice(&values[off..off + n]);
                off += n;
            }
        }
        Ok(st)
    }
}

/// Bottom input of one layer at one step: a dense prefix followed by an optional one-hot.
#[derive(Clone, Copy)]
struct LayerInput<'a> {
    dense: &'a [Real],
    symbol: Option<usize>,
}

impl LayerInput<'_> {
    fn affine(&self, w: &Tensor2, b: &Tensor1) -> Vec<Real> {
        let n = self.dense.len();
        (0..w.rows())
            .map(|r| {
                let row = w.row(r);
                let mut acc = dot(&row[..n], self.dense);
                if let Some(sym) = self.symbol {
                    acc += row[n + sym];
                }
                acc + b.data[r]
            })
            .collect()
    }

    fn dot(&self, v: &[Real]) -> Real {
        let n = self.dense.len();
        let mut acc = dot(&v[..n], self.dense);
        if let Some(sym) = self.symbol {
            acc += v[n + sym];
        }
        acc
    }

    /// `G += d ⊗ input`
    fn outer_acc(&self, g: &mut Tensor2, d: &[Real]) {
        let n = self.dense.len();
        let cols = g.cols();
        for (r, &dr) in d.iter().enumerate() {
            if dr == 0.0 {
                continue;
            }
            let row = &mut g.data[r * cols..(r + 1) * cols];
            axpy(dr, self.dense, &mut row[..n]);
            if let Some(sym) = self.symbol {
                row[n + sym] += dr;
            }
        }
    }

    /// `g += a * input`
    fn axpy(&self, a: Real, g: &mut [Real]) {
        let n = self.dense.len();
        axpy(a, self.dense, &mut g[..n]);
        if let Some(sym) = self.symbol {
            g[n + sym] += a;
        }
    }
}

/// How the global reset gates are obtained during a step.
#[derive(Clone, Copy, Debug)]
pub enum GateMode<'a> {
    /// Computed from the gate parameters (gated-feedback) or fixed at 1 (other archs).
    Learned,
    /// Every gate is exactly 1.
    Frozen,
    /// `gates[i][j]` scales the path from layer `i` at `t-1` into layer `j` at `t`.
    Forced(&'a [Vec<Real>]),
}

#[derive(Clone, Debug)]
pub struct LayerCache {
    pub core: CoreCache,
    /// Gate value per source of this layer.
    pub gates: Vec<Real>,
    /// `U^{i→j} h_{t-1}^i` per source.
    pub rec: Vec<Vec<Real>>,
}

/// Everything a single step leaves behind for the reverse pass.
#[derive(Clone, Debug)]
pub struct StepCache {
    pub symbol: usize,
    pub prev: StackState,
    pub h_star_prev: Vec<Real>,
    pub layers: Vec<LayerCache>,
    pub gates_learned: bool,
}

impl StepCache {
    pub fn state(&self) -> StackState {
        StackState {
            layers: self
                .layers
                .iter()
                .map(|l| CellState { h: Tensor1::new(l.core.h().to_vec()), c: l.core.c().map(|c| Tensor1::new(c.to_vec())) })
                .collect(),
        }
    }

    fn layer_input(&self, cfg: &ModelConfig, j: usize) -> LayerInput<'_> {
        LayerInput { dense: if j == 0 { &[] } else { self.layers[j - 1].core.h() }, symbol: cfg.sees_symbol(j).then_some(self.symbol) }
    }

    /// Output-layer features (top layer or all layers).
    pub fn features(&self, cfg: &ModelConfig) -> Vec<Real> {
        if cfg.reads_all_layers() {
            let mut out = Vec::with_capacity(cfg.total_units());
            for l in &self.layers {
                out.extend_from_slice(l.core.h());
            }
            out
        } else {
            self.layers.last().unwrap().core.h().to_vec()
        }
    }
}

fn gate_value(w: &Tensor1, u: &Tensor1, input: LayerInput<'_>, h_star_prev: &[Real]) -> Real {
    sigmoid(input.dot(&w.data) + dot(&u.data, h_star_prev))
}

/// Global reset gates for every ordered layer pair, returned as `g[i][j]`.
///
/// `bottom_inputs[j]` is the vector layer `j` receives from below at this step
/// (the one-hot symbol, as a dense vector, for the first layer).
pub fn global_gates(cfg: &ModelConfig, gates: &GateParams, bottom_inputs: &[Tensor1], h_star_prev: &Tensor1) -> Result<Vec<Vec<Real>>> {
    let l = cfg.layers();
    check_len("global_gates: h*_{t-1}", cfg.total_units(), h_star_prev.len())?;
    check_len("global_gates: bottom inputs", l, bottom_inputs.len())?;
    let mut g = vec![vec![0.0; l]; l];
    for j in 0..l {
        check_len("global_gates: bottom input", cfg.layer_input_dim(j), bottom_inputs[j].len())?;
        if cfg.freeze_gates_to_one {
            (0..l).for_each(|i| g[i][j] = 1.0);
            continue;
        }
        let input = LayerInput { dense: &bottom_inputs[j].data, symbol: None };
        for i in 0..l {
            g[i][j] = gate_value(&gates.w[j][i], &gates.u[j][i], input, &h_star_prev.data);
        }
    }
    Ok(g)
}

/// One timestep of the whole stack, bottom-up.
pub fn step_with_cache(cfg: &ModelConfig, params: &ParamSet, symbol: usize, prev: &StackState, mode: GateMode<'_>) -> StepCache {
    let l = cfg.layers();
    let unit = cfg.unit;
    let n_gates = unit.n_unit_gates();
    let h_star_prev = prev.h_star();
    let mode = match mode {
        GateMode::Learned if cfg.freeze_gates_to_one => GateMode::Frozen,
        m => m,
    };
    let gates_learned = matches!(mode, GateMode::Learned) && cfg.is_gated_feedback();
    let mut layers: Vec<LayerCache> = Vec::with_capacity(l);
    for j in 0..l {
        let lp = &params.layers[j];
        let input = LayerInput { dense: if j == 0 { &[] } else { layers[j - 1].core.h() }, symbol: cfg.sees_symbol(j).then_some(symbol) };
        let mut pre: Vec<Vec<Real>> = lp.w.iter().zip(&lp.b).map(|(w, b)| input.affine(w, b)).collect();
        let gate_src: &[Real] = match cfg.unit_gate_source {
            UnitGateSource::SameLayer => &prev.layers[j].h.data,
            UnitGateSource::AllLayers => &h_star_prev,
        };
        for k in 0..n_gates {
            let rec = matvec(&lp.u_gate[k], gate_src);
            add_assign(&mut pre[k], &rec);
        }
        let sources = cfg.sources(j);
        let mut gates = Vec::with_capacity(sources.len());
        let mut rec = Vec::with_capacity(sources.len());
        let mut s = vec![0.0; cfg.units_per_layer[j]];
        for (si, &i) in sources.iter().enumerate() {
            let g = match mode {
                GateMode::Forced(m) => m[i][j],
                GateMode::Frozen => 1.0,
                GateMode::Learned => match &params.gates {
                    Some(gp) => gate_value(&gp.w[j][i], &gp.u[j][i], input, &h_star_prev),
                    None => 1.0,
                },
            };
            let v = matvec(&lp.u_rec[si], &prev.layers[i].h.data);
            axpy(g, &v, &mut s);
            gates.push(g);
            rec.push(v);
        }
        let core = core_forward(unit, pre, s, &prev.layers[j].h.data, prev.layers[j].c.as_ref().map(|c| c.as_slice()));
        layers.push(LayerCache { core, gates, rec });
    }
    StepCache { symbol, prev: prev.clone(), h_star_prev, layers, gates_learned }
}

fn check_step(cfg: &ModelConfig, params: &ParamSet, symbol: usize, prev: &StackState) -> Result<()> {
    cfg.validate()?;
    prev.check(cfg)?;
    check_len("params layer count", cfg.layers(), params.layers.len())?;
    if symbol >= cfg.input_vocab {
        return Err(Error::Data(format!("symbol {symbol} out of range for input vocabulary of {}", cfg.input_vocab)));
    }
    Ok(())
}

/// Gated-feedback step (also valid for the other architectures, where it reduces
/// to their own transition).
pub fn gf_step(cfg: &ModelConfig, params: &ParamSet, symbol: usize, prev: &StackState) -> Result<StackState> {
    check_step(cfg, params, symbol, prev)?;
    Ok(step_with_cache(cfg, params, symbol, prev, GateMode::Learned).state())
}

/// Step with an externally supplied gate matrix `gates[i][j]`.
pub fn gf_step_with_gates(
    cfg: &ModelConfig,
    params: &ParamSet,
    symbol: usize,
    prev: &StackState,
    gates: &[Vec<Real>],
) -> Result<StackState> {
    check_step(cfg, params, symbol, prev)?;
    let l = cfg.layers();
    if gates.len() != l || gates.iter().any(|r| r.len() != l) {
        return Err(Error::config("gates", format!("gate matrix must be {l}×{l}")));
    }
    if !cfg.is_gated_feedback() {
        return Err(Error::config("arch", "forced gates need a gated_feedback parameter layout"));
    }
    Ok(step_with_cache(cfg, params, symbol, prev, GateMode::Forced(gates)).state())
}

/// Conventional stacked (or single-layer) step.
pub fn stacked_step(cfg: &ModelConfig, params: &ParamSet, symbol: usize, prev: &StackState) -> Result<StackState> {
    if cfg.is_gated_feedback() {
        return Err(Error::config("arch", "stacked_step expects a single or stacked configuration"));
    }
    check_step(cfg, params, symbol, prev)?;
    Ok(step_with_cache(cfg, params, symbol, prev, GateMode::Learned).state())
}

/// Cached forward pass over a sequence.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub steps: Vec<StepCache>,
    pub features: Vec<Vec<Real>>,
    pub probs: Vec<Vec<Real>>,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SequenceOutput {
    pub logits: Vec<Vec<Real>>,
    pub final_state: StackState,
    /// `Σ_t −ln p(target_t)` in nats.
    pub nll: Real,
    pub cache: ForwardCache,
}

fn readout(params: &ParamSet, features: &[Real]) -> Vec<Real> {
    let mut logits = params.out_b.data.clone();
    matvec_acc(&params.out_w, features, &mut logits);
    logits
}

/// Logits for one feature vector.
pub fn output_logits(params: &ParamSet, features: &[Real]) -> Vec<Real> {
    readout(params, features)
}

/// Runs the recurrent part only, keeping per-step caches.
pub fn run_steps(cfg: &ModelConfig, params: &ParamSet, inputs: &[usize], state0: &StackState) -> Result<Vec<StepCache>> {
    cfg.validate()?;
    state0.check(cfg)?;
    if let Some(&bad) = inputs.iter().find(|&&s| s >= cfg.input_vocab) {
        return Err(Error::Data(format!("symbol {bad} out of range for input vocabulary of {}", cfg.input_vocab)));
    }
    let mut steps: Vec<StepCache> = Vec::with_capacity(inputs.len());
    for &sym in inputs {
        let next = {
            let prev_state;
            let prev = match steps.last() {
                Some(s) => {
                    prev_state = s.state();
                    &prev_state
                }
                None => state0,
            };
            step_with_cache(cfg, params, sym, prev, GateMode::Learned)
        };
        steps.push(next);
    }
    Ok(steps)
}

/// Forward pass with next-symbol loss: `targets[t]` is predicted after reading `inputs[t]`.
pub fn sequence_forward(
    cfg: &ModelConfig,
    params: &ParamSet,
    inputs: &[usize],
    targets: &[usize],
    state0: &StackState,
) -> Result<SequenceOutput> {
    check_len("sequence_forward: targets", inputs.len(), targets.len())?;
    if cfg.output_vocab == 0 {
        return Err(Error::config("output_vocab", "model has no readout layer"));
    }
    if let Some(&bad) = targets.iter().find(|&&s| s >= cfg.output_vocab) {
        return Err(Error::Data(format!("target {bad} out of range for output vocabulary of {}", cfg.output_vocab)));
    }
    let steps = run_steps(cfg, params, inputs, state0)?;
    let mut logits = Vec::with_capacity(steps.len());
    let mut features = Vec::with_capacity(steps.len());
    let mut probs = Vec::with_capacity(steps.len());
    let mut nll = 0.0;
    for (step, &target) in steps.iter().zip(targets) {
        let f = step.features(cfg);
        let z = readout(params, &f);
        nll += log_sum_exp(&z) - z[target];
        probs.push(softmax_slice(&z));
        features.push(f);
        logits.push(z);
    }
    let final_state = steps.last().map_or_else(|| state0.clone(), StepCache::state);
    Ok(SequenceOutput { logits, final_state, nll, cache: ForwardCache { steps, features, probs, targets: targets.to_vec() } })
}

/// BPTT through cached steps.
///
/// `d_features[t]`, when given, is the loss gradient w.r.t. the readout features at
/// step `t`; `d_final` is the gradient arriving at the last state from later
/// computation. Parameter gradients are accumulated into `grads`; the returned
/// state is the gradient w.r.t. the initial state.
pub fn backward_steps(
    cfg: &ModelConfig,
    params: &ParamSet,
    steps: &[StepCache],
    d_features: Option<&[Vec<Real>]>,
    d_final: Option<&StackState>,
    grads: &mut ParamSet,
) -> StackState {
    let l = cfg.layers();
    let unit = cfg.unit;
    let n_gates = unit.n_unit_gates();
    let offsets = cfg.layer_offsets();
    let total = cfg.total_units();
    let zero_state = StackState::zeros(cfg);
    let d_final = d_final.unwrap_or(&zero_state);
    let mut dh_next: Vec<Vec<Real>> = d_final.layers.iter().map(|s| s.h.data.clone()).collect();
    let mut dc_next: Vec<Option<Vec<Real>>> = d_final.layers.iter().map(|s| s.c.as_ref().map(|c| c.data.clone())).collect();

    let ParamSet { layers: glayers, gates: ggates, .. } = grads;

    for t in (0..steps.len()).rev() {
        let step = &steps[t];
        let mut dh = std::mem::take(&mut dh_next);
        if let Some(df) = d_features {
            let df = &df[t];
            if cfg.reads_all_layers() {
                for j in 0..l {
                    add_assign(&mut dh[j], &df[offsets[j]..offsets[j] + cfg.units_per_layer[j]]);
                }
            } else {
                add_assign(&mut dh[l - 1], df);
            }
        }
        let mut dh_prev: Vec<Vec<Real>> = cfg.units_per_layer.iter().map(|&n| vec![0.0; n]).collect();
        let mut dc_prev: Vec<Option<Vec<Real>>> = vec![None; l];
        let mut d_star = vec![0.0; total];

        for j in (0..l).rev() {
            let lc = &step.layers[j];
            let lp = &params.layers[j];
            let gl = &mut glayers[j];
            let cg = core_backward(&lc.core, &dh[j], dc_next[j].as_deref());
            if let Some(d) = &cg.dh_prev {
                add_assign(&mut dh_prev[j], d);
            }
            dc_prev[j] = cg.dc_prev;

            let input = step.layer_input(cfg, j);
            let mut d_dense = vec![0.0; input.dense.len()];
            for k in 0..unit.n_blocks() {
                let d = &cg.d_pre[k];
                input.outer_acc(&mut gl.w[k], d);
                add_assign(&mut gl.b[k].data, d);
                let w = &lp.w[k];
                let n = input.dense.len();
                if n > 0 {
                    for (r, &dr) in d.iter().enumerate() {
                        if dr != 0.0 {
                            axpy(dr, &w.row(r)[..n], &mut d_dense);
                        }
                    }
                }
            }

            let (gate_src, gate_src_grad): (&[Real], &mut [Real]) = match cfg.unit_gate_source {
                UnitGateSource::SameLayer => (&step.prev.layers[j].h.data, &mut dh_prev[j]),
                UnitGateSource::AllLayers => (&step.h_star_prev, &mut d_star),
            };
            for k in 0..n_gates {
                outer_acc(&mut gl.u_gate[k], &cg.d_pre[k], gate_src);
                matvec_t_acc(&lp.u_gate[k], &cg.d_pre[k], gate_src_grad);
            }

            for (si, &i) in cfg.sources(j).iter().enumerate() {
                let g = lc.gates[si];
                let scaled: Vec<Real> = cg.d_s.iter().map(|v| g * v).collect();
                outer_acc(&mut gl.u_rec[si], &scaled, &step.prev.layers[i].h.data);
                matvec_t_acc(&lp.u_rec[si], &scaled, &mut dh_prev[i]);
                if step.gates_learned {
                    let gp = params.gates.as_ref().expect("learned gates need gate parameters");
                    let gg = ggates.as_mut().expect("gradient set mirrors gate parameters");
                    let d_gate = dot(&cg.d_s, &lc.rec[si]) * g * (1.0 - g);
                    input.axpy(d_gate, &mut gg.w[j][i].data);
                    axpy(d_gate, &step.h_star_prev, &mut gg.u[j][i].data);
                    let n = input.dense.len();
                    axpy(d_gate, &gp.w[j][i].data[..n], &mut d_dense);
                    axpy(d_gate, &gp.u[j][i].data, &mut d_star);
                }
            }
            if j > 0 {
                add_assign(&mut dh[j - 1], &d_dense);
            }
        }
        for j in 0..l {
            add_assign(&mut dh_prev[j], &d_star[offsets[j]..offsets[j] + cfg.units_per_layer[j]]);
        }
        dh_next = dh_prev;
        dc_next = dc_prev;
    }

    StackState {
        layers: dh_next
            .into_iter()
            .zip(dc_next)
            .zip(&cfg.units_per_layer)
            .map(|((h, c), &n)| CellState {
                h: Tensor1::new(h),
                c: unit.has_memory_cell().then(|| Tensor1::new(c.unwrap_or_else(|| vec![0.0; n]))),
            })
            .collect(),
    }
}

/// Readout reverse pass: returns `dL/dfeatures` per step and accumulates output weights.
pub(crate) fn backward_readout(params: &ParamSet, cache: &ForwardCache, loss_scale: Real, grads: &mut ParamSet) -> Vec<Vec<Real>> {
    cache
        .probs
        .iter()
        .zip(&cache.features)
        .zip(&cache.targets)
        .map(|((p, f), &target)| {
            let mut dz: Vec<Real> = p.iter().map(|v| v * loss_scale).collect();
            dz[target] -= loss_scale;
            outer_acc(&mut grads.out_w, &dz, f);
            add_assign(&mut grads.out_b.data, &dz);
            let mut df = vec![0.0; f.len()];
            matvec_t_acc(&params.out_w, &dz, &mut df);
            df
        })
        .collect()
}

/// Accumulates gradients of `loss_scale · nll` into `grads`; returns `dL/dstate0`.
pub fn sequence_backward_into(
    cfg: &ModelConfig,
    params: &ParamSet,
    cache: Option<&ForwardCache>,
    loss_scale: Real,
    d_final: Option<&StackState>,
    grads: &mut ParamSet,
) -> Result<StackState> {
    let cache = cache.ok_or(Error::MissingCache("sequence_backward needs the forward cache"))?;
    let d_features = backward_readout(params, cache, loss_scale, grads);
    Ok(backward_steps(cfg, params, &cache.steps, Some(&d_features), d_final, grads))
}

#[derive(Clone, Debug)]
pub struct SequenceGrads {
    pub params: ParamSet,
    pub state0: StackState,
    pub norm: Real,
}

/// Gradients of the summed nll of a cached forward pass.
pub fn sequence_backward(cfg: &ModelConfig, params: &ParamSet, cache: Option<&ForwardCache>) -> Result<SequenceGrads> {
    let mut grads = params.zeros_like();
    let state0 = sequence_backward_into(cfg, params, cache, 1.0, None, &mut grads)?;
    let norm = grads.global_norm();
    Ok(SequenceGrads { params: grads, state0, norm })
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let params = ParamSet::init(&cfg, rng);
        Ok(Model { cfg, params })
    }

    pub fn zero_state(&self) -> StackState {
        StackState::zeros(&self.cfg)
    }

    /// Inference step: new state and output logits.
    pub fn step(&self, symbol: usize, state: &StackState) -> Result<(StackState, Vec<Real>)> {
        check_step(&self.cfg, &self.params, symbol, state)?;
        let cache = step_with_cache(&self.cfg, &self.params, symbol, state, GateMode::Learned);
        let logits = readout(&self.params, &cache.features(&self.cfg));
        Ok((cache.state(), logits))
    }

    /// Summed next-symbol nll of `symbols[1..]` given `symbols[..n-1]`, plus the final state.
    pub fn nll_streaming(&self, symbols: &[usize], state0: &StackState) -> Result<(Real, StackState)> {
        let mut state = state0.clone();
        let mut nll = 0.0;
        for w in symbols.windows(2) {
            let (next, logits) = self.step(w[0], &state)?;
            if w[1] >= self.cfg.output_vocab {
                return Err(Error::Data(format!("target {} out of range", w[1])));
            }
            nll += log_sum_exp(&logits) - logits[w[1]];
            state = next;
        }
        Ok((nll, state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{cell_forward, CellParams};
    use crate::gradcheck::{central_difference, max_relative_error};

    fn randomize(p: &mut ParamSet, rng: &mut Rng, scale: Real) {
        let strict = p.strict;
        p.strict = false;
        p.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x = rng.uniform_range(-scale, scale)));
        p.strict = strict;
        if strict {
            for l in &mut p.layers {
                l.b.iter_mut().for_each(|b| b.data.iter_mut().for_each(|x| *x = 0.0));
            }
            p.out_b.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn random_state(cfg: &ModelConfig, rng: &mut Rng) -> StackState {
        let mut s = StackState::zeros(cfg);
        for l in &mut s.layers {
            l.h.data.iter_mut().for_each(|v| *v = rng.uniform_range(-0.9, 0.9));
            if let Some(c) = &mut l.c {
                c.data.iter_mut().for_each(|v| *v = rng.uniform_range(-1.5, 1.5));
            }
        }
        s
    }

    fn one_hot(n: usize, k: usize) -> Tensor1 {
        let mut v = Tensor1::zeros(n);
        v.data[k] = 1.0;
        v
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::new(Arch::Single, UnitKind::Gru, vec![3, 3], 4, 4);
        assert!(cfg.validate().is_err());
        cfg.arch = Arch::Stacked;
        assert!(cfg.validate().is_ok());
        cfg.freeze_gates_to_one = true;
        assert!(cfg.validate().is_err());
        cfg.arch = Arch::GatedFeedback;
        assert!(cfg.validate().is_ok());
        cfg.units_per_layer = vec![3, 0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_gate_params_give_half() {
        let cfg = ModelConfig::new(Arch::GatedFeedback, UnitKind::Tanh, vec![2, 3], 4, 4);
        let p = ParamSet::zeros(&cfg);
        let bottoms = vec![one_hot(4, 1), Tensor1::new(vec![0.3, -0.2])];
        let g = global_gates(&cfg, p.gates.as_ref().unwrap(), &bottoms, &Tensor1::new(vec![0.1; 5])).unwrap();
        assert!(g.iter().flatten().all(|v| *v == 0.5));
    }

    #[test]
    fn frozen_gates_are_exactly_one() {
        let mut cfg = ModelConfig::new(Arch::GatedFeedback, UnitKind::Tanh, vec![2, 3], 4, 4);
        cfg.freeze_gates_to_one = true;
        let mut rng = Rng::new(1);
        let mut p = ParamSet::zeros(&cfg);
        randomize(&mut p, &mut rng, 1.0);
        let bottoms = vec![one_hot(4, 1), Tensor1::new(vec![0.3, -0.2])];
        let g = global_gates(&cfg, p.gates.as_ref().unwrap(), &bottoms, &Tensor1::new(vec![0.1; 5])).unwrap();
        assert!(g.iter().flatten().all(|v| *v == 1.0));
        let cache = step_with_cache(&cfg, &p, 2, &random_state(&cfg, &mut rng), GateMode::Learned);
        assert!(cache.layers.iter().all(|l| l.gates.iter().all(|g| *g == 1.0)));
    }

    #[test]
    fn gates_match_dot_product_oracle() {
        let cfg = ModelConfig::new(Arch::GatedFeedback, UnitKind::Gru, vec![3, 2, 4], 5, 5);
        let mut rng = Rng::new(2);
        let mut p = ParamSet::zeros(&cfg);
        randomize(&mut p, &mut rng, 1.0);
        let gp = p.gates.as_ref().unwrap();
        let bottoms = vec![one_hot(5, 3), Tensor1::new(vec![0.2, -0.4, 0.9]), Tensor1::new(vec![0.5, 0.1])];
        let hs = Tensor1::new((0..9).map(|_| rng.uniform_range(-1.0, 1.0)).collect());
        let g = global_gates(&cfg, gp, &bottoms, &hs).unwrap();
        for j in 0..3 {
            for i in 0..3 {
                let mut acc = 0.0;
                for k in 0..bottoms[j].len() {
                    acc += gp.w[j][i].data[k] * bottoms[j].data[k];
                }
                for k in 0..9 {
                    acc += gp.u[j][i].data[k] * hs.data[k];
                }
                let want = 1.0 / (1.0 + (-acc).exp());
                assert!((g[i][j] - want).abs() <= 1e-12);
                assert!(g[i][j] > 0.0 && g[i][j] < 1.0);
            }
        }
    }

    /// Literal per-element evaluation of one gated-feedback GRU step.
    fn gf_gru_oracle(cfg: &ModelConfig, p: &ParamSet, sym: usize, prev: &StackState) -> Vec<Vec<Real>> {
        let l = cfg.layers();
        let hstar = prev.h_star();
        let sig = |v: Real| 1.0 / (1.0 + (-v).exp());
        let mut out: Vec<Vec<Real>> = Vec::new();
        for j in 0..l {
            let n = cfg.units_per_layer[j];
            let bottom: Vec<Real> = if j == 0 { one_hot(cfg.input_vocab, sym).data } else { out[j - 1].clone() };
            let lp = &p.layers[j];
            let gp = p.gates.as_ref().unwrap();
            let mut g = vec![0.0; l];
            for i in 0..l {
                let mut a = 0.0;
                for k in 0..bottom.len() {
                    a += gp.w[j][i].data[k] * bottom[k];
                }
                for k in 0..hstar.len() {
                    a += gp.u[j][i].data[k] * hstar[k];
                }
                g[i] = sig(a);
            }
            let hp = &prev.layers[j].h.data;
            let mut h = vec![0.0; n];
            for r in 0..n {
                let lin = |k: usize| {
                    let mut a = lp.b[k].data[r];
                    for c in 0..bottom.len() {
                        a += lp.w[k].get(r, c) * bottom[c];
                    }
                    a
                };
                let mut az = lin(0);
                let mut ar = lin(1);
                for c in 0..n {
                    az += lp.u_gate[0].get(r, c) * hp[c];
                    ar += lp.u_gate[1].get(r, c) * hp[c];
                }
                let (z, rr) = (sig(az), sig(ar));
                let mut gated = 0.0;
                for i in 0..l {
                    let mut v = 0.0;
                    for c in 0..cfg.units_per_layer[i] {
                        v += lp.u_rec[i].get(r, c) * prev.layers[i].h.data[c];
                    }
                    gated += g[i] * v;
                }
                let ht = (lin(2) + rr * gated).tanh();
                h[r] = (1.0 - z) * hp[r] + z * ht;
            }
            out.push(h);
        }
        out
    }

    #[test]
    fn gf_gru_step_matches_oracle() {
        let cfg = ModelConfig::new(Arch::GatedFeedback, UnitKind::Gru, vec![4, 4, 4], 6, 6);
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let mut p = ParamSet::zeros(&cfg);
            randomize(&mut p, &mut rng, 0.7);
            let prev = random_state(&cfg, &mut rng);
            let got = gf_step(&cfg, &p, 4, &prev).unwrap();
            let want = gf_gru_oracle(&cfg, &p, 4, &prev);
            for (gl, wl) in got.layers.iter().zip(&want) {
                for (a, b) in gl.h.data.iter().zip(wl) {
                    assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
                }
            }
        }
    }

    /// Literal per-element evaluation of a conventional stacked LSTM step.
    fn stacked_lstm_oracle(cfg: &ModelConfig, p: &ParamSet, sym: usize, prev: &StackState) -> Vec<(Vec<Real>, Vec<Real>)> {
        let sig = |v: Real| 1.0 / (1.0 + (-v).exp());
        let mut out: Vec<(Vec<Real>, Vec<Real>)> = Vec::new();
        for j in 0..cfg.layers() {
            let n = cfg.units_per_layer[j];
            let bottom: Vec<Real> = if j == 0 { one_hot(cfg.input_vocab, sym).data } else { out[j - 1].0.clone() };
            let lp = &p.layers[j];
            let hp = &prev.layers[j].h.data;
            let cp = &prev.layers[j].c.as_ref().unwrap().data;
            let (mut h, mut c) = (vec![0.0; n], vec![0.0; n]);
            for r in 0..n {
                let pre = |k: usize, u: &Tensor2| {
                    let mut a = lp.b[k].data[r];
                    for q in 0..bottom.len() {
                        a += lp.w[k].get(r, q) * bottom[q];
                    }
                    for q in 0..n {
                        a += u.get(r, q) * hp[q];
                    }
                    a
                };
                let i = sig(pre(0, &lp.u_gate[0]));
                let f = sig(pre(1, &lp.u_gate[1]));
                let o = sig(pre(2, &lp.u_gate[2]));
                let ct = pre(3, &lp.u_rec[0]).tanh();
                c[r] = f * cp[r] + i * ct;
                h[r] = o * c[r].tanh();
            }
            out.push((h, c));
        }
        out
    }

    #[test]
    fn stacked_lstm_step_matches_oracle() {
        let cfg = ModelConfig::new(Arch::Stacked, UnitKind::Lstm, vec![3, 4], 5, 5);
        let mut rng = Rng::new(7);
        let mut p = ParamSet::zeros(&cfg);
        randomize(&mut p, &mut rng, 0.8);
        let prev = random_state(&cfg, &mut rng);
        let got = stacked_step(&cfg, &p, 2, &prev).unwrap();
        for (gl, (h, c)) in got.layers.iter().zip(stacked_lstm_oracle(&cfg, &p, 2, &prev)) {
            for (a, b) in gl.h.data.iter().zip(&h).chain(gl.c.as_ref().unwrap().data.iter().zip(&c)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    /// GF parameters sharing every matrix with a stacked model, plus random
    /// cross-layer matrices and gate vectors.
    fn gf_sharing(stacked: &ModelConfig, sp: &ParamSet, rng: &mut Rng) -> (ModelConfig, ParamSet) {
        let mut cfg = stacked.clone();
        cfg.arch = Arch::GatedFeedback;
        let mut gp = ParamSet::zeros(&cfg);
        randomize(&mut gp, rng, 0.5);
        for (j, (gl, sl)) in gp.layers.iter_mut().zip(&sp.layers).enumerate() {
            gl.w = sl.w.clone();
            gl.b = sl.b.clone();
            gl.u_gate = sl.u_gate.clone();
            gl.u_rec[j] = sl.u_rec[0].clone();
        }
        gp.out_w = sp.out_w.clone();
        gp.out_b = sp.out_b.clone();
        (cfg, gp)
    }

    #[test]
    fn identity_gates_reproduce_stacked_exactly() {
        for unit in [UnitKind::Tanh, UnitKind::Gru, UnitKind::Lstm] {
            let scfg = ModelConfig::new(Arch::Stacked, unit, vec![3, 4, 2], 5, 5);
            let mut rng = Rng::new(11);
            let mut sp = ParamSet::zeros(&scfg);
            randomize(&mut sp, &mut rng, 0.8);
            let (gcfg, gp) = gf_sharing(&scfg, &sp, &mut rng);
            let eye: Vec<Vec<Real>> = (0..3).map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
            let mut s_state = random_state(&scfg, &mut rng);
            let mut g_state = s_state.clone();
            for sym in [0, 3, 1, 4, 4, 2] {
                s_state = stacked_step(&scfg, &sp, sym, &s_state).unwrap();
                g_state = gf_step_with_gates(&gcfg, &gp, sym, &g_state, &eye).unwrap();
                assert_eq!(s_state, g_state, "{unit}");
            }
        }
    }

    #[test]
    fn single_layer_frozen_reduces_to_plain_cell() {
        for unit in [UnitKind::Tanh, UnitKind::Gru, UnitKind::Lstm] {
            for arch in [Arch::Single, Arch::Stacked, Arch::GatedFeedback] {
                let mut cfg = ModelConfig::new(arch, unit, vec![4], 6, 6);
                cfg.freeze_gates_to_one = arch == Arch::GatedFeedback;
                let mut rng = Rng::new(13);
                let mut p = ParamSet::zeros(&cfg);
                randomize(&mut p, &mut rng, 0.8);
                let mut cell = CellParams::zeros(unit, 6, 4);
                for (k, (w, u, b)) in cell.blocks_mut().into_iter().enumerate() {
                    *w = p.layers[0].w[k].clone();
                    *b = p.layers[0].b[k].clone();
                    *u = if k + 1 == unit.n_blocks() { p.layers[0].u_rec[0].clone() } else { p.layers[0].u_gate[k].clone() };
                }
                let mut state = random_state(&cfg, &mut rng);
                for sym in [5, 0, 2, 2] {
                    let next = gf_step(&cfg, &p, sym, &state).unwrap();
                    let c = cell_forward(&cell, &one_hot(6, sym), &state.layers[0].h, state.layers[0].c.as_ref()).unwrap();
                    assert_eq!(next.layers[0].h.data, c.core.h(), "{arch} {unit}");
                    assert_eq!(next.layers[0].c.as_ref().map(|c| c.data.as_slice()), c.core.c());
                    state = next;
                }
            }
        }
    }

    #[test]
    fn severed_recurrence_is_feedforward() {
        let cfg = ModelConfig::new(Arch::GatedFeedback, UnitKind::Tanh, vec![3, 3], 4, 4);
        let mut rng = Rng::new(17);
        let mut p = ParamSet::zeros(&cfg);
        randomize(&mut p, &mut rng, 0.8);
        for l in &mut p.layers {
            l.u_rec.iter_mut().for_each(|u| u.data.iter_mut().for_each(|v| *v = 0.0));
        }
        let a = gf_step(&cfg, &p, 1, &random_state(&cfg, &mut rng)).unwrap();
        let b = gf_step(&cfg, &p, 1, &random_state(&cfg, &mut rng)).unwrap();
        assert_eq!(a, b);
        let h1: Vec<Real> = (0..3).map(|r| (p.layers[0].w[0].get(r, 1) + p.layers[0].b[0].data[r]).tanh()).collect();
        let h2: Vec<Real> = (0..3).map(|r| (dot(p.layers[1].w[0].row(r), &h1) + p.layers[1].b[0].data[r]).tanh()).collect();
        assert_eq!(a.layers[1].h.data, h2);
    }

    #[test]
    fn uniform_model_has_log_vocab_nll() {
        let cfg = ModelConfig::new(Arch::GatedFeedback, UnitKind::Lstm, vec![3, 3], 7, 7);
        let mut rng = Rng::new(3);
        let mut p = ParamSet::init(&cfg, &mut rng);
        p.out_w.data.iter_mut().for_each(|v| *v = 0.0);
        let inputs = [1, 2, 3, 4, 5];
        let out = sequence_forward(&cfg, &p, &inputs, &[2, 3, 4, 5, 6], &StackState::zeros(&cfg)).unwrap();
        assert!((out.nll / 5.0 - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_is_additive_over_splits() {
        let cfg = ModelConfig::new(Arch::GatedFeedback, UnitKind::Gru, vec![3, 2], 5, 5);
        let mut rng = Rng::new(4);
        let p = ParamSet::init(&cfg, &mut rng);
        let seq = [0, 1, 4, 2, 2, 3, 1, 0];
        let s0 = StackState::zeros(&cfg);
        let whole = sequence_forward(&cfg, &p, &seq[..7], &seq[1..], &s0).unwrap();
        for cut in 1..7 {
            let a = sequence_forward(&cfg, &p, &seq[..cut], &seq[1..cut + 1], &s0).unwrap();
            let b = sequence_forward(&cfg, &p, &seq[cut..7], &seq[cut + 1..], &a.final_state).unwrap();
            assert!((a.nll + b.nll - whole.nll).abs() <= 1e-10);
        }
        // compositional oracle: step + softmax one symbol at a time
        let model = Model { cfg: cfg.clone(), params: p.clone() };
        let (nll, _) = model.nll_streaming(&seq, &s0).unwrap();
        assert!((nll - whole.nll).abs() <= 1e-10);
    }

    #[test]
    fn out_of_range_symbols_are_rejected() {
        let cfg = ModelConfig::new(Arch::Stacked, UnitKind::Tanh, vec![2, 2], 3, 3);
        let p = ParamSet::zeros(&cfg);
        let s0 = StackState::zeros(&cfg);
        assert!(matches!(sequence_forward(&cfg, &p, &[0, 3], &[1, 1], &s0), Err(Error::Data(_))));
        assert!(matches!(sequence_forward(&cfg, &p, &[0, 1], &[1, 5], &s0), Err(Error::Data(_))));
    }

    #[test]
    fn backward_without_cache_fails() {
        let cfg = ModelConfig::new(Arch::Stacked, UnitKind::Tanh, vec![2], 3, 3);
        let p = ParamSet::zeros(&cfg);
        assert!(matches!(sequence_backward(&cfg, &p, None), Err(Error::MissingCache(_))));
    }

    fn gradcheck(cfg: &ModelConfig, seed: u64, steps: usize) -> Real {
        let mut rng = Rng::new(seed);
        let mut p = ParamSet::zeros(cfg);
        randomize(&mut p, &mut rng, 0.6);
        let inputs: Vec<usize> = (0..steps).map(|_| rng.below(cfg.input_vocab)).collect();
        let targets: Vec<usize> = (0..steps).map(|_| rng.below(cfg.output_vocab)).collect();
        let s0 = random_state(cfg, &mut rng);
        let out = sequence_forward(cfg, &p, &inputs, &targets, &s0).unwrap();
        let g = sequence_backward(cfg, &p, Some(&out.cache)).unwrap();
        let theta = p.to_flat();
        let numeric = central_difference(
            |v| {
                let mut q = p.clone();
                q.set_flat(v).unwrap();
                sequence_forward(cfg, &q, &inputs, &targets, &s0).unwrap().nll
            },
            &theta,
            1e-5,
        );
        let mut worst = max_relative_error(&g.params.to_flat(), &numeric);
        let ns = central_difference(
            |v| {
                let s = StackState::from_flat(cfg, v).unwrap();
                sequence_forward(cfg, &p, &inputs, &targets, &s).unwrap().nll
            },
            &s0.to_flat(),
            1e-5,
        );
        worst = worst.max(max_relative_error(&g.state0.to_flat(), &ns));
        worst
    }

    #[test]
    fn gf_lstm_gradients_match_finite_differences() {
        let cfg = ModelConfig::new(Arch::GatedFeedback, UnitKind::Lstm, vec![3, 3], 4, 4);
        for seed in 0..3 {
            let err = gradcheck(&cfg, seed, 5);
            assert!(err <= 1e-5, "seed {seed}: {err:e}");
        }
    }

    #[test]
    fn variant_gradients_match_finite_differences() {
        let mut cfg = ModelConfig::new(Arch::GatedFeedback, UnitKind::Gru, vec![3, 2, 2], 4, 3);
        cfg.unit_gate_source = UnitGateSource::AllLayers;
        cfg.skip_connections = true;
        assert!(gradcheck(&cfg, 5, 4) <= 1e-5);
        let mut cfg = ModelConfig::new(Arch::Stacked, UnitKind::Lstm, vec![2, 3], 4, 3);
        cfg.readout_all_layers = true;
        cfg.strict = true;
        assert!(gradcheck(&cfg, 6, 4) <= 1e-5);
    }

    #[test]
    fn loss_scale_is_linear() {
        let cfg = ModelConfig::new(Arch::GatedFeedback, UnitKind::Tanh, vec![2, 2], 3, 3);
        let mut rng = Rng::new(8);
        let p = ParamSet::init(&cfg, &mut rng);
        let out = sequence_forward(&cfg, &p, &[0, 1, 2], &[1, 2, 0], &StackState::zeros(&cfg)).unwrap();
        let mut g1 = p.zeros_like();
        sequence_backward_into(&cfg, &p, Some(&out.cache), 1.0, None, &mut g1).unwrap();
        let mut g2 = p.zeros_like();
        sequence_backward_into(&cfg, &p, Some(&out.cache), 2.0, None, &mut g2).unwrap();
        for (a, b) in g1.to_flat().iter().zip(g2.to_flat()) {
            assert!((2.0 * a - b).abs() <= 1e-14 * b.abs().max(1.0));
        }
    }

    #[test]
    fn frozen_gates_have_zero_gradient() {
        let mut cfg = ModelConfig::new(Arch::GatedFeedback, UnitKind::Lstm, vec![2, 2], 3, 3);
        cfg.freeze_gates_to_one = true;
        let mut rng = Rng::new(9);
        let mut p = ParamSet::zeros(&cfg);
        randomize(&mut p, &mut rng, 0.5);
        let out = sequence_forward(&cfg, &p, &[0, 1, 2, 1], &[1, 2, 0, 0], &StackState::zeros(&cfg)).unwrap();
        let g = sequence_backward(&cfg, &p, Some(&out.cache)).unwrap();
        let gates = g.params.gates.unwrap();
        assert!(gates.w.iter().chain(&gates.u).flatten().all(|t| t.data.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn manifest_order_is_stable() {
        let cfg = ModelConfig::new(Arch::GatedFeedback, UnitKind::Gru, vec![2, 3], 4, 5);
        let a = ParamSet::zeros(&cfg).manifest();
        let b = ParamSet::init(&cfg, &mut Rng::new(1)).manifest();
        assert_eq!(a, b);
        assert_eq!(a.first().unwrap().0, "layer0.w0");
        assert_eq!(a.last().unwrap().0, "out.b");
    }

    #[test]
    fn breakdown_sums_to_total() {
        let mut cfg = ModelConfig::new(Arch::GatedFeedback, UnitKind::Lstm, vec![4, 3, 2], 7, 7);
        cfg.skip_connections = true;
        let total: usize = parameter_breakdown(&cfg).iter().map(|(_, n)| n).sum();
        assert_eq!(total, count_parameters(&cfg));
    }

    #[test]
    fn capacity_counts_match_closed_form() {
        let rows = paper_capacity_rows();
        // 205·1000 input, 1000² recurrent, 1000·205 readout.
        assert_eq!(count_parameters(&paper_capacity_config(&rows[0], 205)), 1_410_000);
        // Three 390² recurrences, a 205-wide first input, two (390+205)-wide inputs
        // above it, and a readout over all three layers.
        let stacked = 3 * 390 * 390 + 205 * 390 + 2 * (390 + 205) * 390 + 3 * 390 * 205;
        assert_eq!(count_parameters(&paper_capacity_config(&rows[1], 205)), stacked);
    }
}
