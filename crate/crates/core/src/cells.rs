//! Single-timestep tanh, GRU and LSTM transitions with their exact reverse passes.
//!
//! Each unit is described as a list of *blocks*, one per affine map. The candidate
//! block (new content) is always last:
//!
//! | unit | blocks            |
//! |------|-------------------|
//! | tanh | `c`               |
//! | GRU  | `z`, `r`, `c`     |
//! | LSTM | `i`, `f`, `o`, `c`|
//!
//! The nonlinear part of a step only depends on the block pre-activations and on
//! the candidate's recurrent term `s`. [`core_forward`] / [`core_backward`] work at
//! that level and are shared with the multi-layer stack, which builds `s` from
//! several gated sources instead of a single `U·h_prev`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numerics::{add_assign, affine, matvec, matvec_t_acc, outer_acc, sigmoid, Real, Rng, Tensor1, Tensor2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Tanh,
    Gru,
    Lstm,
}

impl UnitKind {
    pub fn block_names(self) -> &'static [&'static str] {
        match self {
            UnitKind::Tanh => &["c"],
            UnitKind::Gru => &["z", "r", "c"],
            UnitKind::Lstm => &["i", "f", "o", "c"],
        }
    }

    pub fn n_blocks(self) -> usize {
        self.block_names().len()
    }

    /// Blocks other than the candidate (the unit-wise gates).
    pub fn n_unit_gates(self) -> usize {
        self.n_blocks() - 1
    }

    pub fn has_memory_cell(self) -> bool {
        self == UnitKind::Lstm
    }

    /// Bias value a freshly initialised block starts from.
    pub(crate) fn initial_bias(self, block: usize) -> Real {
        match (self, block) {
            (UnitKind::Lstm, 1) => 1.0,
            _ => 0.0,
        }
    }
}

impl std::fmt::Display for UnitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UnitKind::Tanh => "tanh",
            UnitKind::Gru => "gru",
            UnitKind::Lstm => "lstm",
        })
    }
}

impl std::str::FromStr for UnitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(UnitKind::Tanh),
            "gru" => Ok(UnitKind::Gru),
            "lstm" => Ok(UnitKind::Lstm),
            other => Err(Error::config("unit", format!("unknown unit kind `{other}`"))),
        }
    }
}

/// Activations kept from a forward step; everything the reverse pass needs.
#[derive(Clone, Debug, PartialEq)]
pub enum CoreCache {
    Tanh { h: Vec<Real> },
    Gru { z: Vec<Real>, r: Vec<Real>, s: Vec<Real>, h_tilde: Vec<Real>, h_prev: Vec<Real>, h: Vec<Real> },
    Lstm { i: Vec<Real>, f: Vec<Real>, o: Vec<Real>, c_tilde: Vec<Real>, c_prev: Vec<Real>, c: Vec<Real>, tanh_c: Vec<Real>, h: Vec<Real> },
}

impl CoreCache {
    pub fn kind(&self) -> UnitKind {
        match self {
            CoreCache::Tanh { .. } => UnitKind::Tanh,
            CoreCache::Gru { .. } => UnitKind::Gru,
            CoreCache::Lstm { .. } => UnitKind::Lstm,
        }
    }

    pub fn h(&self) -> &[Real] {
        match self {
            CoreCache::Tanh { h } | CoreCache::Gru { h, .. } | CoreCache::Lstm { h, .. } => h,
        }
    }

    pub fn c(&self) -> Option<&[Real]> {
        match self {
            CoreCache::Lstm { c, .. } => Some(c),
            _ => None,
        }
    }
}

/// Gradients flowing out of [`core_backward`].
#[derive(Clone, Debug)]
pub struct CoreGrads {
    /// Per block, gradient w.r.t. the pre-activation (excluding `s`).
    pub d_pre: Vec<Vec<Real>>,
    /// Gradient w.r.t. the candidate's recurrent term.
    pub d_s: Vec<Real>,
    /// Direct path to the same layer's previous state (GRU leak only).
    pub dh_prev: Option<Vec<Real>>,
    /// Memory-cell path (LSTM only).
    pub dc_prev: Option<Vec<Real>>,
}

/// Applies the unit nonlinearity.
///
/// `pre` holds one pre-activation vector per block in block order and `s` is the
/// candidate's recurrent contribution. `h_prev` is only read by the GRU, `c_prev`
/// only by the LSTM.
pub fn core_forward(kind: UnitKind, mut pre: Vec<Vec<Real>>, s: Vec<Real>, h_prev: &[Real], c_prev: Option<&[Real]>) -> CoreCache {
    debug_assert_eq!(pre.len(), kind.n_blocks());
    match kind {
        UnitKind::Tanh => {
            let mut h = pre.pop().unwrap();
            for (v, sv) in h.iter_mut().zip(&s) {
                *v = (*v + sv).tanh();
            }
            CoreCache::Tanh { h }
        }
        UnitKind::Gru => {
            let cand = pre.pop().unwrap();
            let mut r = pre.pop().unwrap();
            let mut z = pre.pop().unwrap();
            z.iter_mut().for_each(|v| *v = sigmoid(*v));
            r.iter_mut().for_each(|v| *v = sigmoid(*v));
            let h_tilde: Vec<Real> = cand.iter().zip(&r).zip(&s).map(|((a, rv), sv)| (a + rv * sv).tanh()).collect();
            let h = z.iter().zip(h_prev).zip(&h_tilde).map(|((zv, hp), ht)| (1.0 - zv) * hp + zv * ht).collect();
            CoreCache::Gru { z, r, s, h_tilde, h_prev: h_prev.to_vec(), h }
        }
        UnitKind::Lstm => {
            let c_prev = c_prev.expect("LSTM step needs the previous memory cell");
            let cand = pre.pop().unwrap();
            let mut o = pre.pop().unwrap();
            let mut f = pre.pop().unwrap();
            let mut i = pre.pop().unwrap();
            for g in [&mut i, &mut f, &mut o] {
                g.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            let c_tilde: Vec<Real> = cand.iter().zip(&s).map(|(a, sv)| (a + sv).tanh()).collect();
            let c: Vec<Real> = (0..c_tilde.len()).map(|k| f[k] * c_prev[k] + i[k] * c_tilde[k]).collect();
            let tanh_c: Vec<Real> = c.iter().map(|v| v.tanh()).collect();
            let h = o.iter().zip(&tanh_c).map(|(ov, tc)| ov * tc).collect();
            CoreCache::Lstm { i, f, o, c_tilde, c_prev: c_prev.to_vec(), c, tanh_c, h }
        }
    }
}

/// Reverse of [`core_forward`] given `dL/dh` (and `dL/dc` from the next step for LSTM).
pub fn core_backward(cache: &CoreCache, dh: &[Real], dc: Option<&[Real]>) -> CoreGrads {
    match cache {
        CoreCache::Tanh { h } => {
            let d: Vec<Real> = h.iter().zip(dh).map(|(hv, g)| g * (1.0 - hv * hv)).collect();
            CoreGrads { d_s: d.clone(), d_pre: vec![d], dh_prev: None, dc_prev: None }
        }
        CoreCache::Gru { z, r, s, h_tilde, h_prev, .. } => {
            let n = z.len();
            let mut dz = vec![0.0; n];
            let mut dr = vec![0.0; n];
            let mut dq = vec![0.0; n];
            let mut d_s = vec![0.0; n];
            let mut dhp = vec![0.0; n];
            for k in 0..n {
                let dht = dh[k] * z[k];
                dhp[k] = dh[k] * (1.0 - z[k]);
                dz[k] = dh[k] * (h_tilde[k] - h_prev[k]) * z[k] * (1.0 - z[k]);
                dq[k] = dht * (1.0 - h_tilde[k] * h_tilde[k]);
                d_s[k] = dq[k] * r[k];
                dr[k] = dq[k] * s[k] * r[k] * (1.0 - r[k]);
            }
            CoreGrads { d_pre: vec![dz, dr, dq], d_s, dh_prev: Some(dhp), dc_prev: None }
        }
        CoreCache::Lstm { i, f, o, c_tilde, c_prev, tanh_c, .. } => {
            let n = i.len();
            let mut di = vec![0.0; n];
            let mut df = vec![0.0; n];
            let mut d_o = vec![0.0; n];
            let mut dq = vec![0.0; n];
            let mut dcp = vec![0.0; n];
            for k in 0..n {
                let dc_next = dc.map_or(0.0, |d| d[k]);
                let dc_tot = dc_next + dh[k] * o[k] * (1.0 - tanh_c[k] * tanh_c[k]);
                d_o[k] = dh[k] * tanh_c[k] * o[k] * (1.0 - o[k]);
                di[k] = dc_tot * c_tilde[k] * i[k] * (1.0 - i[k]);
                df[k] = dc_tot * c_prev[k] * f[k] * (1.0 - f[k]);
                dq[k] = dc_tot * i[k] * (1.0 - c_tilde[k] * c_tilde[k]);
                dcp[k] = dc_tot * f[k];
            }
            CoreGrads { d_s: dq.clone(), d_pre: vec![di, df, d_o, dq], dh_prev: None, dc_prev: Some(dcp) }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TanhParams {
    pub w: Tensor2,
    pub u: Tensor2,
    pub b: Tensor1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w: Tensor2,
    pub u: Tensor2,
    pub w_z: Tensor2,
    pub u_z: Tensor2,
    pub w_r: Tensor2,
    pub u_r: Tensor2,
    pub b: Tensor1,
    pub b_z: Tensor1,
    pub b_r: Tensor1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_c: Tensor2,
    pub u_c: Tensor2,
    pub w_i: Tensor2,
    pub u_i: Tensor2,
    pub w_f: Tensor2,
    pub u_f: Tensor2,
    pub w_o: Tensor2,
    pub u_o: Tensor2,
    pub b_c: Tensor1,
    pub b_i: Tensor1,
    pub b_f: Tensor1,
    pub b_o: Tensor1,
}

/// Parameters of one single-layer cell of any kind.
#[derive(Clone, Debug, PartialEq)]
pub enum CellParams {
    Tanh(TanhParams),
    Gru(GruParams),
    Lstm(LstmParams),
}

/// Block-ordered borrowed view: `(W, U, b)` per block, candidate last.
type BlockRefs<'a> = Vec<(&'a Tensor2, &'a Tensor2, &'a Tensor1)>;
type BlockMuts<'a> = Vec<(&'a mut Tensor2, &'a mut Tensor2, &'a mut Tensor1)>;

impl CellParams {
    pub fn kind(&self) -> UnitKind {
        match self {
            CellParams::Tanh(_) => UnitKind::Tanh,
            CellParams::Gru(_) => UnitKind::Gru,
            CellParams::Lstm(_) => UnitKind::Lstm,
        }
    }

    /// Uniform `[-1/√fan_in, 1/√fan_in]` weights; forget-gate bias 1, other biases 0.
    pub fn init(kind: UnitKind, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut p = CellParams::zeros(kind, input, hidden);
        for (k, (w, u, b)) in p.blocks_mut().into_iter().enumerate() {
            for m in [w, u] {
                let s = 1.0 / (m.cols().max(1) as Real).sqrt();
                m.data.iter_mut().for_each(|v| *v = rng.uniform_range(-s, s));
            }
            b.data.iter_mut().for_each(|v| *v = kind.initial_bias(k));
        }
        p
    }

    pub fn zeros(kind: UnitKind, input: usize, hidden: usize) -> Self {
        let w = || Tensor2::zeros(hidden, input);
        let u = || Tensor2::zeros(hidden, hidden);
        let b = || Tensor1::zeros(hidden);
        match kind {
            UnitKind::Tanh => CellParams::Tanh(TanhParams { w: w(), u: u(), b: b() }),
            UnitKind::Gru => {
                CellParams::Gru(GruParams { w: w(), u: u(), w_z: w(), u_z: u(), w_r: w(), u_r: u(), b: b(), b_z: b(), b_r: b() })
            }
            UnitKind::Lstm => CellParams::Lstm(LstmParams {
                w_c: w(),
                u_c: u(),
                w_i: w(),
                u_i: u(),
                w_f: w(),
                u_f: u(),
                w_o: w(),
                u_o: u(),
                b_c: b(),
                b_i: b(),
                b_f: b(),
                b_o: b(),
            }),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.blocks()[0].2.len()
    }

    pub fn input_size(&self) -> usize {
        self.blocks()[0].0.cols()
    }

    pub fn blocks(&self) -> BlockRefs<'_> {
        match self {
            CellParams::Tanh(p) => vec![(&p.w, &p.u, &p.b)],
            CellParams::Gru(p) => vec![(&p.w_z, &p.u_z, &p.b_z), (&p.w_r, &p.u_r, &p.b_r), (&p.w, &p.u, &p.b)],
            CellParams::Lstm(p) => {
                vec![(&p.w_i, &p.u_i, &p.b_i), (&p.w_f, &p.u_f, &p.b_f), (&p.w_o, &p.u_o, &p.b_o), (&p.w_c, &p.u_c, &p.b_c)]
            }
        }
    }

    pub fn blocks_mut(&mut self) -> BlockMuts<'_> {
        match self {
            CellParams::Tanh(p) => vec![(&mut p.w, &mut p.u, &mut p.b)],
            CellParams::Gru(p) => {
                vec![(&mut p.w_z, &mut p.u_z, &mut p.b_z), (&mut p.w_r, &mut p.u_r, &mut p.b_r), (&mut p.w, &mut p.u, &mut p.b)]
            }
            CellParams::Lstm(p) => vec![
                (&mut p.w_i, &mut p.u_i, &mut p.b_i),
                (&mut p.w_f, &mut p.u_f, &mut p.b_f),
                (&mut p.w_o, &mut p.u_o, &mut p.b_o),
                (&mut p.w_c, &mut p.u_c, &mut p.b_c),
            ],
        }
    }

    /// Every learnable value, block by block (W, U, b).
    pub fn flat(&self) -> Vec<Real> {
        let mut out = Vec::new();
        for (w, u, b) in self.blocks() {
            out.extend_from_slice(&w.data);
            out.extend_from_slice(&u.data);
            out.extend_from_slice(&b.data);
        }
        out
    }

    pub fn set_flat(&mut self, values: &[Real]) -> Result<()> {
        let total: usize = self.blocks().iter().map(|(w, u, b)| w.data.len() + u.data.len() + b.len()).sum();
        check_len("CellParams::set_flat", total, values.len())?;
        let mut off = 0;
        for (w, u, b) in self.blocks_mut() {
            for dst in [&mut w.data, &mut u.data, &mut b.data] {
                let n = dst.len();
                dst.copy_from_slice(&values[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    fn check_inputs(&self, x: &Tensor1, h_prev: &Tensor1, c_prev: Option<&Tensor1>) -> Result<()> {
        let hidden = self.hidden_size();
        check_len("cell step: input size", self.input_size(), x.len())?;
        check_len("cell step: h_prev size", hidden, h_prev.len())?;
        if let Some(c) = c_prev {
            check_len("cell step: c_prev size", hidden, c.len())?;
        }
        Ok(())
    }
}

/// Forward record of one single-layer step.
#[derive(Clone, Debug)]
pub struct CellCache {
    pub x: Tensor1,
    pub h_prev: Tensor1,
    pub core: CoreCache,
}

impl CellCache {
    pub fn h(&self) -> Tensor1 {
        Tensor1::new(self.core.h().to_vec())
    }

    pub fn c(&self) -> Option<Tensor1> {
        self.core.c().map(|c| Tensor1::new(c.to_vec()))
    }
}

/// Runs one step for any cell kind, keeping the cache for [`cell_backward`].
pub fn cell_forward(p: &CellParams, x: &Tensor1, h_prev: &Tensor1, c_prev: Option<&Tensor1>) -> Result<CellCache> {
    let kind = p.kind();
    if kind.has_memory_cell() && c_prev.is_none() {
        return Err(Error::MissingCache("LSTM step requires c_prev"));
    }
    p.check_inputs(x, h_prev, c_prev)?;
    let blocks = p.blocks();
    let last = blocks.len() - 1;
    let mut pre = Vec::with_capacity(blocks.len());
    let mut s = Vec::new();
    for (k, (w, u, b)) in blocks.into_iter().enumerate() {
        let mut a = affine(w, x, b)?.data;
        let rec = matvec(u, &h_prev.data);
        if k == last {
            s = rec;
        } else {
            add_assign(&mut a, &rec);
        }
        pre.push(a);
    }
    let core = core_forward(kind, pre, s, &h_prev.data, c_prev.map(|c| c.as_slice()));
    Ok(CellCache { x: x.clone(), h_prev: h_prev.clone(), core })
}

/// `h = tanh(W·x + U·h_prev + b)`
pub fn tanh_step(p: &TanhParams, x: &Tensor1, h_prev: &Tensor1) -> Result<Tensor1> {
    Ok(cell_forward(&CellParams::Tanh(p.clone()), x, h_prev, None)?.h())
}

/// Returns `(h, c)`.
pub fn lstm_step(p: &LstmParams, x: &Tensor1, h_prev: &Tensor1, c_prev: &Tensor1) -> Result<(Tensor1, Tensor1)> {
    let cache = cell_forward(&CellParams::Lstm(p.clone()), x, h_prev, Some(c_prev))?;
    Ok((cache.h(), cache.c().expect("lstm cache holds c")))
}

pub fn gru_step(p: &GruParams, x: &Tensor1, h_prev: &Tensor1) -> Result<Tensor1> {
    Ok(cell_forward(&CellParams::Gru(p.clone()), x, h_prev, None)?.h())
}

#[derive(Clone, Debug)]
pub struct CellGrads {
    pub params: CellParams,
    pub dx: Tensor1,
    pub dh_prev: Tensor1,
    pub dc_prev: Option<Tensor1>,
}

/// Exact reverse of [`cell_forward`]: partial derivatives of a scalar loss whose
/// gradient w.r.t. the step outputs is `dh` (and `dc` for LSTM).
pub fn cell_backward(p: &CellParams, cache: Option<&CellCache>, dh: &Tensor1, dc: Option<&Tensor1>) -> Result<CellGrads> {
    let cache = cache.ok_or(Error::MissingCache("cell_backward called without a forward cache"))?;
    if cache.core.kind() != p.kind() {
        return Err(Error::MissingCache("cache belongs to a different cell kind"));
    }
    let hidden = p.hidden_size();
    check_len("cell_backward: dh", hidden, dh.len())?;
    if let Some(dc) = dc {
        check_len("cell_backward: dc", hidden, dc.len())?;
    }
    let core = core_backward(&cache.core, &dh.data, dc.map(|d| d.as_slice()));
    let mut grads = CellParams::zeros(p.kind(), p.input_size(), hidden);
    let mut dx = vec![0.0; p.input_size()];
    let mut dh_prev = core.dh_prev.clone().unwrap_or_else(|| vec![0.0; hidden]);
    let last = p.kind().n_blocks() - 1;
    for (k, ((w, u, _), (gw, gu, gb))) in p.blocks().into_iter().zip(grads.blocks_mut()).enumerate() {
        let d = &core.d_pre[k];
        outer_acc(gw, d, &cache.x.data);
        add_assign(&mut gb.data, d);
        matvec_t_acc(w, d, &mut dx);
        let d_rec = if k == last { &core.d_s } else { d };
        outer_acc(gu, d_rec, &cache.h_prev.data);
        matvec_t_acc(u, d_rec, &mut dh_prev);
    }
    Ok(CellGrads { params: grads, dx: Tensor1::new(dx), dh_prev: Tensor1::new(dh_prev), dc_prev: core.dc_prev.map(Tensor1::new) })
}
