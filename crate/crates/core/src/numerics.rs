//! Dense vectors and matrices, the handful of kernels the recurrent code needs,
//! softmax / categorical sampling and a seeded, reproducible RNG.
//!
//! Everything is `f64` and row-major. There is no broadcasting: every kernel
//! checks (or asserts, on the hot internal paths) the exact shapes it expects.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Element type used throughout the crate.
pub type Real = f64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor1 {
    pub data: Vec<Real>,
}

impl Tensor1 {
    pub fn new(data: Vec<Real>) -> Self {
        Tensor1 { data }
    }

    pub fn zeros(len: usize) -> Self {
        Tensor1 { data: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[Real] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<Real>> for Tensor1 {
    fn from(data: Vec<Real>) -> Self {
        Tensor1 { data }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    pub data: Vec<Real>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self> {
        check_len("Tensor2::new", rows * cols, data.len())?;
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Real) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor2 { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> Real {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Real) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[Real] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Deterministic generator. ChaCha8 keyed from a 64-bit seed, so the draw
/// sequence is the same on every platform; the stream position can be saved
/// and restored for exact resumption.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Rebuilds a generator at a previously recorded stream position.
    pub fn at_position(seed: u64, word_pos: u128) -> Self {
        let mut rng = Rng::new(seed);
        rng.inner.set_word_pos(word_pos);
        rng
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> Real {
        self.inner.random::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: Real, hi: Real) -> Real {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. Panics when `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: Real) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Independent generator derived from this one's seed and a stream label.
    pub fn fork(&self, label: u64) -> Rng {
        Rng::new(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(label.wrapping_mul(0xBF58_476D_1CE4_E5B9)).rotate_left(17))
    }
}

#[inline]
pub fn sigmoid(x: Real) -> Real {
    1.0 / (1.0 + (-x).exp())
}

/// Four-lane dot product. The lane split is fixed, so results are
/// reproducible; zero entries contribute exactly nothing.
#[inline]
pub fn dot(a: &[Real], b: &[Real]) -> Real {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        lanes[0] += x[0] * y[0];
        lanes[1] += x[1] * y[1];
        lanes[2] += x[2] * y[2];
        lanes[3] += x[3] * y[3];
    }
    for (x, y) in ra.iter().zip(rb) {
        lanes[0] += x * y;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3])
}

/// `out[r] += W[r, :] · x`
pub fn matvec_acc(w: &Tensor2, x: &[Real], out: &mut [Real]) {
    assert_eq!(w.cols, x.len(), "matvec: cols vs input");
    assert_eq!(w.rows, out.len(), "matvec: rows vs output");
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(w.row(r), x);
    }
}

/// `W · x` as a fresh vector.
pub fn matvec(w: &Tensor2, x: &[Real]) -> Vec<Real> {
    let mut out = vec![0.0; w.rows];
    matvec_acc(w, x, &mut out);
    out
}

/// `out += Wᵀ · y`
pub fn matvec_t_acc(w: &Tensor2, y: &[Real], out: &mut [Real]) {
    assert_eq!(w.rows, y.len(), "matvec_t: rows vs input");
    assert_eq!(w.cols, out.len(), "matvec_t: cols vs output");
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row(r)) {
            *o += wv * yr;
        }
    }
}

/// `G += y ⊗ x`
pub fn outer_acc(g: &mut Tensor2, y: &[Real], x: &[Real]) {
    assert_eq!(g.rows, y.len(), "outer: rows");
    assert_eq!(g.cols, x.len(), "outer: cols");
    let cols = g.cols;
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        let row = &mut g.data[r * cols..(r + 1) * cols];
        for (gv, &xv) in row.iter_mut().zip(x) {
            *gv += yr * xv;
        }
    }
}

/// `out += a * x`
#[inline]
pub fn axpy(a: Real, x: &[Real], out: &mut [Real]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
pub fn add_assign(out: &mut [Real], x: &[Real]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += v;
    }
}

/// `W·x + b`.
pub fn affine(w: &Tensor2, x: &Tensor1, b: &Tensor1) -> Result<Tensor1> {
    check_len("affine: W.cols vs x", w.cols, x.len())?;
    check_len("affine: W.rows vs b", w.rows, b.len())?;
    let data = (0..w.rows).map(|r| dot(w.row(r), &x.data) + b.data[r]).collect();
    Ok(Tensor1 { data })
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &Tensor1) -> Result<Tensor1> {
    if logits.is_empty() {
        return Err(Error::Numeric("softmax of an empty vector".into()));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("softmax input contains non-finite values".into()));
    }
    Ok(Tensor1::new(softmax_slice(&logits.data)))
}

pub(crate) fn softmax_slice(logits: &[Real]) -> Vec<Real> {
    let max = logits.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut out: Vec<Real> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: Real = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// `log Σ exp(x)` with max subtraction.
pub fn log_sum_exp(x: &[Real]) -> Real {
    let max = x.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    max + x.iter().map(|&v| (v - max).exp()).sum::<Real>().ln()
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(x: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Draws an index with probability `probs[k]`.
pub fn sample_categorical(probs: &Tensor1, rng: &mut Rng) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::Numeric("empty distribution".into()));
    }
    if probs.data.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Numeric("distribution has negative or non-finite entries".into()));
    }
    let total: Real = probs.data.iter().sum();
    if !(1.0 - 1e-6..=1.0 + 1e-6).contains(&total) {
        return Err(Error::Numeric(format!("probabilities sum to {total}, outside [1-1e-6, 1+1e-6]")));
    }
    let u = rng.uniform() * total;
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (k, &p) in probs.data.iter().enumerate() {
        if p > 0.0 {
            last_positive = k;
            cum += p;
            if u < cum {
                return Ok(k);
            }
        }
    }
    Ok(last_positive)
}

pub fn concat(parts: &[&Tensor1]) -> Result<Tensor1> {
    if parts.is_empty() {
        return Err(Error::Data("concat of an empty list".into()));
    }
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor1 { data })
}

/// Inverse of [`concat`]: splits `whole` into consecutive pieces of the given lengths.
pub fn split(whole: &Tensor1, lengths: &[usize]) -> Result<Vec<Tensor1>> {
    check_len("split: total length", lengths.iter().sum(), whole.len())?;
    let mut out = Vec::with_capacity(lengths.len());
    let mut offset = 0;
    for &n in lengths {
        out.push(Tensor1::new(whole.data[offset..offset + n].to_vec()));
        offset += n;
    }
    Ok(out)
}
