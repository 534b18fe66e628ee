//! Numerical kernels for every inference rule: zero-shot logits, affinity
//! and multimodal affinity, signatures, the KL intimacy matrix, range
//! rescaling, and the composite logits methods.
//!
//! Feature storage is f32; every kernel accumulates in f64. All operations
//! are pure functions of immutable inputs, and rows of every output are
//! computed independently, so results are identical no matter how work is
//! partitioned across threads.
//!
//! The composite methods share one set of primitives (`pair_dots`,
//! `affinity_from_dots`, `class_sums`, `mix_*`). The hyperparameter sweep
//! reuses the same primitives on cached intermediates, which keeps swept and
//! direct evaluations bit-identical.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{FeatureMatrix, OneHotLabels};

/// Additive smoothing applied inside the KL ratio; softmax outputs can
/// underflow well below f32 resolution.
pub const KL_EPSILON: f64 = 1e-12;

/// Default zero-shot temperature. The cache-term weights are balanced
/// against the zero-shot term under the conventional 100x logit scaling.
pub const DEFAULT_TAU: f64 = 100.0;

pub type Result<T> = std::result::Result<T, KernelError>;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("input features must be row-normalized (see FeatureMatrix::normalize_rows)")]
    NotNormalized,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("delta must lie in [0, 1], got {0}")]
    DeltaOutOfRange(f64),
    #[error("row {row} is not a probability distribution (sum {sum})")]
    NotStochastic { row: usize, sum: f64 },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperParam(String),
}

/// Dense row-major f64 matrix used for kernel intermediates and outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (min, max) over all entries; None when empty.
    pub fn min_max(&self) -> Option<(f64, f64)> {
        let first = *self.data.first()?;
        let mut lo = first;
        let mut hi = first;
        for &v in &self.data[1..] {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        Some((lo, hi))
    }

    fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        out.data
            .par_chunks_mut(self.cols.max(1))
            .zip(self.data.par_chunks(self.cols.max(1)))
            .for_each(|(o, s)| {
                for (dst, &src) in o.iter_mut().zip(s) {
                    *dst = f(src);
                }
            });
        out
    }
}

/// Class logits for a batch of test samples (rows x classes).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsMatrix {
    pub rows: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl LogitsMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    fn from_matrix(m: Matrix) -> Self {
        Self {
            rows: m.rows,
            classes: m.cols,
            data: m.data,
        }
    }
}

/// The inference methods the engine can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Zeroshot,
    Tipx,
    MAdapter,
    FVariant,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Zeroshot => "zeroshot",
            Method::Tipx => "tipx",
            Method::MAdapter => "m_adapter",
            Method::FVariant => "f_variant",
        }
    }
}

/// Inference hyperparameters: cache-term weights (alpha, gamma), affinity
/// sharpness (beta), modality balance (delta), and zero-shot temperature
/// (tau).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub tau: f64,
}

impl HyperParams {
    /// Validated constructor with `tau` = [`DEFAULT_TAU`].
    pub fn new(alpha: f64, beta: f64, gamma: f64, delta: f64) -> Result<Self> {
        let hp = Self {
            alpha,
            beta,
            gamma,
            delta,
            tau: DEFAULT_TAU,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        self.tau = tau;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(KernelError::InvalidHyperParam(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if !self.delta.is_finite() || !(0.0..=1.0).contains(&self.delta) {
            return Err(KernelError::DeltaOutOfRange(self.delta));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(KernelError::InvalidHyperParam(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

/// Whether hardware fused multiply-add is usable. The FMA and plain paths
/// round differently (FMA is single-rounding), but the choice is fixed for
/// the process, so every computation in a run is self-consistent.
fn fma_available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Full-row dot product with eight fixed-order accumulator lanes; used for
/// the leftover columns that do not fill a 4-row tile.
#[inline(always)]
fn dot64<const FMA: bool>(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for p in 0..8 {
            if FMA {
                acc[p] = ca[p].mul_add(cb[p], acc[p]);
            } else {
                acc[p] += ca[p] * cb[p];
            }
        }
    }
    let ra = a.chunks_exact(8).remainder();
    let rb = b.chunks_exact(8).remainder();
    let mut tail = 0.0f64;
    for (&x, &y) in ra.iter().zip(rb) {
        if FMA {
            tail = x.mul_add(y, tail);
        } else {
            tail += x * y;
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// One a-row against a packed 4-row tile: two accumulator lanes per column,
/// even/odd elements, combined in a fixed order.
#[inline(always)]
fn tile_dots4<const FMA: bool>(arow: &[f64], tile: &[f64]) -> [f64; 4] {
    let mut acc = [0.0f64; 8];
    for (ca, q) in arow.chunks_exact(2).zip(tile.chunks_exact(8)) {
        let a0 = ca[0];
        let a1 = ca[1];
        if FMA {
            acc[0] = a0.mul_add(q[0], acc[0]);
            acc[1] = a0.mul_add(q[1], acc[1]);
            acc[2] = a0.mul_add(q[2], acc[2]);
            acc[3] = a0.mul_add(q[3], acc[3]);
            acc[4] = a1.mul_add(q[4], acc[4]);
            acc[5] = a1.mul_add(q[5], acc[5]);
            acc[6] = a1.mul_add(q[6], acc[6]);
            acc[7] = a1.mul_add(q[7], acc[7]);
        } else {
            acc[0] += a0 * q[0];
            acc[1] += a0 * q[1];
            acc[2] += a0 * q[2];
            acc[3] += a0 * q[3];
            acc[4] += a1 * q[4];
            acc[5] += a1 * q[5];
            acc[6] += a1 * q[6];
            acc[7] += a1 * q[7];
        }
    }
    let mut d = [
        acc[0] + acc[4],
        acc[1] + acc[5],
        acc[2] + acc[6],
        acc[3] + acc[7],
    ];
    if let [a_last] = *arow.chunks_exact(2).remainder() {
        let q = &tile[tile.len() - 4..];
        for (dst, &qv) in d.iter_mut().zip(q) {
            if FMA {
                *dst = a_last.mul_add(qv, *dst);
            } else {
                *dst += a_last * qv;
            }
        }
    }
    d
}

/// `b` rows interleaved in groups of four: tile t stores rows 4t..4t+4 as
/// `[r0[k], r1[k], r2[k], r3[k]]` for each k, so the tile kernel reads one
/// contiguous stream. Rows past the last full tile stay in plain layout.
struct PackedRows {
    tiles: Vec<f64>,
    n_tiles: usize,
    cols: usize,
}

impl PackedRows {
    fn pack(b64: &[f64], c: usize) -> Self {
        let r = b64.len() / c.max(1);
        let n_tiles = r / 4;
        let mut tiles = vec![0.0f64; n_tiles * 4 * c];
        tiles
            .par_chunks_mut(4 * c)
            .enumerate()
            .for_each(|(t, dst)| {
                let rows = &b64[(4 * t) * c..(4 * t + 4) * c];
                for k in 0..c {
                    dst[4 * k] = rows[k];
                    dst[4 * k + 1] = rows[c + k];
                    dst[4 * k + 2] = rows[2 * c + k];
                    dst[4 * k + 3] = rows[3 * c + k];
                }
            });
        Self {
            tiles,
            n_tiles,
            cols: c,
        }
    }

    fn tile(&self, t: usize) -> &[f64] {
        &self.tiles[t * 4 * self.cols..(t + 1) * 4 * self.cols]
    }
}

/// Rows of `a` are processed in blocks small enough to stay cache-resident
/// while the packed `b` tiles stream through them.
const ROW_BLOCK: usize = 8;

/// All pairwise dot products between rows of `a` and rows of `b`
/// (`a.rows x b.rows`).
pub(crate) fn pair_dots(a: &FeatureMatrix, b: &FeatureMatrix) -> Matrix {
    pair_dots_widened(a, &widen(b.data()), b.rows())
}

/// Pairwise dot products of `a` rows against an already-widened row-major
/// f64 matrix (`r` rows). Widening f32 to f64 is exact, so this equals
/// [`pair_dots`] bit for bit when `b64` came from an f32 matrix. Every
/// entry's summation order depends only on its column and the row length,
/// never on blocking or thread count.
pub(crate) fn pair_dots_widened(a: &FeatureMatrix, b64: &[f64], r: usize) -> Matrix {
    let t = a.rows();
    let c = a.dim();
    let mut out = Matrix::zeros(t, r);
    if t == 0 || r == 0 {
        return out;
    }
    debug_assert_eq!(b64.len(), r * c);
    let packed = PackedRows::pack(b64, c);
    let a64 = widen(a.data());
    let fma = fma_available();
    out.data
        .par_chunks_mut(ROW_BLOCK * r)
        .enumerate()
        .for_each(|(blk, chunk)| {
            let i0 = blk * ROW_BLOCK;
            let i1 = (i0 + ROW_BLOCK).min(t);
            let ablock = &a64[i0 * c..i1 * c];
            #[cfg(target_arch = "x86_64")]
            if fma {
                // SAFETY: avx2 and fma support verified by fma_available.
                unsafe { dots_block_fma(ablock, &packed, b64, c, r, chunk) };
                return;
            }
            let _ = fma;
            dots_block::<false>(ablock, &packed, b64, c, r, chunk);
        });
    out
}

pub(crate) fn widen(src: &[f32]) -> Vec<f64> {
    src.iter().map(|&v| f64::from(v)).collect()
}

/// Support rows mixed across modalities: row j is
/// `delta * f_cap[j] + (1 - delta) * f_img[j]`, widened to f64. Dotting a
/// test row against the mixed row equals the delta-weighted sum of the two
/// modality dots, so the multimodal affinity needs one dot pass instead of
/// two. At delta = 0 the rows equal the image rows exactly (and at 1 the
/// caption rows), keeping the reduction identities bitwise.
pub(crate) fn mixed_support_rows(
    f_img: &FeatureMatrix,
    f_cap: &FeatureMatrix,
    delta: f64,
) -> Vec<f64> {
    f_img
        .data()
        .iter()
        .zip(f_cap.data())
        .map(|(&i, &c)| (1.0 - delta) * f64::from(i) + delta * f64::from(c))
        .collect()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn dots_block_fma(
    a64: &[f64],
    packed: &PackedRows,
    b64: &[f64],
    c: usize,
    r: usize,
    chunk: &mut [f64],
) {
    dots_block::<true>(a64, packed, b64, c, r, chunk);
}

/// One block of rows: packed tiles stream through the block's a-rows once;
/// leftover columns use the full-row dot.
#[inline(always)]
fn dots_block<const FMA: bool>(
    a64: &[f64],
    packed: &PackedRows,
    b64: &[f64],
    c: usize,
    r: usize,
    chunk: &mut [f64],
) {
    for t in 0..packed.n_tiles {
        let tile = packed.tile(t);
        let j = 4 * t;
        for (li, arow) in a64.chunks_exact(c).enumerate() {
            let d = tile_dots4::<FMA>(arow, tile);
            chunk[li * r + j..li * r + j + 4].copy_from_slice(&d);
        }
    }
    for j in 4 * packed.n_tiles..r {
        let brow = &b64[j * c..(j + 1) * c];
        for (li, arow) in a64.chunks_exact(c).enumerate() {
            chunk[li * r + j] = dot64::<FMA>(arow, brow);
        }
    }
}

/// Fused affinity + per-class reduction: computes
/// `sum_{j in class k} exp(-beta * (1 - f_i . b_j))` for every test row i
/// and class k without materializing the t x NM affinity matrix. The
/// per-class partial sums run in ascending j order, exactly like
/// [`class_sums`] over a materialized affinity.
pub(crate) fn affinity_class_sums(
    a: &FeatureMatrix,
    b64: &[f64],
    r: usize,
    beta: f64,
    labels: &OneHotLabels,
) -> Matrix {
    let t = a.rows();
    let c = a.dim();
    let n = labels.classes();
    let mut out = Matrix::zeros(t, n);
    if t == 0 || r == 0 {
        return out;
    }
    debug_assert_eq!(b64.len(), r * c);
    debug_assert_eq!(labels.rows(), r);
    let packed = PackedRows::pack(b64, c);
    let a64 = widen(a.data());
    let classes = labels.sample_classes();
    let fma = fma_available();
    out.data
        .par_chunks_mut(ROW_BLOCK * n)
        .enumerate()
        .for_each(|(blk, chunk)| {
            let i0 = blk * ROW_BLOCK;
            let i1 = (i0 + ROW_BLOCK).min(t);
            let ablock = &a64[i0 * c..i1 * c];
            #[cfg(target_arch = "x86_64")]
            if fma {
                // SAFETY: avx2 and fma support verified by fma_available.
                unsafe {
                    affinity_sums_block_fma(ablock, &packed, b64, c, r, beta, classes, n, chunk)
                };
                return;
            }
            let _ = fma;
            affinity_sums_block::<false>(ablock, &packed, b64, c, r, beta, classes, n, chunk);
        });
    out
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn affinity_sums_block_fma(
    a64: &[f64],
    packed: &PackedRows,
    b64: &[f64],
    c: usize,
    r: usize,
    beta: f64,
    classes: &[usize],
    n: usize,
    chunk: &mut [f64],
) {
    affinity_sums_block::<true>(a64, packed, b64, c, r, beta, classes, n, chunk);
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn affinity_sums_block<const FMA: bool>(
    a64: &[f64],
    packed: &PackedRows,
    b64: &[f64],
    c: usize,
    r: usize,
    beta: f64,
    classes: &[usize],
    n: usize,
    chunk: &mut [f64],
) {
    for t in 0..packed.n_tiles {
        let tile = packed.tile(t);
        let j = 4 * t;
        let cls = [classes[j], classes[j + 1], classes[j + 2], classes[j + 3]];
        for (li, arow) in a64.chunks_exact(c).enumerate() {
            let d = tile_dots4::<FMA>(arow, tile);
            let orow = &mut chunk[li * n..(li + 1) * n];
            orow[cls[0]] += (-beta * (1.0 - d[0])).exp();
            orow[cls[1]] += (-beta * (1.0 - d[1])).exp();
            orow[cls[2]] += (-beta * (1.0 - d[2])).exp();
            orow[cls[3]] += (-beta * (1.0 - d[3])).exp();
        }
    }
    for j in 4 * packed.n_tiles..r {
        let brow = &b64[j * c..(j + 1) * c];
        let class = classes[j];
        for (li, arow) in a64.chunks_exact(c).enumerate() {
            let d = dot64::<FMA>(arow, brow);
            chunk[li * n + class] += (-beta * (1.0 - d)).exp();
        }
    }
}

pub(crate) fn affinity_from_dots(dots: &Matrix, beta: f64) -> Matrix {
    dots.map(|d| (-beta * (1.0 - d)).exp())
}

pub(crate) fn multimodal_affinity_from_dots(
    d_img: &Matrix,
    d_cap: &Matrix,
    beta: f64,
    delta: f64,
) -> Matrix {
    let mut out = Matrix::zeros(d_img.rows, d_img.cols);
    out.data
        .par_chunks_mut(d_img.cols.max(1))
        .zip(d_img.data.par_chunks(d_img.cols.max(1)))
        .zip(d_cap.data.par_chunks(d_cap.cols.max(1)))
        .for_each(|((o, di), dc)| {
            for ((dst, &img), &cap) in o.iter_mut().zip(di).zip(dc) {
                *dst = (-beta * ((1.0 - delta * cap) - (1.0 - delta) * img)).exp();
            }
        });
    out
}

/// Row-wise softmax with per-row max subtraction.
pub(crate) fn row_softmax(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for (orow, srow) in out
        .data
        .chunks_mut(m.cols.max(1))
        .zip(m.data.chunks(m.cols.max(1)))
    {
        let max = srow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(srow) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// KL divergence between every row of `s` and every row of `sup`, evaluated
/// entry by entry as `sum_k s[k] * ln((s[k] + eps) / (sup[k] + eps))`.
pub(crate) fn kl_core(s: &Matrix, sup: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(s.rows, sup.rows);
    out.data
        .par_chunks_mut(sup.rows.max(1))
        .enumerate()
        .for_each(|(i, orow)| {
            let si = s.row(i);
            for (j, o) in orow.iter_mut().enumerate() {
                let sj = sup.row(j);
                let mut acc = 0.0;
                for (&a, &b) in si.iter().zip(sj) {
                    acc += a * ((a + KL_EPSILON) / (b + KL_EPSILON)).ln();
                }
                *o = acc;
            }
        });
    out
}

/// Segmented per-class sums over contiguous class blocks: row i, column k of
/// the result is the sum of m[i][j] over support rows j of class k. This is
/// `m . L` for block-structured one-hot `L` in O(rows x support) time.
pub(crate) fn class_sums(m: &Matrix, labels: &OneHotLabels) -> Matrix {
    let blocks = labels.class_blocks();
    let n = labels.classes();
    let mut out = Matrix::zeros(m.rows, n);
    out.data
        .par_chunks_mut(n.max(1))
        .enumerate()
        .for_each(|(i, orow)| {
            let row = m.row(i);
            for (k, blk) in blocks.iter().enumerate() {
                orow[k] = row[blk.clone()].iter().sum();
            }
        });
    out
}

pub(crate) fn negate(m: &Matrix) -> Matrix {
    m.map(|v| -v)
}

/// Affine rescaling of `x` onto the closed range `[tmin, tmax]`. A constant
/// `x` maps to `tmin`.
pub(crate) fn phi_onto(x: &Matrix, tmin: f64, tmax: f64) -> Matrix {
    let (xmin, xmax) = match x.min_max() {
        Some(mm) => mm,
        None => return x.clone(),
    };
    if xmax == xmin {
        return x.map(|_| tmin);
    }
    let scale = (tmax - tmin) / (xmax - xmin);
    x.map(|v| tmin + (v - xmin) * scale)
}

/// logits = tau * z + alpha * cache + gamma * kl_term, elementwise.
pub(crate) fn mix_three(
    dw: &Matrix,
    cache_term: &Matrix,
    kl_term: &Matrix,
    tau: f64,
    alpha: f64,
    gamma: f64,
) -> LogitsMatrix {
    let mut out = Matrix::zeros(dw.rows, dw.cols);
    for i in 0..dw.data.len() {
        out.data[i] = tau * dw.data[i] + alpha * cache_term.data[i] + gamma * kl_term.data[i];
    }
    LogitsMatrix::from_matrix(out)
}

/// logits = tau * z + alpha * cache, elementwise; the KL term is never built.
pub(crate) fn mix_two(dw: &Matrix, cache_term: &Matrix, tau: f64, alpha: f64) -> LogitsMatrix {
    let mut out = Matrix::zeros(dw.rows, dw.cols);
    for i in 0..dw.data.len() {
        out.data[i] = tau * dw.data[i] + alpha * cache_term.data[i];
    }
    LogitsMatrix::from_matrix(out)
}

// ---------------------------------------------------------------------------
// Validation helpers
// ---------------------------------------------------------------------------

fn ensure_normalized(m: &FeatureMatrix) -> Result<()> {
    if m.is_normalized() {
        Ok(())
    } else {
        Err(KernelError::NotNormalized)
    }
}

fn ensure_same_dim(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<()> {
    if a.dim() == b.dim() {
        Ok(())
    } else {
        Err(KernelError::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        })
    }
}

fn ensure_nonempty(m: &FeatureMatrix) -> Result<()> {
    if m.rows() == 0 || m.dim() == 0 {
        Err(KernelError::EmptyInput)
    } else {
        Ok(())
    }
}

fn ensure_aligned_support(f_img: &FeatureMatrix, labels: &OneHotLabels) -> Result<()> {
    if labels.rows() != f_img.rows() {
        return Err(KernelError::ShapeMismatch(format!(
            "labels cover {} samples but the image cache has {} rows",
            labels.rows(),
            f_img.rows()
        )));
    }
    Ok(())
}

fn ensure_stochastic(m: &Matrix) -> Result<()> {
    for i in 0..m.rows {
        let sum: f64 = m.row(i).iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(KernelError::NotStochastic { row: i, sum });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Zero-shot logits: `tau * (f_test . W^T)`.
pub fn zeroshot_logits(
    f_test: &FeatureMatrix,
    w: &FeatureMatrix,
    tau: f64,
) -> Result<LogitsMatrix> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(KernelError::InvalidHyperParam(format!(
            "tau must be positive, got {tau}"
        )));
    }
    ensure_normalized(f_test)?;
    ensure_normalized(w)?;
    ensure_same_dim(f_test, w)?;
    ensure_nonempty(f_test)?;
    ensure_nonempty(w)?;
    let dw = pair_dots(f_test, w);
    Ok(LogitsMatrix::from_matrix(dw.map(|d| tau * d)))
}

/// Affinity between test features and cached image features:
/// `exp(-beta * (1 - f . F_img))`, shape `t x NM`.
pub fn affinity(f_test: &FeatureMatrix, f_img: &FeatureMatrix, beta: f64) -> Result<Matrix> {
    ensure_normalized(f_test)?;
    ensure_normalized(f_img)?;
    ensure_same_dim(f_test, f_img)?;
    ensure_nonempty(f_test)?;
    ensure_nonempty(f_img)?;
    let d = pair_dots(f_test, f_img);
    Ok(affinity_from_dots(&d, beta))
}

/// Multimodal affinity mixing caption and image similarities:
/// `exp(-beta * (1 - delta * f . F_cap - (1 - delta) * f . F_img))`.
///
/// Rows j of `f_img` and `f_cap` must describe the same support sample.
pub fn multimodal_affinity(
    f_test: &FeatureMatrix,
    f_img: &FeatureMatrix,
    f_cap: &FeatureMatrix,
    beta: f64,
    delta: f64,
) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&delta) || !delta.is_finite() {
        return Err(KernelError::DeltaOutOfRange(delta));
    }
    if f_img.rows() != f_cap.rows() || f_img.dim() != f_cap.dim() {
        return Err(KernelError::ShapeMismatch(format!(
            "image cache is {}x{} but caption cache is {}x{}",
            f_img.rows(),
            f_img.dim(),
            f_cap.rows(),
            f_cap.dim()
        )));
    }
    ensure_normalized(f_test)?;
    ensure_normalized(f_img)?;
    ensure_normalized(f_cap)?;
    ensure_same_dim(f_test, f_img)?;
    ensure_nonempty(f_test)?;
    ensure_nonempty(f_img)?;
    let d_img = pair_dots(f_test, f_img);
    let d_cap = pair_dots(f_test, f_cap);
    Ok(multimodal_affinity_from_dots(&d_img, &d_cap, beta, delta))
}

/// Signatures: row-wise softmax of `features . W^T`.
pub fn signatures(features: &FeatureMatrix, w: &FeatureMatrix) -> Result<Matrix> {
    ensure_normalized(features)?;
    ensure_normalized(w)?;
    ensure_same_dim(features, w)?;
    ensure_nonempty(features)?;
    ensure_nonempty(w)?;
    let d = pair_dots(features, w);
    Ok(row_softmax(&d))
}

/// Pairwise KL divergences between test signatures (`t x N`) and support
/// signatures (`NM x N`). Both inputs must be row-stochastic.
pub fn kl_matrix(s: &Matrix, support_sigs: &Matrix) -> Result<Matrix> {
    if s.cols != support_sigs.cols {
        return Err(KernelError::DimMismatch {
            left: s.cols,
            right: support_sigs.cols,
        });
    }
    ensure_stochastic(s)?;
    ensure_stochastic(support_sigs)?;
    Ok(kl_core(s, support_sigs))
}

/// Affine rescaling of `x` so that its minimum and maximum match `target`'s.
/// A constant `x` maps to `target`'s minimum.
pub fn rescale_phi(x: &Matrix, target: &Matrix) -> Result<Matrix> {
    if x.is_empty() || target.is_empty() {
        return Err(KernelError::EmptyInput);
    }
    let (tmin, tmax) = target.min_max().expect("nonempty");
    Ok(phi_onto(x, tmin, tmax))
}

fn check_composite_inputs(
    f_test: &FeatureMatrix,
    w: &FeatureMatrix,
    f_img: &FeatureMatrix,
    labels: &OneHotLabels,
    hp: &HyperParams,
) -> Result<()> {
    hp.validate()?;
    ensure_normalized(f_test)?;
    ensure_normalized(w)?;
    ensure_normalized(f_img)?;
    ensure_same_dim(f_test, w)?;
    ensure_same_dim(f_test, f_img)?;
    ensure_nonempty(f_test)?;
    ensure_nonempty(w)?;
    ensure_nonempty(f_img)?;
    ensure_aligned_support(f_img, labels)?;
    if labels.classes() != w.rows() {
        return Err(KernelError::ShapeMismatch(format!(
            "labels have {} classes but the classifier has {} rows",
            labels.classes(),
            w.rows()
        )));
    }
    Ok(())
}

/// TIP-X logits: `tau * f.W^T + alpha * A.L + gamma * phi(-M.L)`, where the
/// rescaling target of `phi` is the range of `A.L`.
pub fn tipx_logits(
    f_test: &FeatureMatrix,
    w: &FeatureMatrix,
    f_img: &FeatureMatrix,
    labels: &OneHotLabels,
    hp: &HyperParams,
) -> Result<LogitsMatrix> {
    check_composite_inputs(f_test, w, f_img, labels, hp)?;
    let dw = pair_dots(f_test, w);
    let al = affinity_class_sums(f_test, &widen(f_img.data()), f_img.rows(), hp.beta, labels);
    let s_test = row_softmax(&dw);
    let s_sup = row_softmax(&pair_dots(f_img, w));
    let m = kl_core(&s_test, &s_sup);
    let neg_ml = negate(&class_sums(&m, labels));
    let (tmin, tmax) = al.min_max().expect("nonempty");
    let phi = phi_onto(&neg_ml, tmin, tmax);
    Ok(mix_three(&dw, &al, &phi, hp.tau, hp.alpha, hp.gamma))
}

/// M-Adapter logits: `tau * f.W^T + alpha * A_M.L + gamma * phi(-M.L)`.
///
/// `A_M` mixes caption and image similarities by `delta`; `M` is always
/// built from image signatures, exactly as in TIP-X, and `phi` rescales
/// onto the range of `A_M.L`.
pub fn m_adapter_logits(
    f_test: &FeatureMatrix,
    w: &FeatureMatrix,
    f_img: &FeatureMatrix,
    f_cap: &FeatureMatrix,
    labels: &OneHotLabels,
    hp: &HyperParams,
) -> Result<LogitsMatrix> {
    check_composite_inputs(f_test, w, f_img, labels, hp)?;
    if f_img.rows() != f_cap.rows() || f_img.dim() != f_cap.dim() {
        return Err(KernelError::ShapeMismatch(format!(
            "image cache is {}x{} but caption cache is {}x{}",
            f_img.rows(),
            f_img.dim(),
            f_cap.rows(),
            f_cap.dim()
        )));
    }
    ensure_normalized(f_cap)?;
    let dw = pair_dots(f_test, w);
    let mixed = mixed_support_rows(f_img, f_cap, hp.delta);
    let al = affinity_class_sums(f_test, &mixed, f_img.rows(), hp.beta, labels);
    let s_test = row_softmax(&dw);
    let s_sup = row_softmax(&pair_dots(f_img, w));
    let m = kl_core(&s_test, &s_sup);
    let neg_ml = negate(&class_sums(&m, labels));
    let (tmin, tmax) = al.min_max().expect("nonempty");
    let phi = phi_onto(&neg_ml, tmin, tmax);
    Ok(mix_three(&dw, &al, &phi, hp.tau, hp.alpha, hp.gamma))
}

/// Fast-variant logits: `tau * f.W^T + alpha * A_M.L`. The KL term is
/// dropped entirely, so signatures and `M` are never computed.
pub fn f_variant_logits(
    f_test: &FeatureMatrix,
    w: &FeatureMatrix,
    f_img: &FeatureMatrix,
    f_cap: &FeatureMatrix,
    labels: &OneHotLabels,
    hp: &HyperParams,
) -> Result<LogitsMatrix> {
    check_composite_inputs(f_test, w, f_img, labels, hp)?;
    if f_img.rows() != f_cap.rows() || f_img.dim() != f_cap.dim() {
        return Err(KernelError::ShapeMismatch(format!(
            "image cache is {}x{} but caption cache is {}x{}",
            f_img.rows(),
            f_img.dim(),
            f_cap.rows(),
            f_cap.dim()
        )));
    }
    ensure_normalized(f_cap)?;
    let dw = pair_dots(f_test, w);
    let mixed = mixed_support_rows(f_img, f_cap, hp.delta);
    let al = affinity_class_sums(f_test, &mixed, f_img.rows(), hp.beta, labels);
    Ok(mix_two(&dw, &al, hp.tau, hp.alpha))
}


#[cfg(test)]
mod bench {
    use super::*;
    use crate::rng::SplitMix64;
    use std::time::Instant;

    fn gen(rows: usize, dim: usize, rng: &mut SplitMix64) -> FeatureMatrix {
        let data: Vec<f32> = (0..rows * dim).map(|_| rng.next_normal() as f32).collect();
        FeatureMatrix::new(rows, dim, data, false)
            .unwrap()
            .normalize_rows()
            .unwrap()
    }

    #[test]
    #[ignore]
    fn bench_fv_stages() {
        let mut rng = SplitMix64::new(1);
        let t = 2000;
        let nm = 2000;
        let n = 100;
        let c = 512;
        let f = gen(t, c, &mut rng);
        let img = gen(nm, c, &mut rng);
        let cap = gen(nm, c, &mut rng);
        let w = gen(n, c, &mut rng);
        let classes: Vec<usize> = (0..n)
            .flat_map(|k| std::iter::repeat_n(k, nm / n))
            .collect();
        let labels = crate::store::build_onehot(&classes, n).unwrap();
        for _ in 0..2 {
            let s0 = Instant::now();
            let dw = pair_dots(&f, &w);
            let t_dw = s0.elapsed().as_secs_f64();
            let s1 = Instant::now();
            let mixed = mixed_support_rows(&img, &cap, 0.3);
            let t_mix = s1.elapsed().as_secs_f64();
            let s2 = Instant::now();
            let al = affinity_class_sums(&f, &mixed, nm, 5.0, &labels);
            let t_fused = s2.elapsed().as_secs_f64();
            let s5 = Instant::now();
            let out = mix_two(&dw, &al, 100.0, 1.0);
            let t_mixl = s5.elapsed().as_secs_f64();
            println!(
                "dw {t_dw:.3} mixrows {t_mix:.3} fused-dots-exp-sums {t_fused:.3} mix {t_mixl:.3} total {:.3}",
                s0.elapsed().as_secs_f64()
            );
            std::hint::black_box(&out);
        }
    }

    #[test]
    #[ignore]
    fn bench_stages() {
        let mut rng = SplitMix64::new(1);
        let t = 2000;
        let nm = 2000;
        let n = 100;
        let c = 512;
        let f = gen(t, c, &mut rng);
        let img = gen(nm, c, &mut rng);
        let w = gen(n, c, &mut rng);

        for _ in 0..2 {
            let s = Instant::now();
            let d = pair_dots(&f, &img);
            println!("pair_dots t x nm: {:.3}s", s.elapsed().as_secs_f64());
            let s = Instant::now();
            let a = affinity_from_dots(&d, 5.0);
            println!("affinity map:     {:.3}s", s.elapsed().as_secs_f64());
            std::hint::black_box(&a);
        }
        let s = Instant::now();
        let dw = pair_dots(&f, &w);
        println!("pair_dots t x n:  {:.3}s", s.elapsed().as_secs_f64());
        let s_test = row_softmax(&dw);
        let s_sup = row_softmax(&pair_dots(&img, &w));
        let s = Instant::now();
        let m = kl_core(&s_test, &s_sup);
        println!("kl_core:          {:.3}s", s.elapsed().as_secs_f64());
        std::hint::black_box(&m);
    }
}
