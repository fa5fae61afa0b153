//! Dense rank-4 tensors in `(N, C, H, W)` layout and the shape-preserving
//! kernels the primitive operator set is built from.
//!
//! Every kernel exists in two flavours: a slice-level `*_into` routine that
//! writes into a caller-owned buffer (used by the compiled evaluator, which
//! reuses its buffers across thousands of descent steps), and a pure
//! [`Tensor4`] method that allocates its result.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guard added inside `Inv`, `Log` and `Sqrt`.
pub const EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of spatial positions summed over by the per-position loss
    /// normalisation (`N·H·W`, channels excluded).
    pub const fn positions(&self) -> usize {
        self.n * self.h * self.w
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnaryKind {
    Neg,
    Abs,
    Inv,
    Log,
    Exp,
    Tanh,
    Square,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinaryKind {
    Add,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reduction {
    /// Per-channel mean over the batch and spatial axes.
    MeanNhw,
    /// Per-position mean over the channel axis.
    MeanC,
}

/// `sign` with `sign(0) = 0` (and NaN passed through).
#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else if x == 0.0 {
        0.0
    } else {
        x
    }
}

impl UnaryKind {
    pub const ALL: [UnaryKind; 8] = [
        UnaryKind::Neg,
        UnaryKind::Abs,
        UnaryKind::Inv,
        UnaryKind::Log,
        UnaryKind::Exp,
        UnaryKind::Tanh,
        UnaryKind::Square,
        UnaryKind::Sqrt,
    ];

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::Abs => x.abs(),
            UnaryKind::Inv => 1.0 / (x + EPS),
            UnaryKind::Log => sign(x) * (x.abs() + EPS).ln(),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Square => x * x,
            UnaryKind::Sqrt => sign(x) * (x.abs() + EPS).sqrt(),
        }
    }
}

impl BinaryKind {
    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Mul => a * b,
        }
    }
}

impl PoolMode {
    /// Whether `candidate` displaces the current window winner. NaN always
    /// wins so that non-finite values propagate through pooling.
    #[inline]
    fn displaces(self, candidate: f64, best: f64) -> bool {
        if best.is_nan() {
            return false;
        }
        if candidate.is_nan() {
            return true;
        }
        match self {
            PoolMode::Max => candidate > best,
            PoolMode::Min => candidate < best,
        }
    }
}

pub fn unary_into(op: UnaryKind, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o = op.apply(v);
    }
}

pub fn binary_into(op: BinaryKind, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), out.len());
    debug_assert_eq!(b.len(), out.len());
    match op {
        BinaryKind::Add => {
            for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
                *o = x + y;
            }
        }
        BinaryKind::Mul => {
            for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
                *o = x * y;
            }
        }
    }
}

/// 3×3 stride-1 pooling with shrinking border windows. `winners[i]` receives
/// the flat index of the element selected for output `i` (first extreme in
/// row-major window order).
pub fn pool3x3_into(shape: Shape, mode: PoolMode, x: &[f64], out: &mut [f64], winners: &mut [u32]) {
    let Shape { n, c, h, w } = shape;
    debug_assert_eq!(x.len(), shape.len());
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..h {
            let r0 = i.saturating_sub(1);
            let r1 = (i + 1).min(h - 1);
            for j in 0..w {
                let c0 = j.saturating_sub(1);
                let c1 = (j + 1).min(w - 1);
                let mut best_idx = base + r0 * w + c0;
                let mut best = x[best_idx];
                for r in r0..=r1 {
                    for col in c0..=c1 {
                        let idx = base + r * w + col;
                        if mode.displaces(x[idx], best) {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = base + i * w + j;
                out[o] = best;
                winners[o] = best_idx as u32;
            }
        }
    }
}

pub fn mean_into(shape: Shape, reduction: Reduction, x: &[f64], out: &mut [f64]) {
    let Shape { n, c, h, w } = shape;
    let hw = h * w;
    match reduction {
        Reduction::MeanNhw => {
            let denom = (n * hw) as f64;
            for ch in 0..c {
                let mut sum = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    sum += x[base..base + hw].iter().sum::<f64>();
                }
                let mean = sum / denom;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    out[base..base + hw].fill(mean);
                }
            }
        }
        Reduction::MeanC => {
            let denom = c as f64;
            for b in 0..n {
                let base = b * c * hw;
                for p in 0..hw {
                    let mut sum = 0.0;
                    for ch in 0..c {
                        sum += x[base + ch * hw + p];
                    }
                    let mean = sum / denom;
                    for ch in 0..c {
                        out[base + ch * hw + p] = mean;
                    }
                }
            }
        }
    }
}

/// Dense rank-4 array of `f64` in `(N, C, H, W)` row-major layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::Shape(format!("extents must be positive, got {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match {} = {} elements",
                data.len(),
                shape,
                shape.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        assert!(!shape.is_empty(), "tensor extents must be positive");
        Tensor4 { shape, data: vec![value; shape.len()] }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map_unary(&self, op: UnaryKind) -> Tensor4 {
        let mut out = vec![0.0; self.data.len()];
        unary_into(op, &self.data, &mut out);
        Tensor4 { shape: self.shape, data: out }
    }

    pub fn map_binary(&self, other: &Tensor4, op: BinaryKind) -> Result<Tensor4> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{:?} operands differ in shape: {} vs {}",
                op, self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; self.data.len()];
        binary_into(op, &self.data, &other.data, &mut out);
        Ok(Tensor4 { shape: self.shape, data: out })
    }

    pub fn pool3x3(&self, mode: PoolMode) -> Tensor4 {
        let mut out = vec![0.0; self.data.len()];
        let mut winners = vec![0u32; self.data.len()];
        pool3x3_into(self.shape, mode, &self.data, &mut out, &mut winners);
        Tensor4 { shape: self.shape, data: out }
    }

    pub fn aggregate(&self, reduction: Reduction) -> Tensor4 {
        let mut out = vec![0.0; self.data.len()];
        mean_into(self.shape, reduction, &self.data, &mut out);
        Tensor4 { shape: self.shape, data: out }
    }
}
