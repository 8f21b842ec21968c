//! Small dense numeric kernel: matrices, the nonlinearities and losses used
//! by the models, Adagrad, a symmetric positive-definite solver, a
//! finite-difference gradient checker, and the binary checkpoint format.
//!
//! Everything is generic over [`Scalar`]; the models run in `f64`.

use std::collections::BTreeMap;
use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{Index, IndexMut};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Floating-point element type of matrices and model parameters.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Seedable PRNG used everywhere: ChaCha with 8 rounds (`rand_chacha`).
pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T, NumError> {
    Err(NumError::Shape(msg.into()))
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NumError> {
        if rows * cols != data.len() {
            return shape_err(format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Entries uniform in [-scale, scale].
    pub fn random(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::lit(rng.gen_range(-scale..=scale)))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    /// `self · x`
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[T]) -> Vec<T> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == T::zero() {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o = *o + w * yr;
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, other.rows, "matmul shape");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(other.row(k)) {
                    *o = *o + a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.rows, other.rows, "t_matmul shape");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let brow = other.row(k);
            for i in 0..self.cols {
                let a = self.data[k * self.cols + i];
                if a == T::zero() {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, other.cols, "matmul_t shape");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(self.row(i), other.row(j));
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(c, r)] = self[(r, c)];
            }
        }
        out
    }

    /// `self += alpha · a bᵀ`
    pub fn add_outer(&mut self, alpha: T, a: &[T], b: &[T]) {
        debug_assert_eq!((a.len(), b.len()), (self.rows, self.cols));
        for (r, &ar) in a.iter().enumerate() {
            let s = alpha * ar;
            if s == T::zero() {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (o, &bc) in row.iter_mut().zip(b) {
                *o = *o + s * bc;
            }
        }
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, alpha: T, other: &Matrix<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (o, &x) in self.data.iter_mut().zip(&other.data) {
            *o = *o + alpha * x;
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for x in &mut self.data {
            *x = *x * alpha;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Squared Frobenius norm.
    pub fn frob_sq(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `W x + b`
pub fn affine<T: Scalar>(w: &Matrix<T>, x: &[T], b: &[T]) -> Result<Vec<T>, NumError> {
    if w.cols() != x.len() || w.rows() != b.len() {
        return shape_err(format!(
            "affine: W is {}x{}, x has {}, b has {}",
            w.rows(),
            w.cols(),
            x.len(),
            b.len()
        ));
    }
    let mut y = w.matvec(x);
    for (yi, &bi) in y.iter_mut().zip(b) {
        *yi = *yi + bi;
    }
    Ok(y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineGrads<T> {
    pub dw: Matrix<T>,
    pub dx: Vec<T>,
    pub db: Vec<T>,
}

/// Gradients of `y = W x + b` given `dL/dy`.
pub fn affine_backward<T: Scalar>(w: &Matrix<T>, x: &[T], dy: &[T]) -> Result<AffineGrads<T>, NumError> {
    if w.cols() != x.len() || w.rows() != dy.len() {
        return shape_err("affine_backward");
    }
    let mut dw = Matrix::zeros(w.rows(), w.cols());
    dw.add_outer(T::one(), dy, x);
    Ok(AffineGrads {
        dw,
        dx: w.matvec_t(dy),
        db: dy.to_vec(),
    })
}

pub fn tanh_elementwise<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|v| v.tanh()).collect()
}

/// dL/dx for `y = tanh(x)`, from the output `y`.
pub fn tanh_backward<T: Scalar>(y: &[T], dy: &[T]) -> Vec<T> {
    y.iter()
        .zip(dy)
        .map(|(&y, &d)| d * (T::one() - y * y))
        .collect()
}

fn check_blocks(len: usize, blocks: &[(usize, usize)]) -> Result<(), NumError> {
    let mut expect = 0;
    for &(off, n) in blocks {
        if off != expect || n == 0 {
            return shape_err("blocks must tile the vector contiguously");
        }
        expect += n;
    }
    if expect != len {
        return shape_err(format!("blocks cover {expect} of {len} entries"));
    }
    Ok(())
}

/// Softmax applied independently within each (offset, size) block.
pub fn block_softmax<T: Scalar>(x: &[T], blocks: &[(usize, usize)]) -> Result<Vec<T>, NumError> {
    check_blocks(x.len(), blocks)?;
    let mut out = vec![T::zero(); x.len()];
    for &(off, n) in blocks {
        let seg = &x[off..off + n];
        let max = seg.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, &v) in out[off..off + n].iter_mut().zip(seg) {
            *o = (v - max).exp();
            total = total + *o;
        }
        for o in &mut out[off..off + n] {
            *o = *o / total;
        }
    }
    Ok(out)
}

/// `-Σ_blocks log pred[target]`; `targets` are absolute indices, one per block.
pub fn cross_entropy<T: Scalar>(pred: &[T], blocks: &[(usize, usize)], targets: &[usize]) -> Result<T, NumError> {
    if blocks.len() != targets.len() {
        return shape_err(format!("{} blocks, {} targets", blocks.len(), targets.len()));
    }
    let tiny = T::min_positive_value();
    Ok(targets
        .iter()
        .map(|&t| -(pred[t].max(tiny)).ln())
        .sum())
}

/// Gradient of `cross_entropy ∘ block_softmax` w.r.t. the logits: `pred - onehot`.
pub fn softmax_xent_grad<T: Scalar>(pred: &[T], targets: &[usize]) -> Vec<T> {
    let mut g = pred.to_vec();
    for &t in targets {
        g[t] = g[t] - T::one();
    }
    g
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Binary cross-entropy of a logit against a 0/1 target, computed stably.
pub fn bce_with_logit<T: Scalar>(logit: T, target: bool) -> T {
    // log(1 + e^{-|z|}) + max(z, 0) - z·y
    let z = logit;
    let y = if target { T::one() } else { T::zero() };
    (T::one() + (-z.abs()).exp()).ln() + z.max(T::zero()) - z * y
}

pub const ADAGRAD_EPS: f64 = 1e-8;

/// Per-parameter Adagrad state for one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdagradState<T> {
    pub acc: Vec<T>,
    pub lr: T,
    pub eps: T,
}

impl<T: Scalar> AdagradState<T> {
    pub fn new(len: usize, lr: f64) -> Self {
        AdagradState {
            acc: vec![T::zero(); len],
            lr: T::lit(lr),
            eps: T::lit(ADAGRAD_EPS),
        }
    }

    /// `acc += g²; p -= lr·g / (√acc + eps)`
    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<(), NumError> {
        if params.len() != grads.len() || params.len() != self.acc.len() {
            return shape_err(format!(
                "adagrad: {} params, {} grads, {} accumulators",
                params.len(),
                grads.len(),
                self.acc.len()
            ));
        }
        for ((p, &g), a) in params.iter_mut().zip(grads).zip(self.acc.iter_mut()) {
            *a = *a + g * g;
            *p = *p - self.lr * g / (a.sqrt() + self.eps);
            // Weights decayed into the subnormal range make every later
            // product through them far slower.
            if p.is_subnormal() {
                *p = T::zero();
            }
        }
        Ok(())
    }
}

/// Solves `A X = B` for symmetric positive-definite `A` by Cholesky.
pub fn solve_spd<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, NumError> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return shape_err("solve_spd");
    }
    let mut l = Matrix::<T>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s = s - l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if s <= T::zero() || !s.is_finite() {
                    return Err(NumError::NotPositiveDefinite);
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        // L y = b
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s = s - l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s = s - l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

/// Vector-valued ridge regression. Columns of `inputs` (m×n) map to the
/// columns of `targets` (p×n); returns `M = T Xᵀ (X Xᵀ + λI)⁻¹` (p×m).
/// Solved in whichever of the m×m or n×n forms is smaller.
pub fn ridge_regression<T: Scalar>(inputs: &Matrix<T>, targets: &Matrix<T>, lambda: f64) -> Result<Matrix<T>, NumError> {
    if inputs.cols() != targets.cols() {
        return shape_err("ridge: sample counts differ");
    }
    let (m, n) = inputs.shape();
    let lam = T::lit(lambda);
    if n < m {
        // M = T (XᵀX + λI)⁻¹ Xᵀ
        let mut gram = inputs.t_matmul(inputs);
        for i in 0..n {
            gram[(i, i)] = gram[(i, i)] + lam;
        }
        // gram symmetric: (T G⁻¹)ᵀ = G⁻¹ Tᵀ
        let coef_t = solve_spd(&gram, &targets.transpose())?;
        Ok(coef_t.t_matmul(&inputs.transpose()))
    } else {
        let mut gram = inputs.matmul_t(inputs);
        for i in 0..m {
            gram[(i, i)] = gram[(i, i)] + lam;
        }
        let rhs = targets.matmul_t(inputs);
        // M G = R  ⇔  G Mᵀ = Rᵀ
        Ok(solve_spd(&gram, &rhs.transpose())?.transpose())
    }
}

/// Max-abs residual of the ridge normal equations `M (X Xᵀ + λI) - T Xᵀ`.
pub fn ridge_residual<T: Scalar>(m: &Matrix<T>, inputs: &Matrix<T>, targets: &Matrix<T>, lambda: f64) -> T {
    let mut gram = inputs.matmul_t(inputs);
    for i in 0..gram.rows() {
        gram[(i, i)] = gram[(i, i)] + T::lit(lambda);
    }
    m.matmul(&gram).max_abs_diff(&targets.matmul_t(inputs))
}

/// One named group of parameters with its analytic gradient.
#[derive(Clone, Debug)]
pub struct ParamGroup<T> {
    pub name: String,
    pub values: Vec<T>,
    pub grad: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coordinates_checked: usize,
    pub passed: bool,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_SAMPLES: usize = 200;

/// Compares analytic gradients against central differences (h = 1e-5) on
/// up to 200 random coordinates per group. Relative error is
/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<T: Scalar>(
    mut loss: impl FnMut(&[ParamGroup<T>]) -> T,
    groups: &mut [ParamGroup<T>],
    tolerance: f64,
    seed: u64,
) -> GradCheckReport {
    let mut r = rng(seed);
    let h = T::lit(GRAD_CHECK_STEP);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates_checked: 0,
        passed: true,
    };
    for g in 0..groups.len() {
        let mut coords: Vec<usize> = (0..groups[g].values.len()).collect();
        coords.shuffle(&mut r);
        coords.truncate(GRAD_CHECK_SAMPLES);
        coords.sort_unstable();
        for i in coords {
            let orig = groups[g].values[i];
            groups[g].values[i] = orig + h;
            let up = loss(groups);
            groups[g].values[i] = orig - h;
            let down = loss(groups);
            groups[g].values[i] = orig;
            let numeric = ((up - down) / (h + h)).as_f64();
            let analytic = groups[g].grad[i].as_f64();
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic - numeric).abs() / denom;
            report.coordinates_checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = Some((groups[g].name.clone(), i));
            }
        }
    }
    report.passed = report.max_rel_error < tolerance;
    report
}

/// Named tensors in insertion order, for checkpoints and generic parameter
/// handling.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorSet<T> {
    pub tensors: Vec<(String, Vec<usize>, Vec<T>)>,
}

impl<T: Scalar> Default for TensorSet<T> {
    fn default() -> Self {
        TensorSet { tensors: Vec::new() }
    }
}

impl<T: Scalar> TensorSet<T> {
    pub fn push_matrix(&mut self, name: impl Into<String>, m: &Matrix<T>) {
        self.tensors
            .push((name.into(), vec![m.rows(), m.cols()], m.as_slice().to_vec()));
    }

    pub fn push_vector(&mut self, name: impl Into<String>, v: &[T]) {
        self.tensors.push((name.into(), vec![v.len()], v.to_vec()));
    }

    pub fn index(&self) -> BTreeMap<&str, usize> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, (n, _, _))| (n.as_str(), i))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<T>)> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix<T>, NumError> {
        let (_, shape, data) = self
            .get(name)
            .ok_or_else(|| NumError::Checkpoint(format!("missing tensor {name}")))?;
        if shape.len() != 2 {
            return Err(NumError::Checkpoint(format!("{name} is not a matrix")));
        }
        Matrix::from_vec(shape[0], shape[1], data.clone())
    }

    pub fn vector(&self, name: &str) -> Result<Vec<T>, NumError> {
        let (_, shape, data) = self
            .get(name)
            .ok_or_else(|| NumError::Checkpoint(format!("missing tensor {name}")))?;
        if shape.len() != 1 {
            return Err(NumError::Checkpoint(format!("{name} is not a vector")));
        }
        Ok(data.clone())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PEMBCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `magic, version u32, count u32`, then per tensor
/// `name_len u32, name, ndim u32, dims u64…, data f64…`, all little-endian.
pub fn write_checkpoint<T: Scalar>(w: &mut impl Write, set: &TensorSet<T>) -> Result<(), NumError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(set.tensors.len() as u32).to_le_bytes())?;
    for (name, shape, data) in &set.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for x in data {
            w.write_all(&x.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(r: &mut impl Read) -> Result<TensorSet<T>, NumError> {
    fn u32_of(r: &mut impl Read) -> Result<u32, NumError> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NumError::Checkpoint("bad magic".into()));
    }
    let version = u32_of(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(NumError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32_of(r)?;
    let mut set = TensorSet::default();
    for _ in 0..count {
        let len = u32_of(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| NumError::Checkpoint("tensor name not utf-8".into()))?;
        let ndim = u32_of(r)? as usize;
        if ndim > 8 {
            return Err(NumError::Checkpoint(format!("{name}: {ndim} dims")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(T::lit(f64::from_le_bytes(b)));
        }
        set.tensors.push((name, shape, data));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn affine_examples() {
        let w = Matrix::<f64>::identity(3);
        let x = [1.0, -2.0, 0.5];
        assert_eq!(affine(&w, &x, &[0.0; 3]).unwrap(), x.to_vec());
        let w = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        assert_eq!(affine(&w, &[3.0], &[1.0]).unwrap(), vec![7.0]);
        assert!(affine(&w, &[3.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn affine_works_in_f32() {
        let w = Matrix::from_vec(1, 2, vec![2.0f32, -1.0]).unwrap();
        assert_eq!(affine(&w, &[3.0, 1.0], &[0.5]).unwrap(), vec![5.5f32]);
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        let mut r = rng(7);
        let w = Matrix::<f64>::random(5, 4, 1.0, &mut r);
        let x: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
        // L = c · (W x + b)
        let grads = affine_backward(&w, &x, &c).unwrap();
        let mut groups = vec![
            ParamGroup { name: "W".into(), values: w.as_slice().to_vec(), grad: grads.dw.as_slice().to_vec() },
            ParamGroup { name: "x".into(), values: x.clone(), grad: grads.dx.clone() },
            ParamGroup { name: "b".into(), values: b.clone(), grad: grads.db.clone() },
        ];
        let loss = |g: &[ParamGroup<f64>]| {
            let w = Matrix::from_vec(5, 4, g[0].values.clone()).unwrap();
            dot(&c, &affine(&w, &g[1].values, &g[2].values).unwrap())
        };
        let report = grad_check(loss, &mut groups, 1e-6, 1);
        assert!(report.passed, "{report:?}");
        assert_eq!(report.coordinates_checked, 20 + 4 + 5);
    }

    #[test]
    fn softmax_and_cross_entropy() {
        let blocks = [(0, 4)];
        let p = block_softmax(&[0.3; 4], &blocks).unwrap();
        let loss = cross_entropy(&p, &blocks, &[2]).unwrap();
        assert!(approx(loss, 4f64.ln(), 1e-12));
        assert_eq!(tanh_elementwise(&[0.0f64]), vec![0.0]);
        assert!(block_softmax(&[0.0; 3], &[(0, 2)]).is_err());
        assert!(block_softmax(&[0.0; 3], &[(0, 2), (1, 2)]).is_err());
    }

    #[test]
    fn block_softmax_is_distribution_per_block() {
        let mut r = rng(3);
        let blocks = [(0, 3), (3, 1), (4, 5)];
        let x: Vec<f64> = (0..9).map(|_| r.gen_range(-30.0..30.0)).collect();
        let p = block_softmax(&x, &blocks).unwrap();
        for (off, n) in blocks {
            let s: f64 = p[off..off + n].iter().sum();
            assert!(approx(s, 1.0, 1e-12));
            assert!(p[off..off + n].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_xent_gradient_is_pred_minus_onehot() {
        let mut r = rng(11);
        let blocks = [(0, 3), (3, 4)];
        let targets = [1, 6];
        let x: Vec<f64> = (0..7).map(|_| r.gen_range(-2.0..2.0)).collect();
        let p = block_softmax(&x, &blocks).unwrap();
        let mut groups = vec![ParamGroup {
            name: "logits".into(),
            values: x,
            grad: softmax_xent_grad(&p, &targets),
        }];
        let report = grad_check(
            |g| cross_entropy(&block_softmax(&g[0].values, &blocks).unwrap(), &blocks, &targets).unwrap(),
            &mut groups,
            1e-6,
            2,
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn adagrad_steps() {
        let mut st = AdagradState::<f64>::new(2, 0.1);
        let mut p = vec![0.0, 5.0];
        st.step(&mut p, &[1.0, 0.0]).unwrap();
        assert!(approx(p[0], -0.1 / (1.0 + 1e-8), 1e-15));
        assert_eq!(p[1], 5.0);
        assert!(st.step(&mut p, &[1.0]).is_err());
    }

    #[test]
    fn adagrad_accumulator_monotone() {
        let mut r = rng(5);
        let mut st = AdagradState::<f64>::new(4, 0.5);
        let mut p = vec![0.0; 4];
        let mut prev = st.acc.clone();
        for _ in 0..100 {
            let g: Vec<f64> = (0..4).map(|_| r.gen_range(-3.0..3.0)).collect();
            st.step(&mut p, &g).unwrap();
            assert!(st.acc.iter().zip(&prev).all(|(a, b)| a >= b));
            prev = st.acc.clone();
        }
    }

    #[test]
    fn grad_check_quadratic() {
        // L = Σ (i+1) x_i²
        let values: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.0).collect();
        let grad = values.iter().enumerate().map(|(i, x)| 2.0 * (i as f64 + 1.0) * x).collect();
        let mut groups = vec![ParamGroup { name: "x".into(), values, grad }];
        let report = grad_check(
            |g| g[0].values.iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x * x).sum(),
            &mut groups,
            1e-8,
            0,
        );
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn grad_check_flags_wrong_gradient() {
        let mut groups = vec![ParamGroup { name: "x".into(), values: vec![1.0], grad: vec![3.0] }];
        let report = grad_check(|g| g[0].values[0] * g[0].values[0], &mut groups, 1e-4, 0);
        assert!(!report.passed);
        assert_eq!(report.worst, Some(("x".to_string(), 0)));
    }

    #[test]
    fn ridge_satisfies_normal_equations() {
        let mut r = rng(9);
        for &(m, n) in &[(5, 12), (6, 3), (4, 4)] {
            let x = Matrix::<f64>::random(m, n, 1.0, &mut r);
            let t = Matrix::<f64>::random(m, n, 1.0, &mut r);
            let sol = ridge_regression(&x, &t, 1e-3).unwrap();
            assert!(ridge_residual(&sol, &x, &t, 1e-3) < 1e-8);
        }
    }

    #[test]
    fn ridge_single_sample_fits_exactly() {
        let x = Matrix::from_vec(3, 1, vec![0.2, -0.5, 0.7]).unwrap();
        let t = Matrix::from_vec(3, 1, vec![0.9, 0.1, -0.3]).unwrap();
        let sol = ridge_regression(&x, &t, 1e-12).unwrap();
        let fitted = sol.matvec(x.as_slice());
        for (a, b) in fitted.iter().zip(t.as_slice()) {
            assert!(approx(*a, *b, 1e-9));
        }
    }

    #[test]
    fn solve_spd_rejects_indefinite() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(
            solve_spd(&a, &Matrix::identity(2)),
            Err(NumError::NotPositiveDefinite)
        ));
    }

    #[test]
    fn matmul_variants_agree() {
        let mut r = rng(4);
        let a = Matrix::<f64>::random(3, 4, 1.0, &mut r);
        let b = Matrix::<f64>::random(4, 2, 1.0, &mut r);
        let c = Matrix::<f64>::random(3, 2, 1.0, &mut r);
        assert!(a.matmul(&b).max_abs_diff(&b.transpose().matmul_t(&a).transpose()) < 1e-14);
        assert!(a.t_matmul(&c).max_abs_diff(&a.transpose().matmul(&c)) < 1e-14);
        let x = [0.5, -1.0, 2.0];
        assert_eq!(a.matvec_t(&x), a.transpose().matvec(&x));
    }

    #[test]
    fn bce_matches_naive_formula() {
        for &z in &[-3.0f64, -0.2, 0.0, 1.5, 4.0] {
            let p = sigmoid(z);
            assert!(approx(bce_with_logit(z, true), -p.ln(), 1e-12));
            assert!(approx(bce_with_logit(z, false), -(1.0 - p).ln(), 1e-12));
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut r = rng(1);
        let mut set = TensorSet::<f64>::default();
        set.push_matrix("W.enc", &Matrix::random(3, 5, 1.0, &mut r));
        set.push_vector("b.enc", &[0.1, f64::MIN_POSITIVE, -2.5]);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &set).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back: TensorSet<f64> = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, set);
        bytes[0] = b'X';
        assert!(read_checkpoint::<f64>(&mut bytes.as_slice()).is_err());
    }
}
