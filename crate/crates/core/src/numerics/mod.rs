//! Deterministic numeric primitives: dense vectors/matrices over `f64`,
//! numerically stable activations, and seeded random streams.

pub mod rng;

pub use rng::RngStream;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense vector of 64-bit floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(n: usize) -> Self {
        Vector(vec![0.0; n])
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        Vector(xs.to_vec())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot: length mismatch");
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    /// self += s * other
    pub fn add_scaled(&mut self, other: &Vector, s: f64) {
        assert_eq!(self.len(), other.len(), "add_scaled: length mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.0 {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Dense row-major matrix of 64-bit floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// y = A x, A is rows×cols, x has len cols.
    pub fn matvec(&self, x: &Vector) -> Vector {
        assert_eq!(self.cols, x.len(), "matvec: shape mismatch");
        let mut y = Vector::zeros(self.rows);
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            y.0[r] = row.iter().zip(&x.0).map(|(a, b)| a * b).sum();
        }
        y
    }

    /// y = Aᵀ x, x has len rows, result has len cols.
    pub fn t_matvec(&self, x: &Vector) -> Vector {
        assert_eq!(self.rows, x.len(), "t_matvec: shape mismatch");
        let mut y = Vector::zeros(self.cols);
        for r in 0..self.rows {
            let xr = x.0[r];
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (c, a) in row.iter().enumerate() {
                y.0[c] += a * xr;
            }
        }
        y
    }

    /// self += s · a bᵀ, a has len rows, b has len cols.
    pub fn add_outer(&mut self, a: &Vector, b: &Vector, s: f64) {
        assert_eq!(self.rows, a.len(), "add_outer: row mismatch");
        assert_eq!(self.cols, b.len(), "add_outer: col mismatch");
        for r in 0..self.rows {
            let ar = s * a.0[r];
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (c, m) in row.iter_mut().enumerate() {
                *m += ar * b.0[c];
            }
        }
    }

    /// self += s * other (elementwise, same shape).
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Numerically stable logistic sigmoid. Rejects non-finite input.
pub fn sigmoid(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("sigmoid({x})")));
    }
    Ok(sigmoid_raw(x))
}

/// Sigmoid without the input check, for hot paths with known-finite input.
#[inline]
pub fn sigmoid_raw(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax with max-subtraction. Output is positive and sums to 1.
pub fn softmax(v: &Vector) -> Result<Vector> {
    if v.is_empty() {
        return Err(Error::EmptyInput("softmax of empty vector".into()));
    }
    if !v.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Ok(softmax_raw(v.as_slice()))
}

#[inline]
pub fn softmax_raw(v: &[f64]) -> Vector {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Vector(exps.into_iter().map(|e| e / sum).collect())
}

/// log(Σ exp v_i), stable.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Elementwise product; requires equal lengths.
pub fn hadamard(a: &Vector, b: &Vector) -> Result<Vector> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "hadamard: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(Vector(
        a.0.iter().zip(&b.0).map(|(x, y)| x * y).collect(),
    ))
}

/// y = A x with shape check surfaced as an error.
pub fn matvec(a: &Matrix, x: &Vector) -> Result<Vector> {
    if a.cols() != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "matvec: {}x{} with vector of len {}",
            a.rows(),
            a.cols(),
            x.len()
        )));
    }
    Ok(a.matvec(x))
}

/// y += s * x with shape check surfaced as an error.
pub fn axpy(y: &mut Vector, x: &Vector, s: f64) -> Result<()> {
    if y.len() != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "axpy: {} vs {}",
            y.len(),
            x.len()
        )));
    }
    y.add_scaled(x, s);
    Ok(())
}
