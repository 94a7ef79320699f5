//! Dense row-major linear algebra, activation functions and seeded
//! initialization. Everything in the crate is built on these two types.

use std::fmt;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense vector of 64-bit floats.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector {
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Vector {
            data: vec![value; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        self.iter().zip(other.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &[f64]) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.data.iter_mut().zip(other) {
            *a += b;
        }
    }

    pub fn hadamard(&self, other: &[f64]) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        self.iter().zip(other).map(|(a, b)| a * b).collect()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Vector {
            data: iter.into_iter().collect(),
        }
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector { data }
    }
}

/// A dense row-major matrix of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
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

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for row in rows {
            if row.len() != n_cols {
                return Err(Error::shape("Matrix::from_rows", n_cols, row.len()));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: n_rows,
            cols: n_cols,
            data,
        })
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.cols {
            return Err(Error::shape(
                "matvec",
                format!("{}x{}", self.rows, self.cols),
                format!("vector of {}", x.len()),
            ));
        }
        Ok((0..self.rows)
            .map(|i| dot(self.row(i), x))
            .collect::<Vector>())
    }

    /// `out += self · x`, no shape checks beyond debug assertions.
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(i), x);
        }
    }

    /// `out += selfᵀ · y`.
    pub fn matvec_transpose_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(i)) {
                *o += w * yi;
            }
        }
    }

    /// `self += a · bᵀ`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            for (w, &bj) in self.row_mut(i).iter_mut().zip(b) {
                *w += ai * bj;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Display for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a, b));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a[(i, k)];
            if aik == 0.0 {
                continue;
            }
            let b_row = b.row(k);
            for (c_ij, &b_kj) in c.row_mut(i).iter_mut().zip(b_row) {
                *c_ij += aik * b_kj;
            }
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Linear,
    Softmax,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Linear => "linear",
            Activation::Softmax => "softmax",
        }
    }

    pub fn is_linear(self) -> bool {
        self == Activation::Linear
    }

    /// Elementwise derivative given both the pre-activation and the output.
    /// Softmax is never differentiated on its own; see `layers::softmax_xent`.
    pub(crate) fn derivative_at(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Sigmoid => out * (1.0 - out),
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear | Activation::Softmax => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax(x: &[f64]) -> Result<Vector> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Degenerate(format!(
            "softmax input has no finite maximum ({max})"
        )));
    }
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `log softmax(x)`, computed without forming the probabilities first.
pub fn log_softmax(x: &[f64]) -> Result<Vector> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Degenerate(format!(
            "softmax input has no finite maximum ({max})"
        )));
    }
    let log_total = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    Ok(x.iter().map(|v| v - log_total).collect())
}

pub(crate) fn apply_in_place(kind: Activation, x: &mut [f64]) -> Result<()> {
    match kind {
        Activation::Sigmoid => x.iter_mut().for_each(|v| *v = sigmoid(*v)),
        Activation::Tanh => x.iter_mut().for_each(|v| *v = v.tanh()),
        Activation::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Linear => {}
        Activation::Softmax => {
            let p = softmax(x)?;
            x.copy_from_slice(&p);
        }
    }
    Ok(())
}

pub fn apply_activation(kind: Activation, x: &[f64]) -> Result<Vector> {
    let mut out = x.to_vec();
    apply_in_place(kind, &mut out)?;
    Ok(Vector::from_vec(out))
}

/// Elementwise derivative. For sigmoid and tanh `y_or_x` is the activation
/// output, for relu the pre-activation; linear is constant 1.
pub fn activation_derivative(kind: Activation, y_or_x: &[f64]) -> Result<Vector> {
    if kind == Activation::Softmax {
        return Err(Error::Config(
            "softmax derivative is only defined jointly with cross-entropy".into(),
        ));
    }
    Ok(y_or_x
        .iter()
        .map(|&v| kind.derivative_at(v, v))
        .collect())
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    /// Uniform on `[-r, r]`.
    Uniform(f64),
    /// Uniform on `±sqrt(6 / (rows + cols))`; a vector counts as one column.
    Glorot,
}

pub fn init_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, scheme: Init, rng: &mut R) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    fill(m.as_mut_slice(), scheme, rows + cols, rng);
    m
}

pub fn init_vector<R: Rng + ?Sized>(len: usize, scheme: Init, rng: &mut R) -> Vector {
    let mut v = Vector::zeros(len);
    fill(&mut v, scheme, len + 1, rng);
    v
}

fn fill<R: Rng + ?Sized>(data: &mut [f64], scheme: Init, fan_sum: usize, rng: &mut R) {
    match scheme {
        Init::Glorot => {
            let r = (6.0 / fan_sum.max(1) as f64).sqrt();
            data.iter_mut().for_each(|v| *v = rng.gen_range(-r..=r));
        }
        Init::Zeros => data.iter_mut().for_each(|v| *v = 0.0),
        Init::Uniform(r) => {
            assert!(r > 0.0, "uniform init range must be positive, got {r}");
            data.iter_mut().for_each(|v| *v = rng.gen_range(-r..=r));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_product(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                c[(i, j)] = s;
            }
        }
        c
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        init_matrix(rows, cols, Init::Uniform(1.0), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn identity_product() {
        let m = random(3, 3, 1);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn product_matches_triple_loop() {
        let a = random(7, 5, 2);
        let b = random(5, 3, 3);
        let c = matmul(&a, &b).unwrap();
        let expected = naive_product(&a, &b);
        for (x, y) in c.as_slice().iter().zip(expected.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn product_shape_error_names_both() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn activation_values() {
        assert_eq!(apply_activation(Activation::Sigmoid, &[0.0]).unwrap()[0], 0.5);
        let p = apply_activation(Activation::Softmax, &[2.5, 2.5, 2.5]).unwrap();
        for v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = apply_activation(Activation::Softmax, &[0.0, 2f64.ln()]).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_of_neg_infinity_is_degenerate() {
        let err = apply_activation(Activation::Softmax, &[f64::NEG_INFINITY; 3]).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn derivatives() {
        assert_eq!(activation_derivative(Activation::Sigmoid, &[0.5]).unwrap()[0], 0.25);
        assert_eq!(activation_derivative(Activation::Tanh, &[0.0]).unwrap()[0], 1.0);
        let d = activation_derivative(Activation::Relu, &[-1.0, 2.0]).unwrap();
        assert_eq!(d.as_ref(), &[0.0, 1.0]);
    }

    #[test]
    fn init_schemes() {
        let z = init_matrix(2, 3, Init::Zeros, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(z, Matrix::zeros(2, 3));

        let a = init_matrix(4, 4, Init::Uniform(0.1), &mut ChaCha8Rng::seed_from_u64(7));
        let b = init_matrix(4, 4, Init::Uniform(0.1), &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);

        let g = init_matrix(10, 14, Init::Glorot, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(g.as_slice().iter().all(|v| v.abs() <= 0.5));
        assert!(g.as_slice().iter().any(|v| v.abs() > 0.4));
        let m = init_matrix(1000, 1, Init::Uniform(0.1), &mut ChaCha8Rng::seed_from_u64(11));
        assert!(m.as_slice().iter().all(|v| (-0.1..=0.1).contains(v)));
        let mean = m.as_slice().iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    proptest! {
        #[test]
        fn product_is_associative(seed in any::<u64>(), n in 1usize..5, k in 1usize..5, m in 1usize..5, p in 1usize..5) {
            let a = random(n, k, seed);
            let b = random(k, m, seed.wrapping_add(1));
            let c = random(m, p, seed.wrapping_add(2));
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn softmax_is_a_distribution(xs in proptest::collection::vec(-15.0f64..15.0, 1..12)) {
            let p = softmax(&xs).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0 || xs.len() == 1));
        }

        #[test]
        fn squashing_ranges(x in -15.0f64..15.0) {
            let s = sigmoid(x);
            prop_assert!(s > 0.0 && s < 1.0);
            let t = x.tanh();
            prop_assert!(t > -1.0 && t < 1.0);
        }
    }
}
