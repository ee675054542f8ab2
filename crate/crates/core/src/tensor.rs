//! Dense 2D complex and real arrays.
//!
//! [`ComplexTensor`] keeps the real and imaginary parts in two separate
//! row-major planes of identical shape. Everything the reconstruction
//! touches (wavefields, object, probe modes, filters, scalars) is one of
//! these; scalars are 1×1 tensors.

use std::ops::{Add, Mul, Sub};

use rustfft::num_complex::Complex64;

use crate::error::{PtychoError, Result};

pub type Shape = (usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    rows: usize,
    cols: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexTensor {
    pub fn new(rows: usize, cols: usize, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let n = rows * cols;
        if re.len() != n || im.len() != n {
            return Err(PtychoError::InvalidArgument(format!(
                "planes of length {}/{} do not match shape {rows}x{cols}",
                re.len(),
                im.len()
            )));
        }
        Ok(Self { rows, cols, re, im })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        Self {
            rows,
            cols,
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: Complex64) -> Self {
        let n = rows * cols;
        Self {
            rows,
            cols,
            re: vec![value.re; n],
            im: vec![value.im; n],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, Complex64::new(1.0, 0.0))
    }

    pub fn scalar(value: Complex64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn real_scalar(value: f64) -> Self {
        Self::filled(1, 1, Complex64::new(value, 0.0))
    }

    pub fn from_real(rows: usize, cols: usize, re: Vec<f64>) -> Result<Self> {
        let n = re.len();
        Self::new(rows, cols, re, vec![0.0; n])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut out = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let v = f(r, c);
                out.re[r * cols + c] = v.re;
                out.im[r * cols + c] = v.im;
            }
        }
        out
    }

    pub fn from_complex(rows: usize, cols: usize, values: &[Complex64]) -> Result<Self> {
        Self::new(
            rows,
            cols,
            values.iter().map(|v| v.re).collect(),
            values.iter().map(|v| v.im).collect(),
        )
    }

    pub fn shape(&self) -> Shape {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [f64] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [f64] {
        &mut self.im
    }

    pub fn planes_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.re, &mut self.im)
    }

    pub fn into_planes(self) -> (Vec<f64>, Vec<f64>) {
        (self.re, self.im)
    }

    pub fn at(&self, idx: usize) -> Complex64 {
        Complex64::new(self.re[idx], self.im[idx])
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.at(row * self.cols + col)
    }

    pub fn set(&mut self, row: usize, col: usize, value: Complex64) {
        let i = row * self.cols + col;
        self.re[i] = value.re;
        self.im[i] = value.im;
    }

    /// Value of a 1×1 tensor (or the first element of any tensor).
    pub fn item(&self) -> Complex64 {
        self.at(0)
    }

    pub fn to_complex_vec(&self) -> Vec<Complex64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&re, &im)| Complex64::new(re, im))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = Complex64> + '_ {
        self.re.iter().zip(&self.im).map(|(&re, &im)| Complex64::new(re, im))
    }

    pub fn map(&self, mut f: impl FnMut(Complex64) -> Complex64) -> Self {
        let mut out = Self::zeros(self.rows, self.cols);
        for i in 0..self.len() {
            let v = f(self.at(i));
            out.re[i] = v.re;
            out.im[i] = v.im;
        }
        out
    }

    pub fn zip_map(
        &self,
        other: &Self,
        mut f: impl FnMut(Complex64, Complex64) -> Complex64,
    ) -> Result<Self> {
        self.expect_shape(other.shape(), "zip_map")?;
        let mut out = Self::zeros(self.rows, self.cols);
        for i in 0..self.len() {
            let v = f(self.at(i), other.at(i));
            out.re[i] = v.re;
            out.im[i] = v.im;
        }
        Ok(out)
    }

    pub fn expect_shape(&self, shape: Shape, op: &'static str) -> Result<()> {
        if self.shape() != shape {
            return Err(PtychoError::Shape {
                op,
                left: self.shape(),
                right: shape,
            });
        }
        Ok(())
    }

    pub fn conj(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            re: self.re.clone(),
            im: self.im.iter().map(|v| -v).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            re: self.re.iter().map(|v| v * s).collect(),
            im: self.im.iter().map(|v| v * s).collect(),
        }
    }

    pub fn scale_complex(&self, c: Complex64) -> Self {
        self.map(|v| v * c)
    }

    /// `self += other` elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape(other.shape(), "add_assign")?;
        for (a, b) in self.re.iter_mut().zip(&other.re) {
            *a += b;
        }
        for (a, b) in self.im.iter_mut().zip(&other.im) {
            *a += b;
        }
        Ok(())
    }

    /// Sum of squared moduli.
    pub fn norm_sqr(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(a, b)| a * a + b * b).sum()
    }

    /// Hermitian inner product `Σ conj(self)·other`.
    pub fn dot(&self, other: &Self) -> Result<Complex64> {
        self.expect_shape(other.shape(), "dot")?;
        Ok(self.iter().zip(other.iter()).map(|(a, b)| a.conj() * b).sum())
    }

    pub fn sum(&self) -> Complex64 {
        Complex64::new(self.re.iter().sum(), self.im.iter().sum())
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().chain(&self.im).all(|v| v.is_finite())
    }

    pub fn modulus(&self) -> RealImage {
        RealImage {
            rows: self.rows,
            cols: self.cols,
            data: self.iter().map(|v| v.norm()).collect(),
        }
    }

    /// Elementwise argument in (−π, π].
    pub fn phase(&self) -> RealImage {
        RealImage {
            rows: self.rows,
            cols: self.cols,
            data: self.iter().map(|v| v.arg()).collect(),
        }
    }

    pub fn real_part(&self) -> RealImage {
        RealImage {
            rows: self.rows,
            cols: self.cols,
            data: self.re.clone(),
        }
    }

    /// Largest elementwise modulus of `self − other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Copy of the `rows × cols` window whose top-left corner is `(top, left)`.
    pub fn window(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Self> {
        if top + rows > self.rows || left + cols > self.cols {
            return Err(PtychoError::InvalidArgument(format!(
                "window {rows}x{cols} at ({top},{left}) exceeds {}x{}",
                self.rows, self.cols
            )));
        }
        let mut out = Self::zeros(rows, cols);
        for r in 0..rows {
            let src = (top + r) * self.cols + left;
            out.re[r * cols..(r + 1) * cols].copy_from_slice(&self.re[src..src + cols]);
            out.im[r * cols..(r + 1) * cols].copy_from_slice(&self.im[src..src + cols]);
        }
        Ok(out)
    }

    /// Zero-surrounded copy of `self` placed at `(top, left)` in a larger frame.
    pub fn embed(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Self> {
        if top + self.rows > rows || left + self.cols > cols {
            return Err(PtychoError::InvalidArgument(format!(
                "cannot embed {}x{} at ({top},{left}) in {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        let mut out = Self::zeros(rows, cols);
        for r in 0..self.rows {
            let dst = (top + r) * cols + left;
            let src = r * self.cols;
            out.re[dst..dst + self.cols].copy_from_slice(&self.re[src..src + self.cols]);
            out.im[dst..dst + self.cols].copy_from_slice(&self.im[src..src + self.cols]);
        }
        Ok(out)
    }
}

impl Add for &ComplexTensor {
    type Output = ComplexTensor;

    fn add(self, rhs: Self) -> ComplexTensor {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        let mut out = self.clone();
        out.add_assign(rhs).expect("shapes checked");
        out
    }
}

impl Sub for &ComplexTensor {
    type Output = ComplexTensor;

    fn sub(self, rhs: Self) -> ComplexTensor {
        self.zip_map(rhs, |a, b| a - b).expect("sub shape mismatch")
    }
}

impl Mul for &ComplexTensor {
    type Output = ComplexTensor;

    fn mul(self, rhs: Self) -> ComplexTensor {
        self.zip_map(rhs, |a, b| a * b).expect("mul shape mismatch")
    }
}

/// Dense 2D real image (intensities, magnitude or phase maps, thickness maps).
#[derive(Clone, Debug, PartialEq)]
pub struct RealImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RealImage {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(PtychoError::InvalidArgument(format!(
                "{} samples do not fill a {rows}x{cols} image",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> Shape {
        (self.rows, self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn window(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Self> {
        if top + rows > self.rows || left + cols > self.cols {
            return Err(PtychoError::InvalidArgument(format!(
                "window {rows}x{cols} at ({top},{left}) exceeds {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(Self::from_fn(rows, cols, |r, c| self.get(top + r, left + c)))
    }

    pub fn to_tensor(&self) -> ComplexTensor {
        ComplexTensor::from_real(self.rows, self.cols, self.data.clone()).expect("consistent shape")
    }
}
