//! Unitary 2D discrete Fourier transforms.
//!
//! Both directions carry a `1/√(rows·cols)` factor so the pair is unitary:
//! `ifft2(fft2(x)) == x` and `‖fft2(x)‖ == ‖x‖`. Arbitrary (non power of
//! two) sizes are supported by rustfft's mixed-radix and Bluestein plans.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::tensor::ComplexTensor;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

pub fn fft2(input: &ComplexTensor) -> ComplexTensor {
    transform(input, Direction::Forward)
}

pub fn ifft2(input: &ComplexTensor) -> ComplexTensor {
    transform(input, Direction::Inverse)
}

pub fn transform(input: &ComplexTensor, direction: Direction) -> ComplexTensor {
    let (rows, cols) = input.shape();
    if rows == 0 || cols == 0 {
        return input.clone();
    }
    let mut buf = input.to_complex_vec();
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let (row_plan, col_plan) = match direction {
            Direction::Forward => (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows)),
            Direction::Inverse => (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows)),
        };
        row_plan.process(&mut buf);
        let mut transposed = transpose(&buf, rows, cols);
        col_plan.process(&mut transposed);
        buf = transpose(&transposed, cols, rows);
    });
    let norm = 1.0 / ((rows * cols) as f64).sqrt();
    let mut out = ComplexTensor::zeros(rows, cols);
    let (re, im) = out.planes_mut();
    for (i, v) in buf.iter().enumerate() {
        re[i] = v.re * norm;
        im[i] = v.im * norm;
    }
    out
}

fn transpose(data: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Signed FFT frequency index for bin `i` of an `n`-point transform.
pub fn frequency_index(i: usize, n: usize) -> i64 {
    if i <= (n - 1) / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}
