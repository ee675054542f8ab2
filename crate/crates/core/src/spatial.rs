//! Differentiable sub-pixel cropping: affine grid generation and a bilinear
//! sampler with gradients for both the sampled image and the grid.
//!
//! Grids are complex tensors holding the source x coordinate in the real
//! plane and y in the imaginary plane, in the image's normalized frame
//! `[−1, 1]²` with align-corners semantics: −1 is the centre of the first
//! pixel and +1 the centre of the last.

use rustfft::num_complex::Complex64;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{PtychoError, Result};
use crate::tensor::{ComplexTensor, Shape};

/// Triangular interpolation kernel `max(0, 1 − |t|)`.
pub fn kernel_k1(t: f64) -> f64 {
    (1.0 - t.abs()).max(0.0)
}

/// Scale and translation of the crop window. Rotation and shear are fixed
/// at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub scale_x: f64,
    pub scale_y: f64,
    /// `t_x + j·t_y` in normalized units.
    pub translation: Complex64,
}

impl AffineParams {
    pub fn identity() -> Self {
        Self::new(1.0, 1.0, Complex64::new(0.0, 0.0))
    }

    pub fn new(scale_x: f64, scale_y: f64, translation: Complex64) -> Self {
        Self {
            scale_x,
            scale_y,
            translation,
        }
    }

    /// Scale that maps an `out` pixel crop onto an `input` pixel image
    /// without resampling, i.e. one output pixel per input pixel.
    pub fn crop(out: Shape, input: Shape, translation: Complex64) -> Self {
        Self::new(
            unit_scale(out.1, input.1),
            unit_scale(out.0, input.0),
            translation,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |s: f64| s > 0.0 && s <= 1.0;
        if !ok(self.scale_x) || !ok(self.scale_y) {
            return Err(PtychoError::InvalidArgument(format!(
                "scales must lie in (0, 1], got ({}, {})",
                self.scale_x, self.scale_y
            )));
        }
        if !(self.translation.re.is_finite() && self.translation.im.is_finite()) {
            return Err(PtychoError::InvalidArgument("translation must be finite".into()));
        }
        Ok(())
    }
}

fn unit_scale(out: usize, input: usize) -> f64 {
    if input <= 1 {
        1.0
    } else {
        (out.max(1) - 1) as f64 / (input - 1) as f64
    }
}

/// Normalized coordinate of pixel `i` on an `n`-pixel axis.
pub fn normalized_coordinate(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// The regular input grid scaled by `(s_x, s_y)`, before translation.
pub fn base_grid(scale_x: f64, scale_y: f64, out_shape: Shape) -> ComplexTensor {
    let (rows, cols) = out_shape;
    ComplexTensor::from_fn(rows, cols, |r, c| {
        Complex64::new(
            scale_x * normalized_coordinate(c, cols),
            scale_y * normalized_coordinate(r, rows),
        )
    })
}

/// `(x_o, y_o) = [[s_x, 0, t_x], [0, s_y, t_y]]·(x_i, y_i, 1)`.
pub fn generate_grid(p: &AffineParams, out_shape: Shape) -> Result<ComplexTensor> {
    if out_shape.0 == 0 || out_shape.1 == 0 {
        return Err(PtychoError::InvalidArgument("grid shape must be positive".into()));
    }
    p.validate()?;
    Ok(base_grid(p.scale_x, p.scale_y, out_shape).map(|g| g + p.translation))
}

/// Grid on the tape, differentiable in the complex scalar `translation`.
pub fn generate_grid_var<'t>(
    scale_x: f64,
    scale_y: f64,
    translation: Var<'t>,
    out_shape: Shape,
) -> Result<Var<'t>> {
    let base = translation.tape().constant(base_grid(scale_x, scale_y, out_shape));
    base.add(translation)
}

/// The up-to-four taps of one sample point: (flat index, weight,
/// d weight/d col, d weight/d row), in pixel units.
fn taps(x: f64, y: f64, shape: Shape, mut visit: impl FnMut(usize, f64, f64, f64)) {
    let (rows, cols) = shape;
    let px = (x + 1.0) * 0.5 * cols.saturating_sub(1) as f64;
    let py = (y + 1.0) * 0.5 * rows.saturating_sub(1) as f64;
    if !(px.is_finite() && py.is_finite()) {
        return;
    }
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let wx = [(x0, 1.0 - fx, -1.0), (x0 + 1.0, fx, 1.0)];
    let wy = [(y0, 1.0 - fy, -1.0), (y0 + 1.0, fy, 1.0)];
    for &(yy, wyv, dwy) in &wy {
        if yy < 0.0 || yy >= rows as f64 {
            continue;
        }
        for &(xx, wxv, dwx) in &wx {
            if xx < 0.0 || xx >= cols as f64 {
                continue;
            }
            let idx = yy as usize * cols + xx as usize;
            visit(idx, wxv * wyv, dwx * wyv, wxv * dwy);
        }
    }
}

/// Sum of the in-bounds bilinear weights of one normalized sample point.
pub fn weight_sum(x: f64, y: f64, shape: Shape) -> f64 {
    let mut total = 0.0;
    taps(x, y, shape, |_, w, _, _| total += w);
    total
}

/// True when every sample point of `grid` has all its taps inside `shape`.
pub fn grid_in_bounds(grid: &ComplexTensor, shape: Shape) -> bool {
    grid.iter().all(|g| {
        let mut count = 0;
        taps(g.re, g.im, shape, |_, _, _, _| count += 1);
        // An exactly aligned point may carry a zero-weight tap past the last
        // row/column; it still counts as inside.
        count == 4 || (weight_sum(g.re, g.im, shape) - 1.0).abs() < 1e-12
    })
}

/// `V = Σ U·K₁(w − x)K₁(h − y)` applied to both channels of `u`;
/// out-of-bounds taps read zero.
pub fn sample(u: &ComplexTensor, grid: &ComplexTensor) -> ComplexTensor {
    let shape = u.shape();
    let mut out = ComplexTensor::zeros(grid.rows(), grid.cols());
    let (ore, oim) = out.planes_mut();
    for (i, g) in grid.iter().enumerate() {
        let (mut re, mut im) = (0.0, 0.0);
        taps(g.re, g.im, shape, |idx, w, _, _| {
            re += w * u.re()[idx];
            im += w * u.im()[idx];
        });
        ore[i] = re;
        oim[i] = im;
    }
    out
}

/// Transpose of [`sample`] in its image argument: scatters `w` back onto an
/// image of `shape` with the same weights.
pub fn scatter(w: &ComplexTensor, grid: &ComplexTensor, shape: Shape) -> Result<ComplexTensor> {
    w.expect_shape(grid.shape(), "scatter")?;
    let mut out = ComplexTensor::zeros(shape.0, shape.1);
    let (ore, oim) = out.planes_mut();
    for (i, g) in grid.iter().enumerate() {
        let (gr, gi) = (w.re()[i], w.im()[i]);
        taps(g.re, g.im, shape, |idx, wt, _, _| {
            ore[idx] += wt * gr;
            oim[idx] += wt * gi;
        });
    }
    Ok(out)
}

struct BilinearSample;

impl CustomOp for BilinearSample {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn forward(&self, inputs: &[&ComplexTensor]) -> Result<ComplexTensor> {
        Ok(sample(inputs[0], inputs[1]))
    }

    fn adjoint(
        &self,
        grad_out: &ComplexTensor,
        inputs: &[&ComplexTensor],
        _output: &ComplexTensor,
    ) -> Result<Vec<Option<ComplexTensor>>> {
        let (u, grid) = (inputs[0], inputs[1]);
        let shape = u.shape();
        let grad_u = scatter(grad_out, grid, shape)?;
        // d(pixel)/d(normalized) on each axis.
        let sx = 0.5 * shape.1.saturating_sub(1) as f64;
        let sy = 0.5 * shape.0.saturating_sub(1) as f64;
        let mut grad_grid = ComplexTensor::zeros(grid.rows(), grid.cols());
        let (gre, gim) = grad_grid.planes_mut();
        for (i, g) in grid.iter().enumerate() {
            let (mut dvx, mut dvy) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
            taps(g.re, g.im, shape, |idx, _, dwx, dwy| {
                let v = u.at(idx);
                dvx += v * dwx;
                dvy += v * dwy;
            });
            let go = grad_out.at(i);
            // Real coordinates: dL/dx = Re(conj(G)·dV/dx).
            gre[i] = (go.conj() * dvx).re * sx;
            gim[i] = (go.conj() * dvy).re * sy;
        }
        Ok(vec![Some(grad_u), Some(grad_grid)])
    }
}

/// Samples `u` at `grid` on the tape; gradients reach both `u` and `grid`.
pub fn bilinear_sample<'t>(u: Var<'t>, grid: Var<'t>) -> Result<Var<'t>> {
    let tape: &'t Tape = u.tape();
    tape.custom(Box::new(BilinearSample), &[u, grid])
}

/// Sub-pixel crop of `out_shape` from `u`, centred `translation` (normalized
/// units) away from the image centre.
pub fn crop<'t>(u: Var<'t>, translation: Var<'t>, out_shape: Shape) -> Result<Var<'t>> {
    let p = AffineParams::crop(out_shape, u.shape(), Complex64::new(0.0, 0.0));
    let grid = generate_grid_var(p.scale_x, p.scale_y, translation, out_shape)?;
    bilinear_sample(u, grid)
}
