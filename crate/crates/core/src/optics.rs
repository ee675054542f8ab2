//! Angular-spectrum free-space propagation, padding policy, Fresnel
//! scaling and the thin-object material model.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock, RwLock};

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::fft::frequency_index;
use crate::autodiff::{Tape, Var};
use crate::error::{PtychoError, Result};
use crate::tensor::{ComplexTensor, RealImage, Shape};

/// How much zero surround to add before the FFT.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadPolicy {
    /// Pad by the lateral spread of the propagation cone, see [`auto_pad_size`].
    Auto,
    /// Fixed number of pixels on every side.
    Fixed(usize),
}

impl Default for PadPolicy {
    fn default() -> Self {
        PadPolicy::Auto
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationSpec {
    /// Metres.
    pub wavelength: f64,
    /// Signed propagation distance in metres.
    pub distance: f64,
    /// Sample-plane pixel pitch along columns (x) and rows (y), metres.
    pub dx: f64,
    pub dy: f64,
    #[serde(default)]
    pub pad: PadPolicy,
}

impl PropagationSpec {
    pub fn new(wavelength: f64, distance: f64, pixel: f64) -> Self {
        Self {
            wavelength,
            distance,
            dx: pixel,
            dy: pixel,
            pad: PadPolicy::Auto,
        }
    }

    pub fn with_pad(mut self, pad: PadPolicy) -> Self {
        self.pad = pad;
        self
    }

    pub fn with_distance(mut self, distance: f64) -> Self {
        self.distance = distance;
        self
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength > 0.0 && self.wavelength.is_finite()) {
            return Err(PtychoError::InvalidArgument(format!(
                "wavelength must be positive, got {}",
                self.wavelength
            )));
        }
        if !(self.dx > 0.0 && self.dy > 0.0 && self.dx.is_finite() && self.dy.is_finite()) {
            return Err(PtychoError::InvalidArgument(format!(
                "pixel pitch must be positive, got ({}, {})",
                self.dx, self.dy
            )));
        }
        if !self.distance.is_finite() {
            return Err(PtychoError::InvalidArgument("distance must be finite".into()));
        }
        Ok(())
    }
}

/// The z-independent part of the transfer function, split as
/// `k·√(1−s) = k + k_rel` with `s = (λf_x)²+(λf_y)²`.
///
/// `k·z` reaches 1e8 rad at desk-scale distances, where a single rounding
/// is worth 1e-7 rad. Keeping the piston `exp(jkz)` apart from the small
/// diffractive term `k_rel·z` confines that rounding to a global phase.
#[derive(Debug)]
pub struct TransferBasis {
    /// `k(√(1−s) − 1)` on propagating bins, zero elsewhere.
    pub k_rel: ComplexTensor,
    pub mask: ComplexTensor,
    pub k: f64,
}

type BasisKey = (usize, usize, u64, u64, u64);

fn basis_cache() -> &'static RwLock<HashMap<BasisKey, Arc<TransferBasis>>> {
    static CACHE: OnceLock<RwLock<HashMap<BasisKey, Arc<TransferBasis>>>> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

/// Cached per (shape, λ, dx, dy). The distance only enters as a scalar
/// multiplier of `kz`, so updating z never invalidates an entry.
pub fn transfer_basis(shape: Shape, spec: &PropagationSpec) -> Arc<TransferBasis> {
    let key = (
        shape.0,
        shape.1,
        spec.wavelength.to_bits(),
        spec.dx.to_bits(),
        spec.dy.to_bits(),
    );
    if let Some(hit) = basis_cache().read().expect("cache poisoned").get(&key) {
        return Arc::clone(hit);
    }
    let (rows, cols) = shape;
    let k = spec.wavenumber();
    let lambda = spec.wavelength;
    let mut k_rel = ComplexTensor::zeros(rows, cols);
    let mut mask = ComplexTensor::zeros(rows, cols);
    for r in 0..rows {
        let fy = frequency_index(r, rows) as f64 / (rows as f64 * spec.dy);
        for c in 0..cols {
            let fx = frequency_index(c, cols) as f64 / (cols as f64 * spec.dx);
            let s = (lambda * fx).powi(2) + (lambda * fy).powi(2);
            if s <= 1.0 {
                k_rel.re_mut()[r * cols + c] = -k * s / (1.0 + (1.0 - s).sqrt());
                mask.re_mut()[r * cols + c] = 1.0;
            }
        }
    }
    let basis = Arc::new(TransferBasis { k_rel, mask, k });
    basis_cache()
        .write()
        .expect("cache poisoned")
        .insert(key, Arc::clone(&basis));
    basis
}

/// `H(f_x, f_y, z) = exp(jkz·√(1−(λf_x)²−(λf_y)²))`, exactly zero on
/// evanescent bins. Bins follow the FFT layout (DC at index 0).
pub fn propagation_filter(shape: Shape, spec: &PropagationSpec) -> ComplexTensor {
    let basis = transfer_basis(shape, spec);
    let z = spec.distance;
    let piston = Complex64::from_polar(1.0, basis.k * z);
    basis
        .k_rel
        .zip_map(&basis.mask, |kr, m| m * Complex64::from_polar(1.0, kr.re * z) * piston)
        .expect("basis planes share a shape")
}

/// Padded field shape for the current distance.
///
/// Each side grows by `ceil(λ|z| / (2·d²))` pixels, the lateral reach of
/// the steepest propagating component, capped so the padded dimension is at
/// most four times the original.
pub fn auto_pad_size(shape: Shape, spec: &PropagationSpec) -> Shape {
    let (rows, cols) = shape;
    match spec.pad {
        PadPolicy::Fixed(n) => (rows + 2 * n, cols + 2 * n),
        PadPolicy::Auto => (
            rows + 2 * pad_pixels(rows, spec.wavelength, spec.distance, spec.dy),
            cols + 2 * pad_pixels(cols, spec.wavelength, spec.distance, spec.dx),
        ),
    }
}

fn pad_pixels(n: usize, wavelength: f64, distance: f64, pitch: f64) -> usize {
    // The relative slack keeps exact products such as 1250.0000000000002
    // from rounding up a whole pixel.
    let spread = (wavelength * distance.abs() / (2.0 * pitch * pitch) * (1.0 - 1e-12)).ceil();
    let cap = (3 * n / 2) as f64;
    spread.min(cap).max(0.0) as usize
}

/// Propagates `field` over a differentiable real scalar distance `z`
/// (metres): pad, `F⁻¹{F{ψ}·H(z)}`, crop back to the input shape.
///
/// Only `spec.wavelength`, the pixel pitch and the pad policy are read from
/// `spec`; the auto padding uses the current value of `z`.
pub fn propagate_var<'t>(field: Var<'t>, z: Var<'t>, spec: &PropagationSpec) -> Result<Var<'t>> {
    let tape = field.tape();
    let (rows, cols) = field.shape();
    let z_now = z.value().item().re;
    let padded_shape = auto_pad_size((rows, cols), &spec.with_distance(z_now));
    let basis = transfer_basis(padded_shape, spec);

    let spectrum = field.pad_center(padded_shape.0, padded_shape.1)?.fft2();
    let k_rel = tape.constant(basis_tensor(&basis, |b| &b.k_rel));
    let mask = tape.constant(basis_tensor(&basis, |b| &b.mask));
    let piston = z.scale(basis.k).exp_j();
    let transfer = k_rel.mul(z)?.exp_j().mul(mask)?.mul(piston)?;
    spectrum.mul(transfer)?.ifft2().crop_center(rows, cols)
}

fn basis_tensor(
    basis: &Arc<TransferBasis>,
    pick: impl Fn(&TransferBasis) -> &ComplexTensor,
) -> Arc<ComplexTensor> {
    // TODO: store the basis planes as Arc<ComplexTensor> so tape constants
    // can share them without this copy.
    Arc::new(pick(basis).clone())
}

/// Propagation over the fixed distance in `spec`, recorded on the tape.
pub fn propagate<'t>(field: Var<'t>, spec: &PropagationSpec) -> Result<Var<'t>> {
    let z = field.tape().constant(ComplexTensor::real_scalar(spec.distance));
    propagate_var(field, z, spec)
}

/// Tape-free propagation of a plain field.
pub fn propagate_field(field: &ComplexTensor, spec: &PropagationSpec) -> Result<ComplexTensor> {
    spec.validate()?;
    let tape = Tape::new();
    let f = tape.constant(field.clone());
    Ok((*propagate(f, spec)?.value()).clone())
}

/// Geometry of a point-source (divergent beam) experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGeometry {
    /// Point source (focus) to sample, metres.
    pub source_to_sample: f64,
    /// Sample to detector, metres.
    pub sample_to_detector: f64,
    pub detector_pixel: f64,
    pub numerical_aperture: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FresnelScaling {
    pub magnification: f64,
    pub effective_distance: f64,
    pub effective_pixel: f64,
}

/// Equivalent parallel-beam geometry of a divergent-beam setup.
pub fn fresnel_rescale(geom: &ExperimentGeometry) -> Result<FresnelScaling> {
    let (z1, z2) = (geom.source_to_sample, geom.sample_to_detector);
    if !(z1 > 0.0 && z2 > 0.0 && geom.detector_pixel > 0.0) {
        return Err(PtychoError::InvalidArgument(format!(
            "distances and pixel must be positive: z1={z1}, z2={z2}, pixel={}",
            geom.detector_pixel
        )));
    }
    let magnification = (z1 + z2) / z1;
    Ok(FresnelScaling {
        magnification,
        effective_distance: z2 / magnification,
        effective_pixel: geom.detector_pixel / magnification,
    })
}

/// Paraxial spherical-wave phase `exp(jk(x²+y²)/(2R))` of a point source a
/// distance `radius` upstream, centred on pixel `(rows/2, cols/2)`.
pub fn point_source_phase(shape: Shape, spec: &PropagationSpec, radius: f64) -> ComplexTensor {
    let k = spec.wavenumber();
    let (rows, cols) = shape;
    let (cy, cx) = ((rows / 2) as f64, (cols / 2) as f64);
    ComplexTensor::from_fn(rows, cols, |r, c| {
        let y = (r as f64 - cy) * spec.dy;
        let x = (c as f64 - cx) * spec.dx;
        Complex64::from_polar(1.0, k * (x * x + y * y) / (2.0 * radius))
    })
}

/// Refractive decrement δ, absorption index β and thickness t per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialMap {
    pub delta: RealImage,
    pub beta: RealImage,
    pub thickness: RealImage,
}

impl MaterialMap {
    pub fn validate(&self) -> Result<()> {
        let shape = self.thickness.shape();
        if self.delta.shape() != shape || self.beta.shape() != shape {
            return Err(PtychoError::InvalidArgument("material planes differ in shape".into()));
        }
        if self.beta.data.iter().any(|&b| b < 0.0) {
            return Err(PtychoError::InvalidArgument("absorption index must be >= 0".into()));
        }
        if self.thickness.data.iter().any(|&t| t < 0.0) {
            return Err(PtychoError::InvalidArgument("thickness must be >= 0".into()));
        }
        Ok(())
    }
}

/// Thin-object transmission `O = exp(j(2π/λ)·t·(−δ + jβ))`.
pub fn transmission_from_material(m: &MaterialMap, wavelength: f64) -> Result<ComplexTensor> {
    m.validate()?;
    let k = 2.0 * PI / wavelength;
    let (rows, cols) = m.thickness.shape();
    Ok(ComplexTensor::from_fn(rows, cols, |r, c| {
        let t = m.thickness.get(r, c);
        let exponent = Complex64::new(0.0, k * t) * Complex64::new(-m.delta.get(r, c), m.beta.get(r, c));
        exponent.exp()
    }))
}

/// Thickness recovered from each channel of a transmission function.
/// Pixels whose material constant is zero are `NaN` and marked invalid.
#[derive(Clone, Debug)]
pub struct ThicknessMaps {
    pub from_phase: RealImage,
    pub from_magnitude: RealImage,
    pub phase_valid: Vec<bool>,
    pub magnitude_valid: Vec<bool>,
}

impl ThicknessMaps {
    /// Phase channel where δ ≠ 0, magnitude channel otherwise.
    pub fn preferred(&self) -> RealImage {
        let mut out = self.from_phase.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            if !self.phase_valid[i] {
                *v = self.from_magnitude.data[i];
            }
        }
        out
    }
}

pub fn thickness_from_reconstruction(
    object: &ComplexTensor,
    delta: &RealImage,
    beta: &RealImage,
    wavelength: f64,
) -> Result<ThicknessMaps> {
    let shape = object.shape();
    if delta.shape() != shape || beta.shape() != shape {
        return Err(PtychoError::Shape {
            op: "thickness_from_reconstruction",
            left: shape,
            right: delta.shape(),
        });
    }
    let scale = wavelength / (2.0 * PI);
    let n = object.len();
    let mut from_phase = RealImage::zeros(shape.0, shape.1);
    let mut from_magnitude = RealImage::zeros(shape.0, shape.1);
    let mut phase_valid = vec![false; n];
    let mut magnitude_valid = vec![false; n];
    for i in 0..n {
        let o = object.at(i);
        let (d, b) = (delta.data[i], beta.data[i]);
        if d != 0.0 {
            from_phase.data[i] = -scale * o.arg() / d;
            phase_valid[i] = true;
        } else {
            from_phase.data[i] = f64::NAN;
        }
        if b != 0.0 && o.norm() > 0.0 {
            from_magnitude.data[i] = -scale * o.norm().ln() / b;
            magnitude_valid[i] = true;
        } else {
            from_magnitude.data[i] = f64::NAN;
        }
    }
    Ok(ThicknessMaps {
        from_phase,
        from_magnitude,
        phase_valid,
        magnitude_valid,
    })
}
