//! Illumination × object crop → propagation → multimode intensity.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::autodiff::{Tape, Var};
use crate::error::{PtychoError, Result};
use crate::optics::{propagate_var, PropagationSpec};
use crate::spatial;
use crate::tensor::{ComplexTensor, RealImage, Shape};

/// Mutually incoherent probe modes sharing one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModes {
    modes: Vec<ComplexTensor>,
}

impl ProbeModes {
    pub fn new(modes: Vec<ComplexTensor>) -> Result<Self> {
        let first = modes
            .first()
            .ok_or_else(|| PtychoError::InvalidArgument("at least one probe mode is required".into()))?;
        let shape = first.shape();
        for m in &modes[1..] {
            m.expect_shape(shape, "probe modes")?;
        }
        Ok(Self { modes })
    }

    pub fn single(mode: ComplexTensor) -> Self {
        Self { modes: vec![mode] }
    }

    pub fn modes(&self) -> &[ComplexTensor] {
        &self.modes
    }

    pub fn modes_mut(&mut self) -> &mut [ComplexTensor] {
        &mut self.modes
    }

    pub fn into_modes(self) -> Vec<ComplexTensor> {
        self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.modes[0].shape()
    }

    /// `Σ_p ‖P_p‖²`.
    pub fn energy(&self) -> f64 {
        self.modes.iter().map(ComplexTensor::norm_sqr).sum()
    }
}

/// Nominal scan positions in metres, relative to the object centre, plus
/// learnable corrections in normalized units (`t_x + j·t_y`).
#[derive(Clone, Debug, PartialEq)]
pub struct ScanSet {
    /// `(x, y)` per position.
    pub nominal: Vec<(f64, f64)>,
    pub corrections: Vec<Complex64>,
    pub pixel_pitch: f64,
}

impl ScanSet {
    pub fn new(nominal: Vec<(f64, f64)>, pixel_pitch: f64) -> Result<Self> {
        if nominal.is_empty() {
            return Err(PtychoError::InvalidArgument("scan needs at least one position".into()));
        }
        if !(pixel_pitch > 0.0) {
            return Err(PtychoError::InvalidArgument(format!("pixel pitch {pixel_pitch} must be positive")));
        }
        if nominal.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(PtychoError::InvalidArgument("scan positions must be finite".into()));
        }
        let corrections = vec![Complex64::new(0.0, 0.0); nominal.len()];
        Ok(Self {
            nominal,
            corrections,
            pixel_pitch,
        })
    }

    /// Positions given in pixels rather than metres.
    pub fn from_pixels(positions: &[(f64, f64)], pixel_pitch: f64) -> Result<Self> {
        Self::new(
            positions.iter().map(|&(x, y)| (x * pixel_pitch, y * pixel_pitch)).collect(),
            pixel_pitch,
        )
    }

    pub fn len(&self) -> usize {
        self.nominal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nominal.is_empty()
    }

    pub fn nominal_pixels(&self, j: usize) -> (f64, f64) {
        let (x, y) = self.nominal[j];
        (x / self.pixel_pitch, y / self.pixel_pitch)
    }

    /// Nominal position of `j` in normalized units of an object of `object_shape`.
    pub fn nominal_translation(&self, j: usize, object_shape: Shape) -> Complex64 {
        let (x, y) = self.nominal_pixels(j);
        Complex64::new(
            pixel_to_normalized(x, object_shape.1),
            pixel_to_normalized(y, object_shape.0),
        )
    }

    /// Nominal plus correction, normalized units.
    pub fn translation(&self, j: usize, object_shape: Shape) -> Complex64 {
        self.nominal_translation(j, object_shape) + self.corrections[j]
    }

    /// Current estimate (nominal + correction) of position `j`, pixels.
    pub fn estimated_pixels(&self, j: usize, object_shape: Shape) -> (f64, f64) {
        let (x, y) = self.nominal_pixels(j);
        let c = self.corrections[j];
        (
            x + normalized_to_pixel(c.re, object_shape.1),
            y + normalized_to_pixel(c.im, object_shape.0),
        )
    }

    pub fn estimated_all(&self, object_shape: Shape) -> Vec<(f64, f64)> {
        (0..self.len()).map(|j| self.estimated_pixels(j, object_shape)).collect()
    }

    /// Smallest object shape holding every probe window plus a margin of one
    /// probe radius on each side. Keeps the parity of the probe shape so
    /// integer positions land on integer crops.
    pub fn object_shape(&self, probe_shape: Shape) -> Shape {
        let (mut max_x, mut max_y) = (0.0f64, 0.0f64);
        for j in 0..self.len() {
            let (x, y) = self.nominal_pixels(j);
            max_x = max_x.max(x.abs());
            max_y = max_y.max(y.abs());
        }
        let extent = |max: f64, k: usize| 2 * max.ceil() as usize + k + 2 * k.div_ceil(2);
        (extent(max_y, probe_shape.0), extent(max_x, probe_shape.1))
    }

    /// Whether each window currently lies entirely inside the object.
    pub fn windows_in_bounds(&self, object_shape: Shape, probe_shape: Shape) -> Vec<bool> {
        (0..self.len())
            .map(|j| {
                let p = spatial::AffineParams::crop(probe_shape, object_shape, self.translation(j, object_shape));
                let grid = spatial::base_grid(p.scale_x, p.scale_y, probe_shape).map(|g| g + p.translation);
                spatial::grid_in_bounds(&grid, object_shape)
            })
            .collect()
    }
}

/// `t = 2·pos / (n − 1)`.
pub fn pixel_to_normalized(pos: f64, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * pos / (n - 1) as f64
    }
}

pub fn normalized_to_pixel(t: f64, n: usize) -> f64 {
    t * n.saturating_sub(1) as f64 / 2.0
}

/// `Ψ = P ∘ O_crop`.
pub fn exit_wave<'t>(probe: Var<'t>, object_crop: Var<'t>) -> Result<Var<'t>> {
    if probe.shape() != object_crop.shape() {
        return Err(PtychoError::Shape {
            op: "exit_wave",
            left: probe.shape(),
            right: object_crop.shape(),
        });
    }
    probe.mul(object_crop)
}

/// `Ĩ = Σ_p |D_z(P_p ∘ crop(O, t))|²` on the tape.
///
/// `translation` is a complex scalar `t_x + j·t_y`, `z` a real scalar in
/// metres; `spec` supplies wavelength, pixel pitch and padding.
pub fn intensity_var<'t>(
    probes: &[Var<'t>],
    object: Var<'t>,
    translation: Var<'t>,
    z: Var<'t>,
    spec: &PropagationSpec,
) -> Result<Var<'t>> {
    let first = probes
        .first()
        .ok_or_else(|| PtychoError::InvalidArgument("at least one probe mode is required".into()))?;
    let crop = spatial::crop(object, translation, first.shape())?;
    let mut total: Option<Var<'t>> = None;
    for &p in probes {
        let intensity = propagate_var(exit_wave(p, crop)?, z, spec)?.modulus_squared();
        total = Some(match total {
            Some(t) => t.add(intensity)?,
            None => intensity,
        });
    }
    Ok(total.expect("at least one mode"))
}

/// Forward intensity of position `j` with every input held constant.
pub fn simulate_intensity(
    probe: &ProbeModes,
    object: &ComplexTensor,
    scan: &ScanSet,
    j: usize,
    spec: &PropagationSpec,
) -> Result<RealImage> {
    if j >= scan.len() {
        return Err(PtychoError::InvalidArgument(format!(
            "position {j} out of range for {} positions",
            scan.len()
        )));
    }
    spec.validate()?;
    let tape = Tape::new();
    let probes: Vec<Var> = probe.modes().iter().map(|m| tape.constant(m.clone())).collect();
    let obj = tape.constant(object.clone());
    let t = tape.constant(ComplexTensor::scalar(scan.translation(j, object.shape())));
    let z = tape.constant(ComplexTensor::real_scalar(spec.distance));
    let out = intensity_var(&probes, obj, t, z, spec)?;
    Ok(out.value().real_part())
}

/// [`simulate_intensity`] for each index in order; positions run in parallel.
pub fn simulate_batch(
    probe: &ProbeModes,
    object: &ComplexTensor,
    scan: &ScanSet,
    indices: &[usize],
    spec: &PropagationSpec,
) -> Result<Vec<RealImage>> {
    indices
        .par_iter()
        .map(|&j| simulate_intensity(probe, object, scan, j, spec))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check_with;
    use crate::optics::{propagate_field, PadPolicy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ComplexTensor {
        ComplexTensor::from_fn(rows, cols, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    fn spec(z: f64) -> PropagationSpec {
        PropagationSpec::new(1e-9, z, 1e-6)
    }

    fn setup(seed: u64) -> (ProbeModes, ComplexTensor, ScanSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe = ProbeModes::single(random(8, 8, &mut rng));
        let scan = ScanSet::from_pixels(&[(0.0, 0.0), (2.0, -1.0), (-3.0, 2.0), (1.5, 0.25)], 1e-6).unwrap();
        let shape = scan.object_shape((8, 8));
        let object = random(shape.0, shape.1, &mut rng);
        (probe, object, scan)
    }

    #[test]
    fn exit_wave_cases() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random(4, 4, &mut rng);
        let o = random(4, 4, &mut rng);
        let pv = tape.constant(p.clone());
        let ones = tape.constant(ComplexTensor::ones(4, 4));
        assert_eq!(*exit_wave(pv, ones).unwrap().value(), p);
        let zeros = tape.constant(ComplexTensor::zeros(4, 4));
        assert_eq!(exit_wave(zeros, tape.constant(o.clone())).unwrap().value().norm_sqr(), 0.0);
        let direct = ComplexTensor::from_fn(4, 4, |r, c| p.get(r, c) * o.get(r, c));
        let ew = exit_wave(pv, tape.constant(o)).unwrap();
        assert!(ew.value().max_abs_diff(&direct) < 1e-15);
        assert!(exit_wave(pv, tape.constant(ComplexTensor::ones(3, 4))).is_err());
    }

    #[test]
    fn object_shape_keeps_probe_parity() {
        let scan = ScanSet::from_pixels(&[(-10.2, 3.0), (7.0, -4.5)], 1e-6).unwrap();
        let d = scan.object_shape((64, 63));
        assert_eq!(d, (2 * 5 + 64 + 64, 2 * 11 + 63 + 64));
        assert_eq!(d.0 % 2, 0);
        assert_eq!(d.1 % 2, 1);
        assert!(scan.windows_in_bounds(d, (64, 63)).iter().all(|&b| b));
    }

    #[test]
    fn flat_object_at_zero_distance_gives_probe_intensity() {
        let (probe, _, scan) = setup(2);
        let shape = scan.object_shape(probe.shape());
        let out = simulate_intensity(&probe, &ComplexTensor::ones(shape.0, shape.1), &scan, 3, &spec(0.0)).unwrap();
        let expected = probe.modes()[0].modulus().map(|m| m * m);
        for (a, b) in out.data.iter().zip(&expected.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn modes_add_in_intensity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, object, scan) = setup(3);
        let (a, b) = (random(8, 8, &mut rng), random(8, 8, &mut rng));
        let s = spec(0.02);
        let both = ProbeModes::new(vec![a.clone(), b.clone()]).unwrap();
        let sum = simulate_intensity(&both, &object, &scan, 1, &s).unwrap();
        let ia = simulate_intensity(&ProbeModes::single(a), &object, &scan, 1, &s).unwrap();
        let ib = simulate_intensity(&ProbeModes::single(b), &object, &scan, 1, &s).unwrap();
        for i in 0..sum.data.len() {
            assert!((sum.data[i] - ia.data[i] - ib.data[i]).abs() < 1e-12);
        }
        assert!(ProbeModes::new(vec![ComplexTensor::ones(2, 2), ComplexTensor::ones(3, 3)]).is_err());
    }

    #[test]
    fn intensity_energy_matches_exit_wave_energy() {
        let (probe, object, scan) = setup(4);
        let s = spec(0.05).with_pad(PadPolicy::Fixed(0));
        let j = 2;
        let out = simulate_intensity(&probe, &object, &scan, j, &s).unwrap();
        let crop = spatial::sample(
            &object,
            &spatial::generate_grid(
                &spatial::AffineParams::crop((8, 8), object.shape(), scan.translation(j, object.shape())),
                (8, 8),
            )
            .unwrap(),
        );
        let exit = &probe.modes()[0] * &crop;
        assert!((out.sum() - exit.norm_sqr()).abs() / exit.norm_sqr() < 1e-12);
        assert!(out.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn integer_positions_match_plain_cropping() {
        let (probe, object, scan) = setup(5);
        let s = spec(0.03);
        let d = object.shape();
        for j in 0..3 {
            let (x, y) = scan.nominal_pixels(j);
            let top = (y + (d.0 - 8) as f64 / 2.0) as usize;
            let left = (x + (d.1 - 8) as f64 / 2.0) as usize;
            let exit = &probe.modes()[0] * &object.window(top, left, 8, 8).unwrap();
            let reference = propagate_field(&exit, &s).unwrap().modulus().map(|m| m * m);
            let out = simulate_intensity(&probe, &object, &scan, j, &s).unwrap();
            for (a, b) in out.data.iter().zip(&reference.data) {
                assert!((a - b).abs() < 1e-12, "position {j}");
            }
        }
    }

    #[test]
    fn global_phase_is_invisible() {
        let (probe, object, scan) = setup(6);
        let phi = Complex64::from_polar(1.0, 0.77);
        let rotated_obj = object.scale_complex(phi);
        let rotated_probe = ProbeModes::single(probe.modes()[0].scale_complex(phi.conj()));
        let s = spec(0.04);
        for j in 0..scan.len() {
            let a = simulate_intensity(&probe, &object, &scan, j, &s).unwrap();
            let b = simulate_intensity(&rotated_probe, &rotated_obj, &scan, j, &s).unwrap();
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn batches_follow_their_indices() {
        let (probe, object, scan) = setup(7);
        let s = spec(0.01);
        let single = simulate_intensity(&probe, &object, &scan, 2, &s).unwrap();
        assert_eq!(simulate_batch(&probe, &object, &scan, &[2], &s).unwrap(), vec![single]);
        let order = [3, 0, 2, 0, 1];
        let batch = simulate_batch(&probe, &object, &scan, &order, &s).unwrap();
        for (out, &j) in batch.iter().zip(&order) {
            assert_eq!(*out, simulate_intensity(&probe, &object, &scan, j, &s).unwrap());
        }
        assert!(simulate_intensity(&probe, &object, &scan, 9, &s).is_err());
    }

    #[test]
    fn composed_gradient_matches_finite_differences() {
        let (probe, object, scan) = setup(8);
        let s = spec(0.0).with_pad(PadPolicy::Fixed(2));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let target = random(8, 8, &mut rng).modulus();
        let t0 = scan.translation(3, object.shape());
        let z0 = 0.05;
        let check = finite_difference_check_with(
            |tape, v| {
                let z = v[2].scale(z0).add_scalar(Complex64::new(z0, 0.0))?;
                let t = v[3].add_scalar(t0)?;
                let sim = intensity_var(&[v[0]], v[1], t, z, &s)?;
                let diff = sim.sqrt().sub(tape.constant(target.to_tensor()))?;
                Ok(diff.modulus_squared().sum())
            },
            &[
                probe.modes()[0].clone(),
                object,
                ComplexTensor::real_scalar(0.1),
                ComplexTensor::scalar(Complex64::new(0.013, -0.021)),
            ],
            &[false, false, true, false],
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-5, "{check:?}");
    }
}
