//! Synthetic datasets: jittered raster scans, ground-truth object and probe
//! from test images, forward simulation and controlled corruption.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dataset::{GroundTruth, PtychoDataset};
use crate::error::{PtychoError, Result};
use crate::forward::{simulate_batch, ProbeModes, ScanSet};
use crate::optics::{point_source_phase, propagate_field, PadPolicy, PropagationSpec};
use crate::spatial;
use crate::tensor::{ComplexTensor, RealImage};

const STREAM_SCAN: u64 = 1;
const STREAM_CORRUPTION: u64 = 2;
const STREAM_NOISE: u64 = 3;

/// Names of the grayscale test images compiled into the library.
pub const BUILTIN_IMAGES: [&str; 4] = ["coffee", "camera", "chelsea", "astronaut"];

fn builtin_bytes(name: &str) -> Option<&'static [u8]> {
    Some(match name {
        "coffee" => include_bytes!("../assets/coffee.png"),
        "camera" => include_bytes!("../assets/camera.png"),
        "chelsea" => include_bytes!("../assets/chelsea.png"),
        "astronaut" => include_bytes!("../assets/astronaut.png"),
        _ => return None,
    })
}

fn decode_gray(bytes: &[u8]) -> Result<RealImage> {
    let img = image::load_from_memory(bytes)?.to_luma32f();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(f64::from).collect();
    RealImage::new(h as usize, w as usize, data)
}

/// Loads `builtin:<name>` or an image file path as grayscale in `[0, 1]`.
pub fn load_image_source(source: &str, base_dir: Option<&Path>) -> Result<RealImage> {
    if let Some(name) = source.strip_prefix("builtin:") {
        let bytes = builtin_bytes(name).ok_or_else(|| {
            PtychoError::Config(format!("unknown builtin image {name:?}; available: {}", BUILTIN_IMAGES.join(", ")))
        })?;
        return decode_gray(bytes);
    }
    let path = match base_dir {
        Some(dir) => dir.join(source),
        None => Path::new(source).to_path_buf(),
    };
    let bytes = std::fs::read(&path).map_err(|e| PtychoError::io(&path, e))?;
    decode_gray(&bytes)
}

/// Bilinear resampling onto a `rows × cols` grid spanning the same extent.
pub fn resize(img: &RealImage, rows: usize, cols: usize) -> RealImage {
    let grid = spatial::base_grid(1.0, 1.0, (rows, cols));
    spatial::sample(&img.to_tensor(), &grid).real_part()
}

/// Linear map of `img`'s values from `[min, max]` onto `range`.
fn rescale(img: &RealImage, range: [f64; 2]) -> RealImage {
    let (lo, hi) = (img.min(), img.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    img.map(|v| range[0] + (v - lo) / span * (range[1] - range[0]))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Noise {
    #[default]
    None,
    /// Poisson counts; `flux` is the expected photon number of a pattern
    /// that sees the whole probe.
    Poisson { flux: f64 },
}

/// Errors applied to the geometry written into the dataset, which the
/// reconstruction must then undo.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSpec {
    /// `z_init = z_true·(1 + z_error)`.
    pub z_error: f64,
    /// Gaussian σ per coordinate, pixels.
    pub position_jitter: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            z_error: 0.0,
            position_jitter: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationRecipe {
    pub object_magnitude: String,
    pub object_phase: String,
    pub probe_magnitude: String,
    pub probe_phase: String,
    #[serde(default = "default_magnitude_range")]
    pub magnitude_range: [f64; 2],
    #[serde(default = "default_phase_range")]
    pub phase_range: [f64; 2],
    #[serde(default = "default_phase_range")]
    pub probe_phase_range: [f64; 2],
    /// Metres.
    pub wavelength: f64,
    /// True propagation distance, metres.
    pub distance: f64,
    /// Metres.
    pub pixel_pitch: f64,
    pub pattern_size: usize,
    /// Diameter of the probe's circular support, pixels.
    pub probe_diameter: f64,
    #[serde(default = "default_modes")]
    pub probe_modes: usize,
    /// Positions per side of the square raster.
    pub grid: usize,
    /// Linear overlap between neighbouring probes; sets the step when
    /// `step` is absent.
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    /// Raster step, pixels.
    #[serde(default)]
    pub step: Option<f64>,
    /// Known jitter of the true positions around the raster, pixels.
    #[serde(default)]
    pub jitter: f64,
    pub seed: u64,
    #[serde(default)]
    pub noise: Noise,
    #[serde(default)]
    pub corruption: CorruptionSpec,
}

fn default_magnitude_range() -> [f64; 2] {
    [0.2, 1.0]
}

fn default_phase_range() -> [f64; 2] {
    [-PI / 2.0, PI / 2.0]
}

fn default_modes() -> usize {
    1
}

fn default_overlap() -> f64 {
    0.7
}

impl SimulationRecipe {
    /// The desk-scale acceptance protocol: λ = 1 nm, z = 0.1 m, 64-px
    /// patterns, 7×7 positions at 70 % overlap, z +30 %, σ = 5 px.
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            object_magnitude: "builtin:coffee".into(),
            object_phase: "builtin:camera".into(),
            probe_magnitude: "builtin:chelsea".into(),
            probe_phase: "builtin:astronaut".into(),
            magnitude_range: default_magnitude_range(),
            phase_range: default_phase_range(),
            probe_phase_range: default_phase_range(),
            wavelength: 1e-9,
            distance: 0.1,
            pixel_pitch: 2e-6,
            pattern_size: 64,
            probe_diameter: 36.0,
            probe_modes: 1,
            grid: 7,
            overlap: 0.7,
            step: None,
            jitter: 1.0,
            seed,
            noise: Noise::None,
            corruption: CorruptionSpec {
                z_error: 0.3,
                position_jitter: 5.0,
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let recipe: Self = toml::from_str(text).map_err(|e| PtychoError::Config(e.to_string()))?;
        recipe.validate()?;
        Ok(recipe)
    }

    pub fn step_pixels(&self) -> f64 {
        self.step.unwrap_or_else(|| step_for_overlap(self.overlap, self.probe_diameter))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PtychoError::Config(m));
        if self.pattern_size < 2 {
            return bad(format!("pattern_size {} too small", self.pattern_size));
        }
        if self.grid < 2 {
            return bad(format!("grid must be at least 2, got {}", self.grid));
        }
        if !(self.probe_diameter > 0.0) || self.probe_diameter > self.pattern_size as f64 {
            return bad(format!(
                "probe_diameter {} must lie in (0, pattern_size]",
                self.probe_diameter
            ));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad(format!("overlap {} must lie in [0, 1)", self.overlap));
        }
        if self.step_pixels() <= 0.0 {
            return bad("step must be positive".into());
        }
        if self.jitter < 0.0 || self.corruption.position_jitter < 0.0 {
            return bad("jitter must be non-negative".into());
        }
        if self.corruption.z_error <= -1.0 {
            return bad("z_error must exceed -1".into());
        }
        if self.probe_modes == 0 {
            return bad("probe_modes must be at least 1".into());
        }
        if self.magnitude_range[0] < 0.0 || self.magnitude_range[1] > 1.0 {
            return bad("magnitude_range must lie within [0, 1]".into());
        }
        if let Noise::Poisson { flux } = self.noise {
            if !(flux > 0.0) {
                return bad("poisson flux must be positive".into());
            }
        }
        PropagationSpec::new(self.wavelength, self.distance, self.pixel_pitch).validate()
    }
}

/// `1 − step/diameter`, clamped to `[0, 1]`.
pub fn overlap_factor(step: f64, probe_diameter: f64) -> Result<f64> {
    if !(probe_diameter > 0.0) {
        return Err(PtychoError::InvalidArgument(format!(
            "probe diameter {probe_diameter} must be positive"
        )));
    }
    Ok((1.0 - step / probe_diameter).clamp(0.0, 1.0))
}

/// Step giving linear overlap `overlap` for a probe of `probe_diameter`.
pub fn step_for_overlap(overlap: f64, probe_diameter: f64) -> f64 {
    (1.0 - overlap) * probe_diameter
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanGrid {
    /// Ideal raster, pixels, centred on zero.
    pub ideal: Vec<(f64, f64)>,
    /// Jitter added to each ideal position, pixels.
    pub jitter: Vec<(f64, f64)>,
}

impl ScanGrid {
    pub fn positions(&self) -> Vec<(f64, f64)> {
        self.ideal
            .iter()
            .zip(&self.jitter)
            .map(|(p, j)| (p.0 + j.0, p.1 + j.1))
            .collect()
    }
}

fn gaussian_pairs(n: usize, sigma: f64, seed: u64, stream: u64) -> Vec<(f64, f64)> {
    if sigma == 0.0 {
        return vec![(0.0, 0.0); n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    (0..n).map(|_| (normal.sample(&mut rng), normal.sample(&mut rng))).collect()
}

/// `n × n` raster with spacing `step` (pixels) plus i.i.d. Gaussian jitter.
pub fn make_scan_grid(n: usize, step: f64, jitter_std: f64, seed: u64) -> Result<ScanGrid> {
    if n < 2 || !(step > 0.0) || !(jitter_std >= 0.0) {
        return Err(PtychoError::InvalidArgument(format!(
            "scan grid needs n >= 2, step > 0, jitter >= 0 (got {n}, {step}, {jitter_std})"
        )));
    }
    let c = (n - 1) as f64 / 2.0;
    let mut ideal = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            ideal.push(((col as f64 - c) * step, (row as f64 - c) * step));
        }
    }
    let jitter = gaussian_pairs(n * n, jitter_std, seed, STREAM_SCAN);
    Ok(ScanGrid { ideal, jitter })
}

fn probe_support(size: usize, diameter: f64) -> RealImage {
    let c = (size as f64 - 1.0) / 2.0;
    let r2 = (diameter / 2.0).powi(2);
    RealImage::from_fn(size, size, |r, col| {
        if (r as f64 - c).powi(2) + (col as f64 - c).powi(2) <= r2 {
            1.0
        } else {
            0.0
        }
    })
}

/// Centred disk of `radius` pixels, uniform amplitude scaled to total
/// energy `energy`, zero phase.
pub fn disk_probe(size: usize, radius: f64, energy: f64) -> ComplexTensor {
    let support = probe_support(size, 2.0 * radius);
    let area = support.sum().max(1.0);
    let amp = (energy / area).sqrt();
    support.map(|v| v * amp).to_tensor()
}

fn complex_from(mag: &RealImage, phase: &RealImage) -> ComplexTensor {
    ComplexTensor::from_fn(mag.rows, mag.cols, |r, c| Complex64::from_polar(mag.get(r, c), phase.get(r, c)))
}

/// Ground-truth probe modes: the source images under a circular support.
/// Extra modes are the first mode with a weaker amplitude and a phase
/// vortex of increasing charge, so they differ from mode 0.
fn truth_probes(recipe: &SimulationRecipe, base_dir: Option<&Path>) -> Result<ProbeModes> {
    let k = recipe.pattern_size;
    let mag = resize(&load_image_source(&recipe.probe_magnitude, base_dir)?, k, k);
    let phase = rescale(
        &resize(&load_image_source(&recipe.probe_phase, base_dir)?, k, k),
        recipe.probe_phase_range,
    );
    let support = probe_support(k, recipe.probe_diameter);
    // Keep the amplitude off zero inside the support.
    let mag = rescale(&mag, [0.3, 1.0]);
    let amp = RealImage::from_fn(k, k, |r, c| mag.get(r, c) * support.get(r, c));
    let first = complex_from(&amp, &phase);
    let c = (k as f64 - 1.0) / 2.0;
    let modes = (0..recipe.probe_modes)
        .map(|p| {
            if p == 0 {
                return first.clone();
            }
            let weight = 0.5f64.powi(p as i32);
            ComplexTensor::from_fn(k, k, |r, col| {
                let angle = (r as f64 - c).atan2(col as f64 - c);
                first.get(r, col) * Complex64::from_polar(weight, p as f64 * angle)
            })
        })
        .collect();
    ProbeModes::new(modes)
}

/// True positions (pixels), ground truth and noiseless-or-noisy patterns.
pub fn synthesize_dataset(recipe: &SimulationRecipe) -> Result<(PtychoDataset, GroundTruth)> {
    synthesize_dataset_in(recipe, None)
}

/// As [`synthesize_dataset`], resolving relative image paths against `base_dir`.
pub fn synthesize_dataset_in(recipe: &SimulationRecipe, base_dir: Option<&Path>) -> Result<(PtychoDataset, GroundTruth)> {
    recipe.validate()?;
    let k = recipe.pattern_size;
    let grid = make_scan_grid(recipe.grid, recipe.step_pixels(), recipe.jitter, recipe.seed)?;
    let scan = ScanSet::from_pixels(&grid.positions(), recipe.pixel_pitch)?;
    let (rows, cols) = scan.object_shape((k, k));

    let mag = rescale(
        &resize(&load_image_source(&recipe.object_magnitude, base_dir)?, rows, cols),
        recipe.magnitude_range,
    );
    let phase = rescale(
        &resize(&load_image_source(&recipe.object_phase, base_dir)?, rows, cols),
        recipe.phase_range,
    );
    let object = complex_from(&mag, &phase);
    let mut probes = truth_probes(recipe, base_dir)?;

    if let Noise::Poisson { flux } = recipe.noise {
        // Express intensities in photons: scale the probe to `flux`.
        let s = (flux / probes.energy()).sqrt();
        for m in probes.modes_mut() {
            *m = m.scale(s);
        }
    }

    let spec = PropagationSpec::new(recipe.wavelength, recipe.distance, recipe.pixel_pitch);
    let indices: Vec<usize> = (0..scan.len()).collect();
    let mut frames = simulate_batch(&probes, &object, &scan, &indices, &spec)?;
    if let Noise::Poisson { .. } = recipe.noise {
        let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
        rng.set_stream(STREAM_NOISE);
        for f in &mut frames {
            for v in &mut f.data {
                *v = if *v > 0.0 {
                    Poisson::new(*v).expect("positive mean").sample(&mut rng)
                } else {
                    0.0
                };
            }
        }
    }

    let truth = GroundTruth {
        object,
        probes,
        distance: recipe.distance,
        positions: scan.nominal.clone(),
        pixel_pitch: recipe.pixel_pitch,
    };
    let dataset = PtychoDataset {
        wavelength: recipe.wavelength,
        distance: recipe.distance,
        pixel_pitch: recipe.pixel_pitch,
        positions: scan.nominal,
        frames,
        dark_frames: Vec::new(),
        notes: format!(
            "synthetic: {}x{} grid, step {:.3} px, jitter {} px, seed {}",
            recipe.grid,
            recipe.grid,
            recipe.step_pixels(),
            recipe.jitter,
            recipe.seed
        ),
    };
    Ok((dataset, truth))
}

/// Initial geometry handed to the reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptedGeometry {
    pub distance: f64,
    /// Metres.
    pub positions: Vec<(f64, f64)>,
}

/// `z_init = z_true·(1 + z_err_frac)` and positions perturbed by Gaussian
/// σ = `pos_jitter_std` pixels per coordinate.
pub fn corrupt_parameters(
    truth: &GroundTruth,
    z_err_frac: f64,
    pos_jitter_std: f64,
    seed: u64,
) -> Result<CorruptedGeometry> {
    if z_err_frac <= -1.0 || !(pos_jitter_std >= 0.0) {
        return Err(PtychoError::InvalidArgument(format!(
            "z error {z_err_frac} must exceed -1 and jitter {pos_jitter_std} be non-negative"
        )));
    }
    let noise = gaussian_pairs(truth.positions.len(), pos_jitter_std, seed, STREAM_CORRUPTION);
    let p = truth.pixel_pitch;
    Ok(CorruptedGeometry {
        distance: truth.distance * (1.0 + z_err_frac),
        positions: truth
            .positions
            .iter()
            .zip(&noise)
            .map(|(&(x, y), &(dx, dy))| (x + dx * p, y + dy * p))
            .collect(),
    })
}

/// Synthesizes the recipe's dataset and writes its corrupted geometry into
/// the dataset, as the `simulate` command does.
pub fn simulate_recipe(recipe: &SimulationRecipe, base_dir: Option<&Path>) -> Result<(PtychoDataset, GroundTruth)> {
    let (mut dataset, truth) = synthesize_dataset_in(recipe, base_dir)?;
    let c = &recipe.corruption;
    let corrupted = corrupt_parameters(&truth, c.z_error, c.position_jitter, recipe.seed)?;
    dataset.distance = corrupted.distance;
    dataset.positions = corrupted.positions;
    dataset.notes.push_str(&format!(
        "; corrupted: z_error {}, position jitter {} px",
        c.z_error, c.position_jitter
    ));
    Ok((dataset, truth))
}

/// Detector intensity of `exit_wave` lit by a point source `source_to_sample`
/// upstream and recorded `sample_to_detector` downstream, on the sample
/// pixel grid of a `grid × grid` window.
pub fn divergent_intensity(
    exit_wave: &ComplexTensor,
    wavelength: f64,
    pixel: f64,
    source_to_sample: f64,
    sample_to_detector: f64,
    grid: usize,
) -> Result<RealImage> {
    let (rows, cols) = exit_wave.shape();
    if grid < rows || grid < cols {
        return Err(PtychoError::InvalidArgument(format!("grid {grid} smaller than field")));
    }
    let field = exit_wave.embed((grid - rows) / 2, (grid - cols) / 2, grid, grid)?;
    let spec = PropagationSpec::new(wavelength, sample_to_detector, pixel).with_pad(PadPolicy::Auto);
    let lit = &field * &point_source_phase((grid, grid), &spec, source_to_sample);
    Ok(propagate_field(&lit, &spec)?.modulus().map(|m| m * m))
}
