//! Ground-truth-aware quality metrics and convergence diagnostics.

use std::f64::consts::PI;
use std::io::Write;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::fft::fft2;
use crate::error::{PtychoError, Result};
use crate::spatial;
use crate::tensor::{ComplexTensor, RealImage, Shape};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size - 1) as f64 / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable weighted mean over every fully contained window.
fn filter_valid(img: &[f64], shape: Shape, kernel: &[f64]) -> (Vec<f64>, Shape) {
    let (rows, cols) = shape;
    let k = kernel.len();
    let (orows, ocols) = (rows + 1 - k, cols + 1 - k);
    let mut horiz = vec![0.0; rows * ocols];
    for r in 0..rows {
        for c in 0..ocols {
            horiz[r * ocols + c] = (0..k).map(|i| kernel[i] * img[r * cols + c + i]).sum();
        }
    }
    let mut out = vec![0.0; orows * ocols];
    for r in 0..orows {
        for c in 0..ocols {
            out[r * ocols + c] = (0..k).map(|i| kernel[i] * horiz[(r + i) * ocols + c]).sum();
        }
    }
    (out, (orows, ocols))
}

fn value_range(img: &RealImage) -> f64 {
    img.max() - img.min()
}

/// Mean structural similarity over all 11×11 Gaussian (σ = 1.5) windows
/// that fit inside the image, with `K₁ = 0.01`, `K₂ = 0.03`.
///
/// The dynamic range is the larger of the two images' value ranges, which
/// keeps the index symmetric; it falls back to 1 when both are constant.
/// Images smaller than the window use the largest odd window that fits.
pub fn ssim(a: &RealImage, b: &RealImage) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(PtychoError::Shape {
            op: "ssim",
            left: a.shape(),
            right: b.shape(),
        });
    }
    if a.data.iter().chain(&b.data).any(|v| !v.is_finite()) {
        return Err(PtychoError::Numeric("ssim input is not finite".into()));
    }
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Err(PtychoError::InvalidArgument("ssim of an empty image".into()));
    }
    let mut win = SSIM_WINDOW.min(rows).min(cols);
    if win % 2 == 0 {
        win -= 1;
    }
    let kernel = gaussian_kernel(win, SSIM_SIGMA);
    let mut range = value_range(a).max(value_range(b));
    if range == 0.0 {
        range = 1.0;
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);

    let shape = a.shape();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    };
    let (mu_a, out_shape) = filter_valid(&a.data, shape, &kernel);
    let (mu_b, _) = filter_valid(&b.data, shape, &kernel);
    let (aa, _) = filter_valid(&prod(&|x, _| x * x), shape, &kernel);
    let (bb, _) = filter_valid(&prod(&|_, y| y * y), shape, &kernel);
    let (ab, _) = filter_valid(&prod(&|x, y| x * y), shape, &kernel);

    let n = out_shape.0 * out_shape.1;
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_phase(phi: f64) -> f64 {
    let w = (phi + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

/// Global phase and linear phase ramp applied by [`remove_ambiguities`]:
/// the recon is multiplied by `exp(j(a·x + b·y + c))`, with `x`, `y` in
/// pixels from the image centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseAlignment {
    pub ramp_x: f64,
    pub ramp_y: f64,
    pub offset: f64,
}

impl PhaseAlignment {
    pub fn identity() -> Self {
        Self {
            ramp_x: 0.0,
            ramp_y: 0.0,
            offset: 0.0,
        }
    }

    pub fn apply(&self, recon: &ComplexTensor) -> ComplexTensor {
        let (rows, cols) = recon.shape();
        let (cy, cx) = centre(rows, cols);
        ComplexTensor::from_fn(rows, cols, |r, c| {
            let theta = self.ramp_x * (c as f64 - cx) + self.ramp_y * (r as f64 - cy) + self.offset;
            recon.get(r, c) * Complex64::from_polar(1.0, theta)
        })
    }
}

fn centre(rows: usize, cols: usize) -> (f64, f64) {
    ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0)
}

/// Least-squares fit of `exp(j(a·x + b·y + c))` mapping `recon` onto `truth`.
///
/// Maximizes `|Σ conj(O_r)·O_t·e^{−j(ax+by)}|`: a zero-padded FFT gives the
/// starting ramp and Newton iterations refine it; `c` then follows in
/// closed form.
pub fn fit_phase_alignment(recon: &ComplexTensor, truth: &ComplexTensor) -> Result<PhaseAlignment> {
    if recon.shape() != truth.shape() {
        return Err(PtychoError::Shape {
            op: "remove_ambiguities",
            left: recon.shape(),
            right: truth.shape(),
        });
    }
    let w = recon.zip_map(truth, |r, t| r.conj() * t)?;
    if w.norm_sqr() == 0.0 || recon.norm_sqr() == 0.0 {
        return Ok(PhaseAlignment::identity());
    }
    let (rows, cols) = w.shape();
    let (cy, cx) = centre(rows, cols);

    // Coarse ramp: peak of the 4× zero-padded spectrum of w.
    let (pr_n, pc_n) = (4 * rows, 4 * cols);
    let padded = w.embed(0, 0, pr_n, pc_n)?;
    let spectrum = fft2(&padded);
    let mut best = (0usize, 0.0f64);
    for (i, v) in spectrum.iter().enumerate() {
        if v.norm_sqr() > best.1 {
            best = (i, v.norm_sqr());
        }
    }
    let (pr, pc) = (best.0 / pc_n, best.0 % pc_n);
    let freq = |k: usize, n: usize| {
        let k = crate::autodiff::fft::frequency_index(k, n) as f64;
        2.0 * PI * k / n as f64
    };
    let (mut a, mut b) = (freq(pc, pc_n), freq(pr, pr_n));

    let sums = |a: f64, b: f64| {
        // S, ∂S/∂a, ∂S/∂b, ∂²S/∂a², ∂²S/∂a∂b, ∂²S/∂b².
        let mut s = [Complex64::new(0.0, 0.0); 6];
        for r in 0..rows {
            let y = r as f64 - cy;
            for c in 0..cols {
                let x = c as f64 - cx;
                let term = w.get(r, c) * Complex64::from_polar(1.0, -(a * x + b * y));
                let mj = Complex64::new(0.0, -1.0);
                s[0] += term;
                s[1] += mj * x * term;
                s[2] += mj * y * term;
                s[3] -= x * x * term;
                s[4] -= x * y * term;
                s[5] -= y * y * term;
            }
        }
        s
    };
    // Image content can pull the coarse peak to the edge of the main lobe,
    // where G is not concave; climb with bounded gradient steps until
    // Newton applies.
    let max_step = PI / (2.0 * rows.max(cols) as f64);
    for _ in 0..200 {
        let s = sums(a, b);
        // G = |S|²; gradient and Hessian in (a, b).
        let ga = 2.0 * (s[0].conj() * s[1]).re;
        let gb = 2.0 * (s[0].conj() * s[2]).re;
        let haa = 2.0 * (s[1].norm_sqr() + (s[0].conj() * s[3]).re);
        let hab = 2.0 * ((s[2].conj() * s[1]).re + (s[0].conj() * s[4]).re);
        let hbb = 2.0 * (s[2].norm_sqr() + (s[0].conj() * s[5]).re);
        let det = haa * hbb - hab * hab;
        let (da, db) = if det > 0.0 && haa < 0.0 {
            (-(hbb * ga - hab * gb) / det, -(haa * gb - hab * ga) / det)
        } else {
            let norm = ga.hypot(gb);
            if norm == 0.0 {
                break;
            }
            (max_step * ga / norm, max_step * gb / norm)
        };
        let len = da.hypot(db);
        let (da, db) = if len > max_step {
            (da * max_step / len, db * max_step / len)
        } else {
            (da, db)
        };
        a += da;
        b += db;
        if da.abs() < 1e-15 && db.abs() < 1e-15 {
            break;
        }
    }
    // At the optimum conj(O_r)·O_t·e^{−j(ax+by)} has the common phase
    // arg S, so exp(j(ax + by + arg S)) carries recon onto truth.
    Ok(PhaseAlignment {
        ramp_x: a,
        ramp_y: b,
        offset: sums(a, b)[0].arg(),
    })
}

/// Removes the global phase and linear phase ramp separating `recon` from
/// `truth`. A zero-energy recon is returned unchanged.
pub fn remove_ambiguities(recon: &ComplexTensor, truth: &ComplexTensor) -> Result<ComplexTensor> {
    Ok(fit_phase_alignment(recon, truth)?.apply(recon))
}

/// Samples `image` shifted by `(dx, dy)` pixels: output pixel `p` reads
/// input location `p + (dx, dy)`. Zero fill outside.
pub fn shift_image(image: &ComplexTensor, dx: f64, dy: f64) -> Result<ComplexTensor> {
    let (rows, cols) = image.shape();
    let t = Complex64::new(
        crate::forward::pixel_to_normalized(dx, cols),
        crate::forward::pixel_to_normalized(dy, rows),
    );
    let grid = spatial::base_grid(1.0, 1.0, (rows, cols)).map(|g| g + t);
    Ok(spatial::sample(image, &grid))
}

/// Central `shape` window of `image`.
pub fn centre_crop(image: &ComplexTensor, shape: Shape) -> Result<ComplexTensor> {
    let (rows, cols) = image.shape();
    if shape.0 > rows || shape.1 > cols {
        return Err(PtychoError::InvalidArgument(format!(
            "crop {shape:?} larger than image {rows}x{cols}"
        )));
    }
    image.window((rows - shape.0) / 2, (cols - shape.1) / 2, shape.0, shape.1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectQuality {
    pub ssim_magnitude: f64,
    pub ssim_phase: f64,
}

/// SSIM of magnitude and wrapped phase after ambiguity removal, both
/// objects first cropped to the central `roi`.
pub fn object_quality(recon: &ComplexTensor, truth: &ComplexTensor, roi: Shape) -> Result<ObjectQuality> {
    let r = centre_crop(recon, roi)?;
    let t = centre_crop(truth, roi)?;
    let aligned = remove_ambiguities(&r, &t)?;
    let phase = |x: &ComplexTensor| x.phase().map(wrap_phase);
    Ok(ObjectQuality {
        ssim_magnitude: ssim(&aligned.modulus(), &t.modulus())?,
        ssim_phase: ssim(&phase(&aligned), &phase(&t))?,
    })
}

/// Per-position Euclidean errors and their summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionErrors {
    pub errors: Vec<f64>,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
    /// Mean offset removed before measuring, pixels (zero when raw).
    pub offset: (f64, f64),
}

impl PositionErrors {
    /// Counts per bin over `[0, max]` split into `bins` equal parts.
    pub fn histogram(&self, bins: usize) -> Vec<(f64, f64, usize)> {
        if bins == 0 {
            return Vec::new();
        }
        let top = if self.max > 0.0 { self.max } else { 1.0 };
        let width = top / bins as f64;
        let mut counts = vec![0usize; bins];
        for &e in &self.errors {
            let i = ((e / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(i, n)| (i as f64 * width, (i + 1) as f64 * width, n))
            .collect()
    }
}

/// Errors between estimated and true positions, both in pixels.
pub fn position_error_stats(est: &[(f64, f64)], truth: &[(f64, f64)]) -> Result<PositionErrors> {
    summarize_positions(est, truth, (0.0, 0.0))
}

/// As [`position_error_stats`] after removing the mean offset between the
/// two sets. A rigid shift of every position, matched by the same shift of
/// the object, leaves all patterns unchanged, so only the registered error
/// is determined by the data.
pub fn registered_position_error_stats(est: &[(f64, f64)], truth: &[(f64, f64)]) -> Result<PositionErrors> {
    check_same_len(est, truth)?;
    let n = est.len() as f64;
    let dx = est.iter().zip(truth).map(|(e, t)| e.0 - t.0).sum::<f64>() / n;
    let dy = est.iter().zip(truth).map(|(e, t)| e.1 - t.1).sum::<f64>() / n;
    summarize_positions(est, truth, (dx, dy))
}

fn check_same_len(est: &[(f64, f64)], truth: &[(f64, f64)]) -> Result<()> {
    if est.len() != truth.len() || est.is_empty() {
        return Err(PtychoError::InvalidArgument(format!(
            "{} estimated vs {} true positions",
            est.len(),
            truth.len()
        )));
    }
    Ok(())
}

fn summarize_positions(est: &[(f64, f64)], truth: &[(f64, f64)], offset: (f64, f64)) -> Result<PositionErrors> {
    check_same_len(est, truth)?;
    let errors: Vec<f64> = est
        .iter()
        .zip(truth)
        .map(|(e, t)| (e.0 - offset.0 - t.0).hypot(e.1 - offset.1 - t.1))
        .collect();
    Ok(PositionErrors {
        median: median(&errors),
        mean: errors.iter().sum::<f64>() / errors.len() as f64,
        max: errors.iter().cloned().fold(0.0, f64::max),
        errors,
        offset,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of the Rayleigh distribution of `|e|` for isotropic Gaussian
/// jitter `e` with per-axis standard deviation `sigma`.
pub fn rayleigh_median(sigma: f64) -> f64 {
    sigma * (2.0 * 2f64.ln()).sqrt()
}

pub fn rayleigh_cdf(r: f64, sigma: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        1.0 - (-r * r / (2.0 * sigma * sigma)).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthKind {
    /// Full width at half maximum of the dominant peak.
    Fwhm,
    /// 25–75 % rise distance of an edge.
    Edge,
    /// Flat profile.
    Undefined,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineProfile {
    /// Distance from the start point, pixels.
    pub distance: Vec<f64>,
    pub value: Vec<f64>,
    pub kind: WidthKind,
    /// Pixels; `None` when undefined.
    pub width: Option<f64>,
}

/// Bilinear samples of `image` from `p0` to `p1` (pixel `(x, y)`
/// coordinates, inclusive) and the width of its dominant feature.
pub fn line_profile_fwhm(image: &RealImage, p0: (f64, f64), p1: (f64, f64), samples: usize) -> Result<LineProfile> {
    let (rows, cols) = image.shape();
    let inside = |p: (f64, f64)| p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (cols - 1) as f64 && p.1 <= (rows - 1) as f64;
    if !inside(p0) || !inside(p1) {
        return Err(PtychoError::InvalidArgument(format!(
            "profile endpoints {p0:?}, {p1:?} outside a {cols}x{rows} image"
        )));
    }
    if samples < 2 {
        return Err(PtychoError::InvalidArgument("a profile needs at least two samples".into()));
    }
    let tensor = image.to_tensor();
    let length = (p1.0 - p0.0).hypot(p1.1 - p0.1);
    let grid = ComplexTensor::from_fn(1, samples, |_, i| {
        let f = i as f64 / (samples - 1) as f64;
        let (x, y) = (p0.0 + f * (p1.0 - p0.0), p0.1 + f * (p1.1 - p0.1));
        Complex64::new(
            spatial::normalized_coordinate(0, cols) + x * 2.0 / (cols.max(2) - 1) as f64,
            spatial::normalized_coordinate(0, rows) + y * 2.0 / (rows.max(2) - 1) as f64,
        )
    });
    let value: Vec<f64> = spatial::sample(&tensor, &grid).re().to_vec();
    let distance: Vec<f64> = (0..samples)
        .map(|i| length * i as f64 / (samples - 1) as f64)
        .collect();
    let (kind, width) = feature_width(&distance, &value);
    Ok(LineProfile {
        distance,
        value,
        kind,
        width,
    })
}

fn crossing(d: &[f64], v: &[f64], i: usize, j: usize, level: f64) -> f64 {
    let t = (level - v[i]) / (v[j] - v[i]);
    d[i] + t * (d[j] - d[i])
}

fn feature_width(d: &[f64], v: &[f64]) -> (WidthKind, Option<f64>) {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12 * hi.abs().max(1.0)) {
        return (WidthKind::Undefined, None);
    }
    let peak = v.iter().cloned().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, x)| if x > b.1 { (i, x) } else { b }).0;
    let half = lo + 0.5 * (hi - lo);
    let left = (0..peak).rev().find(|&i| v[i] < half);
    let right = (peak + 1..v.len()).find(|&i| v[i] < half);
    if let (Some(l), Some(r)) = (left, right) {
        let x0 = crossing(d, v, l, l + 1, half);
        let x1 = crossing(d, v, r - 1, r, half);
        return (WidthKind::Fwhm, Some(x1 - x0));
    }
    // Edge: first crossings of the 25 % and 75 % levels going uphill.
    let rising = v[v.len() - 1] > v[0];
    let level = |f: f64| lo + f * (hi - lo);
    let find = |target: f64| -> Option<f64> {
        for i in 0..v.len() - 1 {
            let (a, b) = if rising { (v[i], v[i + 1]) } else { (v[i + 1], v[i]) };
            if a < target && b >= target {
                return Some(crossing(d, v, i, i + 1, target));
            }
        }
        None
    };
    match (find(level(0.25)), find(level(0.75))) {
        (Some(a), Some(b)) => (WidthKind::Edge, Some((b - a).abs())),
        _ => (WidthKind::Undefined, None),
    }
}

/// Coherent-illumination resolution limit `Γ = 0.82·λ/NA`.
pub fn abbe_limit(wavelength: f64, numerical_aperture: f64) -> Result<f64> {
    if !(numerical_aperture > 0.0) || !(wavelength > 0.0) {
        return Err(PtychoError::InvalidArgument(format!(
            "wavelength {wavelength} and NA {numerical_aperture} must be positive"
        )));
    }
    Ok(0.82 * wavelength / numerical_aperture)
}

/// Numerical aperture giving resolution `gamma` at `wavelength`.
pub fn numerical_aperture_for(wavelength: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(PtychoError::InvalidArgument(format!("resolution {gamma} must be positive")));
    }
    Ok(0.82 * wavelength / gamma)
}

/// One row of the convergence history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub loss_total: f64,
    pub loss_data: f64,
    pub loss_reg: f64,
    /// Distance estimate, metres.
    pub z: f64,
    /// The following need ground truth.
    pub z_rel_error: Option<f64>,
    pub pos_err_median: Option<f64>,
    pub pos_err_mean: Option<f64>,
    pub pos_err_max: Option<f64>,
    pub pos_err_median_registered: Option<f64>,
    pub ssim_magnitude: Option<f64>,
    pub ssim_phase: Option<f64>,
}

impl EpochRecord {
    pub fn new(epoch: u64, loss_data: f64, loss_reg: f64, z: f64) -> Self {
        Self {
            epoch,
            loss_total: loss_data + loss_reg,
            loss_data,
            loss_reg,
            z,
            z_rel_error: None,
            pos_err_median: None,
            pos_err_mean: None,
            pos_err_max: None,
            pos_err_median_registered: None,
            ssim_magnitude: None,
            ssim_phase: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceHistory {
    records: Vec<EpochRecord>,
}

impl ConvergenceHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.epoch <= last.epoch {
                return Err(PtychoError::InvalidArgument(format!(
                    "epoch {} recorded after {}",
                    record.epoch, last.epoch
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One CSV row per epoch; header is the [`EpochRecord`] field names,
    /// missing ground-truth columns are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r).map_err(csv_error)?;
        }
        if self.records.is_empty() {
            w.write_record(HISTORY_HEADER).map_err(csv_error)?;
        }
        w.flush().map_err(|e| PtychoError::Numeric(format!("csv flush: {e}")))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut history = Self::new();
        for row in r.deserialize() {
            history.push(row.map_err(csv_error)?)?;
        }
        Ok(history)
    }
}

pub const HISTORY_HEADER: [&str; 12] = [
    "epoch",
    "loss_total",
    "loss_data",
    "loss_reg",
    "z",
    "z_rel_error",
    "pos_err_median",
    "pos_err_mean",
    "pos_err_max",
    "pos_err_median_registered",
    "ssim_magnitude",
    "ssim_phase",
];

fn csv_error(e: csv::Error) -> PtychoError {
    PtychoError::Config(format!("history csv: {e}"))
}
