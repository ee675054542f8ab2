//! Joint reconstruction of object, probe modes, propagation distance and
//! scan-position corrections by minibatch descent on the tape gradients.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataset::{GroundTruth, PtychoDataset};
use crate::error::{PtychoError, Result};
use crate::forward::{intensity_var, ProbeModes, ScanSet};
use crate::loss::{data_fidelity_var, regularization, LossDomain, Measurements, RegularizationWeights};
use crate::metrics::{
    object_quality, position_error_stats, registered_position_error_stats, ConvergenceHistory, EpochRecord,
};
use crate::optics::{PadPolicy, PropagationSpec};
use crate::optim::{batch_schedule, gd_step, AdamHyper, AdamState, OptimizerKind};
use crate::simulator::disk_probe;
use crate::tensor::{ComplexTensor, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub lr: f64,
    #[serde(default = "enabled")]
    pub enabled: bool,
    /// First epoch (zero-based) in which the group is updated.
    #[serde(default)]
    pub start_epoch: u64,
}

fn enabled() -> bool {
    true
}

impl GroupConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            enabled: true,
            start_epoch: 0,
        }
    }

    pub fn disabled(lr: f64) -> Self {
        Self {
            enabled: false,
            ..Self::new(lr)
        }
    }

    pub fn starting_at(self, epoch: u64) -> Self {
        Self {
            start_epoch: epoch,
            ..self
        }
    }

    fn active(&self, epoch: u64) -> bool {
        self.enabled && epoch >= self.start_epoch
    }
}

/// Learning rate and enable flag per parameter group.
///
/// The distance is learned as a relative factor, `z = z₀·(1 + u)`, so its
/// rate is dimensionless. Position corrections are in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimPool {
    pub object: GroupConfig,
    pub probe: GroupConfig,
    pub distance: GroupConfig,
    pub positions: GroupConfig,
}

impl Default for OptimPool {
    fn default() -> Self {
        Self {
            object: GroupConfig::new(1e-1),
            probe: GroupConfig::new(1e-1),
            distance: GroupConfig::new(1e-2),
            positions: GroupConfig::new(1e-2),
        }
    }
}

impl OptimPool {
    fn groups(&self) -> [(&'static str, GroupConfig); 4] {
        [
            ("object", self.object),
            ("probe", self.probe),
            ("distance", self.distance),
            ("positions", self.positions),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let groups = self.groups();
        if groups.iter().all(|(_, g)| !g.enabled) {
            return Err(PtychoError::Config("at least one parameter group must be enabled".into()));
        }
        for (name, g) in groups {
            if g.enabled && !(g.lr > 0.0 && g.lr.is_finite()) {
                return Err(PtychoError::Config(format!("{name} learning rate must be positive, got {}", g.lr)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructionConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub loss_domain: LossDomain,
    pub optimizer: OptimizerKind,
    pub adam: AdamHyper,
    pub pool: OptimPool,
    pub regularization: RegularizationWeights,
    pub seed: u64,
    pub probe_modes: usize,
    /// Radius of the initial disk probe, pixels; a quarter of the pattern
    /// width when absent.
    pub probe_radius: Option<f64>,
    pub pad: PadPolicy,
    /// Learning rates are multiplied by `lr_decay^epoch`.
    pub lr_decay: f64,
    /// Epochs between ground-truth metric evaluations; the final epoch is
    /// always evaluated.
    pub metrics_interval: u64,
    /// Epochs between checkpoints written by the command-line driver.
    pub checkpoint_interval: u64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 5,
            loss_domain: LossDomain::Amplitude,
            optimizer: OptimizerKind::Adam,
            adam: AdamHyper::default(),
            pool: OptimPool::default(),
            regularization: RegularizationWeights::default(),
            seed: 0,
            probe_modes: 1,
            probe_radius: None,
            pad: PadPolicy::Auto,
            lr_decay: 1.0,
            metrics_interval: 10,
            checkpoint_interval: 50,
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        self.pool.validate()?;
        if self.batch_size == 0 {
            return Err(PtychoError::Config("batch_size must be at least 1".into()));
        }
        if self.probe_modes == 0 {
            return Err(PtychoError::Config("probe_modes must be at least 1".into()));
        }
        if let Some(r) = self.probe_radius {
            if !(r > 0.0) {
                return Err(PtychoError::Config(format!("probe_radius {r} must be positive")));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(PtychoError::Config(format!("lr_decay {} must lie in (0, 1]", self.lr_decay)));
        }
        if self.metrics_interval == 0 || self.checkpoint_interval == 0 {
            return Err(PtychoError::Config("intervals must be at least 1".into()));
        }
        let w = &self.regularization;
        if [w.object, w.probe, w.corrections].iter().any(|v| !(*v >= 0.0)) {
            return Err(PtychoError::Config("regularization weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Optimizer memory for every parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub object: AdamState,
    pub probes: Vec<AdamState>,
    pub distance: AdamState,
    /// One state per position, so a position only advances when it is in
    /// the current batch.
    pub positions: Vec<AdamState>,
}

impl OptimizerState {
    fn new(object: Shape, probe: Shape, modes: usize, positions: usize, hyper: AdamHyper) -> Self {
        Self {
            object: AdamState::with_hyper(object, hyper),
            probes: vec![AdamState::with_hyper(probe, hyper); modes],
            distance: AdamState::with_hyper((1, 1), hyper),
            positions: vec![AdamState::with_hyper((1, 1), hyper); positions],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionState {
    pub object: ComplexTensor,
    pub probes: ProbeModes,
    /// Distance the relative factor refers to, metres.
    pub z0: f64,
    /// `z = z₀·(1 + z_factor)`.
    pub z_factor: f64,
    /// Nominal positions (metres) with corrections in pixels, `dx + j·dy`.
    pub positions: Vec<(f64, f64)>,
    pub corrections: Vec<Complex64>,
    pub pixel_pitch: f64,
    /// Completed epochs.
    pub epoch: u64,
    pub optimizer: OptimizerState,
    /// Probe energy the regularizer keeps as a lower bound.
    pub e_target: f64,
}

impl ReconstructionState {
    /// Object ≡ 1 and a uniform zero-phase disk probe carrying the energy of
    /// the brightest pattern; the dataset's distance and positions as given.
    pub fn initial(dataset: &PtychoDataset, config: &ReconstructionConfig) -> Result<Self> {
        dataset.validate()?;
        config.validate()?;
        let frames = dataset.corrected_frames()?;
        let e_target = frames
            .iter()
            .map(|f| f.data.iter().map(|v| v.max(0.0)).sum::<f64>())
            .fold(0.0, f64::max);
        let shape = dataset.pattern_shape();
        let scan = dataset.scan()?;
        let object_shape = scan.object_shape(shape);
        let radius = config.probe_radius.unwrap_or(shape.0.min(shape.1) as f64 / 4.0);
        let probes = initial_probes(shape, radius, e_target, config.probe_modes)?;
        Ok(Self {
            object: ComplexTensor::ones(object_shape.0, object_shape.1),
            optimizer: OptimizerState::new(object_shape, shape, config.probe_modes, dataset.len(), config.adam),
            probes,
            z0: dataset.distance,
            z_factor: 0.0,
            positions: dataset.positions.clone(),
            corrections: vec![Complex64::new(0.0, 0.0); dataset.len()],
            pixel_pitch: dataset.pixel_pitch,
            epoch: 0,
            e_target,
        })
    }

    /// State sitting exactly on the ground truth, with the dataset's
    /// measured energy as the probe target.
    pub fn from_truth(truth: &GroundTruth, dataset: &PtychoDataset, config: &ReconstructionConfig) -> Result<Self> {
        let mut state = Self::initial(dataset, config)?;
        if truth.positions.len() != dataset.len() {
            return Err(PtychoError::InvalidArgument(format!(
                "truth has {} positions, dataset {}",
                truth.positions.len(),
                dataset.len()
            )));
        }
        state.optimizer = OptimizerState::new(
            truth.object.shape(),
            truth.probes.shape(),
            truth.probes.len(),
            dataset.len(),
            config.adam,
        );
        state.object = truth.object.clone();
        state.probes = truth.probes.clone();
        state.z0 = truth.distance;
        state.positions = truth.positions.clone();
        Ok(state)
    }

    pub fn distance(&self) -> f64 {
        self.z0 * (1.0 + self.z_factor)
    }

    /// Scan with the corrections converted to normalized units of the
    /// current object.
    pub fn scan(&self) -> Result<ScanSet> {
        let mut scan = ScanSet::new(self.positions.clone(), self.pixel_pitch)?;
        let (sx, sy) = pixel_scale(self.object.shape());
        scan.corrections = self.corrections.iter().map(|c| Complex64::new(c.re * sx, c.im * sy)).collect();
        Ok(scan)
    }

    /// Nominal plus correction for every position, pixels.
    pub fn estimated_positions(&self) -> Vec<(f64, f64)> {
        self.positions
            .iter()
            .zip(&self.corrections)
            .map(|(&(x, y), c)| (x / self.pixel_pitch + c.re, y / self.pixel_pitch + c.im))
            .collect()
    }

    fn is_finite(&self) -> bool {
        self.object.is_finite()
            && self.probes.modes().iter().all(ComplexTensor::is_finite)
            && self.z_factor.is_finite()
            && self.corrections.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

/// Normalized units per pixel along x and y.
fn pixel_scale(object_shape: Shape) -> (f64, f64) {
    let per = |n: usize| if n > 1 { 2.0 / (n - 1) as f64 } else { 0.0 };
    (per(object_shape.1), per(object_shape.0))
}

/// Disk probe plus weaker vortex-phase copies for higher modes, together
/// carrying `energy`.
fn initial_probes(shape: Shape, radius: f64, energy: f64, modes: usize) -> Result<ProbeModes> {
    if shape.0 != shape.1 {
        return Err(PtychoError::InvalidArgument(format!("patterns must be square, got {shape:?}")));
    }
    let n = shape.0;
    let base = disk_probe(n, radius, 1.0);
    let c = (n as f64 - 1.0) / 2.0;
    let mut out: Vec<ComplexTensor> = (0..modes)
        .map(|p| {
            if p == 0 {
                return base.clone();
            }
            let w = 0.1f64.sqrt().powi(p as i32);
            ComplexTensor::from_fn(n, n, |r, col| {
                let angle = (r as f64 - c).atan2(col as f64 - c);
                base.get(r, col) * Complex64::from_polar(w, p as f64 * angle)
            })
        })
        .collect();
    let total: f64 = out.iter().map(ComplexTensor::norm_sqr).sum();
    let s = if total > 0.0 { (energy / total).sqrt() } else { 0.0 };
    for m in &mut out {
        *m = m.scale(s);
    }
    ProbeModes::new(out)
}


/// Loss of the whole dataset at a fixed state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub data_fidelity: f64,
    pub regularization: f64,
    pub total: f64,
    /// Data fidelity per batch, in schedule order.
    pub per_batch: Vec<f64>,
}

/// Loss and summed gradients of one minibatch.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub data: f64,
    pub reg: f64,
    pub object: ComplexTensor,
    pub probes: Vec<ComplexTensor>,
    pub z_factor: f64,
    /// `(position, gradient)` for every position in the batch.
    pub corrections: Vec<(usize, Complex64)>,
}

impl StepOutcome {
    pub fn total(&self) -> f64 {
        self.data + self.reg
    }
}

struct PatternGrad {
    loss: f64,
    object: ComplexTensor,
    probes: Vec<ComplexTensor>,
    z_factor: f64,
    correction: Complex64,
}

/// Read-only views of the current object and probes shared by the tapes
/// of one step.
struct Leaves {
    object: Arc<ComplexTensor>,
    probes: Vec<Arc<ComplexTensor>>,
}

impl Leaves {
    fn of(state: &ReconstructionState) -> Self {
        Self {
            object: Arc::new(state.object.clone()),
            probes: state.probes.modes().iter().map(|p| Arc::new(p.clone())).collect(),
        }
    }
}

/// A dataset prepared for optimization: measurement targets and the
/// propagation settings every step shares.
pub struct Problem<'a> {
    pub config: &'a ReconstructionConfig,
    meas: Measurements,
    wavelength: f64,
    pixel_pitch: f64,
}

impl<'a> Problem<'a> {
    pub fn new(dataset: &PtychoDataset, config: &'a ReconstructionConfig) -> Result<Self> {
        dataset.validate()?;
        config.validate()?;
        if config.batch_size > dataset.len() {
            return Err(PtychoError::Config(format!(
                "batch_size {} exceeds the {} patterns",
                config.batch_size,
                dataset.len()
            )));
        }
        Ok(Self {
            config,
            meas: Measurements::new(&dataset.corrected_frames()?, config.loss_domain)?,
            wavelength: dataset.wavelength,
            pixel_pitch: dataset.pixel_pitch,
        })
    }

    pub fn len(&self) -> usize {
        self.meas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meas.is_empty()
    }

    fn spec(&self, state: &ReconstructionState) -> PropagationSpec {
        PropagationSpec::new(self.wavelength, state.distance(), self.pixel_pitch).with_pad(self.config.pad)
    }

    fn check_state(&self, state: &ReconstructionState) -> Result<()> {
        if state.positions.len() != self.len() || state.corrections.len() != self.len() {
            return Err(PtychoError::InvalidArgument(format!(
                "state has {} positions, dataset {}",
                state.positions.len(),
                self.len()
            )));
        }
        let target = self.meas.target(0).shape();
        if state.probes.shape() != target {
            return Err(PtychoError::Shape {
                op: "reconstruct",
                left: state.probes.shape(),
                right: target,
            });
        }
        Ok(())
    }

    fn pattern(&self, state: &ReconstructionState, leaves: &Leaves, j: usize) -> Result<PatternGrad> {
        let tape = Tape::new();
        let object = tape.variable(Arc::clone(&leaves.object));
        let probes: Vec<Var> = leaves.probes.iter().map(|p| tape.variable(Arc::clone(p))).collect();
        let u = tape.real_variable(ComplexTensor::real_scalar(state.z_factor));
        let c = tape.variable(ComplexTensor::scalar(state.corrections[j]));

        let z = u.scale(state.z0).add_scalar(Complex64::new(state.z0, 0.0))?;
        let shape = state.object.shape();
        let (sx, sy) = pixel_scale(shape);
        // Scales re by sx and im by sy: ((sx+sy)/2)·c + ((sx−sy)/2)·c*.
        let offset = c.scale((sx + sy) / 2.0).add(c.conj().scale((sx - sy) / 2.0))?;
        let nominal = ScanSet::new(vec![state.positions[j]], state.pixel_pitch)?.nominal_translation(0, shape);
        let translation = offset.add_scalar(nominal)?;

        let sim = intensity_var(&probes, object, translation, z, &self.spec(state))?;
        let loss = data_fidelity_var(sim, &self.meas, j)?;
        tape.backward(loss)?;
        Ok(PatternGrad {
            loss: loss.value().item().re,
            object: object.grad_or_zeros(),
            probes: probes.iter().map(Var::grad_or_zeros).collect(),
            z_factor: u.grad_or_zeros().item().re,
            correction: c.grad_or_zeros().item(),
        })
    }

    /// Regularizer share of one batch: object and probe terms weighted by
    /// the batch's fraction of the dataset, L1 on the batch's corrections.
    fn regularizer(
        &self,
        state: &ReconstructionState,
        leaves: &Leaves,
        batch: &[usize],
    ) -> Result<(f64, ComplexTensor, Vec<ComplexTensor>, Vec<Complex64>)> {
        let tape = Tape::new();
        let frac = batch.len() as f64 / self.len() as f64;
        let object = tape.variable(Arc::clone(&leaves.object));
        let probes: Vec<Var> = leaves.probes.iter().map(|p| tape.variable(Arc::clone(p))).collect();
        let corrections: Vec<Var> = batch
            .iter()
            .map(|&j| tape.variable(ComplexTensor::scalar(state.corrections[j])))
            .collect();
        let mut w = self.config.regularization;
        w.object *= frac;
        w.probe *= frac;
        let total = regularization(object, &probes, &corrections, state.e_target, &w)?.total()?;
        tape.backward(total)?;
        Ok((
            total.value().item().re,
            object.grad_or_zeros(),
            probes.iter().map(Var::grad_or_zeros).collect(),
            corrections.iter().map(|c| c.grad_or_zeros().item()).collect(),
        ))
    }

    /// Loss of `batch` and its gradient with respect to every parameter.
    /// Patterns run in parallel; gradients are summed in batch order.
    pub fn batch_gradient(&self, state: &ReconstructionState, batch: &[usize]) -> Result<StepOutcome> {
        self.check_state(state)?;
        if let Some(&j) = batch.iter().find(|&&j| j >= self.len()) {
            return Err(PtychoError::InvalidArgument(format!("pattern {j} out of range")));
        }
        let leaves = Leaves::of(state);
        let grads: Vec<PatternGrad> = batch
            .par_iter()
            .map(|&j| self.pattern(state, &leaves, j))
            .collect::<Result<_>>()?;
        let (reg, reg_object, reg_probes, reg_corr) = self.regularizer(state, &leaves, batch)?;

        let mut out = StepOutcome {
            data: 0.0,
            reg,
            object: reg_object,
            probes: reg_probes,
            z_factor: 0.0,
            corrections: Vec::with_capacity(batch.len()),
        };
        for ((g, &j), rc) in grads.into_iter().zip(batch).zip(reg_corr) {
            out.data += g.loss;
            out.object.add_assign(&g.object)?;
            for (acc, p) in out.probes.iter_mut().zip(&g.probes) {
                acc.add_assign(p)?;
            }
            out.z_factor += g.z_factor;
            out.corrections.push((j, g.correction + rc));
        }
        Ok(out)
    }

    /// Data fidelity of every pattern plus the full regularizer, no
    /// gradients kept.
    pub fn evaluate(&self, state: &ReconstructionState) -> Result<LossReport> {
        self.check_state(state)?;
        let batches = batch_schedule(self.len(), self.config.batch_size, self.config.seed, state.epoch)?;
        let leaves = Leaves::of(state);
        let mut per_batch = Vec::with_capacity(batches.len());
        for batch in &batches {
            let losses: Vec<f64> = batch
                .par_iter()
                .map(|&j| self.pattern(state, &leaves, j).map(|g| g.loss))
                .collect::<Result<_>>()?;
            per_batch.push(losses.iter().sum::<f64>());
        }
        let all: Vec<usize> = (0..self.len()).collect();
        let (reg, ..) = self.regularizer(state, &leaves, &all)?;
        let data: f64 = per_batch.iter().sum();
        Ok(LossReport {
            data_fidelity: data,
            regularization: reg,
            total: data + reg,
            per_batch,
        })
    }

    /// Applies one optimizer update per enabled group.
    fn apply(&self, state: &mut ReconstructionState, step: &StepOutcome, decay: f64) -> Result<()> {
        let pool = &self.config.pool;
        let kind = self.config.optimizer;
        let update = |x: &mut ComplexTensor, g: &ComplexTensor, adam: &mut AdamState, lr: f64| match kind {
            OptimizerKind::Gd => gd_step(x, g, lr),
            OptimizerKind::Adam => adam.step(x, g, lr),
        };
        let opt = &mut state.optimizer;
        if pool.object.active(state.epoch) {
            update(&mut state.object, &step.object, &mut opt.object, pool.object.lr * decay)?;
        }
        if pool.probe.active(state.epoch) {
            for ((p, g), adam) in state.probes.modes_mut().iter_mut().zip(&step.probes).zip(&mut opt.probes) {
                update(p, g, adam, pool.probe.lr * decay)?;
            }
        }
        if pool.distance.active(state.epoch) {
            let mut u = ComplexTensor::real_scalar(state.z_factor);
            update(&mut u, &ComplexTensor::real_scalar(step.z_factor), &mut opt.distance, pool.distance.lr * decay)?;
            state.z_factor = u.item().re;
        }
        if pool.positions.active(state.epoch) {
            for &(j, g) in &step.corrections {
                let mut c = ComplexTensor::scalar(state.corrections[j]);
                update(&mut c, &ComplexTensor::scalar(g), &mut opt.positions[j], pool.positions.lr * decay)?;
                state.corrections[j] = c.item();
            }
        }
        Ok(())
    }

    /// Runs epochs until `state.epoch` reaches `config.epochs`, appending to
    /// `history` and calling `on_epoch` after each one.
    pub fn run(
        &self,
        mut state: ReconstructionState,
        history: &mut ConvergenceHistory,
        truth: Option<&GroundTruth>,
        mut on_epoch: impl FnMut(&ReconstructionState, &EpochRecord) -> Result<()>,
    ) -> Result<ReconstructionState> {
        self.check_state(&state)?;
        while state.epoch < self.config.epochs {
            let decay = self.config.lr_decay.powf(state.epoch as f64);
            let (mut data, mut reg) = (0.0, 0.0);
            for batch in batch_schedule(self.len(), self.config.batch_size, self.config.seed, state.epoch)? {
                let step = match self.batch_gradient(&state, &batch) {
                    Ok(step) if step.total().is_finite() => step,
                    Ok(_) | Err(PtychoError::Numeric(_)) => return Err(diverged(state)),
                    Err(e) => return Err(e),
                };
                data += step.data;
                reg += step.reg;
                let before = state.clone();
                self.apply(&mut state, &step, decay)?;
                if !state.is_finite() {
                    return Err(diverged(before));
                }
            }
            state.epoch += 1;
            let mut record = EpochRecord::new(state.epoch, data, reg, state.distance());
            if let Some(truth) = truth {
                let full = state.epoch % self.config.metrics_interval == 0 || state.epoch == self.config.epochs;
                attach_truth_metrics(&mut record, &state, truth, full)?;
            }
            history.push(record.clone())?;
            on_epoch(&state, &record)?;
            log::debug!(
                "epoch {} loss {:.6e} (data {:.6e}, reg {:.3e}) z {:.6e}",
                record.epoch,
                record.loss_total,
                data,
                reg,
                record.z
            );
        }
        Ok(state)
    }
}

fn diverged(last: ReconstructionState) -> PtychoError {
    PtychoError::Diverged {
        epoch: last.epoch,
        last_state: Box::new(last),
    }
}

/// Distance and position errors every epoch; object SSIM only when `full`.
pub fn attach_truth_metrics(
    record: &mut EpochRecord,
    state: &ReconstructionState,
    truth: &GroundTruth,
    full: bool,
) -> Result<()> {
    record.z_rel_error = Some((state.distance() - truth.distance) / truth.distance);
    let est = state.estimated_positions();
    let true_px = truth.positions_pixels();
    let raw = position_error_stats(&est, &true_px)?;
    record.pos_err_median = Some(raw.median);
    record.pos_err_mean = Some(raw.mean);
    record.pos_err_max = Some(raw.max);
    record.pos_err_median_registered = Some(registered_position_error_stats(&est, &true_px)?.median);
    if full {
        let q = object_quality(&state.object, &truth.object, comparison_roi(state, truth))?;
        record.ssim_magnitude = Some(q.ssim_magnitude);
        record.ssim_phase = Some(q.ssim_phase);
    }
    Ok(())
}

/// Region used for object comparison: the scanned area, no larger than
/// either object.
pub fn comparison_roi(state: &ReconstructionState, truth: &GroundTruth) -> Shape {
    let (r, c) = truth.scan_roi(state.probes.shape().0);
    let (rr, rc) = state.object.shape();
    (r.min(rr), c.min(rc))
}

/// Reconstructs from the standard initial state.
pub fn reconstruct(
    dataset: &PtychoDataset,
    config: &ReconstructionConfig,
    truth: Option<&GroundTruth>,
) -> Result<(ReconstructionState, ConvergenceHistory)> {
    let problem = Problem::new(dataset, config)?;
    let state = ReconstructionState::initial(dataset, config)?;
    let mut history = ConvergenceHistory::new();
    let state = problem.run(state, &mut history, truth, |_, _| Ok(()))?;
    Ok((state, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{simulate_recipe, CorruptionSpec, SimulationRecipe};

    fn recipe(z_error: f64, jitter: f64) -> SimulationRecipe {
        SimulationRecipe {
            pattern_size: 16,
            probe_diameter: 10.0,
            grid: 3,
            pixel_pitch: 1e-6,
            corruption: CorruptionSpec {
                z_error,
                position_jitter: jitter,
            },
            ..SimulationRecipe::desk_scale(11)
        }
    }

    fn config(epochs: u64) -> ReconstructionConfig {
        ReconstructionConfig {
            epochs,
            batch_size: 3,
            probe_radius: Some(5.0),
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_leave_the_state_alone() {
        let (data, _) = simulate_recipe(&recipe(0.3, 1.0), None).unwrap();
        let cfg = config(0);
        let problem = Problem::new(&data, &cfg).unwrap();
        let state = ReconstructionState::initial(&data, &cfg).unwrap();
        let mut history = ConvergenceHistory::new();
        let out = problem.run(state.clone(), &mut history, None, |_, _| Ok(())).unwrap();
        assert_eq!(out, state);
        assert!(history.records().is_empty());
    }

    #[test]
    fn ground_truth_has_zero_loss() {
        let (data, truth) = simulate_recipe(&recipe(0.0, 0.0), None).unwrap();
        let cfg = config(1);
        let problem = Problem::new(&data, &cfg).unwrap();
        let state = ReconstructionState::from_truth(&truth, &data, &cfg).unwrap();
        let report = problem.evaluate(&state).unwrap();
        assert!(report.total < 1e-10, "{report:?}");
        assert_eq!(report.per_batch.len(), 3);
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let (data, truth) = simulate_recipe(&recipe(0.1, 1.0), None).unwrap();
        let cfg = config(1);
        let problem = Problem::new(&data, &cfg).unwrap();
        let mut state = ReconstructionState::from_truth(&truth, &data, &cfg).unwrap();
        state.z0 = data.distance;
        state.z_factor = 0.02;
        state.positions = data.positions.clone();
        state.corrections = (0..data.len()).map(|j| Complex64::new(0.1 * j as f64, -0.05 * j as f64)).collect();
        let batch = [1, 4, 7];
        let step = problem.batch_gradient(&state, &batch).unwrap();
        let loss = |s: &ReconstructionState| problem.batch_gradient(s, &batch).unwrap().total();
        let h = 1e-6;

        let mut p = state.clone();
        p.z_factor += h;
        let mut m = state.clone();
        m.z_factor -= h;
        let fd = (loss(&p) - loss(&m)) / (2.0 * h);
        assert!((fd - step.z_factor).abs() <= 1e-5 * fd.abs().max(1.0), "z {fd} vs {}", step.z_factor);

        for &(j, g) in &step.corrections {
            for (dir, analytic) in [(Complex64::new(h, 0.0), g.re), (Complex64::new(0.0, h), g.im)] {
                let mut p = state.clone();
                p.corrections[j] += dir;
                let mut m = state.clone();
                m.corrections[j] -= dir;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - analytic).abs() <= 1e-5 * fd.abs().max(1.0), "pos {j}: {fd} vs {analytic}");
            }
        }
        assert_eq!(step.corrections.iter().map(|c| c.0).collect::<Vec<_>>(), batch);
    }

    #[test]
    fn stronger_l1_weight_shrinks_corrections() {
        let (data, truth) = simulate_recipe(&recipe(0.0, 1.0), None).unwrap();
        let l1 = |w: f64| {
            let mut cfg = config(60);
            cfg.pool.object.enabled = false;
            cfg.pool.probe.enabled = false;
            cfg.pool.distance.enabled = false;
            cfg.pool.positions.lr = 0.05;
            cfg.lr_decay = 0.95;
            cfg.regularization.corrections = w;
            let problem = Problem::new(&data, &cfg).unwrap();
            let mut state = ReconstructionState::from_truth(&truth, &data, &cfg).unwrap();
            state.positions = data.positions.clone();
            let mut h = ConvergenceHistory::new();
            let out = problem.run(state, &mut h, None, |_, _| Ok(())).unwrap();
            out.corrections.iter().map(|c| c.re.abs() + c.im.abs()).sum::<f64>()
        };
        let (weak, strong) = (l1(0.01), l1(0.1));
        assert!(strong > 0.0);
        assert!(strong < 0.5 * weak, "{strong} vs {weak}");
    }

    #[test]
    fn gradient_descent_lowers_the_loss() {
        let (data, _) = simulate_recipe(&recipe(0.0, 0.0), None).unwrap();
        let mut cfg = config(5);
        cfg.optimizer = OptimizerKind::Gd;
        cfg.pool = OptimPool {
            object: GroupConfig::new(1e-4),
            probe: GroupConfig::new(1e-4),
            distance: GroupConfig::disabled(0.0),
            positions: GroupConfig::disabled(0.0),
        };
        let problem = Problem::new(&data, &cfg).unwrap();
        let state = ReconstructionState::initial(&data, &cfg).unwrap();
        let before = problem.evaluate(&state).unwrap().total;
        let mut h = ConvergenceHistory::new();
        let out = problem.run(state, &mut h, None, |_, _| Ok(())).unwrap();
        assert!(problem.evaluate(&out).unwrap().total < before);
    }

    #[test]
    fn divergence_returns_the_last_finite_state() {
        let (data, _) = simulate_recipe(&recipe(0.0, 0.0), None).unwrap();
        let mut cfg = config(3);
        cfg.optimizer = OptimizerKind::Gd;
        cfg.pool.object.lr = 1e300;
        let problem = Problem::new(&data, &cfg).unwrap();
        let state = ReconstructionState::initial(&data, &cfg).unwrap();
        let mut h = ConvergenceHistory::new();
        match problem.run(state, &mut h, None, |_, _| Ok(())) {
            Err(PtychoError::Diverged { last_state, .. }) => assert!(last_state.is_finite()),
            other => panic!("expected divergence, got {:?}", other.map(|s| s.epoch)),
        }
    }

    #[test]
    fn resuming_continues_the_same_trajectory() {
        let (data, _) = simulate_recipe(&recipe(0.2, 1.0), None).unwrap();
        let full_cfg = config(4);
        let half_cfg = config(2);
        let state = ReconstructionState::initial(&data, &full_cfg).unwrap();
        let mut h = ConvergenceHistory::new();
        let full = Problem::new(&data, &full_cfg)
            .unwrap()
            .run(state.clone(), &mut h, None, |_, _| Ok(()))
            .unwrap();
        let mut h2 = ConvergenceHistory::new();
        let half = Problem::new(&data, &half_cfg)
            .unwrap()
            .run(state, &mut h2, None, |_, _| Ok(()))
            .unwrap();
        let resumed = Problem::new(&data, &full_cfg)
            .unwrap()
            .run(half, &mut h2, None, |_, _| Ok(()))
            .unwrap();
        assert_eq!(resumed, full);
        assert_eq!(h2, h);
    }

    #[test]
    fn oversized_batches_are_rejected() {
        let (data, _) = simulate_recipe(&recipe(0.0, 0.0), None).unwrap();
        let mut cfg = config(1);
        cfg.batch_size = 10;
        assert!(matches!(Problem::new(&data, &cfg), Err(PtychoError::Config(_))));
    }
}
