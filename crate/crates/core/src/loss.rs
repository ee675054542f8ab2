//! Data fidelity and the regularizers of the joint reconstruction loss.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{PtychoError, Result};
use crate::tensor::{ComplexTensor, RealImage};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossDomain {
    /// `Σ ‖√Ĩ − √I‖²`.
    #[default]
    Amplitude,
    /// `Σ ‖Ĩ − I‖²`.
    Intensity,
}

/// Measured patterns in the form the fidelity term compares against:
/// square roots for the amplitude domain, intensities otherwise.
#[derive(Clone, Debug)]
pub struct Measurements {
    pub domain: LossDomain,
    targets: Vec<Arc<ComplexTensor>>,
    /// Negative input samples set to zero.
    pub clamped: usize,
    /// Largest `Σ I` over all patterns.
    pub brightest_energy: f64,
}

impl Measurements {
    pub fn new(frames: &[RealImage], domain: LossDomain) -> Result<Self> {
        let mut clamped = 0;
        let mut brightest_energy = 0.0f64;
        let mut targets = Vec::with_capacity(frames.len());
        for f in frames {
            if f.data.iter().any(|v| !v.is_finite()) {
                return Err(PtychoError::Numeric("measured pattern contains non-finite values".into()));
            }
            let mut energy = 0.0;
            let data: Vec<f64> = f
                .data
                .iter()
                .map(|&v| {
                    if v < 0.0 {
                        clamped += 1;
                    }
                    let v = v.max(0.0);
                    energy += v;
                    match domain {
                        LossDomain::Amplitude => v.sqrt(),
                        LossDomain::Intensity => v,
                    }
                })
                .collect();
            brightest_energy = brightest_energy.max(energy);
            targets.push(Arc::new(ComplexTensor::from_real(f.rows, f.cols, data)?));
        }
        if clamped > 0 {
            log::warn!("{clamped} negative measured samples clamped to zero");
        }
        Ok(Self {
            domain,
            targets,
            clamped,
            brightest_energy,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn target(&self, j: usize) -> &Arc<ComplexTensor> {
        &self.targets[j]
    }
}

/// Fidelity of one simulated intensity against measurement `j`.
pub fn data_fidelity_var<'t>(sim: Var<'t>, meas: &Measurements, j: usize) -> Result<Var<'t>> {
    let target = meas.tape_target(sim, j);
    let model = match meas.domain {
        LossDomain::Amplitude => sim.sqrt(),
        LossDomain::Intensity => sim,
    };
    Ok(model.sub(target)?.modulus_squared().sum())
}

impl Measurements {
    fn tape_target<'t>(&self, sim: Var<'t>, j: usize) -> Var<'t> {
        sim.tape().constant(Arc::clone(&self.targets[j]))
    }
}

/// Tape-free fidelity summed over paired simulated and measured patterns.
pub fn data_fidelity(sim: &[RealImage], meas: &[RealImage], domain: LossDomain) -> Result<f64> {
    if sim.len() != meas.len() {
        return Err(PtychoError::InvalidArgument(format!(
            "{} simulated vs {} measured patterns",
            sim.len(),
            meas.len()
        )));
    }
    let mut total = 0.0;
    for (s, m) in sim.iter().zip(meas) {
        if s.shape() != m.shape() {
            return Err(PtychoError::Shape {
                op: "data_fidelity",
                left: s.shape(),
                right: m.shape(),
            });
        }
        for (&a, &b) in s.data.iter().zip(&m.data) {
            let b = b.max(0.0);
            let d = match domain {
                LossDomain::Amplitude => a.max(0.0).sqrt() - b.sqrt(),
                LossDomain::Intensity => a - b,
            };
            total += d * d;
        }
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizationWeights {
    /// Penalty on transmission magnitudes above one.
    pub object: f64,
    /// Penalty on probe energy below the target.
    pub probe: f64,
    /// L1 weight on position corrections.
    pub corrections: f64,
}

impl Default for RegularizationWeights {
    fn default() -> Self {
        Self {
            object: 1e2,
            probe: 1e2,
            corrections: 1e-3,
        }
    }
}

/// The three regularization terms, each already weighted.
pub struct RegTerms<'t> {
    pub object: Var<'t>,
    pub probe: Var<'t>,
    pub corrections: Var<'t>,
}

impl<'t> RegTerms<'t> {
    pub fn total(&self) -> Result<Var<'t>> {
        self.object.add(self.probe)?.add(self.corrections)
    }
}

/// `w_O·Σ relu(|O|−1)²`.
pub fn object_penalty<'t>(object: Var<'t>, weight: f64) -> Result<Var<'t>> {
    let excess = object.modulus_squared().sqrt().add_scalar(Complex64::new(-1.0, 0.0))?.relu();
    Ok(excess.modulus_squared().sum().scale(weight))
}

/// `w_P·relu(E_target − Σ_p‖P_p‖²)²`.
///
/// One-sided: an object with |O| ≤ 1 can only absorb, so the measured
/// energy is a lower bound on the probe energy and a probe brighter than the
/// target is not penalized.
pub fn probe_penalty<'t>(probes: &[Var<'t>], e_target: f64, weight: f64) -> Result<Var<'t>> {
    let first = probes
        .first()
        .ok_or_else(|| PtychoError::InvalidArgument("at least one probe mode is required".into()))?;
    let mut energy = first.modulus_squared().sum();
    for &p in &probes[1..] {
        energy = energy.add(p.modulus_squared().sum())?;
    }
    let deficit = energy.scale(-1.0).add_scalar(Complex64::new(e_target, 0.0))?.relu();
    Ok(deficit.modulus_squared().scale(weight))
}

/// `w_t·Σ_j (|t_x| + |t_y|)` over the given correction scalars.
pub fn corrections_penalty<'t>(corrections: &[Var<'t>], weight: f64) -> Result<Var<'t>> {
    let tape = corrections
        .first()
        .map(|c| c.tape())
        .ok_or_else(|| PtychoError::InvalidArgument("no corrections given".into()))?;
    let stacked = tape.concat_rows(corrections)?;
    Ok(stacked.l1_norm().scale(weight))
}

pub fn regularization<'t>(
    object: Var<'t>,
    probes: &[Var<'t>],
    corrections: &[Var<'t>],
    e_target: f64,
    w: &RegularizationWeights,
) -> Result<RegTerms<'t>> {
    let corrections = if corrections.is_empty() {
        object.tape().constant(ComplexTensor::real_scalar(0.0))
    } else {
        corrections_penalty(corrections, w.corrections)?
    };
    Ok(RegTerms {
        object: object_penalty(object, w.object)?,
        probe: probe_penalty(probes, e_target, w.probe)?,
        corrections,
    })
}
