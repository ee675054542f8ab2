//! In-memory measured data and synthetic ground truth.

use crate::error::{PtychoError, Result};
use crate::forward::{ProbeModes, ScanSet};
use crate::optics::{PadPolicy, PropagationSpec};
use crate::tensor::{ComplexTensor, RealImage, Shape};

/// Diffraction intensities with their acquisition geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct PtychoDataset {
    /// Metres.
    pub wavelength: f64,
    /// Initial (possibly inaccurate) propagation distance, metres.
    pub distance: f64,
    /// Sample-plane pixel pitch, metres.
    pub pixel_pitch: f64,
    /// Scan positions `(x, y)` in metres relative to the object centre.
    pub positions: Vec<(f64, f64)>,
    pub frames: Vec<RealImage>,
    pub dark_frames: Vec<RealImage>,
    pub notes: String,
}

impl PtychoDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn pattern_shape(&self) -> Shape {
        self.frames.first().map_or((0, 0), RealImage::shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(PtychoError::InvalidArgument("dataset has no patterns".into()));
        }
        if self.positions.len() != self.frames.len() {
            return Err(PtychoError::InvalidArgument(format!(
                "{} positions for {} patterns",
                self.positions.len(),
                self.frames.len()
            )));
        }
        let shape = self.pattern_shape();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(PtychoError::InvalidArgument("patterns are empty".into()));
        }
        for f in self.frames.iter().chain(&self.dark_frames) {
            if f.shape() != shape {
                return Err(PtychoError::Shape {
                    op: "dataset frames",
                    left: shape,
                    right: f.shape(),
                });
            }
        }
        PropagationSpec::new(self.wavelength, self.distance, self.pixel_pitch).validate()?;
        ScanSet::new(self.positions.clone(), self.pixel_pitch)?;
        Ok(())
    }

    /// Frames after subtracting the mean dark frame.
    pub fn corrected_frames(&self) -> Result<Vec<RealImage>> {
        dark_field_correct(&self.frames, &self.dark_frames)
    }

    pub fn scan(&self) -> Result<ScanSet> {
        ScanSet::new(self.positions.clone(), self.pixel_pitch)
    }

    pub fn propagation_spec(&self, pad: PadPolicy) -> PropagationSpec {
        PropagationSpec::new(self.wavelength, self.distance, self.pixel_pitch).with_pad(pad)
    }
}

/// `max(frame − mean(darks), 0)` per pixel. No darks leaves the frames
/// unchanged.
pub fn dark_field_correct(frames: &[RealImage], darks: &[RealImage]) -> Result<Vec<RealImage>> {
    if darks.is_empty() {
        if !frames.is_empty() {
            log::warn!("no dark frames supplied; skipping dark-field correction");
        }
        return Ok(frames.to_vec());
    }
    let shape = darks[0].shape();
    let mut mean = vec![0.0; shape.0 * shape.1];
    for d in darks {
        if d.shape() != shape {
            return Err(PtychoError::Shape {
                op: "dark_field_correct",
                left: shape,
                right: d.shape(),
            });
        }
        for (m, v) in mean.iter_mut().zip(&d.data) {
            *m += v;
        }
    }
    let n = darks.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    frames
        .iter()
        .map(|f| {
            if f.shape() != shape {
                return Err(PtychoError::Shape {
                    op: "dark_field_correct",
                    left: shape,
                    right: f.shape(),
                });
            }
            let data = f.data.iter().zip(&mean).map(|(v, m)| (v - m).max(0.0)).collect();
            RealImage::new(f.rows, f.cols, data)
        })
        .collect()
}

/// The parameters a synthetic dataset was generated with.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub object: ComplexTensor,
    pub probes: ProbeModes,
    /// Metres.
    pub distance: f64,
    /// `(x, y)` metres relative to the object centre.
    pub positions: Vec<(f64, f64)>,
    pub pixel_pitch: f64,
}

impl GroundTruth {
    pub fn positions_pixels(&self) -> Vec<(f64, f64)> {
        self.positions
            .iter()
            .map(|&(x, y)| (x / self.pixel_pitch, y / self.pixel_pitch))
            .collect()
    }

    /// Central region covered by the scan: the bounding box of all positions
    /// around the object centre, at least `min` pixels per side.
    pub fn scan_roi(&self, min: usize) -> Shape {
        let px = self.positions_pixels();
        let half = |f: fn(&(f64, f64)) -> f64| px.iter().map(|p| f(p).abs()).fold(0.0, f64::max).ceil() as usize;
        let (hx, hy) = (half(|p| p.0), half(|p| p.1));
        let (rows, cols) = self.object.shape();
        ((2 * hy + 1).max(min).min(rows), (2 * hx + 1).max(min).min(cols))
    }
}
