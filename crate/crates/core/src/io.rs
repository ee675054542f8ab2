//! On-disk formats: the dataset container, ground-truth and snapshot
//! bundles, TIFF import, and image/array export.
//!
//! Every bundle file is laid out as
//!
//! ```text
//! magic (8 bytes) | manifest length (u64 LE) | manifest (UTF-8 TOML) | payload
//! ```
//!
//! The manifest names its format and version and carries the SHA-256 of
//! the payload. Dataset payloads are little-endian `f32`, row-major,
//! pattern-major, followed by the dark frames; truth and snapshot payloads
//! are little-endian `f64`.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{GroundTruth, PtychoDataset};
use crate::error::{DatasetError, PtychoError, Result};
use crate::forward::ProbeModes;
use crate::optim::{AdamHyper, AdamState};
use crate::reconstruct::{OptimizerState, ReconstructionState};
use crate::tensor::{ComplexTensor, RealImage, Shape};

pub const DATASET_FORMAT: &str = "ptychograd-dataset";
pub const TRUTH_FORMAT: &str = "ptychograd-truth";
pub const SNAPSHOT_FORMAT: &str = "ptychograd-snapshot";
pub const FORMAT_VERSION: u32 = 1;

const DATASET_MAGIC: &[u8; 8] = b"PTYGDSET";
const TRUTH_MAGIC: &[u8; 8] = b"PTYGTRTH";
const SNAPSHOT_MAGIC: &[u8; 8] = b"PTYGSNAP";

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and a rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| PtychoError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| PtychoError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| PtychoError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| PtychoError::io(path, e))?;
    tmp.persist(path).map_err(|e| PtychoError::io(path, e.error))?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn manifest_error(e: impl std::fmt::Display) -> PtychoError {
    DatasetError::Manifest(e.to_string()).into()
}

fn encode_bundle(magic: &[u8; 8], manifest: &impl Serialize, payload: &[u8]) -> Result<Vec<u8>> {
    let text = toml::to_string(manifest).map_err(manifest_error)?;
    let mut out = Vec::with_capacity(16 + text.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

/// Splits a bundle into its parsed manifest and payload after checking the
/// magic, format tag, version and checksum.
fn decode_bundle<'a, M: DeserializeOwned>(
    bytes: &'a [u8],
    magic: &[u8; 8],
    format: &str,
    checksum: impl Fn(&M) -> &str,
) -> Result<(M, &'a [u8])> {
    if bytes.len() < 16 || &bytes[..8] != magic {
        let tag = String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned();
        return Err(DatasetError::UnknownFormat(tag).into());
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or(DatasetError::Truncated {
        expected: 16usize.saturating_add(len),
        found: bytes.len(),
    })?;
    let text = std::str::from_utf8(&bytes[16..end]).map_err(manifest_error)?;
    let header: Header = toml::from_str(text).map_err(manifest_error)?;
    if header.format != format {
        return Err(DatasetError::UnknownFormat(header.format).into());
    }
    if header.version != FORMAT_VERSION {
        return Err(DatasetError::UnsupportedVersion {
            found: header.version,
            supported: FORMAT_VERSION,
        }
        .into());
    }
    let manifest: M = toml::from_str(text).map_err(manifest_error)?;
    let payload = &bytes[end..];
    let actual = sha256_hex(payload);
    let expected = checksum(&manifest);
    if actual != expected {
        return Err(DatasetError::Checksum {
            expected: expected.to_string(),
            actual,
        }
        .into());
    }
    Ok((manifest, payload))
}

fn check_payload_len(payload: &[u8], expected: usize) -> Result<()> {
    match payload.len().cmp(&expected) {
        std::cmp::Ordering::Less => Err(DatasetError::Truncated {
            expected,
            found: payload.len(),
        }
        .into()),
        std::cmp::Ordering::Greater => Err(DatasetError::TrailingBytes {
            found: payload.len() - expected,
        }
        .into()),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| PtychoError::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format: String,
    version: u32,
    wavelength: f64,
    distance: f64,
    pixel_pitch: f64,
    rows: usize,
    cols: usize,
    frames: usize,
    dark_frames: usize,
    positions: Vec<[f64; 2]>,
    notes: String,
    payload_sha256: String,
}

/// Container bytes for `dataset`. Intensities are stored as `f32`.
pub fn encode_dataset(dataset: &PtychoDataset) -> Result<Vec<u8>> {
    dataset.validate()?;
    let (rows, cols) = dataset.pattern_shape();
    let mut payload = Vec::with_capacity((dataset.len() + dataset.dark_frames.len()) * rows * cols * 4);
    for f in dataset.frames.iter().chain(&dataset.dark_frames) {
        for &v in &f.data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: FORMAT_VERSION,
        wavelength: dataset.wavelength,
        distance: dataset.distance,
        pixel_pitch: dataset.pixel_pitch,
        rows,
        cols,
        frames: dataset.len(),
        dark_frames: dataset.dark_frames.len(),
        positions: dataset.positions.iter().map(|&(x, y)| [x, y]).collect(),
        notes: dataset.notes.clone(),
        payload_sha256: sha256_hex(&payload),
    };
    encode_bundle(DATASET_MAGIC, &manifest, &payload)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<PtychoDataset> {
    let (m, payload): (DatasetManifest, _) =
        decode_bundle(bytes, DATASET_MAGIC, DATASET_FORMAT, |m: &DatasetManifest| &m.payload_sha256)?;
    if m.positions.len() != m.frames {
        return Err(DatasetError::ShapeMismatch(format!(
            "{} positions for {} frames",
            m.positions.len(),
            m.frames
        ))
        .into());
    }
    let frame_len = m.rows * m.cols;
    check_payload_len(payload, (m.frames + m.dark_frames) * frame_len * 4)?;
    let mut frames: Vec<RealImage> = payload
        .chunks_exact(frame_len * 4)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                .collect();
            RealImage::new(m.rows, m.cols, data)
        })
        .collect::<Result<_>>()?;
    let dark_frames = frames.split_off(m.frames);
    let dataset = PtychoDataset {
        wavelength: m.wavelength,
        distance: m.distance,
        pixel_pitch: m.pixel_pitch,
        positions: m.positions.iter().map(|p| (p[0], p[1])).collect(),
        frames,
        dark_frames,
        notes: m.notes,
    };
    dataset
        .validate()
        .map_err(|e| DatasetError::ShapeMismatch(e.to_string()))?;
    Ok(dataset)
}

pub fn save_dataset(dataset: &PtychoDataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_dataset(dataset)?)
}

pub fn load_dataset(path: &Path) -> Result<PtychoDataset> {
    decode_dataset(&read_file(path)?)
}

fn push_f64(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_tensor(out: &mut Vec<u8>, t: &ComplexTensor) {
    push_f64(out, t.re().iter().copied());
    push_f64(out, t.im().iter().copied());
}

/// Sequential reader over an `f64` payload.
struct F64Reader<'a> {
    bytes: &'a [u8],
}

impl F64Reader<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        let need = n * 8;
        if self.bytes.len() < need {
            return Err(DatasetError::Truncated {
                expected: need,
                found: self.bytes.len(),
            }
            .into());
        }
        let (head, rest) = self.bytes.split_at(need);
        self.bytes = rest;
        Ok(head
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }

    fn tensor(&mut self, shape: Shape) -> Result<ComplexTensor> {
        let n = shape.0 * shape.1;
        let re = self.take(n)?;
        let im = self.take(n)?;
        ComplexTensor::new(shape.0, shape.1, re, im)
    }

    fn finish(self) -> Result<()> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(DatasetError::TrailingBytes {
                found: self.bytes.len(),
            }
            .into())
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthManifest {
    format: String,
    version: u32,
    distance: f64,
    pixel_pitch: f64,
    object_shape: [usize; 2],
    probe_shape: [usize; 2],
    probe_modes: usize,
    positions: Vec<[f64; 2]>,
    payload_sha256: String,
}

/// Payload: object (re plane, im plane), then each probe mode likewise.
pub fn save_truth(truth: &GroundTruth, path: &Path) -> Result<()> {
    let mut payload = Vec::new();
    push_tensor(&mut payload, &truth.object);
    for p in truth.probes.modes() {
        push_tensor(&mut payload, p);
    }
    let (o, p) = (truth.object.shape(), truth.probes.shape());
    let manifest = TruthManifest {
        format: TRUTH_FORMAT.into(),
        version: FORMAT_VERSION,
        distance: truth.distance,
        pixel_pitch: truth.pixel_pitch,
        object_shape: [o.0, o.1],
        probe_shape: [p.0, p.1],
        probe_modes: truth.probes.len(),
        positions: truth.positions.iter().map(|&(x, y)| [x, y]).collect(),
        payload_sha256: sha256_hex(&payload),
    };
    write_atomic(path, &encode_bundle(TRUTH_MAGIC, &manifest, &payload)?)
}

pub fn load_truth(path: &Path) -> Result<GroundTruth> {
    let bytes = read_file(path)?;
    let (m, payload): (TruthManifest, _) =
        decode_bundle(&bytes, TRUTH_MAGIC, TRUTH_FORMAT, |m: &TruthManifest| &m.payload_sha256)?;
    let mut r = F64Reader { bytes: payload };
    let object = r.tensor((m.object_shape[0], m.object_shape[1]))?;
    let probes = (0..m.probe_modes)
        .map(|_| r.tensor((m.probe_shape[0], m.probe_shape[1])))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(GroundTruth {
        object,
        probes: ProbeModes::new(probes)?,
        distance: m.distance,
        positions: m.positions.iter().map(|p| (p[0], p[1])).collect(),
        pixel_pitch: m.pixel_pitch,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotManifest {
    format: String,
    version: u32,
    epoch: u64,
    z0: f64,
    z_factor: f64,
    pixel_pitch: f64,
    e_target: f64,
    object_shape: [usize; 2],
    probe_shape: [usize; 2],
    probe_modes: usize,
    positions: Vec<[f64; 2]>,
    adam: AdamHyper,
    /// Step counters: object, each probe mode, distance, each position.
    adam_steps: Vec<u64>,
    payload_sha256: String,
}

/// Full reconstruction state, optimizer moments included, so a resumed run
/// continues exactly where the saved one stopped.
///
/// Payload order: object, probe modes, corrections (re, im pairs), then the
/// Adam `m` and `v` tensors in the order of `adam_steps`.
pub fn encode_snapshot(state: &ReconstructionState) -> Result<Vec<u8>> {
    let opt = &state.optimizer;
    let adams: Vec<&AdamState> = std::iter::once(&opt.object)
        .chain(&opt.probes)
        .chain(std::iter::once(&opt.distance))
        .chain(&opt.positions)
        .collect();
    let mut payload = Vec::new();
    push_tensor(&mut payload, &state.object);
    for p in state.probes.modes() {
        push_tensor(&mut payload, p);
    }
    push_f64(&mut payload, state.corrections.iter().flat_map(|c| [c.re, c.im]));
    for a in &adams {
        push_tensor(&mut payload, &a.m);
        push_tensor(&mut payload, &a.v);
    }
    let (o, p) = (state.object.shape(), state.probes.shape());
    let manifest = SnapshotManifest {
        format: SNAPSHOT_FORMAT.into(),
        version: FORMAT_VERSION,
        epoch: state.epoch,
        z0: state.z0,
        z_factor: state.z_factor,
        pixel_pitch: state.pixel_pitch,
        e_target: state.e_target,
        object_shape: [o.0, o.1],
        probe_shape: [p.0, p.1],
        probe_modes: state.probes.len(),
        positions: state.positions.iter().map(|&(x, y)| [x, y]).collect(),
        adam: opt.object.hyper,
        adam_steps: adams.iter().map(|a| a.step).collect(),
        payload_sha256: sha256_hex(&payload),
    };
    encode_bundle(SNAPSHOT_MAGIC, &manifest, &payload)
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<ReconstructionState> {
    let (m, payload): (SnapshotManifest, _) =
        decode_bundle(bytes, SNAPSHOT_MAGIC, SNAPSHOT_FORMAT, |m: &SnapshotManifest| &m.payload_sha256)?;
    let j = m.positions.len();
    let modes = m.probe_modes;
    if m.adam_steps.len() != modes + j + 2 {
        return Err(DatasetError::ShapeMismatch(format!(
            "{} optimizer step counters for {modes} modes and {j} positions",
            m.adam_steps.len()
        ))
        .into());
    }
    let object_shape = (m.object_shape[0], m.object_shape[1]);
    let probe_shape = (m.probe_shape[0], m.probe_shape[1]);
    let mut r = F64Reader { bytes: payload };
    let object = r.tensor(object_shape)?;
    let probes = (0..modes).map(|_| r.tensor(probe_shape)).collect::<Result<Vec<_>>>()?;
    let corrections = r.take(2 * j)?.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect();
    let shapes = std::iter::once(object_shape)
        .chain(std::iter::repeat_n(probe_shape, modes))
        .chain(std::iter::repeat_n((1, 1), j + 1));
    let mut adams = Vec::with_capacity(m.adam_steps.len());
    for (shape, &step) in shapes.zip(&m.adam_steps) {
        adams.push(AdamState {
            m: r.tensor(shape)?,
            v: r.tensor(shape)?,
            step,
            hyper: m.adam,
        });
    }
    r.finish()?;
    let positions_adam = adams.split_off(modes + 2);
    let distance = adams.pop().expect("distance state");
    let object_adam = adams.remove(0);
    Ok(ReconstructionState {
        object,
        probes: ProbeModes::new(probes)?,
        z0: m.z0,
        z_factor: m.z_factor,
        positions: m.positions.iter().map(|p| (p[0], p[1])).collect(),
        corrections,
        pixel_pitch: m.pixel_pitch,
        epoch: m.epoch,
        optimizer: OptimizerState {
            object: object_adam,
            probes: adams,
            distance,
            positions: positions_adam,
        },
        e_target: m.e_target,
    })
}

pub fn save_snapshot(state: &ReconstructionState, path: &Path) -> Result<()> {
    write_atomic(path, &encode_snapshot(state)?)
}

pub fn load_snapshot(path: &Path) -> Result<ReconstructionState> {
    decode_snapshot(&read_file(path)?)
}

/// Every page of a 16-bit grayscale multipage TIFF as a float image.
pub fn read_tiff_stack(path: &Path) -> Result<Vec<RealImage>> {
    let file = fs::File::open(path).map_err(|e| PtychoError::io(path, e))?;
    let tiff_err = |e: tiff::TiffError| PtychoError::from(DatasetError::Tiff(e.to_string()));
    let mut decoder = tiff::decoder::Decoder::new(std::io::BufReader::new(file)).map_err(tiff_err)?;
    let mut pages = Vec::new();
    loop {
        let (w, h) = decoder.dimensions().map_err(tiff_err)?;
        let data = match decoder.read_image().map_err(tiff_err)? {
            tiff::decoder::DecodingResult::U16(v) => v.into_iter().map(f64::from).collect(),
            _ => return Err(DatasetError::Tiff(format!("page {} is not 16-bit grayscale", pages.len())).into()),
        };
        let page = RealImage::new(h as usize, w as usize, data)
            .map_err(|_| DatasetError::Tiff(format!("page {} is not single-channel", pages.len())))?;
        if let Some(first) = pages.first().map(RealImage::shape) {
            if page.shape() != first {
                return Err(DatasetError::ShapeMismatch(format!(
                    "tiff page {} is {:?}, first page {:?}",
                    pages.len(),
                    page.shape(),
                    first
                ))
                .into());
            }
        }
        pages.push(page);
        if !decoder.more_images() {
            break;
        }
        decoder.next_image().map_err(tiff_err)?;
    }
    Ok(pages)
}

/// Acquisition geometry that a raw TIFF stack lacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportGeometry {
    pub wavelength: f64,
    pub distance: f64,
    pub pixel_pitch: f64,
    /// Metres, one per page.
    pub positions: Vec<(f64, f64)>,
}

/// Builds a dataset from a multipage TIFF of patterns and an optional TIFF
/// of dark frames.
pub fn import_tiff(frames: &Path, darks: Option<&Path>, geometry: ImportGeometry) -> Result<PtychoDataset> {
    let dataset = PtychoDataset {
        wavelength: geometry.wavelength,
        distance: geometry.distance,
        pixel_pitch: geometry.pixel_pitch,
        positions: geometry.positions,
        frames: read_tiff_stack(frames)?,
        dark_frames: darks.map(read_tiff_stack).transpose()?.unwrap_or_default(),
        notes: format!("imported from {}", frames.display()),
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Magnitude as 8-bit gray, linear over `[0, max]`.
pub fn magnitude_png(t: &ComplexTensor) -> image::GrayImage {
    let m = t.modulus();
    let max = m.max();
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let buf = m.data.iter().map(|v| (v * scale).round().clamp(0.0, 255.0) as u8).collect();
    image::GrayImage::from_raw(m.cols as u32, m.rows as u32, buf).expect("buffer matches size")
}

/// Hue wheel: phase `φ ∈ (−π, π]` maps to hue `(φ + π)/2π`, so `−π` and
/// `π` share a colour.
pub fn phase_colour(phi: f64) -> [u8; 3] {
    let h = ((phi + PI) / (2.0 * PI)).rem_euclid(1.0) * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|c: f64| (c * 255.0).round() as u8)
}

pub fn phase_png(t: &ComplexTensor) -> image::RgbImage {
    let (rows, cols) = t.shape();
    image::RgbImage::from_fn(cols as u32, rows as u32, |x, y| {
        image::Rgb(phase_colour(t.get(y as usize, x as usize).arg()))
    })
}

fn encode_png<P, C>(img: &image::ImageBuffer<P, C>) -> Result<Vec<u8>>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Writes `<stem>_magnitude.png`, `<stem>_phase.png` and the raw complex
/// array `<stem>.npy` into `dir`.
pub fn export_complex(t: &ComplexTensor, dir: &Path, stem: &str) -> Result<()> {
    write_atomic(&dir.join(format!("{stem}_magnitude.png")), &encode_png(&magnitude_png(t))?)?;
    write_atomic(&dir.join(format!("{stem}_phase.png")), &encode_png(&phase_png(t))?)?;
    write_atomic(&dir.join(format!("{stem}.npy")), &npy_complex(t)?)
}

/// `.npy` bytes of a `complex128` array of `t`'s shape.
pub fn npy_complex(t: &ComplexTensor) -> Result<Vec<u8>> {
    use npyz::WriterBuilder;
    let (rows, cols) = t.shape();
    let mut out = Vec::new();
    let npy_err = |e: std::io::Error| PtychoError::Numeric(format!("npy encode: {e}"));
    let mut w = npyz::WriteOptions::<Complex64>::new()
        .default_dtype()
        .shape(&[rows as u64, cols as u64])
        .writer(&mut out)
        .begin_nd()
        .map_err(npy_err)?;
    w.extend(t.iter()).map_err(npy_err)?;
    w.finish().map_err(npy_err)?;
    Ok(out)
}

/// Reads a `complex128` array written by [`npy_complex`].
pub fn read_npy_complex(bytes: &[u8]) -> Result<ComplexTensor> {
    let npy_err = |e: std::io::Error| PtychoError::Numeric(format!("npy decode: {e}"));
    let npy = npyz::NpyFile::new(bytes).map_err(npy_err)?;
    let shape = npy.shape().to_vec();
    if shape.len() != 2 {
        return Err(PtychoError::InvalidArgument(format!("expected a 2-D array, got shape {shape:?}")));
    }
    let values: Vec<Complex64> = npy.into_vec().map_err(npy_err)?;
    ComplexTensor::from_complex(shape[0] as usize, shape[1] as usize, &values)
}

/// Real image for profiling: the modulus of a complex `.npy`, a real
/// `f64`/`f32` `.npy` as is, or any other file decoded as 8/16-bit gray
/// scaled to `[0, 1]`.
pub fn load_real_image(path: &Path) -> Result<RealImage> {
    let bytes = read_file(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("npy")) {
        let npy_err = |e: std::io::Error| PtychoError::Numeric(format!("npy decode: {e}"));
        let npy = npyz::NpyFile::new(&bytes[..]).map_err(npy_err)?;
        let shape = npy.shape().to_vec();
        if shape.len() != 2 {
            return Err(PtychoError::InvalidArgument(format!("expected a 2-D array, got shape {shape:?}")));
        }
        let (rows, cols) = (shape[0] as usize, shape[1] as usize);
        let data = match npy.dtype() {
            npyz::DType::Plain(t) if t.type_char() == npyz::TypeChar::Complex => {
                return Ok(read_npy_complex(&bytes)?.modulus());
            }
            npyz::DType::Plain(t) if t.num_bytes() == Some(4) => {
                npy.into_vec::<f32>().map_err(npy_err)?.into_iter().map(f64::from).collect()
            }
            _ => npy.into_vec::<f64>().map_err(npy_err)?,
        };
        return RealImage::new(rows, cols, data);
    }
    let img = image::load_from_memory(&bytes)?.into_luma16();
    let data = img.pixels().map(|p| f64::from(p.0[0]) / 65535.0).collect();
    RealImage::new(img.height() as usize, img.width() as usize, data)
}
