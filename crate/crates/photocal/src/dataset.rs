//! On-disk sequence layout and calibration artefacts.
//!
//! A sequence directory holds `images/%06d.png` (8-bit grayscale),
//! `times.txt` with one `id timestamp_sec exposure_ms` line per frame, and
//! optionally `pcalib.txt` (256 response samples) plus `vignette.png`
//! (16-bit grayscale attenuation map) as ground truth. Estimates are written
//! back in the same conventions so sequences and estimates round-trip.
//!
//! Intensities are normalized to [0, 1] by 255 at this boundary; all
//! estimator math downstream works on normalized values.

use crate::matching::normalized_radius;
use crate::response::InverseResponse;
use crate::vignette::VignetteModel;
use crate::Error;
use image::{GrayImage, ImageBuffer, Luma};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Floor applied to the vignette before dividing it out of an image.
pub const VIGNETTE_DIVISION_FLOOR: f64 = 1e-3;

/// One frame: image payload plus its capture metadata.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub id: u32,
    /// Capture time in seconds.
    pub timestamp: f64,
    /// Metadata exposure in milliseconds. Only ratios enter the estimators,
    /// so the unit choice drops out of every equation.
    pub exposure_ms: f64,
    pub image: GrayImage,
}

/// An ordered sequence of equally sized frames.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub frames: Vec<FrameRecord>,
    pub width: u32,
    pub height: u32,
    pub source: PathBuf,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Position of a frame id; ids are sorted and unique after loading.
    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.frames.binary_search_by_key(&id, |f| f.id).ok()
    }

    pub fn frame(&self, id: u32) -> Option<&FrameRecord> {
        self.index_of(id).map(|i| &self.frames[i])
    }
}

/// Tabulated inverse response over the 256 intensity levels, normalized so
/// the samples run from 0 to 1.
#[derive(Debug, Clone)]
pub struct ResponseCurve {
    pub samples: [f64; 256],
}

impl ResponseCurve {
    /// Identity mapping i/255.
    pub fn identity() -> Self {
        let mut samples = [0.0; 256];
        for (i, s) in samples.iter_mut().enumerate() {
            *s = i as f64 / 255.0;
        }
        Self { samples }
    }

    /// Affinely rescale raw values so min maps to 0 and max to 1.
    pub fn from_values(values: &[f64]) -> Result<Self, Error> {
        if values.len() != 256 {
            return Err(Error::ValueCount {
                found: values.len(),
            });
        }
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max <= min {
            return Err(Error::InvalidData {
                path: PathBuf::new(),
                msg: "response curve has no dynamic range".into(),
            });
        }
        let mut samples = [0.0; 256];
        for (s, v) in samples.iter_mut().zip(values) {
            *s = (v - min) / (max - min);
        }
        Ok(Self { samples })
    }

    /// Sample a polynomial response on the intensity grid.
    pub fn from_response(g: &InverseResponse) -> Self {
        let mut samples = [0.0; 256];
        for (i, s) in samples.iter_mut().enumerate() {
            *s = g.eval(i as f64 / 255.0);
        }
        Self { samples }
    }

    pub fn is_non_decreasing(&self) -> bool {
        self.samples.windows(2).all(|w| w[1] >= w[0])
    }
}

/// Tabulated attenuation map, normalized to [0, 1] by its maximum.
#[derive(Debug, Clone)]
pub struct VignetteImage {
    pub width: u32,
    pub height: u32,
    /// Row-major values.
    pub values: Vec<f64>,
}

impl VignetteImage {
    /// Bilinear sample at the frame centre (W/2, H/2).
    pub fn sample_center(&self) -> f64 {
        let (cx, cy) = (0.5 * self.width as f64, 0.5 * self.height as f64);
        let x0 = (cx.floor() as usize).min(self.width as usize - 1);
        let y0 = (cy.floor() as usize).min(self.height as usize - 1);
        let x1 = (x0 + 1).min(self.width as usize - 1);
        let y1 = (y0 + 1).min(self.height as usize - 1);
        let (fx, fy) = (cx - x0 as f64, cy - y0 as f64);
        let at = |x: usize, y: usize| self.values[y * self.width as usize + x];
        let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
        let bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

fn parse_times(path: &Path) -> Result<Vec<(u32, f64, f64)>, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(parse_err(format!(
                "expected 'id timestamp exposure_ms', found {} fields",
                tokens.len()
            )));
        }
        let id: u32 = tokens[0]
            .parse()
            .map_err(|e| parse_err(format!("bad frame id {:?}: {e}", tokens[0])))?;
        let timestamp: f64 = tokens[1]
            .parse()
            .map_err(|e| parse_err(format!("bad timestamp {:?}: {e}", tokens[1])))?;
        let exposure: f64 = tokens[2]
            .parse()
            .map_err(|e| parse_err(format!("bad exposure {:?}: {e}", tokens[2])))?;
        if !timestamp.is_finite() || !exposure.is_finite() {
            return Err(parse_err("non-finite value".into()));
        }
        if exposure <= 0.0 {
            return Err(Error::NonPositiveExposure {
                id,
                value: exposure,
            });
        }
        rows.push((id, timestamp, exposure));
    }
    Ok(rows)
}

/// Frame image path inside a sequence directory.
pub fn image_path(dir: &Path, id: u32) -> PathBuf {
    dir.join("images").join(format!("{id:06}.png"))
}

/// Load a sequence directory: every id listed in `times.txt` must have an
/// image of identical dimensions.
pub fn load_sequence(dir: &Path) -> Result<Sequence, Error> {
    let times_path = dir.join("times.txt");
    let mut rows = parse_times(&times_path)?;
    if rows.is_empty() {
        return Err(Error::EmptySequence { path: times_path });
    }
    rows.sort_by_key(|r| r.0);
    for pair in rows.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::DuplicateFrameId { id: pair[0].0 });
        }
    }

    let mut frames = Vec::with_capacity(rows.len());
    let mut dims: Option<(u32, u32)> = None;
    for (id, timestamp, exposure_ms) in rows {
        let path = image_path(dir, id);
        if !path.exists() {
            return Err(Error::MissingImage { id, path });
        }
        let image = image::open(&path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?
            .into_luma8();
        match dims {
            None => dims = Some(image.dimensions()),
            Some(expected) if expected != image.dimensions() => {
                return Err(Error::DimensionMismatch {
                    expected,
                    got: image.dimensions(),
                    context: format!("frame {id}"),
                });
            }
            _ => {}
        }
        frames.push(FrameRecord {
            id,
            timestamp,
            exposure_ms,
            image,
        });
    }
    let (width, height) = dims.expect("at least one frame");
    Ok(Sequence {
        frames,
        width,
        height,
        source: dir.to_path_buf(),
    })
}

/// Write `times.txt` and `images/` for a set of frames.
pub fn write_sequence(frames: &[FrameRecord], dir: &Path) -> Result<(), Error> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut times = String::new();
    for f in frames {
        writeln!(times, "{:06} {} {}", f.id, f.timestamp, f.exposure_ms)
            .expect("writing to string");
        let path = image_path(dir, f.id);
        f.image.save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
    }
    let times_path = dir.join("times.txt");
    fs::write(&times_path, times).map_err(|e| Error::io(&times_path, e))
}

/// Read 256 whitespace-separated response samples and normalize them.
pub fn load_response_curve(path: &Path) -> Result<ResponseCurve, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::InvalidData {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData {
            path: path.to_path_buf(),
            msg: "non-finite value".into(),
        });
    }
    ResponseCurve::from_values(&values).map_err(|e| match e {
        Error::InvalidData { msg, .. } => Error::InvalidData {
            path: path.to_path_buf(),
            msg,
        },
        other => other,
    })
}

/// Load a 16-bit grayscale vignette image normalized by its maximum.
pub fn load_vignette_image(
    path: &Path,
    expected_dims: Option<(u32, u32)>,
) -> Result<VignetteImage, Error> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma16();
    if let Some(expected) = expected_dims {
        if img.dimensions() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: img.dimensions(),
                context: format!("vignette image {}", path.display()),
            });
        }
    }
    let max = img.pixels().map(|p| p.0[0]).max().unwrap_or(0);
    if max == 0 {
        return Err(Error::InvalidData {
            path: path.to_path_buf(),
            msg: "vignette image is all zero".into(),
        });
    }
    let (width, height) = img.dimensions();
    let values = img
        .pixels()
        .map(|p| p.0[0] as f64 / max as f64)
        .collect();
    Ok(VignetteImage {
        width,
        height,
        values,
    })
}

/// 17-significant-digit formatting; round-trips every f64 exactly.
fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write a response as 256 samples of `255 * g(i/255)` on one line.
pub fn write_response_curve(path: &Path, g: &InverseResponse) -> Result<(), Error> {
    let line = (0..256)
        .map(|i| fmt17(255.0 * g.eval(i as f64 / 255.0)))
        .collect::<Vec<_>>()
        .join(" ");
    fs::write(path, line + "\n").map_err(|e| Error::io(path, e))
}

/// Write vignette coefficients, one per line.
pub fn write_vignette_coefficients(path: &Path, v: &VignetteModel) -> Result<(), Error> {
    let mut text = String::new();
    for c in v.coefficients() {
        writeln!(text, "{}", fmt17(c)).expect("writing to string");
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read three vignette coefficients written by
/// [`write_vignette_coefficients`].
pub fn load_vignette_coefficients(path: &Path) -> Result<VignetteModel, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::InvalidData {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    if values.len() != 3 {
        return Err(Error::InvalidData {
            path: path.to_path_buf(),
            msg: format!("expected 3 coefficients, found {}", values.len()),
        });
    }
    Ok(VignetteModel::new(values[0], values[1], values[2]))
}

/// Render a vignette model to a 16-bit image, scaled by its maximum.
pub fn render_vignette_image(
    v: &VignetteModel,
    width: u32,
    height: u32,
) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    let mut max = 0.0f64;
    let mut values = vec![0.0f64; (width * height) as usize];
    for y in 0..height {
        for x in 0..width {
            let r = normalized_radius(x as f64, y as f64, width, height);
            let val = v.eval(r).max(0.0);
            values[(y * width + x) as usize] = val;
            max = max.max(val);
        }
    }
    let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
    ImageBuffer::from_fn(width, height, |x, y| {
        Luma([(values[(y * width + x) as usize] * scale).round() as u16])
    })
}

/// Write the estimated parameters: `pcalib_est.txt`, `vignette_est.txt`
/// (three coefficients) and `vignette_est.png` rendered at the sequence
/// dimensions.
pub fn write_estimates(
    g: &InverseResponse,
    v: &VignetteModel,
    dims: (u32, u32),
    dir: &Path,
) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_response_curve(&dir.join("pcalib_est.txt"), g)?;
    write_vignette_coefficients(&dir.join("vignette_est.txt"), v)?;
    let img = render_vignette_image(v, dims.0, dims.1);
    let path = dir.join("vignette_est.png");
    img.save(&path).map_err(|source| Error::Image {
        path: path.clone(),
        source,
    })?;
    Ok(())
}

/// Undo the formation model on one frame: per pixel,
/// `g(M/255) / max(V(R), floor)`, optionally divided by the exposure in
/// seconds. Returns the irradiance map row-major.
pub fn correct_frame(
    frame: &FrameRecord,
    g: &InverseResponse,
    v: &VignetteModel,
    divide_exposure: bool,
) -> Vec<f64> {
    let (width, height) = frame.image.dimensions();
    let exposure_s = frame.exposure_ms / 1000.0;
    let mut out = Vec::with_capacity((width * height) as usize);
    for y in 0..height {
        for x in 0..width {
            let m = frame.image.get_pixel(x, y).0[0] as f64 / 255.0;
            let r = normalized_radius(x as f64, y as f64, width, height);
            let vig = v.eval(r).max(VIGNETTE_DIVISION_FLOOR);
            let mut value = g.eval(m) / vig;
            if divide_exposure {
                value /= exposure_s;
            }
            out.push(value);
        }
    }
    out
}
