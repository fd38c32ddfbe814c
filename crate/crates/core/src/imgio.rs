//! On-disk raster and manifest formats.
//!
//! A raster is stored as two files sharing a stem: `<stem>.json` holds the
//! header and `<stem>.bin` holds the pixels as little-endian `f32` in
//! row-major order. Manifests are pretty-printed JSON.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forward::EpiParams;

/// Manifest format version written by this crate and required on read.
pub const MANIFEST_VERSION: &str = "1";

/// Tool identifier stamped into manifests.
pub const CREATED_BY: &str = concat!("epiwarp ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid dimensions {width}x{height}")]
    InvalidDimensions { width: usize, height: usize },
    #[error("pixel buffer length {actual} does not match {width}x{height}")]
    BufferLength {
        width: usize,
        height: usize,
        actual: usize,
    },
    #[error("payload {path} has {actual} bytes, header implies {expected}")]
    LengthMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("unknown image kind `{0}`")]
    UnknownKind(String),
    #[error("unknown pe_axis `{0}`")]
    UnknownPeAxis(String),
    #[error("unsupported {field} `{value}`")]
    Unsupported { field: &'static str, value: String },
    #[error("non-finite pixel value at index {index}")]
    NonFinite { index: usize },
    #[error("negative ADC value {value} at index {index}")]
    NegativeAdc { index: usize, value: f32 },
    #[error("mask value {value} at index {index} is not 0 or 1")]
    NonBinaryMask { index: usize, value: f32 },
    #[error("invalid pixel spacing ({0}, {1})")]
    InvalidSpacing(f64, f64),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("parent directory of {0} does not exist")]
    MissingParent(PathBuf),
    #[error("sample `{sample}` references missing file {path}")]
    DanglingPath { sample: String, path: PathBuf },
    #[error("duplicate sample id `{0}`")]
    DuplicateSampleId(String),
    #[error("manifest version `{found}` is not supported (expected `{expected}`)")]
    VersionMismatch { found: String, expected: String },
}

pub type Result<T, E = ImageError> = std::result::Result<T, E>;

/// Semantic content of a raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageKind {
    DwiB50,
    DwiB1400,
    Adc,
    T2w,
    FieldHz,
    VdmPx,
    Mask,
}

impl ImageKind {
    pub const ALL: [ImageKind; 7] = [
        ImageKind::DwiB50,
        ImageKind::DwiB1400,
        ImageKind::Adc,
        ImageKind::T2w,
        ImageKind::FieldHz,
        ImageKind::VdmPx,
        ImageKind::Mask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ImageKind::DwiB50 => "dwi_b50",
            ImageKind::DwiB1400 => "dwi_b1400",
            ImageKind::Adc => "adc",
            ImageKind::T2w => "t2w",
            ImageKind::FieldHz => "field_hz",
            ImageKind::VdmPx => "vdm_px",
            ImageKind::Mask => "mask",
        }
    }
}

impl fmt::Display for ImageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ImageKind {
    type Err = ImageError;

    fn from_str(s: &str) -> Result<Self> {
        ImageKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ImageError::UnknownKind(s.to_string()))
    }
}

/// Image axis along which phase-encoding displacement acts.
///
/// `Row` moves signal along the row index (anterior-posterior for an axial
/// slice), so each image column is one PE line. `Col` moves signal along the
/// column index (left-right), so each image row is one PE line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeAxis {
    Row,
    Col,
}

impl PeAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            PeAxis::Row => "row",
            PeAxis::Col => "col",
        }
    }

    pub fn orthogonal(self) -> PeAxis {
        match self {
            PeAxis::Row => PeAxis::Col,
            PeAxis::Col => PeAxis::Row,
        }
    }
}

impl FromStr for PeAxis {
    type Err = ImageError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" => Ok(PeAxis::Row),
            "col" => Ok(PeAxis::Col),
            other => Err(ImageError::UnknownPeAxis(other.to_string())),
        }
    }
}

/// Raster shape and pixel size, without pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub width: usize,
    pub height: usize,
    /// (row, col) spacing in mm.
    pub spacing_mm: (f64, f64),
}

impl Geometry {
    pub fn new(width: usize, height: usize) -> Self {
        Geometry {
            width,
            height,
            spacing_mm: (1.0, 1.0),
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of PE lines and samples per line for `axis`.
    pub fn lines(&self, axis: PeAxis) -> (usize, usize) {
        match axis {
            PeAxis::Row => (self.width, self.height),
            PeAxis::Col => (self.height, self.width),
        }
    }

    /// Extent of the grid along `axis` in pixels.
    pub fn extent(&self, axis: PeAxis) -> usize {
        self.lines(axis).1
    }

    /// Flat index of sample `pos` on PE line `line`.
    #[inline]
    pub fn line_index(&self, axis: PeAxis, line: usize, pos: usize) -> usize {
        match axis {
            PeAxis::Row => pos * self.width + line,
            PeAxis::Col => line * self.width + pos,
        }
    }
}

/// A 2D float32 raster with its spacing and semantic kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    geometry: Geometry,
    kind: ImageKind,
    pe_axis: Option<PeAxis>,
    pixels: Vec<f32>,
}

impl Image2D {
    pub fn new(geometry: Geometry, kind: ImageKind, pixels: Vec<f32>) -> Result<Self> {
        if geometry.width == 0 || geometry.height == 0 {
            return Err(ImageError::InvalidDimensions {
                width: geometry.width,
                height: geometry.height,
            });
        }
        if pixels.len() != geometry.len() {
            return Err(ImageError::BufferLength {
                width: geometry.width,
                height: geometry.height,
                actual: pixels.len(),
            });
        }
        Ok(Image2D {
            geometry,
            kind,
            pe_axis: None,
            pixels,
        })
    }

    pub fn zeros(geometry: Geometry, kind: ImageKind) -> Self {
        Image2D::filled(geometry, kind, 0.0)
    }

    pub fn filled(geometry: Geometry, kind: ImageKind, value: f32) -> Self {
        assert!(geometry.width > 0 && geometry.height > 0, "empty geometry");
        Image2D {
            geometry,
            kind,
            pe_axis: None,
            pixels: vec![value; geometry.len()],
        }
    }

    /// Builds an image by evaluating `f(row, col)` at every pixel.
    pub fn from_fn(
        geometry: Geometry,
        kind: ImageKind,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Self {
        let mut img = Image2D::zeros(geometry, kind);
        for r in 0..geometry.height {
            for c in 0..geometry.width {
                img.pixels[r * geometry.width + c] = f(r, c);
            }
        }
        img
    }

    pub fn with_pe_axis(mut self, axis: Option<PeAxis>) -> Self {
        self.pe_axis = axis;
        self
    }

    pub fn with_kind(mut self, kind: ImageKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn width(&self) -> usize {
        self.geometry.width
    }

    pub fn height(&self) -> usize {
        self.geometry.height
    }

    pub fn spacing_mm(&self) -> (f64, f64) {
        self.geometry.spacing_mm
    }

    pub fn kind(&self) -> ImageKind {
        self.kind
    }

    pub fn pe_axis(&self) -> Option<PeAxis> {
        self.pe_axis
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.geometry.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.pixels[row * self.geometry.width + col] = value;
    }

    /// Copies PE line `line` out as `f64`.
    pub fn line(&self, axis: PeAxis, line: usize) -> Vec<f64> {
        let (_, n) = self.geometry.lines(axis);
        (0..n)
            .map(|p| self.pixels[self.geometry.line_index(axis, line, p)] as f64)
            .collect()
    }

    pub fn set_line(&mut self, axis: PeAxis, line: usize, values: &[f64]) {
        for (p, &v) in values.iter().enumerate() {
            let idx = self.geometry.line_index(axis, line, p);
            self.pixels[idx] = v as f32;
        }
    }

    /// Same width and height (spacing is not compared).
    pub fn same_shape(&self, other: &Image2D) -> bool {
        self.geometry.width == other.geometry.width && self.geometry.height == other.geometry.height
    }

    pub fn ensure_same_shape(&self, other: &Image2D) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(ImageError::GeometryMismatch(format!(
                "{} image is {}x{}, {} image is {}x{}",
                self.kind,
                self.width(),
                self.height(),
                other.kind,
                other.width(),
                other.height()
            )))
        }
    }

    /// Checks every invariant that must hold before an image is persisted.
    pub fn validate(&self) -> Result<()> {
        let Geometry {
            width,
            height,
            spacing_mm,
        } = self.geometry;
        if width == 0 || height == 0 {
            return Err(ImageError::InvalidDimensions { width, height });
        }
        if self.pixels.len() != width * height {
            return Err(ImageError::BufferLength {
                width,
                height,
                actual: self.pixels.len(),
            });
        }
        let (sr, sc) = spacing_mm;
        if !(sr.is_finite() && sc.is_finite() && sr > 0.0 && sc > 0.0) {
            return Err(ImageError::InvalidSpacing(sr, sc));
        }
        for (index, &value) in self.pixels.iter().enumerate() {
            if !value.is_finite() {
                return Err(ImageError::NonFinite { index });
            }
            match self.kind {
                ImageKind::Adc if value < 0.0 => {
                    return Err(ImageError::NegativeAdc { index, value })
                }
                ImageKind::Mask if value != 0.0 && value != 1.0 => {
                    return Err(ImageError::NonBinaryMask { index, value })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Number of pixels with value 1 (meaningful for masks).
    pub fn count_set(&self) -> usize {
        self.pixels.iter().filter(|&&v| v != 0.0).count()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    width: usize,
    height: usize,
    dtype: String,
    order: String,
    spacing_mm: [f64; 2],
    kind: String,
    pe_axis: Option<String>,
}

fn with_ext(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Sidecar path for an image stem.
pub fn header_path(stem: &Path) -> PathBuf {
    with_ext(stem, "json")
}

/// Payload path for an image stem.
pub fn payload_path(stem: &Path) -> PathBuf {
    with_ext(stem, "bin")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageError + '_ {
    move |source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `img` as `<path>.json` + `<path>.bin`.
pub fn write_image(img: &Image2D, path: &Path) -> Result<()> {
    img.validate()?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && !parent.is_dir() {
            return Err(ImageError::MissingParent(path.to_path_buf()));
        }
    }
    let header = Header {
        width: img.width(),
        height: img.height(),
        dtype: "f32".into(),
        order: "row-major".into(),
        spacing_mm: [img.spacing_mm().0, img.spacing_mm().1],
        kind: img.kind().as_str().into(),
        pe_axis: img.pe_axis().map(|a| a.as_str().to_string()),
    };
    let hp = header_path(path);
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&hp, text + "\n").map_err(io_err(&hp))?;

    let mut bytes = Vec::with_capacity(img.pixels().len() * 4);
    for v in img.pixels() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let bp = payload_path(path);
    fs::write(&bp, bytes).map_err(io_err(&bp))?;
    Ok(())
}

/// Reads and validates an image written by [`write_image`].
pub fn read_image(path: &Path) -> Result<Image2D> {
    let hp = header_path(path);
    let text = fs::read_to_string(&hp).map_err(io_err(&hp))?;
    let header: Header = serde_json::from_str(&text).map_err(|source| ImageError::Json {
        path: hp.clone(),
        source,
    })?;
    if header.dtype != "f32" {
        return Err(ImageError::Unsupported {
            field: "dtype",
            value: header.dtype,
        });
    }
    if header.order != "row-major" {
        return Err(ImageError::Unsupported {
            field: "order",
            value: header.order,
        });
    }
    let kind: ImageKind = header.kind.parse()?;
    let pe_axis = header.pe_axis.as_deref().map(str::parse).transpose()?;
    if header.width == 0 || header.height == 0 {
        return Err(ImageError::InvalidDimensions {
            width: header.width,
            height: header.height,
        });
    }

    let bp = payload_path(path);
    let bytes = fs::read(&bp).map_err(io_err(&bp))?;
    let expected = (header.width * header.height * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(ImageError::LengthMismatch {
            path: bp,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let pixels = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let geometry = Geometry {
        width: header.width,
        height: header.height,
        spacing_mm: (header.spacing_mm[0], header.spacing_mm[1]),
    };
    let img = Image2D::new(geometry, kind, pixels)?.with_pe_axis(pe_axis);
    img.validate()?;
    Ok(img)
}

/// Data split a subject belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!(
                "unknown split `{other}` (expected train, validation or test)"
            )),
        }
    }
}

/// Manifest entry for one paired clean/distorted sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub subject: u32,
    pub slice: u32,
    pub split: Split,
    /// Phase-encoding direction label (`lr`, `rl`, `ap`, `pa`).
    pub pe: String,
    pub seed: u64,
    /// Sample directory relative to the manifest's directory.
    pub dir: String,
    /// Files owned by the sample, relative to `dir`.
    pub files: Vec<String>,
    /// Fraction of distorted b50 intensity splatted outside the grid.
    pub dropped_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub samples: Vec<SampleRecord>,
    pub rng_seed: u64,
    pub epi_params_used: Vec<EpiParams>,
    pub created_by: String,
}

impl DatasetManifest {
    pub fn new(rng_seed: u64) -> Self {
        DatasetManifest {
            version: MANIFEST_VERSION.to_string(),
            samples: Vec::new(),
            rng_seed,
            epi_params_used: Vec::new(),
            created_by: CREATED_BY.to_string(),
        }
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(ImageError::DuplicateSampleId(s.id.clone()));
            }
        }
        Ok(())
    }

    /// Verifies every referenced file exists relative to `base`.
    pub fn check_paths(&self, base: &Path) -> Result<()> {
        for s in &self.samples {
            let dir = base.join(&s.dir);
            for f in &s.files {
                let p = dir.join(f);
                if !p.is_file() {
                    return Err(ImageError::DanglingPath {
                        sample: s.id.clone(),
                        path: p,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn sample_dir(&self, base: &Path, sample: &SampleRecord) -> PathBuf {
        base.join(&sample.dir)
    }
}

/// Directory that manifest-relative paths resolve against.
pub fn manifest_base(path: &Path) -> PathBuf {
    path.parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    m.check_unique_ids()?;
    m.check_paths(&manifest_base(path))?;
    let text = serde_json::to_string_pretty(m).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|source| ImageError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if m.version != MANIFEST_VERSION {
        return Err(ImageError::VersionMismatch {
            found: m.version,
            expected: MANIFEST_VERSION.to_string(),
        });
    }
    m.check_unique_ids()?;
    m.check_paths(&manifest_base(path))?;
    Ok(m)
}
