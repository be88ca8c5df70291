//! Hyperspectral cubes, label maps and their binary file formats.
//!
//! `HSC1`: magic, then `height`, `width`, `bands` as u32 LE, then
//! `height * width * bands` f32 LE values, pixel-major and band-interleaved.
//!
//! `HSL1`: magic, then `height`, `width`, `classes` as u32 LE, then
//! `height * width` u16 LE labels where 0 means unlabeled.

use std::fs;
use std::path::Path;

use crate::error::{PdmlError, Result};

const CUBE_MAGIC: &[u8; 4] = b"HSC1";
const LABEL_MAGIC: &[u8; 4] = b"HSL1";
const HEADER_LEN: usize = 16;

/// A `height x width x bands` spectral raster.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
    standardized: bool,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(PdmlError::Argument(format!(
                "cube dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        if data.len() != height * width * bands {
            return Err(PdmlError::Argument(format!(
                "cube of {height}x{width}x{bands} needs {} values, got {}",
                height * width * bands,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(PdmlError::Argument(format!(
                "non-finite cube value at index {i}"
            )));
        }
        Ok(Self {
            height,
            width,
            bands,
            data,
            standardized: false,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    /// Spectrum of the pixel at `(row, col)`.
    pub fn spectrum(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.bands;
        &self.data[start..start + self.bands]
    }

    /// Z-scores every band with its population mean and standard deviation
    /// over all pixels of the cube.
    pub fn standardize(&self) -> Result<HsiCube> {
        if self.standardized {
            return Err(PdmlError::Argument("cube is already standardized".into()));
        }
        let (mean, std) = self.band_stats();
        if let Some(band) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(PdmlError::ZeroVariance { band });
        }
        let bands = self.bands;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let b = i % bands;
                (x - mean[b]) / std[b]
            })
            .collect();
        Ok(HsiCube {
            data,
            standardized: true,
            ..*self
        })
    }

    /// Per-band population mean and standard deviation.
    pub fn band_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let n = (self.height * self.width) as f64;
        let mut mean = vec![0.0; self.bands];
        for px in self.data.chunks_exact(self.bands) {
            for (m, &x) in mean.iter_mut().zip(px) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; self.bands];
        for px in self.data.chunks_exact(self.bands) {
            for ((v, &x), &m) in var.iter_mut().zip(px).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        (mean, std)
    }

    /// Serializes to the `HSC1` layout. Values are narrowed to f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(CUBE_MAGIC);
        for dim in [self.height, self.width, self.bands] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<HsiCube> {
        let [height, width, bands] = read_header(bytes, CUBE_MAGIC)?;
        let count = height * width * bands;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < count * 4 {
            return Err(PdmlError::ingest(
                (HEADER_LEN + payload.len() / 4 * 4) as u64,
                format!(
                    "truncated payload: expected {count} f32 values, found {}",
                    payload.len() / 4
                ),
            ));
        }
        let mut data = Vec::with_capacity(count);
        for (i, chunk) in payload[..count * 4].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            if !v.is_finite() {
                return Err(PdmlError::ingest(
                    (HEADER_LEN + i * 4) as u64,
                    format!("non-finite value {v}"),
                ));
            }
            data.push(v as f64);
        }
        HsiCube::new(height, width, bands, data).map_err(|e| PdmlError::ingest(0, e.to_string()))
    }
}

/// Per-pixel class ids; 0 is unlabeled, classes are `1..=classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: u16,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: u16, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(PdmlError::Argument(format!(
                "label map of {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > classes) {
            return Err(PdmlError::Argument(format!(
                "label {bad} exceeds class count {classes}"
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> u16 {
        self.classes
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Coordinates of every labeled pixel in raster order.
    pub fn labeled_coords(&self) -> Vec<(usize, usize)> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > 0)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    pub fn matches(&self, cube: &HsiCube) -> bool {
        self.height == cube.height() && self.width == cube.width()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.labels.len() * 2);
        out.extend_from_slice(LABEL_MAGIC);
        for dim in [self.height, self.width, self.classes as usize] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<LabelMap> {
        let [height, width, classes] = read_header(bytes, LABEL_MAGIC)?;
        let classes = u16::try_from(classes)
            .map_err(|_| PdmlError::ingest(12, format!("class count {classes} exceeds u16")))?;
        let count = height * width;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < count * 2 {
            return Err(PdmlError::ingest(
                (HEADER_LEN + payload.len() / 2 * 2) as u64,
                format!(
                    "truncated payload: expected {count} labels, found {}",
                    payload.len() / 2
                ),
            ));
        }
        let mut labels = Vec::with_capacity(count);
        for (i, chunk) in payload[..count * 2].chunks_exact(2).enumerate() {
            let l = u16::from_le_bytes([chunk[0], chunk[1]]);
            if l > classes {
                return Err(PdmlError::ingest(
                    (HEADER_LEN + i * 2) as u64,
                    format!("label {l} exceeds class count {classes}"),
                ));
            }
            labels.push(l);
        }
        LabelMap::new(height, width, classes, labels)
    }
}

fn read_header(bytes: &[u8], magic: &[u8; 4]) -> Result<[usize; 3]> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(PdmlError::ingest(
            0,
            format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    if bytes.len() < HEADER_LEN {
        return Err(PdmlError::ingest(bytes.len() as u64, "truncated header"));
    }
    let field = |i: usize| {
        let at = 4 + 4 * i;
        u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
    };
    Ok([field(0), field(1), field(2)])
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    HsiCube::from_bytes(&fs::read(path)?)
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, cube.to_bytes())?;
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    LabelMap::from_bytes(&fs::read(path)?)
}

pub fn save_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, labels.to_bytes())?;
    Ok(())
}
