//! Synthetic cubes with known ground truth and mixed pixels along tile borders.
//!
//! The raster is tiled into a `grid_rows x grid_cols` checker of class regions.
//! Pixel centers sit on integer coordinates, so a tile border that falls on an
//! integer row passes through pixel centers. Each pixel sees a square footprint
//! of half-width `mixing` and its spectrum is the area-weighted mixture of the
//! class signatures under that footprint, plus white noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cube::{HsiCube, LabelMap};
use crate::error::{PdmlError, Result};
use crate::rng::{rng_from_seed, standard_normal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: u16,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub seed: u64,
    /// Standard deviation of the additive white noise.
    pub noise: f64,
    /// Half-width of the mixing footprint, in pixels.
    pub mixing: f64,
}

impl SynthSpec {
    /// A spec with a square grid of `2 * ceil(sqrt(classes))` tiles per side.
    pub fn new(classes: u16, height: usize, width: usize, bands: usize, seed: u64) -> Self {
        let side = 2 * (classes as f64).sqrt().ceil() as usize;
        Self {
            classes,
            height,
            width,
            bands,
            grid_rows: side,
            grid_cols: side,
            seed,
            noise: 0.05,
            mixing: 1.0,
        }
    }

    fn tile_size(&self) -> (f64, f64) {
        (
            self.height as f64 / self.grid_rows as f64,
            self.width as f64 / self.grid_cols as f64,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(PdmlError::Argument(
                "synthetic cube needs at least 2 classes".into(),
            ));
        }
        if self.bands < 4 {
            return Err(PdmlError::Argument(
                "synthetic cube needs at least 4 bands".into(),
            ));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(PdmlError::Argument(
                "grid must have at least one tile".into(),
            ));
        }
        if self.grid_rows * self.grid_cols < self.classes as usize {
            return Err(PdmlError::Argument(format!(
                "{}x{} grid cannot hold {} classes",
                self.grid_rows, self.grid_cols, self.classes
            )));
        }
        if self.grid_rows > self.height || self.grid_cols > self.width {
            return Err(PdmlError::Argument("grid finer than the raster".into()));
        }
        if !(self.noise >= 0.0) || !(self.mixing >= 0.0) {
            return Err(PdmlError::Argument(
                "noise and mixing must be non-negative".into(),
            ));
        }
        let (th, tw) = self.tile_size();
        if self.mixing >= th.min(tw) / 2.0 {
            return Err(PdmlError::Argument(format!(
                "mixing width {} must be below half the tile size {}",
                self.mixing,
                th.min(tw) / 2.0
            )));
        }
        Ok(())
    }

    /// Class of tile `(r, c)`: horizontal neighbours differ by one and vertical
    /// neighbours by `max(1, K / 2)`, modulo `K`, so adjacent tiles never share a class.
    pub fn tile_class(&self, r: usize, c: usize) -> u16 {
        let k = self.classes as usize;
        let shift = (k / 2).max(1);
        ((r * shift + c) % k) as u16 + 1
    }
}

/// Random smooth spectral signature: a baseline plus three Gaussian bumps.
fn signature(rng: &mut impl Rng, bands: usize) -> Vec<f64> {
    let base = rng.random_range(0.1..0.3);
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.2..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.25),
            )
        })
        .collect();
    (0..bands)
        .map(|b| {
            let t = b as f64 / (bands - 1) as f64;
            base + bumps
                .iter()
                .map(|&(amp, mu, w)| amp * (-(t - mu).powi(2) / (2.0 * w * w)).exp())
                .sum::<f64>()
        })
        .collect()
}

/// Length of `[a, b] ∩ [lo, hi)`.
fn overlap(a: f64, b: f64, lo: f64, hi: f64) -> f64 {
    (b.min(hi) - a.max(lo)).max(0.0)
}

/// Per-class mixing weights of pixel `(row, col)` and its nominal class.
pub fn mixture_weights(spec: &SynthSpec, row: usize, col: usize) -> (Vec<f64>, u16) {
    let (th, tw) = spec.tile_size();
    let tile_r = ((row as f64 / th).floor() as usize).min(spec.grid_rows - 1);
    let tile_c = ((col as f64 / tw).floor() as usize).min(spec.grid_cols - 1);
    let nominal = spec.tile_class(tile_r, tile_c);
    let mut weights = vec![0.0; spec.classes as usize];
    if spec.mixing == 0.0 {
        weights[nominal as usize - 1] = 1.0;
        return (weights, nominal);
    }
    let w = spec.mixing;
    let (y, x) = (row as f64, col as f64);
    let bounds = |i: usize, n: usize, size: f64| {
        let lo = if i == 0 {
            f64::NEG_INFINITY
        } else {
            i as f64 * size
        };
        let hi = if i + 1 == n {
            f64::INFINITY
        } else {
            (i + 1) as f64 * size
        };
        (lo, hi)
    };
    let area = (2.0 * w) * (2.0 * w);
    for r in 0..spec.grid_rows {
        let (lo, hi) = bounds(r, spec.grid_rows, th);
        let oy = overlap(y - w, y + w, lo, hi);
        if oy == 0.0 {
            continue;
        }
        for c in 0..spec.grid_cols {
            let (lo, hi) = bounds(c, spec.grid_cols, tw);
            let ox = overlap(x - w, x + w, lo, hi);
            weights[spec.tile_class(r, c) as usize - 1] += oy * ox / area;
        }
    }
    (weights, nominal)
}

/// Generates the cube and its dominant-class label map.
#[allow(clippy::needless_range_loop)]
pub fn synth_cube(spec: &SynthSpec) -> Result<(HsiCube, LabelMap)> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let signatures: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| signature(&mut rng, spec.bands))
        .collect();

    let mut data = Vec::with_capacity(spec.height * spec.width * spec.bands);
    let mut labels = Vec::with_capacity(spec.height * spec.width);
    for row in 0..spec.height {
        for col in 0..spec.width {
            let (weights, nominal) = mixture_weights(spec, row, col);
            let best = weights.iter().cloned().fold(f64::MIN, f64::max);
            let label = if weights[nominal as usize - 1] == best {
                nominal
            } else {
                weights.iter().position(|&w| w == best).unwrap() as u16 + 1
            };
            labels.push(label);
            for b in 0..spec.bands {
                let mut v = 0.0;
                for (k, &wk) in weights.iter().enumerate() {
                    if wk > 0.0 {
                        v += wk * signatures[k][b];
                    }
                }
                if spec.noise > 0.0 {
                    v += spec.noise * standard_normal(&mut rng);
                }
                data.push(v);
            }
        }
    }
    let cube = HsiCube::new(spec.height, spec.width, spec.bands, data)?;
    let labels = LabelMap::new(spec.height, spec.width, spec.classes, labels)?;
    Ok((cube, labels))
}

/// Pixels with a differently labeled pixel within Chebyshev `radius`.
pub fn boundary_mask(labels: &LabelMap, radius: usize) -> Vec<bool> {
    let (h, w) = (labels.height(), labels.width());
    let mut mask = vec![false; h * w];
    for row in 0..h {
        for col in 0..w {
            let own = labels.get(row, col);
            'scan: for r in row.saturating_sub(radius)..(row + radius + 1).min(h) {
                for c in col.saturating_sub(radius)..(col + radius + 1).min(w) {
                    if labels.get(r, c) != own {
                        mask[row * w + col] = true;
                        break 'scan;
                    }
                }
            }
        }
    }
    mask
}
