//! Patch extraction and epoch batching.

use rand::seq::SliceRandom;

use super::cube::{HsiCube, LabelMap};
use crate::error::{PdmlError, Result};
use crate::rng::rng_from_seed;
use crate::Scalar;

/// A batch of `s x s x d` patches around labeled center pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch<F> {
    /// `B * s * s * d` values, patch-major then row, column, band.
    pub patches: Vec<F>,
    /// 1-based center class ids.
    pub center_labels: Vec<u16>,
    pub coords: Vec<(usize, usize)>,
    pub side: usize,
    pub bands: usize,
}

impl<F: Scalar> PatchBatch<F> {
    pub fn len(&self) -> usize {
        self.center_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center_labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    pub fn patch(&self, i: usize) -> &[F] {
        let n = self.pixels() * self.bands;
        &self.patches[i * n..(i + 1) * n]
    }

    /// Builds a batch from explicit coordinates. Labels are read from
    /// `labels` when given, otherwise 0 is stored.
    pub fn from_coords(
        cube: &HsiCube,
        labels: Option<&LabelMap>,
        coords: &[(usize, usize)],
        side: usize,
    ) -> Result<Self> {
        let mut patches = Vec::with_capacity(coords.len() * side * side * cube.bands());
        let mut center_labels = Vec::with_capacity(coords.len());
        for &(row, col) in coords {
            patches.extend(extract_patch(cube, row, col, side)?.into_iter().map(F::lit));
            center_labels.push(labels.map_or(0, |l| l.get(row, col)));
        }
        Ok(Self {
            patches,
            center_labels,
            coords: coords.to_vec(),
            side,
            bands: cube.bands(),
        })
    }
}

/// Reflects an index into `0..len` without repeating the edge sample.
fn mirror(index: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = index.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// The `s x s x d` window centered at `(row, col)`, mirror-padded at the borders.
pub fn extract_patch(cube: &HsiCube, row: usize, col: usize, side: usize) -> Result<Vec<f64>> {
    if side.is_multiple_of(2) {
        return Err(PdmlError::Argument(format!(
            "patch side must be odd, got {side}"
        )));
    }
    if row >= cube.height() || col >= cube.width() {
        return Err(PdmlError::Argument(format!(
            "pixel ({row}, {col}) outside {}x{} cube",
            cube.height(),
            cube.width()
        )));
    }
    let half = (side / 2) as isize;
    let mut out = Vec::with_capacity(side * side * cube.bands());
    for dy in -half..=half {
        let r = mirror(row as isize + dy, cube.height());
        for dx in -half..=half {
            let c = mirror(col as isize + dx, cube.width());
            out.extend_from_slice(cube.spectrum(r, c));
        }
    }
    Ok(out)
}

/// Shuffles `coords` with seed `seed ^ epoch` and cuts them into batches of
/// `batch_size`; the final short batch is kept.
pub fn make_batches<F: Scalar>(
    coords: &[(usize, usize)],
    cube: &HsiCube,
    labels: &LabelMap,
    side: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<PatchBatch<F>>> {
    if coords.is_empty() {
        return Err(PdmlError::Batch(
            "cannot batch an empty coordinate set".into(),
        ));
    }
    if batch_size == 0 {
        return Err(PdmlError::Argument("batch size must be positive".into()));
    }
    let order = epoch_order(coords, seed, epoch);
    order
        .chunks(batch_size)
        .map(|chunk| PatchBatch::from_coords(cube, Some(labels), chunk, side))
        .collect()
}

/// The coordinate permutation used for `epoch`.
pub fn epoch_order(coords: &[(usize, usize)], seed: u64, epoch: u64) -> Vec<(usize, usize)> {
    let mut order = coords.to_vec();
    order.shuffle(&mut rng_from_seed(seed ^ epoch));
    order
}
