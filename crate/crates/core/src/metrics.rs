//! Confusion matrices, OA/AA/kappa, classification maps and embedding export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::{HsiCube, LabelMap, PatchBatch};
use crate::error::{PdmlError, Result};
use crate::grad::ParamStore;
use crate::model::EmbeddingModel;
use crate::Scalar;

const EVAL_CHUNK: usize = 256;

/// `K x K` counts, rows = truth, columns = prediction, both 1-based classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Recall per class; `None` for classes absent from the truth.
    pub per_class: Vec<Option<f64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let classes = rows.len();
        Self {
            classes,
            counts: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, truth: u16, predicted: u16) {
        let (t, p) = (truth as usize - 1, predicted as usize - 1);
        self.counts[t * self.classes + p] += 1;
    }

    pub fn get(&self, truth: u16, predicted: u16) -> u64 {
        self.counts[(truth as usize - 1) * self.classes + predicted as usize - 1]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.classes)
            .map(<[u64]>::to_vec)
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, k: usize) -> u64 {
        self.counts[k * self.classes..(k + 1) * self.classes]
            .iter()
            .sum()
    }

    fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes)
            .map(|r| self.counts[r * self.classes + k])
            .sum()
    }

    fn trace(&self) -> u64 {
        (0..self.classes)
            .map(|k| self.counts[k * self.classes + k])
            .sum()
    }

    /// OA, AA (over classes present in the truth) and Cohen's kappa.
    ///
    /// Kappa is evaluated as `(N * trace - S) / (N^2 - S)` with
    /// `S = sum_k row_k * col_k`, all in integers until the final division.
    pub fn metrics(&self) -> Metrics {
        let n = self.total();
        if n == 0 {
            return Metrics {
                oa: 0.0,
                aa: 0.0,
                kappa: 0.0,
                per_class: vec![None; self.classes],
            };
        }
        let trace = self.trace();
        let per_class: Vec<Option<f64>> = (0..self.classes)
            .map(|k| {
                let row = self.row_sum(k);
                (row > 0).then(|| self.counts[k * self.classes + k] as f64 / row as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let aa = present.iter().sum::<f64>() / present.len() as f64;

        let chance: u128 = (0..self.classes)
            .map(|k| self.row_sum(k) as u128 * self.col_sum(k) as u128)
            .sum();
        let n2 = n as u128 * n as u128;
        let kappa = if chance == n2 {
            // all truth and predictions in a single class
            1.0
        } else {
            let num = n as i128 * trace as i128 - chance as i128;
            num as f64 / (n2 - chance) as f64
        };
        Metrics {
            oa: trace as f64 / n as f64,
            aa,
            kappa,
            per_class,
        }
    }
}

/// Predicted class of every coordinate, through the mean path.
pub fn predict_coords<F: Scalar>(
    model: &EmbeddingModel,
    params: &ParamStore<F>,
    cube: &HsiCube,
    coords: &[(usize, usize)],
) -> Result<Vec<u16>> {
    let side = model.config().patch;
    let mut out = Vec::with_capacity(coords.len());
    for chunk in coords.chunks(EVAL_CHUNK) {
        let batch = PatchBatch::<F>::from_coords(cube, None, chunk, side)?;
        out.extend(model.predict_batch(params, &batch)?);
    }
    Ok(out)
}

/// Classifies `coords` and scores them against `labels`.
pub fn evaluate<F: Scalar>(
    model: &EmbeddingModel,
    params: &ParamStore<F>,
    cube: &HsiCube,
    labels: &LabelMap,
    coords: &[(usize, usize)],
) -> Result<(ConfusionMatrix, Metrics)> {
    if coords.is_empty() {
        return Err(PdmlError::Argument(
            "cannot evaluate an empty coordinate set".into(),
        ));
    }
    let predictions = predict_coords(model, params, cube, coords)?;
    let mut cm = ConfusionMatrix::new(labels.classes() as usize);
    for (&(r, c), &p) in coords.iter().zip(&predictions) {
        let truth = labels.get(r, c);
        if truth == 0 {
            return Err(PdmlError::Argument(format!(
                "pixel ({r}, {c}) is unlabeled"
            )));
        }
        cm.add(truth, p);
    }
    let metrics = cm.metrics();
    Ok((cm, metrics))
}

/// Predicted class of every raster pixel, row-major.
pub fn predict_raster<F: Scalar>(
    model: &EmbeddingModel,
    params: &ParamStore<F>,
    cube: &HsiCube,
) -> Result<Vec<u16>> {
    let coords: Vec<_> = (0..cube.height())
        .flat_map(|r| (0..cube.width()).map(move |c| (r, c)))
        .collect();
    predict_coords(model, params, cube, &coords)
}

/// Distinct colors; index 0 is black for unlabeled pixels.
pub fn default_palette(len: usize) -> Vec<[u8; 3]> {
    const BASE: [[u8; 3]; 16] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [220, 190, 255],
        [170, 110, 40],
        [255, 250, 200],
        [128, 0, 0],
    ];
    (0..len)
        .map(|i| {
            if i < BASE.len() {
                BASE[i]
            } else {
                // unique beyond the base table for up to 2^24 entries
                let x = (i as u32).wrapping_mul(2_654_435_761) & 0x00ff_ffff;
                [(x >> 16) as u8, (x >> 8) as u8, x as u8]
            }
        })
        .collect()
}

/// Binary PPM (P6, maxval 255), one pixel per raster cell.
pub fn render_map(
    classes: &[u16],
    height: usize,
    width: usize,
    palette: &[[u8; 3]],
) -> Result<Vec<u8>> {
    if classes.len() != height * width {
        return Err(PdmlError::Render(format!(
            "{} classes for a {height}x{width} map",
            classes.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(classes.len() * 3);
    for &c in classes {
        let color = palette.get(c as usize).ok_or_else(|| {
            PdmlError::Render(format!(
                "class {c} outside a palette of {} colors",
                palette.len()
            ))
        })?;
        out.extend_from_slice(color);
    }
    Ok(out)
}

/// Parses a P6 image written by [`render_map`] into `(width, height, rgb)`.
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(PdmlError::Render("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(PdmlError::Render("not a P6 image with maxval 255".into()));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| PdmlError::Render(format!("bad PPM dimension {s:?}")))
    };
    let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
    let body = bytes
        .get(pos..pos + width * height * 3)
        .ok_or_else(|| PdmlError::Render("truncated PPM payload".into()))?;
    let pixels = body.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok((width, height, pixels))
}

/// CSV with header `label,m0..m{r-1},v0..v{r-1}`: center-pixel mean and std
/// of every coordinate.
pub fn embeddings_csv(
    model: &EmbeddingModel,
    params: &ParamStore<f64>,
    cube: &HsiCube,
    labels: &LabelMap,
    coords: &[(usize, usize)],
) -> Result<String> {
    let cfg = model.config();
    let r = cfg.embed_dim;
    let center = cfg.pixels() / 2;
    let mut out = String::from("label");
    for prefix in ["m", "v"] {
        for i in 0..r {
            write!(out, ",{prefix}{i}").expect("write to string");
        }
    }
    out.push('\n');
    for chunk in coords.chunks(EVAL_CHUNK) {
        let batch = PatchBatch::<f64>::from_coords(cube, Some(labels), chunk, cfg.patch)?;
        let field = model.forward(params, &batch)?;
        for (b, &label) in batch.center_labels.iter().enumerate() {
            write!(out, "{label}").expect("write to string");
            for v in field
                .mean_at(b, center)
                .iter()
                .chain(field.std_at(b, center))
            {
                write!(out, ",{v}").expect("write to string");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn dump_embeddings(
    model: &EmbeddingModel,
    params: &ParamStore<f64>,
    cube: &HsiCube,
    labels: &LabelMap,
    coords: &[(usize, usize)],
    path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(path, embeddings_csv(model, params, cube, labels, coords)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_two_class_matrix() {
        let cm = ConfusionMatrix::from_rows(&[vec![40, 10], vec![20, 30]]);
        let m = cm.metrics();
        assert_eq!(m.oa, 0.70);
        assert_eq!(m.kappa, 0.40);
        assert_eq!(m.aa, 0.70);
        assert_eq!(m.per_class, vec![Some(0.8), Some(0.6)]);
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let perfect = ConfusionMatrix::from_rows(&[vec![5, 0, 0], vec![0, 7, 0], vec![0, 0, 2]]);
        let m = perfect.metrics();
        assert_eq!((m.oa, m.aa, m.kappa), (1.0, 1.0, 1.0));

        let constant = ConfusionMatrix::from_rows(&[vec![50, 0], vec![50, 0]]);
        let m = constant.metrics();
        assert_eq!(m.kappa, 0.0);
        assert_eq!(m.oa, 0.5);

        let single = ConfusionMatrix::from_rows(&[vec![4, 0], vec![0, 0]]);
        let m = single.metrics();
        assert_eq!((m.oa, m.kappa), (1.0, 1.0));
        assert_eq!(m.per_class, vec![Some(1.0), None]);
        assert_eq!(m.aa, 1.0);
    }

    #[test]
    fn independent_predictions_have_zero_kappa() {
        // rows proportional to the same column distribution
        let cm = ConfusionMatrix::from_rows(&[vec![6, 3, 3], vec![4, 2, 2], vec![10, 5, 5]]);
        assert_eq!(cm.metrics().kappa, 0.0);
    }

    proptest! {
        #[test]
        fn relabeling_is_invariant(counts in proptest::collection::vec(0u64..20, 16), shift in 1usize..4) {
            let k = 4;
            let cm = ConfusionMatrix { classes: k, counts: counts.clone() };
            let mut moved = ConfusionMatrix::new(k);
            for t in 0..k {
                for p in 0..k {
                    moved.counts[((t + shift) % k) * k + (p + shift) % k] = counts[t * k + p];
                }
            }
            let (a, b) = (cm.metrics(), moved.metrics());
            prop_assert_eq!(a.oa, b.oa);
            prop_assert!((a.aa - b.aa).abs() < 1e-12);
            prop_assert_eq!(a.kappa, b.kappa);
        }

        #[test]
        fn kappa_is_one_iff_diagonal(diag in proptest::collection::vec(0u64..9, 3), off in 0u64..3) {
            let mut cm = ConfusionMatrix::new(3);
            for (k, &d) in diag.iter().enumerate() {
                cm.counts[k * 3 + k] = d;
            }
            cm.counts[1] = off;
            if cm.total() > 0 {
                let diagonal = off == 0;
                prop_assert_eq!(cm.metrics().kappa == 1.0, diagonal);
            }
        }
    }

    #[test]
    fn render_single_pixel_and_round_trip() {
        let palette = default_palette(5);
        let bytes = render_map(&[0], 1, 1, &palette).unwrap();
        assert_eq!(bytes, b"P6\n1 1\n255\n\0\0\0");

        let classes: Vec<u16> = (0..12).map(|i| (i * 7 % 5) as u16).collect();
        let ppm = render_map(&classes, 3, 4, &palette).unwrap();
        let (w, h, px) = parse_ppm(&ppm).unwrap();
        assert_eq!((w, h), (4, 3));
        let back: Vec<u16> = px
            .iter()
            .map(|c| palette.iter().position(|p| p == c).unwrap() as u16)
            .collect();
        assert_eq!(back, classes);

        assert!(matches!(
            render_map(&[5], 1, 1, &palette),
            Err(PdmlError::Render(_))
        ));
    }

    #[test]
    fn palette_colors_are_distinct() {
        let p = default_palette(300);
        let set: std::collections::HashSet<_> = p.iter().collect();
        assert_eq!(set.len(), 300);
    }
}
