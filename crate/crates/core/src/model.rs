//! Patch embedding network.
//!
//! Backbone: 1x1 spectral convolution `d -> c1`, ReLU, 3x3 zero-padded spatial
//! convolution `c1 -> c2`, ReLU. The spatial size is preserved, so every patch
//! pixel gets its own embedding. Two 1x1 heads map the features to a mean and a
//! standard deviation per pixel (`softplus + 1e-6` keeps the latter positive);
//! a 1x1 classifier over the mean matrix is read at the center pixel.
//!
//! Gradients are hand-derived; see [`EmbeddingModel::backward`].

use serde::{Deserialize, Serialize};

use crate::data::PatchBatch;
use crate::error::{PdmlError, Result};
use crate::grad::{Gradients, ParamStore, Tag, Tensor};
use crate::rng::{rng_from_seed, standard_normal};
use crate::scalar::{sigmoid, softplus};
use crate::Scalar;

/// Positive floor added to every standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

pub const SPECTRAL_W: usize = 0;
pub const SPECTRAL_B: usize = 1;
pub const SPATIAL_W: usize = 2;
pub const SPATIAL_B: usize = 3;
pub const MEAN_W: usize = 4;
pub const MEAN_B: usize = 5;
pub const VAR_W: usize = 6;
pub const VAR_B: usize = 7;
pub const CLASS_W: usize = 8;
pub const CLASS_B: usize = 9;
pub const LOG_A: usize = 10;
pub const MATCH_B: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub bands: usize,
    pub c1: usize,
    pub c2: usize,
    pub embed_dim: usize,
    pub classes: usize,
    pub patch: usize,
}

impl BackboneConfig {
    /// Default widths `c1 = c2 = 24`, `r = 16`.
    pub fn new(bands: usize, classes: usize, patch: usize) -> Self {
        Self {
            bands,
            c1: 24,
            c2: 24,
            embed_dim: 16,
            classes,
            patch,
        }
    }

    pub fn pixels(&self) -> usize {
        self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let Self {
            bands,
            c1,
            c2,
            embed_dim,
            classes,
            patch,
        } = *self;
        if bands == 0 || c1 == 0 || c2 == 0 || classes == 0 || patch == 0 {
            return Err(PdmlError::Config(format!(
                "all widths must be positive: {self:?}"
            )));
        }
        if embed_dim < 2 {
            return Err(PdmlError::Config(
                "embedding dimension must be at least 2".into(),
            ));
        }
        if patch % 2 == 0 {
            return Err(PdmlError::Config(format!(
                "patch side must be odd, got {patch}"
            )));
        }
        Ok(())
    }
}

/// Per-pixel Gaussian embeddings of a batch: `mean` and `std` are `B x T x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField<F> {
    pub mean: Tensor<F>,
    pub std: Tensor<F>,
}

impl<F: Scalar> GaussianField<F> {
    pub fn batch(&self) -> usize {
        self.mean.shape()[0]
    }

    pub fn pixels(&self) -> usize {
        self.mean.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.mean.shape()[2]
    }

    /// Mean vector of pixel `p` in patch `b`.
    pub fn mean_at(&self, b: usize, p: usize) -> &[F] {
        let r = self.dim();
        let at = (b * self.pixels() + p) * r;
        &self.mean.data()[at..at + r]
    }

    pub fn std_at(&self, b: usize, p: usize) -> &[F] {
        let r = self.dim();
        let at = (b * self.pixels() + p) * r;
        &self.std.data()[at..at + r]
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<F> {
    pub field: GaussianField<F>,
    h1: Vec<F>,
    h2: Vec<F>,
    var_pre: Vec<F>,
}

impl<F: Scalar> ForwardPass<F> {
    /// Open/closed state of every ReLU unit, in layer order.
    pub fn relu_gates(&self) -> impl Iterator<Item = bool> + '_ {
        self.h1.iter().chain(&self.h2).map(|&h| h > F::zero())
    }
}

/// Upstream gradients with respect to the model outputs. `None` means zero.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads<F> {
    /// `B x T x r`
    pub mean: Option<Vec<F>>,
    /// `B x T x r`
    pub std: Option<Vec<F>>,
    /// `B x K`
    pub logits: Option<Vec<F>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingModel {
    cfg: BackboneConfig,
}

impl EmbeddingModel {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    fn shapes(&self) -> [(&'static str, Tag, Vec<usize>); 12] {
        let BackboneConfig {
            bands: d,
            c1,
            c2,
            embed_dim: r,
            classes: k,
            ..
        } = self.cfg;
        [
            ("backbone.spectral.weight", Tag::Backbone, vec![c1, d]),
            ("backbone.spectral.bias", Tag::Backbone, vec![c1]),
            ("backbone.spatial.weight", Tag::Backbone, vec![c2, c1, 3, 3]),
            ("backbone.spatial.bias", Tag::Backbone, vec![c2]),
            ("mean_head.weight", Tag::MeanHead, vec![r, c2]),
            ("mean_head.bias", Tag::MeanHead, vec![r]),
            ("var_head.weight", Tag::VarHead, vec![r, c2]),
            ("var_head.bias", Tag::VarHead, vec![r]),
            ("classifier.weight", Tag::Classifier, vec![k, r]),
            ("classifier.bias", Tag::Classifier, vec![k]),
            ("metric.log_a", Tag::MetricScalars, vec![]),
            ("metric.b", Tag::MetricScalars, vec![]),
        ]
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases, `a = 1`, `b = 0`.
    pub fn init_params<F: Scalar>(&self, seed: u64) -> ParamStore<F> {
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        for (name, tag, shape) in self.shapes() {
            let mut t = Tensor::zeros(&shape);
            if shape.len() >= 2 {
                let fan_in: usize = shape[1..].iter().product();
                let scale = (2.0 / fan_in as f64).sqrt();
                for x in t.data_mut() {
                    *x = F::lit(scale * standard_normal(&mut rng));
                }
            }
            store
                .insert(name, tag, t)
                .expect("fixed parameter names are unique");
        }
        store
    }

    /// A zero-initialized store with the right layout.
    pub fn zero_params<F: Scalar>(&self) -> ParamStore<F> {
        let mut store = ParamStore::new();
        for (name, tag, shape) in self.shapes() {
            store
                .insert(name, tag, Tensor::zeros(&shape))
                .expect("fixed parameter names are unique");
        }
        store
    }

    /// Verifies names, tags and shapes of a store against this configuration.
    pub fn check_params<F: Scalar>(&self, params: &ParamStore<F>) -> Result<()> {
        let expected = self.shapes();
        if params.len() != expected.len() {
            return Err(PdmlError::Config(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (e, (name, tag, shape)) in params.entries().iter().zip(expected) {
            if e.name != name || e.tag != tag || e.value.shape() != shape.as_slice() {
                return Err(PdmlError::Config(format!(
                    "parameter {} ({}, {:?}) does not match expected {name} ({tag}, {shape:?})",
                    e.name,
                    e.tag,
                    e.value.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_batch<F: Scalar>(&self, batch: &PatchBatch<F>) -> Result<()> {
        if batch.side != self.cfg.patch || batch.bands != self.cfg.bands {
            return Err(PdmlError::Config(format!(
                "batch of {}x{}x{} patches does not fit a model for {}x{}x{}",
                batch.side, batch.side, batch.bands, self.cfg.patch, self.cfg.patch, self.cfg.bands
            )));
        }
        if batch.patches.len() != batch.len() * self.cfg.pixels() * self.cfg.bands {
            return Err(PdmlError::Config(
                "batch payload has the wrong length".into(),
            ));
        }
        Ok(())
    }

    /// Backbone features `(h1, h2)` after each ReLU.
    fn backbone<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        batch: &PatchBatch<F>,
    ) -> (Vec<F>, Vec<F>) {
        let BackboneConfig {
            bands: d,
            c1,
            c2,
            patch: s,
            ..
        } = self.cfg;
        let t = s * s;
        let n = batch.len() * t;
        let w1 = params.value(SPECTRAL_W);
        let b1 = params.value(SPECTRAL_B);
        let w2 = params.value(SPATIAL_W);
        let b2 = params.value(SPATIAL_B);

        let mut h1 = vec![F::zero(); n * c1];
        for (px, out) in batch.patches.chunks_exact(d).zip(h1.chunks_exact_mut(c1)) {
            for (o, slot) in out.iter_mut().enumerate() {
                let w = &w1[o * d..(o + 1) * d];
                let mut acc = b1[o];
                for (wi, xi) in w.iter().zip(px) {
                    acc += *wi * *xi;
                }
                *slot = acc.max(F::zero());
            }
        }

        let mut h2 = vec![F::zero(); n * c2];
        for b in 0..batch.len() {
            for py in 0..s {
                for px in 0..s {
                    let out = &mut h2[((b * t) + py * s + px) * c2..][..c2];
                    out.copy_from_slice(b2);
                    for ky in 0..3 {
                        let qy = py as isize + ky as isize - 1;
                        if qy < 0 || qy >= s as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let qx = px as isize + kx as isize - 1;
                            if qx < 0 || qx >= s as isize {
                                continue;
                            }
                            let q = b * t + qy as usize * s + qx as usize;
                            let src = &h1[q * c1..(q + 1) * c1];
                            let tap = ky * 3 + kx;
                            for (o, slot) in out.iter_mut().enumerate() {
                                let w = &w2[o * c1 * 9..];
                                let mut acc = F::zero();
                                for (i, &hi) in src.iter().enumerate() {
                                    acc += w[i * 9 + tap] * hi;
                                }
                                *slot += acc;
                            }
                        }
                    }
                    out.iter_mut().for_each(|v| *v = v.max(F::zero()));
                }
            }
        }
        (h1, h2)
    }

    /// 1x1 head `weight (r x c2)` applied to every feature row.
    fn head<F: Scalar>(features: &[F], c2: usize, weight: &[F], bias: &[F]) -> Vec<F> {
        let r = bias.len();
        let mut out = Vec::with_capacity(features.len() / c2 * r);
        for row in features.chunks_exact(c2) {
            for k in 0..r {
                let w = &weight[k * c2..(k + 1) * c2];
                let mut acc = bias[k];
                for (wi, hi) in w.iter().zip(row) {
                    acc += *wi * *hi;
                }
                out.push(acc);
            }
        }
        out
    }

    /// Full forward pass, keeping activations for [`EmbeddingModel::backward`].
    pub fn forward_pass<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        batch: &PatchBatch<F>,
    ) -> Result<ForwardPass<F>> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let (h1, h2) = self.backbone(params, batch);
        let c2 = self.cfg.c2;
        let mean = Self::head(&h2, c2, params.value(MEAN_W), params.value(MEAN_B));
        let var_pre = Self::head(&h2, c2, params.value(VAR_W), params.value(VAR_B));
        let floor = F::lit(STD_FLOOR);
        let std = var_pre.iter().map(|&x| softplus(x) + floor).collect();
        let shape = [batch.len(), self.cfg.pixels(), self.cfg.embed_dim];
        Ok(ForwardPass {
            field: GaussianField {
                mean: Tensor::from_vec(&shape, mean)?,
                std: Tensor::from_vec(&shape, std)?,
            },
            h1,
            h2,
            var_pre,
        })
    }

    pub fn forward<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        batch: &PatchBatch<F>,
    ) -> Result<GaussianField<F>> {
        Ok(self.forward_pass(params, batch)?.field)
    }

    /// Mean matrix only; the variance head is never evaluated.
    pub fn forward_mean<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        batch: &PatchBatch<F>,
    ) -> Result<Tensor<F>> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let (_, h2) = self.backbone(params, batch);
        let mean = Self::head(&h2, self.cfg.c2, params.value(MEAN_W), params.value(MEAN_B));
        Tensor::from_vec(&[batch.len(), self.cfg.pixels(), self.cfg.embed_dim], mean)
    }

    /// Classifier logits `B x K` read at the center pixel of each mean matrix.
    pub fn classify_logits<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        mean: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        let (t, r, k) = (self.cfg.pixels(), self.cfg.embed_dim, self.cfg.classes);
        if mean.shape().len() != 3 || mean.shape()[1] != t || mean.shape()[2] != r {
            return Err(PdmlError::Config(format!(
                "mean matrix of shape {:?} does not match (B, {t}, {r})",
                mean.shape()
            )));
        }
        let batch = mean.shape()[0];
        let center = t / 2;
        let w = params.value(CLASS_W);
        let bias = params.value(CLASS_B);
        let mut logits = Vec::with_capacity(batch * k);
        for b in 0..batch {
            let m = &mean.data()[(b * t + center) * r..][..r];
            for c in 0..k {
                let mut acc = bias[c];
                for (wi, mi) in w[c * r..(c + 1) * r].iter().zip(m) {
                    acc += *wi * *mi;
                }
                logits.push(acc);
            }
        }
        Tensor::from_vec(&[batch, k], logits)
    }

    /// Predicted 1-based class of every patch, through the mean path only.
    pub fn predict_batch<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        batch: &PatchBatch<F>,
    ) -> Result<Vec<u16>> {
        let mean = self.forward_mean(params, batch)?;
        let logits = self.classify_logits(params, &mean)?;
        Ok(logits
            .data()
            .chunks_exact(self.cfg.classes)
            .map(argmax_class)
            .collect())
    }

    /// Predicted class of a single `s x s x d` patch.
    pub fn predict<F: Scalar>(&self, params: &ParamStore<F>, patch: &[F]) -> Result<u16> {
        let batch = PatchBatch {
            patches: patch.to_vec(),
            center_labels: vec![0],
            coords: vec![(0, 0)],
            side: self.cfg.patch,
            bands: self.cfg.bands,
        };
        Ok(self.predict_batch(params, &batch)?[0])
    }

    /// Accumulates parameter gradients given upstream gradients of the outputs.
    pub fn backward<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        batch: &PatchBatch<F>,
        pass: &ForwardPass<F>,
        upstream: &OutputGrads<F>,
        grads: &mut Gradients<F>,
    ) {
        let BackboneConfig {
            bands: d,
            c1,
            c2,
            embed_dim: r,
            classes: k,
            patch: s,
        } = self.cfg;
        let t = s * s;
        let nb = batch.len();
        let n = nb * t;
        let mean = pass.field.mean.data();

        // Gradient reaching the mean matrix, including the classifier path.
        let mut d_mean: Option<Vec<F>> = upstream.mean.clone();
        if let Some(d_logits) = &upstream.logits {
            let w = params.value(CLASS_W);
            let center = t / 2;
            let dm = d_mean.get_or_insert_with(|| vec![F::zero(); n * r]);
            for b in 0..nb {
                let m_at = (b * t + center) * r;
                for c in 0..k {
                    let g = d_logits[b * k + c];
                    if g == F::zero() {
                        continue;
                    }
                    grads.get_mut(CLASS_B)[c] += g;
                    let gw = &mut grads.get_mut(CLASS_W)[c * r..(c + 1) * r];
                    for (gi, mi) in gw.iter_mut().zip(&mean[m_at..m_at + r]) {
                        *gi += g * *mi;
                    }
                    for (dmi, wi) in dm[m_at..m_at + r].iter_mut().zip(&w[c * r..(c + 1) * r]) {
                        *dmi += g * *wi;
                    }
                }
            }
        }

        let d_var_pre: Option<Vec<F>> = upstream.std.as_ref().map(|ds| {
            ds.iter()
                .zip(&pass.var_pre)
                .map(|(&g, &x)| g * sigmoid(x))
                .collect()
        });

        if d_mean.is_none() && d_var_pre.is_none() {
            return;
        }

        let mut dh2 = vec![F::zero(); n * c2];
        for (dy, w_id, b_id) in [(&d_mean, MEAN_W, MEAN_B), (&d_var_pre, VAR_W, VAR_B)] {
            let Some(dy) = dy else { continue };
            let w = params.value(w_id).to_vec();
            for p in 0..n {
                let h = &pass.h2[p * c2..(p + 1) * c2];
                let g_out = &dy[p * r..(p + 1) * r];
                let dh = &mut dh2[p * c2..(p + 1) * c2];
                for (j, &g) in g_out.iter().enumerate() {
                    if g == F::zero() {
                        continue;
                    }
                    grads.get_mut(b_id)[j] += g;
                    let gw = &mut grads.get_mut(w_id)[j * c2..(j + 1) * c2];
                    for (gi, hi) in gw.iter_mut().zip(h) {
                        *gi += g * *hi;
                    }
                    for (dhi, wi) in dh.iter_mut().zip(&w[j * c2..(j + 1) * c2]) {
                        *dhi += g * *wi;
                    }
                }
            }
        }
        for (g, &h) in dh2.iter_mut().zip(&pass.h2) {
            if h <= F::zero() {
                *g = F::zero();
            }
        }

        // spatial 3x3 convolution
        let w2 = params.value(SPATIAL_W);
        let mut dh1 = vec![F::zero(); n * c1];
        for b in 0..nb {
            for py in 0..s {
                for px in 0..s {
                    let p = b * t + py * s + px;
                    let g_out = &dh2[p * c2..(p + 1) * c2];
                    for (o, &g) in g_out.iter().enumerate() {
                        if g != F::zero() {
                            grads.get_mut(SPATIAL_B)[o] += g;
                        }
                    }
                    for ky in 0..3 {
                        let qy = py as isize + ky as isize - 1;
                        if qy < 0 || qy >= s as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let qx = px as isize + kx as isize - 1;
                            if qx < 0 || qx >= s as isize {
                                continue;
                            }
                            let q = b * t + qy as usize * s + qx as usize;
                            let tap = ky * 3 + kx;
                            let h = &pass.h1[q * c1..(q + 1) * c1];
                            for (o, &g) in g_out.iter().enumerate() {
                                if g == F::zero() {
                                    continue;
                                }
                                let base = o * c1 * 9;
                                let gw = grads.get_mut(SPATIAL_W);
                                for (i, &hi) in h.iter().enumerate() {
                                    gw[base + i * 9 + tap] += g * hi;
                                }
                                let dq = &mut dh1[q * c1..(q + 1) * c1];
                                for (i, dqi) in dq.iter_mut().enumerate() {
                                    *dqi += g * w2[base + i * 9 + tap];
                                }
                            }
                        }
                    }
                }
            }
        }
        for (g, &h) in dh1.iter_mut().zip(&pass.h1) {
            if h <= F::zero() {
                *g = F::zero();
            }
        }

        // spectral 1x1 convolution
        for (p, x) in batch.patches.chunks_exact(d).enumerate() {
            let g_out = &dh1[p * c1..(p + 1) * c1];
            for (o, &g) in g_out.iter().enumerate() {
                if g == F::zero() {
                    continue;
                }
                grads.get_mut(SPECTRAL_B)[o] += g;
                let gw = &mut grads.get_mut(SPECTRAL_W)[o * d..(o + 1) * d];
                for (gi, xi) in gw.iter_mut().zip(x) {
                    *gi += g * *xi;
                }
            }
        }
    }
}

/// Index (1-based) of the largest logit; ties go to the smaller class id.
pub fn argmax_class<F: Scalar>(logits: &[F]) -> u16 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as u16 + 1
}

/// Softmax probabilities with max-subtraction.
pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let exp: Vec<F> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: F = exp.iter().cloned().sum();
    exp.into_iter().map(|e| e / sum).collect()
}
