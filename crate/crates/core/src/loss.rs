//! Objective terms: Monte-Carlo sampling of the Gaussian embeddings, match
//! probabilities, the probabilistic contrastive loss over pixel distributions,
//! the lap variance ordering loss, the deterministic contrastive baseline,
//! cross-entropy, and their weighted combination.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{LapIndex, PatchBatch};
use crate::error::{PdmlError, Result};
use crate::grad::ParamStore;
use crate::model::{softmax, EmbeddingModel, GaussianField, OutputGrads, LOG_A, MATCH_B};
use crate::rng::{fill_standard_normal, PdmlRng};
use crate::scalar::sigmoid;
use crate::Scalar;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Which pixel pairs enter the metric term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairScope {
    /// All pixel distributions of the batch.
    Batch,
    /// Only pairs inside the same patch.
    Patch,
}

/// Loss applied to the selected pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricLoss {
    /// Probabilistic contrastive loss on Monte-Carlo distribution match probabilities.
    Probabilistic,
    /// Margin contrastive loss on the means (ablation baseline).
    Contrastive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Relative margin between neighbouring laps.
    pub alpha: f64,
    /// Monte-Carlo samples per distribution.
    pub mc_samples: usize,
    /// Margin of the deterministic contrastive baseline.
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Hinge the lap terms at zero.
    pub hinge_var: bool,
    pub pair_cap: usize,
    pub pair_scope: PairScope,
    pub metric_loss: MetricLoss,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            mc_samples: 3,
            beta: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            hinge_var: true,
            pair_cap: 4096,
            pair_scope: PairScope::Batch,
            metric_loss: MetricLoss::Probabilistic,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(PdmlError::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.mc_samples == 0 {
            return Err(PdmlError::Config("mc_samples must be >= 1".into()));
        }
        if [self.lambda1, self.lambda2, self.lambda3]
            .iter()
            .any(|l| !(*l >= 0.0))
        {
            return Err(PdmlError::Config("loss weights must be >= 0".into()));
        }
        if self.pair_cap == 0 {
            return Err(PdmlError::Config("pair_cap must be >= 1".into()));
        }
        if !(self.beta > 0.0) {
            return Err(PdmlError::Config("beta must be > 0".into()));
        }
        Ok(())
    }
}

/// `K` reparameterized draws `m + v * eps` with `eps ~ N(0, I)`.
pub fn mc_sample<F: Scalar>(m: &[F], v: &[F], k: usize, rng: &mut PdmlRng) -> Vec<Vec<F>> {
    let mut eps = vec![F::zero(); m.len()];
    (0..k)
        .map(|_| {
            fill_standard_normal(rng, &mut eps);
            m.iter()
                .zip(v)
                .zip(&eps)
                .map(|((&mi, &vi), &e)| mi + vi * e)
                .collect()
        })
        .collect()
}

fn distance<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<F>()
        .sqrt()
}

/// `sigmoid(-a * |z1 - z2| + b)`.
pub fn match_probability<F: Scalar>(z1: &[F], z2: &[F], a: F, b: F) -> F {
    sigmoid(-a * distance(z1, z2) + b)
}

/// Average match probability over all `K x K` sample pairs.
pub fn dist_match_probability<F: Scalar>(
    samples1: &[Vec<F>],
    samples2: &[Vec<F>],
    a: F,
    b: F,
) -> F {
    let mut sum = F::zero();
    for z1 in samples1 {
        for z2 in samples2 {
            sum += match_probability(z1, z2, a, b);
        }
    }
    sum / F::lit((samples1.len() * samples2.len()) as f64)
}

fn clamp_probability<F: Scalar>(p: F) -> F {
    let lo = F::lit(PROB_CLAMP);
    p.max(lo).min(F::one() - lo)
}

/// `-ln p` for matching pairs, `-ln(1 - p)` otherwise.
pub fn pcon_loss<F: Scalar>(p: F, is_match: bool) -> F {
    let p = clamp_probability(p);
    if is_match {
        -p.ln()
    } else {
        -(F::one() - p).ln()
    }
}

/// Derivative of [`pcon_loss`] in `p`; zero where the clamp is active.
fn pcon_loss_grad<F: Scalar>(p: F, is_match: bool) -> F {
    let lo = F::lit(PROB_CLAMP);
    if p < lo || p > F::one() - lo {
        return F::zero();
    }
    if is_match {
        -F::one() / p
    } else {
        F::one() / (F::one() - p)
    }
}

/// `y * D^2 + (1 - y) * max(beta - D, 0)^2`.
pub fn contrastive_loss<F: Scalar>(zi: &[F], zj: &[F], is_match: bool, beta: F) -> F {
    let d = distance(zi, zj);
    if is_match {
        d * d
    } else {
        let gap = (beta - d).max(F::zero());
        gap * gap
    }
}

/// `-log softmax(logits)[label - 1]`, stabilized by max-subtraction.
pub fn cross_entropy<F: Scalar>(logits: &[F], label: u16) -> F {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
    lse - logits[label as usize - 1]
}

/// Cross-entropy and its gradient `softmax - onehot`.
pub fn cross_entropy_grad<F: Scalar>(logits: &[F], label: u16) -> (F, Vec<F>) {
    let mut g = softmax(logits);
    g[label as usize - 1] -= F::one();
    (cross_entropy(logits, label), g)
}

/// Lap means `A_j` of the per-pixel standard deviation averaged over dimensions.
pub fn lap_means<F: Scalar>(std: &[F], lap: &LapIndex) -> Vec<F> {
    let r = std.len() / lap.pixels();
    let mut sums = vec![F::zero(); lap.laps()];
    for (p, row) in std.chunks_exact(r).enumerate() {
        sums[lap.lap_of(p) - 1] += row.iter().cloned().sum::<F>() / F::lit(r as f64);
    }
    sums.iter()
        .zip(lap.counts())
        .map(|(&s, &n)| s / F::lit(n as f64))
        .collect()
}

fn lap_terms<F: Scalar>(means: &[F], alpha: F, hinge: bool) -> Vec<F> {
    means
        .windows(2)
        .map(|w| {
            let raw = -(w[1] - (F::one() + alpha) * w[0]);
            if hinge {
                raw.max(F::zero())
            } else {
                raw
            }
        })
        .collect()
}

/// Lap variance ordering loss of one patch, `std` being its `T x r` matrix.
pub fn variance_lap_loss<F: Scalar>(std: &[F], lap: &LapIndex, alpha: F, hinge: bool) -> Result<F> {
    Ok(variance_lap_loss_grad(std, lap, alpha, hinge)?.0)
}

/// [`variance_lap_loss`] and its gradient with respect to `std`.
pub fn variance_lap_loss_grad<F: Scalar>(
    std: &[F],
    lap: &LapIndex,
    alpha: F,
    hinge: bool,
) -> Result<(F, Vec<F>)> {
    if lap.laps() < 2 {
        return Err(PdmlError::Argument(
            "variance ordering needs a patch side of at least 3".into(),
        ));
    }
    if std.is_empty() || !std.len().is_multiple_of(lap.pixels()) {
        return Err(PdmlError::Argument(
            "std matrix does not match the lap index".into(),
        ));
    }
    let r = std.len() / lap.pixels();
    let means = lap_means(std, lap);
    let terms = lap_terms(&means, alpha, hinge);
    let loss = terms.iter().cloned().sum();

    // dL/dA_j
    let mut d_mean = vec![F::zero(); lap.laps()];
    for (i, &term) in terms.iter().enumerate() {
        if hinge && !(term > F::zero()) {
            continue;
        }
        d_mean[i + 1] -= F::one();
        d_mean[i] += F::one() + alpha;
    }
    let mut grad = vec![F::zero(); std.len()];
    for (p, g) in grad.chunks_exact_mut(r).enumerate() {
        let j = lap.lap_of(p) - 1;
        let share = d_mean[j] / F::lit((lap.counts()[j] * r) as f64);
        g.iter_mut().for_each(|x| *x = share);
    }
    Ok((loss, grad))
}

/// Selected pixel pairs. Pixel `g` is pixel `g % T` of patch `g / T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub pairs: Vec<(u32, u32)>,
    pub is_match: Vec<bool>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Enumerates candidate pairs `i < j` and, above `cap`, samples them without
/// replacement, half matching and half non-matching when both kinds suffice.
/// Selected pairs keep enumeration order.
pub fn select_pairs(
    labels: &[u16],
    pixels: usize,
    scope: PairScope,
    cap: usize,
    rng: &mut PdmlRng,
) -> PairSet {
    let n = labels.len() * pixels;
    let mut matching = Vec::new();
    let mut other = Vec::new();
    for i in 0..n {
        let upper = match scope {
            PairScope::Batch => n,
            PairScope::Patch => (i / pixels + 1) * pixels,
        };
        for j in i + 1..upper {
            let pair = (i as u32, j as u32);
            if labels[i / pixels] == labels[j / pixels] {
                matching.push(pair);
            } else {
                other.push(pair);
            }
        }
    }

    let (m, o) = (matching.len(), other.len());
    let mut chosen: Vec<((u32, u32), bool)> = if m + o <= cap {
        matching
            .into_iter()
            .map(|p| (p, true))
            .chain(other.into_iter().map(|p| (p, false)))
            .collect()
    } else {
        let mut take_m = m.min(cap / 2);
        let take_o = o.min(cap - take_m);
        take_m = m.min(cap - take_o);
        let mut pick = |pool: &[(u32, u32)], k: usize, flag: bool| -> Vec<((u32, u32), bool)> {
            let mut idx = sample(rng, pool.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| (pool[i], flag)).collect()
        };
        let mut out = pick(&matching, take_m, true);
        out.extend(pick(&other, take_o, false));
        out
    };
    chosen.sort_unstable_by_key(|&(p, _)| p);
    PairSet {
        pairs: chosen.iter().map(|&(p, _)| p).collect(),
        is_match: chosen.iter().map(|&(_, m)| m).collect(),
    }
}

/// Unweighted values of each term; a term whose weight is zero is skipped and
/// reported as zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TermValues<F> {
    /// `(1/B) * sum of lap losses`
    pub var: F,
    /// `(1/(B*T)) * sum of pair losses`
    pub metric: F,
    /// mean cross-entropy over the batch
    pub ce: F,
    /// `lambda1 * var + lambda2 * metric + lambda3 * ce`
    pub total: F,
}

/// Weighted gradients of each term with respect to the model outputs.
#[derive(Debug, Clone, Default)]
pub struct TermGrads<F> {
    pub ce: OutputGrads<F>,
    pub var: OutputGrads<F>,
    pub metric: OutputGrads<F>,
    pub d_log_a: F,
    pub d_b: F,
}

/// Evaluates every term on a forward pass. Random draws happen in a fixed
/// order: pair selection first, then `K` noise vectors per pixel in pixel order.
#[allow(clippy::too_many_arguments)]
pub fn loss_terms<F: Scalar>(
    params: &ParamStore<F>,
    batch: &PatchBatch<F>,
    field: &GaussianField<F>,
    logits: &[F],
    lap: &LapIndex,
    cfg: &LossConfig,
    rng: &mut PdmlRng,
    want_grads: bool,
) -> Result<(TermValues<F>, Option<TermGrads<F>>)> {
    let nb = batch.len();
    if nb < 2 {
        return Err(PdmlError::Batch(format!(
            "the objective needs at least 2 patches, got {nb}"
        )));
    }
    let t = field.pixels();
    let r = field.dim();
    let classes = logits.len() / nb;
    let mut grads = TermGrads::default();
    let mut values = TermValues {
        var: F::zero(),
        metric: F::zero(),
        ce: F::zero(),
        total: F::zero(),
    };
    let inv_b = F::one() / F::lit(nb as f64);

    if cfg.lambda1 > 0.0 {
        let scale = F::lit(cfg.lambda1) * inv_b;
        let mut d_std = vec![F::zero(); nb * t * r];
        let mut sum = F::zero();
        for b in 0..nb {
            let patch_std = &field.std.data()[b * t * r..(b + 1) * t * r];
            let (l, g) = variance_lap_loss_grad(patch_std, lap, F::lit(cfg.alpha), cfg.hinge_var)?;
            sum += l;
            for (d, gi) in d_std[b * t * r..].iter_mut().zip(g) {
                *d = gi * scale;
            }
        }
        values.var = sum * inv_b;
        values.total += F::lit(cfg.lambda1) * values.var;
        if want_grads {
            grads.var.std = Some(d_std);
        }
    }

    if cfg.lambda2 > 0.0 {
        let pairs = select_pairs(&batch.center_labels, t, cfg.pair_scope, cfg.pair_cap, rng);
        let norm = F::one() / F::lit((nb * t) as f64);
        let scale = F::lit(cfg.lambda2) * norm;
        let sum = match cfg.metric_loss {
            MetricLoss::Probabilistic => probabilistic_pairs(
                params,
                field,
                &pairs,
                cfg.mc_samples,
                scale,
                rng,
                want_grads.then_some(&mut grads),
            ),
            MetricLoss::Contrastive => contrastive_pairs(
                field,
                &pairs,
                F::lit(cfg.beta),
                scale,
                want_grads.then_some(&mut grads),
            ),
        };
        values.metric = sum * norm;
        values.total += F::lit(cfg.lambda2) * values.metric;
    }

    if cfg.lambda3 > 0.0 {
        let scale = F::lit(cfg.lambda3) * inv_b;
        let mut d_logits = vec![F::zero(); nb * classes];
        let mut sum = F::zero();
        for b in 0..nb {
            let row = &logits[b * classes..(b + 1) * classes];
            let (l, g) = cross_entropy_grad(row, batch.center_labels[b]);
            sum += l;
            for (d, gi) in d_logits[b * classes..].iter_mut().zip(g) {
                *d = gi * scale;
            }
        }
        values.ce = sum * inv_b;
        values.total += F::lit(cfg.lambda3) * values.ce;
        if want_grads {
            grads.ce.logits = Some(d_logits);
        }
    }

    Ok((values, want_grads.then_some(grads)))
}

/// Sum of probabilistic contrastive losses over `pairs`; gradients are
/// scaled by `scale` and written into `grads.metric`.
fn probabilistic_pairs<F: Scalar>(
    params: &ParamStore<F>,
    field: &GaussianField<F>,
    pairs: &PairSet,
    k: usize,
    scale: F,
    rng: &mut PdmlRng,
    grads: Option<&mut TermGrads<F>>,
) -> F {
    let r = field.dim();
    let n = field.batch() * field.pixels();
    let a = params.value(LOG_A)[0].exp();
    let b = params.value(MATCH_B)[0];

    let mut eps = vec![F::zero(); n * k * r];
    fill_standard_normal(rng, &mut eps);
    let (mean, std) = (field.mean.data(), field.std.data());
    let mut z = vec![F::zero(); n * k * r];
    for g in 0..n {
        for s in 0..k {
            let at = (g * k + s) * r;
            for d in 0..r {
                z[at + d] = mean[g * r + d] + std[g * r + d] * eps[at + d];
            }
        }
    }

    let inv_kk = F::one() / F::lit((k * k) as f64);
    let mut dz = grads.is_some().then(|| vec![F::zero(); n * k * r]);
    let (mut d_log_a, mut d_b) = (F::zero(), F::zero());
    let mut dists = vec![F::zero(); k * k];
    let mut probs = vec![F::zero(); k * k];
    let mut total = F::zero();
    for (&(u, w), &is_match) in pairs.pairs.iter().zip(&pairs.is_match) {
        let (u, w) = (u as usize, w as usize);
        let mut p_hat = F::zero();
        for k1 in 0..k {
            let zu = &z[(u * k + k1) * r..][..r];
            for k2 in 0..k {
                let zw = &z[(w * k + k2) * r..][..r];
                let dist = distance(zu, zw);
                let p = sigmoid(-a * dist + b);
                dists[k1 * k + k2] = dist;
                probs[k1 * k + k2] = p;
                p_hat += p;
            }
        }
        p_hat *= inv_kk;
        total += pcon_loss(p_hat, is_match);

        let Some(dz) = dz.as_mut() else { continue };
        let g_hat = pcon_loss_grad(p_hat, is_match) * scale * inv_kk;
        if g_hat == F::zero() {
            continue;
        }
        for k1 in 0..k {
            for k2 in 0..k {
                let p = probs[k1 * k + k2];
                let dist = dists[k1 * k + k2];
                let g_logit = g_hat * p * (F::one() - p);
                d_b += g_logit;
                d_log_a += g_logit * (-dist) * a;
                if dist == F::zero() {
                    continue;
                }
                let g_dist = -a * g_logit / dist;
                let (ua, wa) = ((u * k + k1) * r, (w * k + k2) * r);
                for d in 0..r {
                    let diff = (z[ua + d] - z[wa + d]) * g_dist;
                    dz[ua + d] += diff;
                    dz[wa + d] -= diff;
                }
            }
        }
    }

    if let (Some(grads), Some(dz)) = (grads, dz) {
        let mut d_mean = vec![F::zero(); n * r];
        let mut d_std = vec![F::zero(); n * r];
        for g in 0..n {
            for s in 0..k {
                let at = (g * k + s) * r;
                for d in 0..r {
                    d_mean[g * r + d] += dz[at + d];
                    d_std[g * r + d] += dz[at + d] * eps[at + d];
                }
            }
        }
        grads.metric.mean = Some(d_mean);
        grads.metric.std = Some(d_std);
        grads.d_log_a = d_log_a;
        grads.d_b = d_b;
    }
    total
}

/// Sum of margin contrastive losses on the means.
fn contrastive_pairs<F: Scalar>(
    field: &GaussianField<F>,
    pairs: &PairSet,
    beta: F,
    scale: F,
    grads: Option<&mut TermGrads<F>>,
) -> F {
    let r = field.dim();
    let n = field.batch() * field.pixels();
    let mean = field.mean.data();
    let mut d_mean = grads.is_some().then(|| vec![F::zero(); n * r]);
    let mut total = F::zero();
    let two = F::lit(2.0);
    for (&(u, w), &is_match) in pairs.pairs.iter().zip(&pairs.is_match) {
        let (u, w) = (u as usize, w as usize);
        let (mu, mw) = (&mean[u * r..(u + 1) * r], &mean[w * r..(w + 1) * r]);
        total += contrastive_loss(mu, mw, is_match, beta);
        let Some(dm) = d_mean.as_mut() else { continue };
        let dist = distance(mu, mw);
        // dL/d(m_u - m_w) = coef * (m_u - m_w)
        let coef = if is_match {
            two
        } else if dist < beta && dist > F::zero() {
            -two * (beta - dist) / dist
        } else {
            F::zero()
        };
        if coef == F::zero() {
            continue;
        }
        for d in 0..r {
            let g = coef * (mu[d] - mw[d]) * scale;
            dm[u * r + d] += g;
            dm[w * r + d] -= g;
        }
    }
    if let Some(grads) = grads {
        grads.metric.mean = d_mean;
    }
    total
}

/// Scalar objective `lambda1 * J_var + lambda2 * J_metric + lambda3 * J_ce` on a batch.
pub fn total_loss<F: Scalar>(
    model: &EmbeddingModel,
    params: &ParamStore<F>,
    batch: &PatchBatch<F>,
    field: &GaussianField<F>,
    lap: &LapIndex,
    cfg: &LossConfig,
    rng: &mut PdmlRng,
) -> Result<F> {
    let logits = model.classify_logits(params, &field.mean)?;
    Ok(
        loss_terms(params, batch, field, logits.data(), lap, cfg, rng, false)?
            .0
            .total,
    )
}
