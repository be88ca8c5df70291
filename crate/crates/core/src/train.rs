//! Training loop: per-term gradients, routing, RMSProp and model selection.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{lap_index, make_batches, DatasetSplit, HsiCube, LabelMap, LapIndex, PatchBatch};
use crate::error::{PdmlError, Result};
use crate::grad::check::check_finite;
use crate::grad::{Checkpoint, Gradients, Objective, ParamStore, Tag, Tensor};
use crate::loss::{lap_means, loss_terms, LossConfig, TermValues};
use crate::metrics::evaluate;
use crate::model::{BackboneConfig, EmbeddingModel, OutputGrads, LOG_A, MATCH_B};
use crate::rng::{rng_from_seed, PdmlRng};
use crate::Scalar;

/// Stream offset for Monte-Carlo noise and pair sampling.
const NOISE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
/// Stream offset for parameter initialization.
const INIT_STREAM: u64 = 0xd1b5_4a32_d192_ed03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Keep the parameters with the best validation OA (earliest on ties).
    BestValOa,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rho: f64,
    pub rms_eps: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub backbone: BackboneConfig,
    pub selection: Selection,
    /// Record per-epoch wall time in the history. Off by default so that
    /// histories are byte-reproducible.
    pub record_wall_time: bool,
}

impl TrainConfig {
    /// 300 epochs, batch 16, learning rate 1e-4, RMSProp `rho = 0.9`, `eps = 1e-8`.
    pub fn new(backbone: BackboneConfig) -> Self {
        Self {
            epochs: 300,
            batch_size: 16,
            learning_rate: 1e-4,
            rho: 0.9,
            rms_eps: 1e-8,
            seed: 0,
            loss: LossConfig::default(),
            backbone,
            selection: Selection::BestValOa,
            record_wall_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(PdmlError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(PdmlError::Config("batch size must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(PdmlError::Config("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.rho) || !(self.rms_eps >= 0.0) {
            return Err(PdmlError::Config(
                "rho must be in [0, 1) and rms_eps >= 0".into(),
            ));
        }
        self.loss.validate()?;
        self.backbone.validate()
    }
}

/// Running mean of squared gradients, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsState<F> {
    pub sq: Vec<Vec<F>>,
}

impl<F: Scalar> RmsState<F> {
    pub fn zeros_like(params: &ParamStore<F>) -> Self {
        Self {
            sq: Gradients::zeros_like(params).bufs,
        }
    }
}

/// `s = rho * s + (1 - rho) * g^2`, `theta -= lr * g / (sqrt(s) + eps)`.
pub fn rmsprop_step<F: Scalar>(
    params: &mut ParamStore<F>,
    grads: &Gradients<F>,
    state: &mut RmsState<F>,
    lr: f64,
    rho: f64,
    eps: f64,
) -> Result<()> {
    let (lr, rho, eps) = (F::lit(lr), F::lit(rho), F::lit(eps));
    let keep = F::one() - rho;
    for id in 0..params.len() {
        let g = grads.get(id);
        let s = &mut state.sq[id];
        let theta = params.value_mut(id);
        for ((t, si), &gi) in theta.iter_mut().zip(s.iter_mut()).zip(g) {
            *si = rho * *si + keep * gi * gi;
            *t -= lr * gi / (si.sqrt() + eps);
        }
        if let Some(i) = theta.iter().position(|t| !t.is_finite()) {
            return Err(PdmlError::Numeric(format!(
                "update of {}[{i}] is not finite",
                params.entry(id).name
            )));
        }
    }
    Ok(())
}

/// Parameter gradients of each objective term, already weighted.
#[derive(Debug, Clone, PartialEq)]
pub struct TermGradients<F> {
    pub ce: Gradients<F>,
    pub var: Gradients<F>,
    pub metric: Gradients<F>,
}

/// Which terms `(ce, var, metric)` may update parameters with `tag`.
pub fn routes(tag: Tag) -> [bool; 3] {
    match tag {
        Tag::Classifier => [true, false, false],
        Tag::VarHead => [false, true, true],
        Tag::MetricScalars => [false, false, true],
        Tag::Backbone | Tag::MeanHead => [true, true, true],
    }
}

/// Masked sum of the per-term gradients according to [`routes`].
pub fn apply_routing<F: Scalar>(terms: &TermGradients<F>, tags: &[Tag]) -> Result<Gradients<F>> {
    if tags.len() != terms.ce.bufs.len() {
        return Err(PdmlError::Config(format!(
            "{} tags for {} gradient buffers",
            tags.len(),
            terms.ce.bufs.len()
        )));
    }
    let mut out = terms.ce.clone();
    for (id, &tag) in tags.iter().enumerate() {
        let [ce, var, metric] = routes(tag);
        let buf = out.get_mut(id);
        if !ce {
            buf.iter_mut().for_each(|x| *x = F::zero());
        }
        for (use_term, src) in [(var, &terms.var), (metric, &terms.metric)] {
            if use_term {
                for (x, &y) in buf.iter_mut().zip(src.get(id)) {
                    *x += y;
                }
            }
        }
    }
    Ok(out)
}

fn is_empty(up: &OutputGrads<impl Scalar>) -> bool {
    up.mean.is_none() && up.std.is_none() && up.logits.is_none()
}

/// Forward pass, objective terms, and one backward pass per term.
pub fn term_gradients<F: Scalar>(
    model: &EmbeddingModel,
    params: &ParamStore<F>,
    batch: &PatchBatch<F>,
    lap: &LapIndex,
    cfg: &LossConfig,
    rng: &mut PdmlRng,
) -> Result<(TermValues<F>, TermGradients<F>)> {
    let pass = model.forward_pass(params, batch)?;
    let logits = model.classify_logits(params, &pass.field.mean)?;
    let (values, up) = loss_terms(
        params,
        batch,
        &pass.field,
        logits.data(),
        lap,
        cfg,
        rng,
        true,
    )?;
    let up = up.expect("gradients requested");
    let backprop = |u: &OutputGrads<F>| {
        let mut g = Gradients::zeros_like(params);
        if !is_empty(u) {
            model.backward(params, batch, &pass, u, &mut g);
        }
        g
    };
    let ce = backprop(&up.ce);
    let var = backprop(&up.var);
    let mut metric = backprop(&up.metric);
    metric.get_mut(LOG_A)[0] += up.d_log_a;
    metric.get_mut(MATCH_B)[0] += up.d_b;
    Ok((values, TermGradients { ce, var, metric }))
}

/// The full objective on a fixed batch, with routed gradients.
pub struct PdmlObjective<'a, F> {
    pub model: &'a EmbeddingModel,
    pub batch: &'a PatchBatch<F>,
    pub lap: &'a LapIndex,
    pub loss: &'a LossConfig,
}

impl<F: Scalar> Objective<F> for PdmlObjective<'_, F> {
    fn evaluate(
        &self,
        params: &ParamStore<F>,
        rng: &mut PdmlRng,
        grads: Option<&mut Gradients<F>>,
    ) -> Result<F> {
        match grads {
            Some(grads) => {
                let (values, terms) =
                    term_gradients(self.model, params, self.batch, self.lap, self.loss, rng)?;
                grads.add_assign(&apply_routing(&terms, &params.tags())?);
                Ok(values.total)
            }
            None => {
                let field = self.model.forward(params, self.batch)?;
                crate::loss::total_loss(
                    self.model, params, self.batch, &field, self.lap, self.loss, rng,
                )
            }
        }
    }

    fn branch_signature(&self, params: &ParamStore<F>) -> Result<Option<Vec<bool>>> {
        let pass = self.model.forward_pass(params, self.batch)?;
        let mut signature: Vec<bool> = pass.relu_gates().collect();
        if self.loss.lambda1 > 0.0 && self.loss.hinge_var {
            let alpha = F::lit(self.loss.alpha);
            let per = pass.field.pixels() * pass.field.dim();
            for patch_std in pass.field.std.data().chunks_exact(per) {
                let a = lap_means(patch_std, self.lap);
                signature.extend(
                    a.windows(2)
                        .map(|w| (F::one() + alpha) * w[0] - w[1] > F::zero()),
                );
            }
        }
        Ok(Some(signature))
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_oa: Option<f64>,
    pub wall_ms: Option<u64>,
}

/// History as JSON lines.
pub fn history_jsonl(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("history serializes") + "\n")
        .collect()
}

/// Resumable training state.
#[derive(Debug, Clone)]
pub struct Trainer<F> {
    model: EmbeddingModel,
    lap: LapIndex,
    cfg: TrainConfig,
    params: ParamStore<F>,
    rms: RmsState<F>,
    rng: PdmlRng,
    history: Vec<EpochRecord>,
    best: Option<(f64, ParamStore<F>)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainerMeta {
    config: TrainConfig,
    rng: PdmlRng,
    history: Vec<EpochRecord>,
    best_val_oa: Option<f64>,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = EmbeddingModel::new(cfg.backbone)?;
        let params = model.init_params(cfg.seed ^ INIT_STREAM);
        Ok(Self {
            lap: lap_index(cfg.backbone.patch)?,
            rms: RmsState::zeros_like(&params),
            rng: rng_from_seed(cfg.seed ^ NOISE_STREAM),
            params,
            model,
            cfg,
            history: Vec::new(),
            best: None,
        })
    }

    pub fn model(&self) -> &EmbeddingModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    /// Parameters chosen by the selection rule.
    pub fn selected(&self) -> &ParamStore<F> {
        match (&self.cfg.selection, &self.best) {
            (Selection::BestValOa, Some((_, p))) => p,
            _ => &self.params,
        }
    }

    fn check_inputs(&self, cube: &HsiCube, labels: &LabelMap, split: &DatasetSplit) -> Result<()> {
        if split.train.is_empty() {
            return Err(PdmlError::Argument("training split is empty".into()));
        }
        if self.cfg.selection == Selection::BestValOa && split.val.is_empty() {
            return Err(PdmlError::Argument(
                "best_val_oa selection needs a validation split".into(),
            ));
        }
        if !labels.matches(cube) || cube.bands() != self.cfg.backbone.bands {
            return Err(PdmlError::Config(
                "cube, labels and model disagree on shape".into(),
            ));
        }
        if labels.classes() as usize != self.cfg.backbone.classes {
            return Err(PdmlError::Config(
                "label map class count differs from the model".into(),
            ));
        }
        Ok(())
    }

    /// Runs one epoch over the training split and scores the validation split.
    pub fn run_epoch(
        &mut self,
        cube: &HsiCube,
        labels: &LabelMap,
        split: &DatasetSplit,
    ) -> Result<EpochRecord> {
        self.check_inputs(cube, labels, split)?;
        let start = Instant::now();
        let epoch = self.history.len();
        let batches = make_batches::<F>(
            &split.train,
            cube,
            labels,
            self.cfg.backbone.patch,
            self.cfg.batch_size,
            self.cfg.seed,
            epoch as u64,
        )?;
        let tags = self.params.tags();
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (i, batch) in batches.iter().enumerate() {
            // a trailing single patch has no pairs
            if batch.len() < 2 {
                continue;
            }
            let annotate = |e: PdmlError| match e {
                PdmlError::Numeric(m) => {
                    PdmlError::Numeric(format!("epoch {epoch}, batch {i}: {m}"))
                }
                other => other,
            };
            let (values, terms) = term_gradients(
                &self.model,
                &self.params,
                batch,
                &self.lap,
                &self.cfg.loss,
                &mut self.rng,
            )
            .map_err(annotate)?;
            let routed = apply_routing(&terms, &tags)?;
            if !values.total.is_finite() {
                return Err(annotate(PdmlError::Numeric(format!(
                    "loss is {}",
                    values.total
                ))));
            }
            check_finite(&self.params, &routed).map_err(annotate)?;
            self.params.zero_grads();
            self.params.accumulate(&routed);
            rmsprop_step(
                &mut self.params,
                &routed,
                &mut self.rms,
                self.cfg.learning_rate,
                self.cfg.rho,
                self.cfg.rms_eps,
            )
            .map_err(annotate)?;
            loss_sum += values.total.to_f64_lossy();
            steps += 1;
        }
        if steps == 0 {
            return Err(PdmlError::Batch(
                "no training batch with at least 2 patches".into(),
            ));
        }

        let val_oa = if split.val.is_empty() {
            None
        } else {
            Some(
                evaluate(&self.model, &self.params, cube, labels, &split.val)?
                    .1
                    .oa,
            )
        };
        if let Some(oa) = val_oa {
            if self.best.as_ref().is_none_or(|(best, _)| oa > *best) {
                self.best = Some((oa, self.params.clone()));
            }
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_oa,
            wall_ms: self
                .cfg
                .record_wall_time
                .then(|| start.elapsed().as_millis() as u64),
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// Runs the remaining epochs up to `config().epochs`.
    pub fn run(&mut self, cube: &HsiCube, labels: &LabelMap, split: &DatasetSplit) -> Result<()> {
        while self.epochs_done() < self.cfg.epochs {
            self.run_epoch(cube, labels, split)?;
        }
        Ok(())
    }

    /// Resumable state: current parameters, optimizer state, the best
    /// snapshot and the generator state.
    pub fn checkpoint(&self) -> Result<Checkpoint<F>> {
        let meta = TrainerMeta {
            config: self.cfg.clone(),
            rng: self.rng.clone(),
            history: self.history.clone(),
            best_val_oa: self.best.as_ref().map(|(oa, _)| *oa),
        };
        let mut ck = Checkpoint::new(self.params.clone(), serde_json::to_value(meta)?);
        let shapes: Vec<Vec<usize>> = self
            .params
            .entries()
            .iter()
            .map(|e| e.value.shape().to_vec())
            .collect();
        let rms = self
            .rms
            .sq
            .iter()
            .zip(&shapes)
            .map(|(s, shape)| Tensor::from_vec(shape, s.clone()))
            .collect::<Result<Vec<_>>>()?;
        ck.groups.push(("rms".into(), rms));
        if let Some((_, best)) = &self.best {
            let group = best.entries().iter().map(|e| e.value.clone()).collect();
            ck.groups.push(("best".into(), group));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint<F>) -> Result<Self> {
        let meta: TrainerMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| PdmlError::Checkpoint(format!("not a training checkpoint: {e}")))?;
        let mut trainer = Trainer::new(meta.config)?;
        trainer.model.check_params(&ck.params)?;
        trainer.params = ck.params.clone();
        let rms = ck
            .group("rms")
            .ok_or_else(|| PdmlError::Checkpoint("missing optimizer state".into()))?;
        trainer.rms = RmsState {
            sq: rms.iter().map(|t| t.data().to_vec()).collect(),
        };
        trainer.rng = meta.rng;
        trainer.history = meta.history;
        trainer.best = match (meta.best_val_oa, ck.group("best")) {
            (Some(oa), Some(group)) => {
                let mut best = ck.params.clone();
                for (id, t) in group.iter().enumerate() {
                    best.value_mut(id).copy_from_slice(t.data());
                }
                Some((oa, best))
            }
            (None, None) => None,
            _ => return Err(PdmlError::Checkpoint("inconsistent best snapshot".into())),
        };
        Ok(trainer)
    }

    /// Checkpoint holding only the selected parameters and the configuration.
    pub fn model_checkpoint(&self) -> Result<Checkpoint<F>> {
        Ok(Checkpoint::new(
            self.selected().clone(),
            serde_json::json!({ "config": self.cfg }),
        ))
    }
}

/// Model and parameters from a checkpoint written by [`Trainer::model_checkpoint`]
/// or [`Trainer::checkpoint`].
pub fn model_from_checkpoint<F: Scalar>(
    ck: &Checkpoint<F>,
) -> Result<(EmbeddingModel, TrainConfig)> {
    let cfg: TrainConfig = serde_json::from_value(
        ck.meta
            .get("config")
            .cloned()
            .ok_or_else(|| PdmlError::Checkpoint("checkpoint has no config".into()))?,
    )
    .map_err(|e| PdmlError::Checkpoint(format!("invalid config in checkpoint: {e}")))?;
    let model = EmbeddingModel::new(cfg.backbone)?;
    model.check_params(&ck.params)?;
    Ok((model, cfg))
}

/// Trains for `cfg.epochs` epochs and returns the selected parameters and the history.
pub fn train<F: Scalar>(
    cube: &HsiCube,
    labels: &LabelMap,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<(ParamStore<F>, Vec<EpochRecord>)> {
    let mut trainer = Trainer::<F>::new(cfg.clone())?;
    trainer.run(cube, labels, split)?;
    Ok((trainer.selected().clone(), trainer.history().to_vec()))
}
