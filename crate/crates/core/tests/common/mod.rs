#![allow(dead_code)]

use pdml::data::{lap_index, synth_cube, HsiCube, LabelMap, LapIndex, PatchBatch, SynthSpec};
use pdml::model::{BackboneConfig, EmbeddingModel};
use pdml::rng::{rng_from_seed, standard_normal};
use pdml::ParamStore64;

pub fn synthetic(classes: u16, size: usize, bands: usize, seed: u64) -> (HsiCube, LabelMap) {
    let (cube, labels) = synth_cube(&SynthSpec::new(classes, size, size, bands, seed)).unwrap();
    (cube.standardize().unwrap(), labels)
}

pub struct Problem {
    pub model: EmbeddingModel,
    pub params: ParamStore64,
    pub batch: PatchBatch<f64>,
    pub lap: LapIndex,
}

/// A fresh model on a batch of patches whose centers span several classes.
/// Biases and the match scalars are nudged away from zero.
pub fn problem(seed: u64, patches: usize, side: usize, embed_dim: usize) -> Problem {
    problem_with_width(seed, patches, side, embed_dim, 6)
}

pub fn problem_with_width(
    seed: u64,
    patches: usize,
    side: usize,
    embed_dim: usize,
    width: usize,
) -> Problem {
    let (cube, labels) = synthetic(4, 24, 8, seed);
    let mut cfg = BackboneConfig::new(8, 4, side);
    cfg.c1 = width;
    cfg.c2 = width;
    cfg.embed_dim = embed_dim;
    let model = EmbeddingModel::new(cfg).unwrap();
    let mut params: ParamStore64 = model.init_params(seed);
    let mut rng = rng_from_seed(seed ^ 77);
    for id in 0..params.len() {
        if params.entry(id).value.shape().len() <= 1 {
            for x in params.value_mut(id) {
                *x += 0.1 * standard_normal(&mut rng);
            }
        }
    }
    let coords: Vec<(usize, usize)> = [(3, 3), (3, 9), (9, 3), (9, 9), (15, 15), (15, 3)]
        .iter()
        .cycle()
        .take(patches)
        .copied()
        .collect();
    let batch = PatchBatch::from_coords(&cube, Some(&labels), &coords, side).unwrap();
    Problem {
        model,
        params,
        batch,
        lap: lap_index(side).unwrap(),
    }
}
