//! Stratified train/validation/test splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::cube::LabelMap;
use crate::error::{PdmlError, Result};
use crate::rng::rng_from_seed;

/// Disjoint coordinate sets covering every labeled pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<(usize, usize)>,
    pub val: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

/// Per-class counts for `n` pixels: floor of each share, then the remainder
/// handed out one at a time to train, val, test in turn.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let mut counts = ratios.map(|r| (r * n as f64 + 1e-9).floor() as usize);
    let mut part = 0;
    while counts.iter().sum::<usize>() < n {
        counts[part % 3] += 1;
        part += 1;
    }
    counts
}

pub fn stratified_split(labels: &LabelMap, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(PdmlError::Argument(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let mut by_class: BTreeMap<u16, Vec<(usize, usize)>> = BTreeMap::new();
    for (row, col) in labels.labeled_coords() {
        by_class
            .entry(labels.get(row, col))
            .or_default()
            .push((row, col));
    }
    for class in 1..=labels.classes() {
        let count = by_class.get(&class).map_or(0, Vec::len);
        if count < 3 {
            return Err(PdmlError::Split { class, count });
        }
    }

    let mut rng = rng_from_seed(seed);
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
        ratios,
    };
    for coords in by_class.values_mut() {
        coords.shuffle(&mut rng);
        let [n_train, n_val, _] = split_counts(coords.len(), ratios);
        split.train.extend_from_slice(&coords[..n_train]);
        split
            .val
            .extend_from_slice(&coords[n_train..n_train + n_val]);
        split.test.extend_from_slice(&coords[n_train + n_val..]);
    }
    Ok(split)
}
