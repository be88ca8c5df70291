//! Seedable generator and Gaussian draws.
//!
//! All randomness flows through [`PdmlRng`] so that a seed fully determines a
//! run. Normal deviates use the Box–Muller transform.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::Scalar;

pub type PdmlRng = Xoshiro256PlusPlus;

pub fn rng_from_seed(seed: u64) -> PdmlRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Fills `out` with independent standard normal deviates.
///
/// Deviates are produced in pairs; an odd-length slice discards the final
/// sine branch. Draws are computed in `f64` so the noise is identical for every
/// scalar type.
pub fn fill_standard_normal<F: Scalar>(rng: &mut PdmlRng, out: &mut [F]) {
    let mut chunks = out.chunks_mut(2);
    for chunk in &mut chunks {
        let (c, s) = box_muller(rng);
        chunk[0] = F::lit(c);
        if chunk.len() > 1 {
            chunk[1] = F::lit(s);
        }
    }
}

pub fn standard_normal(rng: &mut PdmlRng) -> f64 {
    box_muller(rng).0
}

fn box_muller(rng: &mut PdmlRng) -> (f64, f64) {
    // u1 in (0, 1] keeps the logarithm finite.
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    let radius = (-2.0 * u1.ln()).sqrt();
    let theta = std::f64::consts::TAU * u2;
    (radius * theta.cos(), radius * theta.sin())
}
