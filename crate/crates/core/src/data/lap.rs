//! Concentric rings ("laps") of a square patch.

use crate::error::{PdmlError, Result};

/// Lap membership for an `s x s` patch. Lap 1 is the center pixel and lap `j`
/// holds the pixels at Chebyshev distance `j - 1` from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LapIndex {
    side: usize,
    lap_of: Vec<usize>,
    counts: Vec<usize>,
}

impl LapIndex {
    pub fn new(side: usize) -> Result<Self> {
        if side.is_multiple_of(2) {
            return Err(PdmlError::Argument(format!(
                "patch side must be odd, got {side}"
            )));
        }
        let half = side / 2;
        let mut counts = vec![0; half + 1];
        let lap_of = (0..side * side)
            .map(|i| {
                let (r, c) = (i / side, i % side);
                let lap = r.abs_diff(half).max(c.abs_diff(half)) + 1;
                counts[lap - 1] += 1;
                lap
            })
            .collect();
        Ok(Self {
            side,
            lap_of,
            counts,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    /// Number of laps, `(s + 1) / 2`.
    pub fn laps(&self) -> usize {
        self.counts.len()
    }

    /// Lap number (1-based) of a flat pixel index.
    pub fn lap_of(&self, pixel: usize) -> usize {
        self.lap_of[pixel]
    }

    /// `counts()[j - 1]` is the pixel count of lap `j`.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn center(&self) -> usize {
        self.pixels() / 2
    }
}

/// Builds the lap index of an odd patch side.
pub fn lap_index(side: usize) -> Result<LapIndex> {
    LapIndex::new(side)
}
