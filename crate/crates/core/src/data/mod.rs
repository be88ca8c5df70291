//! Cube ingestion, preprocessing, patch geometry and synthetic data.

pub mod cube;
pub mod lap;
pub mod patch;
pub mod split;
pub mod synth;

pub use cube::{load_cube, load_labels, save_cube, save_labels, HsiCube, LabelMap};
pub use lap::{lap_index, LapIndex};
pub use patch::{extract_patch, make_batches, PatchBatch};
pub use split::{stratified_split, DatasetSplit};
pub use synth::{boundary_mask, synth_cube, SynthSpec};
