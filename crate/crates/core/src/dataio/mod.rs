//! Feature files, manifests and synthetic data.

pub mod cef1;
pub mod manifest;
pub mod synth;

pub use cef1::{read_matrix, write_matrix};
pub use manifest::{Manifest, ManifestEntry, Split};
pub use synth::{gen_synthetic, generate, SyntheticDataset, SyntheticExpert, SyntheticSpec};
