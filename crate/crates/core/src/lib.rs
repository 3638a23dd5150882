//! Per-instance dataset condensation for image super-resolution.
//!
//! Each source image ("instance") contributes a set of real low-resolution
//! patches. The engine learns a much smaller set of synthetic patches whose
//! local Fourier feature distribution matches the real set, by gradient
//! descent directly on pixels; a pluggable teacher upsampler then produces
//! the paired high-resolution targets. Everything is seeded and
//! deterministic: the same configuration reproduces outputs byte for byte.

pub mod condenser;
pub mod datapipe;
pub mod error;
pub mod extractor;
pub mod gradcheck;
pub mod matching;
pub mod numerics;
pub mod rlff;
pub mod seed;
pub mod teacher;
pub mod toy;

pub use condenser::{
    condense_dataset, condense_instance, init_synthetic, CondenseConfig, InitMode,
    InstanceOutcome, InstanceResult, IterRecord, LossProbe, Seeds, Toggles,
};
pub use datapipe::{DatasetManifest, InstancePair, PatchKind, PatchSet};
pub use error::{Error, Result};
pub use extractor::{ArchSpec, Extractor};
pub use matching::{FrequencySampler, GroupAssignment};
pub use numerics::{GradTape, OptimKind, Tensor, Value};
pub use rlff::{FourierLocalFilter, LocalFeatureRows, RowLayout};
pub use teacher::{Upsampler, UpsamplerBackend};
