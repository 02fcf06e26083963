//! Layers, the split classifier, checkpoints and gradient checking.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod model;

pub use gradcheck::{grad_check, GradCheck, GradCheckReport, ParamSet, Parameterized};
pub use layers::{Layer, LayerKind, LayerSpec};
pub use model::{ArchSpec, ConvBlock, Mode, SplitModel, Trace};
