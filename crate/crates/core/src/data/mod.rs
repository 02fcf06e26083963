//! Synthetic paired-device scene corpus.

pub mod device;
pub mod io;
pub mod paired;
pub mod scaling;
pub mod scene;

pub use device::{apply_device, default_profiles, DeviceProfile, DEFAULT_DEVICES};
pub use paired::{one_hot, pair_batches, sample_batches, stack_features, DataConfig, DeviceData, PairedBatch, PairedDataset};
pub use scaling::{scale_features, Scaler};
pub use scene::{generate_scene_dataset, SceneConfig, SceneSample, SOURCE_DEVICE};
