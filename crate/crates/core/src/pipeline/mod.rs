//! End-to-end orchestration: data generation, backbone training, feature
//! extraction, regression and evaluation.

pub mod data;
pub mod diagnostics;
pub mod dump;
pub mod eval;
pub mod experiment;
pub mod image_io;
pub mod synth;
pub mod train;

pub use data::{ingest_manifest, load_inputs, read_features, write_features, write_manifest_relative, FeatureSet};
pub use dump::dump_feature_maps;
pub use eval::{auc, evaluate, EvalReport};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentOutcome};
pub use image_io::{load_image, prepare_input, resize_bilinear, save_png};
pub use synth::{gen_synthetic, mirror_asymmetry, SynthConfig};
pub use train::{embed_tensors, extract_features, train_backbone, TrainConfig, TrainOutcome};
