//! The miniature end-to-end system: stub backbone, decoders, matching and
//! losses, synthetic dataset, training loop, evaluation, checkpoints.

pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod decoder;
pub mod eval;
pub mod hungarian;
pub mod losses;
pub mod model;
pub mod optim;
pub mod train;

pub use backbone::{MultiScaleFeatures, StubBackbone};
pub use dataset::{generate_dataset, quantize_images, DomainSpec, Manifest, Sample, CLASS_NAMES, NUM_CLASSES};
pub use eval::{evaluate_miou, semantic_inference, MiouReport};
pub use losses::{PredictionSet, SegTarget};
pub use model::{ForwardMode, SegModel};
pub use train::{StepMetrics, Trainer};
