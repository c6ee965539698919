//! Multi-perspective quality assessment for AI-generated images.

pub mod checkpoint;
pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod levels;
pub mod metrics;
pub mod model;
pub mod params;
pub mod segment;
pub mod study;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use dataset::{Dataset, DatasetError, FineGrainedAnnotation, QaPair};
pub use gradcheck::{grad_check, GradCheckReport};
pub use levels::{Factor, LevelVocabularies, Perspective};
pub use model::{Model, ModelConfig, ModelError};
pub use params::{Graph, ParamStore};
pub use segment::{SegmentedPrompt, StyleLexicon};
pub use study::{process_study, MosTable, RejectionPolicy, StudyError};
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};
pub use train::{TrainConfig, TrainError, TrainPlan};
