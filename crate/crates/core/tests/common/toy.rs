//! Small synthetic corpora and models built from them.

use mintiqa::model::{Model, ModelConfig};
use mintiqa::synth::{generate, SynthConfig};
use mintiqa::train::{dataset_vocab, qa_items, score_items, QaItem, ScoreItem};
use mintiqa::Dataset;
use tempfile::TempDir;

pub struct Toy {
    /// Keeps the image files alive.
    pub dir: TempDir,
    pub dataset: Dataset,
}

pub fn toy(cfg: &SynthConfig) -> Toy {
    let dir = tempfile::tempdir().unwrap();
    let dataset = generate(dir.path(), cfg).unwrap();
    Toy { dir, dataset }
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_image_layers: 2,
        n_qformer_layers: 1,
        n_queries: 2,
        init_seed: 11,
        ..Default::default()
    }
}

pub fn model_for(ds: &Dataset, mut config: ModelConfig) -> Model {
    config.vocab = dataset_vocab(&config, ds);
    Model::new(config).unwrap()
}

pub fn items(model: &Model, ds: &Dataset) -> (Vec<ScoreItem>, Vec<QaItem>) {
    (score_items(model, ds).unwrap(), qa_items(model, ds).unwrap())
}
