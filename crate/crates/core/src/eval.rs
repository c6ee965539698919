//! Correlation and VQA evaluation over a manifest.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{load_image, Dataset, DatasetError, RgbImage};
use crate::levels::{Factor, Perspective};
use crate::metrics::{
    preference_accuracy, vqa_accuracy, CorrelationReport, MetricError, ScoreSeries, VqaItem, VqaReport,
};
use crate::model::{compose_record, Model, ModelError};
use crate::train::{ranking_pairs, score_items, ScoreItem, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{perspective}: {source}")]
    Metric {
        perspective: Perspective,
        source: MetricError,
    },
    #[error("predictor has {heads} heads but the manifest has {dims} MOS dimensions")]
    HeadMismatch { heads: usize, dims: usize },
    #[error("VQA accuracy: {0}")]
    Vqa(MetricError),
    #[error("manifest has no MOS labels")]
    NoLabels,
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Anything that maps a composed prompt and an image to one score per head.
pub trait ScorePredictor {
    fn n_heads(&self) -> usize;
    fn predict(&self, item: &ScoreItem) -> Result<Vec<f64>>;
}

impl ScorePredictor for Model {
    fn n_heads(&self) -> usize {
        Model::n_heads(self)
    }

    fn predict(&self, item: &ScoreItem) -> Result<Vec<f64>> {
        Ok(self.final_scores_text(&item.text, &item.image)?)
    }
}

/// Returns the labels themselves; the ceiling for every correlation.
pub struct OraclePredictor {
    pub n_heads: usize,
}

impl ScorePredictor for OraclePredictor {
    fn n_heads(&self) -> usize {
        self.n_heads
    }

    fn predict(&self, item: &ScoreItem) -> Result<Vec<f64>> {
        Ok(item.labels.iter().map(|l| l.unwrap_or(f64::NAN)).collect())
    }
}

/// Returns the same value for every head and item.
pub struct ConstantPredictor {
    pub n_heads: usize,
    pub value: f64,
}

impl ScorePredictor for ConstantPredictor {
    fn n_heads(&self) -> usize {
        self.n_heads
    }

    fn predict(&self, _item: &ScoreItem) -> Result<Vec<f64>> {
        Ok(vec![self.value; self.n_heads])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub correlations: CorrelationReport,
    /// Share of within-prompt MOS-ordered pairs ranked the same way; absent without pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preference_accuracy: Option<f64>,
}

pub type EvalReport = BTreeMap<Perspective, HeadReport>;

/// Per-head correlations (and preference accuracy where pairs exist) against MOS.
pub fn evaluate(predictor: &dyn ScorePredictor, items: &[ScoreItem], dims: &[Perspective]) -> Result<EvalReport> {
    if dims.is_empty() {
        return Err(EvalError::NoLabels);
    }
    if predictor.n_heads() != dims.len() {
        return Err(EvalError::HeadMismatch {
            heads: predictor.n_heads(),
            dims: dims.len(),
        });
    }
    let preds: Vec<Vec<f64>> = items.iter().map(|it| predictor.predict(it)).collect::<Result<_>>()?;
    let pairs = ranking_pairs(items, dims.len());
    let mut report = EvalReport::new();
    for (h, &perspective) in dims.iter().enumerate() {
        let (p, l): (Vec<f64>, Vec<f64>) = preds
            .iter()
            .zip(items)
            .filter_map(|(p, it)| it.labels[h].map(|l| (p[h], l)))
            .unzip();
        let wrap = |source| EvalError::Metric { perspective, source };
        let series = ScoreSeries::new(p, l).map_err(wrap)?;
        let correlations = CorrelationReport::compute(&series).map_err(wrap)?;
        let head_pairs: Vec<(f64, f64)> = pairs
            .iter()
            .filter(|(ph, _, _)| *ph == h)
            .map(|&(_, b, w)| (preds[b][h], preds[w][h]))
            .collect();
        let preference = if head_pairs.is_empty() {
            None
        } else {
            Some(preference_accuracy(&head_pairs).map_err(wrap)?)
        };
        report.insert(
            perspective,
            HeadReport {
                correlations,
                preference_accuracy: preference,
            },
        );
    }
    Ok(report)
}

/// Loads the manifest's images and evaluates a model on them.
pub fn evaluate_dataset(model: &Model, dataset: &Dataset) -> Result<EvalReport> {
    let dims = dataset.mos_perspectives();
    if dims.is_empty() {
        return Err(EvalError::NoLabels);
    }
    if model.n_heads() != dims.len() {
        return Err(EvalError::HeadMismatch {
            heads: model.n_heads(),
            dims: dims.len(),
        });
    }
    let items = score_items(model, dataset)?;
    evaluate(model, &items, &dims)
}

/// Something that answers questions about a (composed prompt, image) pair.
pub trait Answerer {
    fn answer(&self, text: &str, image: &RgbImage, question: &str) -> Result<String>;
}

impl Answerer for Model {
    fn answer(&self, text: &str, image: &RgbImage, question: &str) -> Result<String> {
        Ok(Model::answer(self, text, image, question)?)
    }
}

/// Asks each annotated image its three canonical questions and scores the extracted levels
/// against the annotation, factor by factor.
pub fn vqa_eval(model: &Model, answerer: &dyn Answerer, dataset: &Dataset) -> Result<VqaReport> {
    let mut items = Vec::new();
    for ann in &dataset.annotations {
        let img = dataset
            .image(&ann.image_id)
            .ok_or_else(|| EvalError::Train(TrainError::Config(format!("unknown image `{}`", ann.image_id))))?;
        let prompt = dataset
            .prompt(&img.prompt_id)
            .ok_or_else(|| EvalError::Train(TrainError::Config(format!("unknown prompt `{}`", img.prompt_id))))?;
        let text = compose_record(&model.config, prompt);
        let rgb = load_image(dataset.image_path(img))?;
        for p in Perspective::ALL {
            let answer = answerer.answer(&text, &rgb, p.question())?;
            for f in Factor::ALL.into_iter().filter(|f| f.perspective() == p) {
                items.push(VqaItem {
                    image_id: ann.image_id.clone(),
                    dimension: p,
                    factor: f,
                    question: p.question().to_owned(),
                    reference_answer: ann.level(f).to_owned(),
                    model_answer_text: answer.clone(),
                });
            }
        }
    }
    vqa_accuracy(&items, &model.config.levels).map_err(EvalError::Vqa)
}
