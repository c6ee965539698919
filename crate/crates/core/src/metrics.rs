//! Correlation metrics, pairwise preference accuracy and VQA accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::levels::{normalize_words, Factor, LevelVocabularies, Perspective};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 points, got {0}")]
    TooShort(usize),
    #[error("non-finite value in series")]
    NonFinite,
    #[error("{0} is undefined: zero variance")]
    Undefined(&'static str),
    #[error("empty input")]
    Empty,
    #[error("ambiguous answer: both `{0}` and `{1}` match")]
    Ambiguous(String, String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("reference answer `{answer}` is not a {factor:?} level")]
    InvalidReference { factor: Factor, answer: String },
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Parallel predicted/reference scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    predicted: Vec<f64>,
    reference: Vec<f64>,
}

impl ScoreSeries {
    pub fn new(predicted: Vec<f64>, reference: Vec<f64>) -> Result<Self> {
        if predicted.len() != reference.len() {
            return Err(MetricError::LengthMismatch(predicted.len(), reference.len()));
        }
        if predicted.len() < 2 {
            return Err(MetricError::TooShort(predicted.len()));
        }
        if predicted.iter().chain(&reference).any(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite);
        }
        Ok(Self { predicted, reference })
    }

    pub fn predicted(&self) -> &[f64] {
        &self.predicted
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }
}

fn pearson(x: &[f64], y: &[f64], what: &'static str) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::Undefined(what));
    }
    // sqrt(s * s) == s exactly in binary floating point, so r(x, x) is exactly 1.
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of the ranks they span.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with mid-ranks for ties.
pub fn srcc(s: &ScoreSeries) -> Result<f64> {
    pearson(&mid_ranks(&s.predicted), &mid_ranks(&s.reference), "SRCC")
}

/// Pearson linear correlation on raw values.
pub fn plcc(s: &ScoreSeries) -> Result<f64> {
    pearson(&s.predicted, &s.reference, "PLCC")
}

/// Kendall tau-b by pair enumeration.
pub fn krcc(s: &ScoreSeries) -> Result<f64> {
    let (x, y) = (&s.predicted, &s.reference);
    let n = x.len();
    let (mut concordant, mut discordant, mut ties_x, mut ties_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            // Inputs are finite, so this never fails; unlike total_cmp it ties -0.0 with 0.0.
            let dx = x[i].partial_cmp(&x[j]).unwrap() as i64;
            let dy = y[i].partial_cmp(&y[j]).unwrap() as i64;
            if dx == 0 {
                ties_x += 1;
            }
            if dy == 0 {
                ties_y += 1;
            }
            match dx * dy {
                1 => concordant += 1,
                -1 => discordant += 1,
                _ => {}
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as i64;
    let denom = ((pairs - ties_x) as f64) * ((pairs - ties_y) as f64);
    if denom == 0.0 {
        return Err(MetricError::Undefined("KRCC"));
    }
    Ok(((concordant - discordant) as f64 / denom.sqrt()).clamp(-1.0, 1.0))
}

/// Fraction of `(better, worse)` pairs scored in the right order; exact ties count one half.
pub fn preference_accuracy(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits: f64 = pairs
        .iter()
        .map(|&(b, w)| match b.partial_cmp(&w) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Equal) => 0.5,
            _ => 0.0,
        })
        .sum();
    Ok(hits / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LevelMatch {
    Level(String),
    NoMatch,
}

/// Finds the vocabulary level mentioned in free text.
///
/// Text and tokens are lowercased with punctuation treated as word breaks. The
/// longest matching token wins; among equally long tokens the one occurring
/// first wins. Two different tokens matching at the same place is ambiguous.
pub fn distill_and_match(answer_text: &str, vocabulary: &[String]) -> Result<LevelMatch> {
    if vocabulary.is_empty() {
        return Err(MetricError::InvalidVocabulary("empty vocabulary".into()));
    }
    let text = normalize_words(answer_text);
    // (word count, start position, token index)
    let mut best: Option<(usize, usize, usize)> = None;
    for (ti, token) in vocabulary.iter().enumerate() {
        let words = normalize_words(token);
        if words.is_empty() || words.len() > text.len() {
            continue;
        }
        let Some(start) = text.windows(words.len()).position(|w| w == words.as_slice()) else {
            continue;
        };
        best = match best {
            None => Some((words.len(), start, ti)),
            Some((len, pos, bi)) => {
                if words.len() > len || (words.len() == len && start < pos) {
                    Some((words.len(), start, ti))
                } else if words.len() == len && start == pos && vocabulary[bi] != *token {
                    return Err(MetricError::Ambiguous(vocabulary[bi].clone(), token.clone()));
                } else {
                    Some((len, pos, bi))
                }
            }
        };
    }
    Ok(best.map_or(LevelMatch::NoMatch, |(_, _, i)| {
        LevelMatch::Level(vocabulary[i].clone())
    }))
}

/// One scored single-choice question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaItem {
    pub image_id: String,
    pub dimension: Perspective,
    pub factor: Factor,
    pub question: String,
    pub reference_answer: String,
    pub model_answer_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionAccuracy {
    pub accuracy: f64,
    pub n_images: usize,
    pub n_questions: usize,
    pub n_nomatch: usize,
}

pub type VqaReport = BTreeMap<Perspective, DimensionAccuracy>;

/// Per-dimension accuracy: averaged over each image's questions first, then over images.
/// Unmatched or ambiguous answers count as incorrect. Dimensions without items are absent.
pub fn vqa_accuracy(items: &[VqaItem], vocabularies: &LevelVocabularies) -> Result<VqaReport> {
    // dimension -> image -> (correct, total)
    let mut tallies: BTreeMap<Perspective, BTreeMap<&str, (usize, usize)>> = BTreeMap::new();
    let mut nomatch: BTreeMap<Perspective, usize> = BTreeMap::new();
    for item in items {
        let vocab = vocabularies.get(item.factor);
        if !vocab.contains(&item.reference_answer) {
            return Err(MetricError::InvalidReference {
                factor: item.factor,
                answer: item.reference_answer.clone(),
            });
        }
        let correct = match distill_and_match(&item.model_answer_text, vocab) {
            Ok(LevelMatch::Level(l)) => l == item.reference_answer,
            Ok(LevelMatch::NoMatch) => {
                *nomatch.entry(item.dimension).or_default() += 1;
                false
            }
            Err(MetricError::Ambiguous(..)) => false,
            Err(e) => return Err(e),
        };
        let t = tallies
            .entry(item.dimension)
            .or_default()
            .entry(item.image_id.as_str())
            .or_default();
        t.0 += usize::from(correct);
        t.1 += 1;
    }
    Ok(tallies
        .into_iter()
        .map(|(dim, images)| {
            let per_image: f64 = images.values().map(|&(c, n)| c as f64 / n as f64).sum();
            let report = DimensionAccuracy {
                accuracy: per_image / images.len() as f64,
                n_images: images.len(),
                n_questions: images.values().map(|t| t.1).sum(),
                n_nomatch: nomatch.get(&dim).copied().unwrap_or(0),
            };
            (dim, report)
        })
        .collect())
}

/// SRCC, PLCC and KRCC of one series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub srcc: f64,
    pub plcc: f64,
    pub krcc: f64,
    pub n: usize,
}

impl CorrelationReport {
    pub fn compute(s: &ScoreSeries) -> Result<Self> {
        Ok(Self {
            srcc: srcc(s)?,
            plcc: plcc(s)?,
            krcc: krcc(s)?,
            n: s.len(),
        })
    }
}
