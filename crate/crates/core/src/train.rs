//! Losses, optimizer, schedule and the three training stages.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Write};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{load_image, Dataset, DatasetError, RgbImage};
use crate::levels::Perspective;
use crate::metrics::{srcc, ScoreSeries};
use crate::model::{compose_record, tokenize, Model, ModelConfig, ModelError, ScoreFeatures, StageScope, Vocab};
use crate::params::{Graph, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("training configuration: {0}")]
    Config(String),
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum TrainMode {
    /// Sum of every head's loss.
    Joint,
    /// Only `target` shapes the shared trunk; other heads train on detached features.
    Single { target: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    Pairwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            mode: TrainMode::Joint,
            loss: LossKind::L1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Model configuration plus one training configuration per stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub stage3: TrainConfig,
}

/// Toy vocabulary covering a dataset's prompts, QA pairs, head instructions and level words.
pub fn dataset_vocab(config: &ModelConfig, dataset: &Dataset) -> Vec<String> {
    let mut texts: Vec<String> = dataset.prompts.iter().map(|p| compose_record(config, p)).collect();
    texts.extend(dataset.qa_pairs().into_iter().flat_map(|q| [q.question, q.answer]));
    texts.extend(config.instructions.iter().cloned());
    texts.extend(Perspective::ALL.iter().map(|p| p.question().to_owned()));
    for f in crate::levels::Factor::ALL {
        texts.push(f.question().to_owned());
        texts.extend(config.levels.get(f).iter().cloned());
    }
    Vocab::build(texts.iter().map(String::as_str)).tokens().to_vec()
}

/// Mean absolute error over every (sample, head) pair.
pub fn l1_loss(predicted: &[Vec<f64>], labels: &[Vec<f64>]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(TrainError::LengthMismatch(predicted.len(), labels.len()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, l) in predicted.iter().zip(labels) {
        if p.len() != l.len() {
            return Err(TrainError::LengthMismatch(p.len(), l.len()));
        }
        sum += p.iter().zip(l).map(|(a, b)| (a - b).abs()).sum::<f64>();
        n += p.len();
    }
    if n == 0 {
        return Err(TrainError::Config("l1 loss of nothing".into()));
    }
    Ok(sum / n as f64)
}

/// `-ln σ(better - worse)`, numerically stable.
pub fn pairwise_loss(score_better: f64, score_worse: f64) -> f64 {
    let m = score_better - score_worse;
    // -ln σ(m) = ln(1 + e^{-m})
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

/// Tape version of [`l1_loss`]: `preds` are `[1, 1]` scores, one per label.
pub fn l1_loss_var(tape: &mut Tape, preds: &[Var], labels: &[f64]) -> Result<Var> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(TrainError::LengthMismatch(preds.len(), labels.len()));
    }
    let p = tape.concat(preds, 0)?;
    let n = labels.len();
    let l = tape.constant(Tensor::new(vec![n, 1], labels.to_vec())?);
    Ok(tape.l1(p, l)?)
}

/// Tape version of the batch-mean pairwise loss.
pub fn pairwise_loss_var(tape: &mut Tape, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(TrainError::Config("pairwise loss of nothing".into()));
    }
    let better: Vec<Var> = pairs.iter().map(|p| p.0).collect();
    let worse: Vec<Var> = pairs.iter().map(|p| p.1).collect();
    let b = tape.concat(&better, 0)?;
    let w = tape.concat(&worse, 0)?;
    let margin = tape.sub(b, w)?;
    let ls = tape.log_sigmoid(margin);
    let mean = tape.mean(ls);
    Ok(tape.scale(mean, -1.0))
}

/// Every `(better, worse)` pair implied by a best-first ranking, in lexicographic order.
pub fn ranking_expand<T: Clone>(ranked: &[T]) -> Vec<(T, T)> {
    let mut out = Vec::with_capacity(ranked.len() * ranked.len().saturating_sub(1) / 2);
    for i in 0..ranked.len() {
        for j in i + 1..ranked.len() {
            out.push((ranked[i].clone(), ranked[j].clone()));
        }
    }
    out
}

/// `lr0 · ½(1 + cos(π t / (T − 1)))`; a single-step schedule stays at `lr0`.
pub fn cosine_lr(lr0: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return lr0;
    }
    let frac = step.min(total_steps - 1) as f64 / (total_steps - 1) as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam with bias correction. Parameters without a gradient are left untouched.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.beta1, c.beta2, c.adam_eps)
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            if !p.requires_grad() {
                continue;
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                if update != 0.0 {
                    *x -= update;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    /// Per-head train SRCC; `None` where undefined.
    pub train_srcc: Vec<Option<f64>>,
}

pub fn write_history(w: &mut impl Write, history: &[HistoryRecord]) -> io::Result<()> {
    for r in history {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub history: Vec<HistoryRecord>,
    pub srcc_before: Vec<Option<f64>>,
    pub srcc_after: Vec<Option<f64>>,
}

/// One (prompt, image) example with per-head labels.
#[derive(Debug, Clone)]
pub struct ScoreItem {
    pub image_id: String,
    pub prompt_id: String,
    pub text: String,
    pub image: RgbImage,
    pub labels: Vec<Option<f64>>,
}

/// A question with its reference answer about a (prompt, image) example.
#[derive(Debug, Clone)]
pub struct QaItem {
    pub image_id: String,
    pub text: String,
    pub image: RgbImage,
    pub question: String,
    pub answer: String,
}

/// Score items for every image, labels from MOS mapped to heads in perspective order.
pub fn score_items(model: &Model, dataset: &Dataset) -> Result<Vec<ScoreItem>> {
    let n = model.n_heads();
    if n > Perspective::ALL.len() {
        return Err(TrainError::Config(format!("{n} heads but only 3 MOS perspectives")));
    }
    let mos = dataset.mos_by_image();
    let mut cache: HashMap<&str, String> = HashMap::new();
    dataset
        .images
        .iter()
        .map(|img| {
            let prompt = dataset
                .prompt(&img.prompt_id)
                .ok_or_else(|| TrainError::Config(format!("unknown prompt `{}`", img.prompt_id)))?;
            let text = cache
                .entry(img.prompt_id.as_str())
                .or_insert_with(|| model.compose_record(prompt))
                .clone();
            let labels = (0..n)
                .map(|i| mos.get(img.image_id.as_str()).and_then(|m| m.get(Perspective::ALL[i])))
                .collect();
            Ok(ScoreItem {
                image_id: img.image_id.clone(),
                prompt_id: img.prompt_id.clone(),
                text,
                image: load_image(dataset.image_path(img))?,
                labels,
            })
        })
        .collect()
}

/// QA items generated from every annotation.
pub fn qa_items(model: &Model, dataset: &Dataset) -> Result<Vec<QaItem>> {
    let mut images: HashMap<&str, (String, RgbImage)> = HashMap::new();
    let mut out = Vec::new();
    for pair in dataset.qa_pairs() {
        if !images.contains_key(pair.image_id.as_str()) {
            let img = dataset
                .image(&pair.image_id)
                .ok_or_else(|| TrainError::Config(format!("unknown image `{}`", pair.image_id)))?;
            let prompt = dataset
                .prompt(&img.prompt_id)
                .ok_or_else(|| TrainError::Config(format!("unknown prompt `{}`", img.prompt_id)))?;
            let rgb = load_image(dataset.image_path(img))?;
            images.insert(img.image_id.as_str(), (model.compose_record(prompt), rgb));
        }
        let (text, image) = images[pair.image_id.as_str()].clone();
        out.push(QaItem {
            image_id: pair.image_id,
            text,
            image,
            question: pair.question,
            answer: pair.answer,
        });
    }
    Ok(out)
}

/// Per-head SRCC of `preds` (item × head) against the labelled subset.
pub fn per_head_srcc(preds: &[Vec<f64>], items: &[ScoreItem]) -> Vec<Option<f64>> {
    let n = preds.first().map_or(0, Vec::len);
    (0..n)
        .map(|h| {
            let (p, l): (Vec<f64>, Vec<f64>) = preds
                .iter()
                .zip(items)
                .filter_map(|(p, it)| it.labels[h].map(|l| (p[h], l)))
                .unzip();
            ScoreSeries::new(p, l).and_then(|s| srcc(&s)).ok()
        })
        .collect()
}

/// Pairwise examples per head: within each prompt, images ranked by MOS, ties dropped.
pub fn ranking_pairs(items: &[ScoreItem], n_heads: usize) -> Vec<(usize, usize, usize)> {
    let mut by_prompt: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        by_prompt.entry(it.prompt_id.as_str()).or_default().push(i);
    }
    let mut out = Vec::new();
    for h in 0..n_heads {
        for members in by_prompt.values() {
            let mut ranked: Vec<(usize, f64)> = members
                .iter()
                .filter_map(|&i| items[i].labels[h].map(|l| (i, l)))
                .collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let order: Vec<(usize, f64)> = ranked;
            for ((b, lb), (w, lw)) in ranking_expand(&order) {
                if lb > lw {
                    out.push((h, b, w));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
enum Example {
    Item(usize),
    Pair { head: usize, better: usize, worse: usize },
}

fn examples(items: &[ScoreItem], n_heads: usize, loss: LossKind) -> Result<Vec<Example>> {
    match loss {
        LossKind::L1 => {
            if !items.iter().any(|it| it.labels.iter().any(Option::is_some)) {
                return Err(TrainError::Config("l1 loss needs MOS labels".into()));
            }
            Ok((0..items.len()).map(Example::Item).collect())
        }
        LossKind::Pairwise => {
            let pairs = ranking_pairs(items, n_heads);
            if pairs.is_empty() {
                return Err(TrainError::Config(
                    "pairwise loss needs at least one ranked pair".into(),
                ));
            }
            Ok(pairs
                .into_iter()
                .map(|(head, better, worse)| Example::Pair { head, better, worse })
                .collect())
        }
    }
}

/// Builds the batch loss; `forward(g, item)` returns one `[1, 1]` score per head.
fn batch_loss<F>(g: &mut Graph<'_>, batch: &[Example], items: &[ScoreItem], mut forward: F) -> Result<Option<Var>>
where
    F: FnMut(&mut Graph<'_>, usize) -> Result<Vec<Var>>,
{
    let mut scores: BTreeMap<usize, Vec<Var>> = BTreeMap::new();
    let mut score = |g: &mut Graph<'_>, i: usize| -> Result<Vec<Var>> {
        if let Some(s) = scores.get(&i) {
            return Ok(s.clone());
        }
        let s = forward(g, i)?;
        scores.insert(i, s.clone());
        Ok(s)
    };
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut pairs = Vec::new();
    for ex in batch {
        match *ex {
            Example::Item(i) => {
                if items[i].labels.iter().all(Option::is_none) {
                    continue;
                }
                let s = score(g, i)?;
                for (h, l) in items[i].labels.iter().enumerate() {
                    if let Some(l) = l {
                        preds.push(s[h]);
                        labels.push(*l);
                    }
                }
            }
            Example::Pair { head, better, worse } => {
                let b = score(g, better)?[head];
                let w = score(g, worse)?[head];
                pairs.push((b, w));
            }
        }
    }
    if !preds.is_empty() {
        return Ok(Some(l1_loss_var(&mut g.tape, &preds, &labels)?));
    }
    if !pairs.is_empty() {
        return Ok(Some(pairwise_loss_var(&mut g.tape, &pairs)?));
    }
    Ok(None)
}

/// Shared epoch loop: shuffles examples, steps Adam on a cosine schedule and logs SRCC.
#[allow(clippy::too_many_arguments)]
fn run_epochs<F, E>(
    stage: u8,
    model: &mut Model,
    items: &[ScoreItem],
    cfg: &TrainConfig,
    examples: Vec<Example>,
    forward: F,
    mut evaluate: E,
) -> Result<Vec<HistoryRecord>>
where
    F: Fn(&Model, &mut Graph<'_>, usize) -> Result<Vec<Var>>,
    E: FnMut(&Model) -> Result<Vec<Option<f64>>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::from_config(cfg);
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order = examples;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut lr = cfg.learning_rate;
        for batch in order.chunks(cfg.batch_size) {
            lr = cosine_lr(cfg.learning_rate, step, total);
            step += 1;
            let grads = {
                let mut g = Graph::new(&model.params);
                let m: &Model = model;
                let Some(loss) = batch_loss(&mut g, batch, items, |g, i| forward(m, g, i))? else {
                    continue;
                };
                loss_sum += g.tape.value(loss)[0];
                batches += 1;
                g.tape.backward(loss)?;
                g.grads()
            };
            adam.step(&mut model.params, &grads, lr);
        }
        let srcc = evaluate(model)?;
        let loss = if batches == 0 { 0.0 } else { loss_sum / batches as f64 };
        info!("stage {stage} epoch {epoch}: loss {loss:.6} srcc {srcc:?}");
        history.push(HistoryRecord {
            stage,
            epoch,
            loss,
            lr,
            train_srcc: srcc,
        });
    }
    Ok(history)
}

/// Score-path predictions for every item.
pub fn predict_all(model: &Model, items: &[ScoreItem]) -> Result<Vec<Vec<f64>>> {
    items
        .iter()
        .map(|it| Ok(model.predict_scores_text(&it.text, &it.image)?))
        .collect()
}

/// Stage 1: encoders (respecting fix rate), querying transformer and heads.
pub fn stage1_pretrain(model: &mut Model, items: &[ScoreItem], cfg: &TrainConfig) -> Result<StageOutcome> {
    cfg.validate()?;
    let n = model.n_heads();
    if let TrainMode::Single { target } = cfg.mode {
        if target >= n {
            return Err(TrainError::Config(format!("target head {target} of {n}")));
        }
    }
    let ex = examples(items, n, cfg.loss)?;
    let ids: Vec<Vec<usize>> = items
        .iter()
        .map(|it| model.text_ids(&it.text))
        .collect::<std::result::Result<_, _>>()?;
    model.set_scope(StageScope::ScorePath);
    let srcc_before = per_head_srcc(&predict_all(model, items)?, items);
    let mode = cfg.mode;
    let forward = |m: &Model, g: &mut Graph<'_>, i: usize| -> Result<Vec<Var>> {
        let path = m.score_path(g, &ids[i], &items[i].image)?;
        let detached = match mode {
            TrainMode::Joint => None,
            TrainMode::Single { .. } => {
                let t = g.tape.tensor(path.pooled).clone().with_requires_grad(false);
                Some(g.tape.constant(t))
            }
        };
        (0..m.n_heads())
            .map(|h| {
                let input = match (mode, detached) {
                    (TrainMode::Single { target }, Some(d)) if h != target => d,
                    _ => path.pooled,
                };
                Ok(m.head(g, h, input)?)
            })
            .collect()
    };
    let history = run_epochs(1, model, items, cfg, ex, forward, |m| {
        Ok(per_head_srcc(&predict_all(m, items)?, items))
    })?;
    model.set_scope(StageScope::Frozen);
    model.stage = model.stage.max(1);
    let srcc_after = history
        .last()
        .map_or_else(|| srcc_before.clone(), |h| h.train_srcc.clone());
    Ok(StageOutcome {
        history,
        srcc_before,
        srcc_after,
    })
}

/// Fraction of items whose greedy answer equals the reference token-for-token.
pub fn exact_match(model: &Model, items: &[QaItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(TrainError::Config("no QA items".into()));
    }
    let mut hits = 0usize;
    for it in items {
        if model.answer_tokens(&it.text, &it.image, &it.question)? == tokenize(&it.answer) {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}

/// Stage 2: instruction path only, next-token cross-entropy on answers.
pub fn stage2_instruction_tune(model: &mut Model, items: &[QaItem], cfg: &TrainConfig) -> Result<Vec<HistoryRecord>> {
    cfg.validate()?;
    if model.stage < 1 {
        return Err(TrainError::Config("stage 2 requires a stage-1 model".into()));
    }
    if items.is_empty() {
        return Err(TrainError::Config("stage 2 requires QA pairs".into()));
    }
    let mut features: HashMap<(String, String), ScoreFeatures> = HashMap::new();
    for it in items {
        let key = (it.image_id.clone(), it.text.clone());
        if let std::collections::hash_map::Entry::Vacant(e) = features.entry(key) {
            e.insert(model.score_features(&it.text, &it.image)?);
        }
    }
    let prepared: Vec<(&ScoreFeatures, Vec<usize>, Vec<usize>)> = items
        .iter()
        .map(|it| {
            let f = &features[&(it.image_id.clone(), it.text.clone())];
            Ok((f, model.text_ids(&it.question)?, model.vocab.encode(&it.answer)))
        })
        .collect::<Result<_>>()?;
    model.set_scope(StageScope::InstructionPath);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::from_config(cfg);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let total = order.len().div_ceil(cfg.batch_size) * cfg.epochs;
    let mut step = 0;
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.learning_rate;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            lr = cosine_lr(cfg.learning_rate, step, total);
            step += 1;
            let grads = {
                let mut g = Graph::new(&model.params);
                let mut losses = Vec::with_capacity(batch.len());
                for &i in batch {
                    let (f, q, a) = &prepared[i];
                    let img = g.tape.constant(f.image.clone());
                    let q1 = g.tape.constant(f.queries.clone());
                    let rep = model.instruction_path(&mut g, Some(q1), q, img)?;
                    losses.push(model.answer_loss(&mut g, rep, q, a)?);
                }
                let sum = g.tape.sum_of(&losses)?;
                let loss = g.tape.scale(sum, 1.0 / losses.len() as f64);
                loss_sum += g.tape.value(loss)[0];
                batches += 1;
                g.tape.backward(loss)?;
                g.grads()
            };
            adam.step(&mut model.params, &grads, lr);
        }
        let loss = loss_sum / batches.max(1) as f64;
        info!("stage 2 epoch {epoch}: loss {loss:.6}");
        history.push(HistoryRecord {
            stage: 2,
            epoch,
            loss,
            lr,
            train_srcc: Vec::new(),
        });
    }
    model.set_scope(StageScope::Frozen);
    model.stage = model.stage.max(2);
    Ok(history)
}

/// Stage 3: only the widened heads train, on cached frozen features. Each head keeps
/// its best-SRCC weights seen so far, starting from the stage-1-equivalent initialization.
pub fn stage3_feedback_finetune(model: &mut Model, items: &[ScoreItem], cfg: &TrainConfig) -> Result<StageOutcome> {
    cfg.validate()?;
    if model.stage < 2 {
        return Err(TrainError::Config("stage 3 requires a stage-2 model".into()));
    }
    let n = model.n_heads();
    let ex = examples(items, n, cfg.loss)?;
    if !model.has_feedback_heads() {
        model.widen_heads()?;
    }
    let cached: Vec<(Tensor, Vec<Tensor>)> = items
        .iter()
        .map(|it| {
            let f = model.score_features(&it.text, &it.image)?;
            let inst = (0..n)
                .map(|h| model.feedback_features(&f, h))
                .collect::<std::result::Result<_, _>>()?;
            Ok((f.pooled, inst))
        })
        .collect::<Result<_>>()?;
    let predict = |m: &Model| -> Result<Vec<Vec<f64>>> {
        cached
            .iter()
            .map(|(p, inst)| (0..n).map(|h| Ok(m.feedback_score_from(p, &inst[h], h)?)).collect())
            .collect()
    };
    model.set_scope(StageScope::FeedbackHeads);
    let srcc_before = per_head_srcc(&predict(model)?, items);
    let head_params = |h: usize| -> Vec<String> {
        ["fc1.w", "fc1.b", "fc2.w", "fc2.b"]
            .iter()
            .map(|p| format!("feedback_head.{h}.{p}"))
            .collect()
    };
    let save = |m: &Model, h: usize| -> Vec<Tensor> {
        head_params(h)
            .iter()
            .map(|p| m.params.get(p).expect("head").clone())
            .collect()
    };
    let mut best: Vec<(f64, Vec<Tensor>)> = (0..n)
        .map(|h| (srcc_before[h].unwrap_or(f64::NEG_INFINITY), save(model, h)))
        .collect();
    let forward = |m: &Model, g: &mut Graph<'_>, i: usize| -> Result<Vec<Var>> {
        let (p, inst) = &cached[i];
        let pv = g.tape.constant(p.clone());
        (0..n)
            .map(|h| {
                let iv = g.tape.constant(inst[h].clone());
                Ok(m.feedback_head(g, h, pv, iv)?)
            })
            .collect()
    };
    let history = run_epochs(3, model, items, cfg, ex, forward, |m| {
        let srcc = per_head_srcc(&predict(m)?, items);
        for (h, s) in srcc.iter().enumerate() {
            if let Some(s) = *s {
                if s > best[h].0 {
                    best[h] = (s, save(m, h));
                }
            }
        }
        Ok(srcc)
    })?;
    for (h, (_, tensors)) in best.into_iter().enumerate() {
        for (name, t) in head_params(h).into_iter().zip(tensors) {
            model.params.insert(name, t);
        }
    }
    model.set_scope(StageScope::Frozen);
    model.stage = 3;
    let srcc_after = per_head_srcc(&predict(model)?, items);
    Ok(StageOutcome {
        history,
        srcc_before,
        srcc_after,
    })
}

/// Runs the requested stages in ascending order, starting from `start` or a fresh model.
/// Each stage checks the previous one has completed.
pub fn run_stages(
    plan: &TrainPlan,
    dataset: &Dataset,
    start: Option<Model>,
    stages: &[u8],
    mut on_stage_done: impl FnMut(&Model, u8) -> Result<()>,
) -> Result<(Model, Vec<HistoryRecord>)> {
    let mut stages = stages.to_vec();
    stages.sort_unstable();
    stages.dedup();
    if let Some(bad) = stages.iter().find(|s| !(1..=3).contains(*s)) {
        return Err(TrainError::Config(format!("unknown stage {bad}")));
    }
    let mut model = match start {
        Some(m) => m,
        None if stages.first() == Some(&1) => {
            let mut config = plan.model.clone();
            config.vocab = dataset_vocab(&config, dataset);
            Model::new(config)?
        }
        None => {
            return Err(TrainError::Config(format!(
                "stage {} needs a checkpoint from stage {}",
                stages.first().copied().unwrap_or(1),
                stages.first().copied().unwrap_or(1).saturating_sub(1)
            )))
        }
    };
    let mut history = Vec::new();
    let mut score = None;
    for stage in stages {
        if model.stage + 1 < stage {
            return Err(TrainError::Config(format!(
                "stage {stage} needs a stage-{} checkpoint, model has completed stage {}",
                stage - 1,
                model.stage
            )));
        }
        if stage != 2 && score.is_none() {
            score = Some(score_items(&model, dataset)?);
        }
        let items = score.as_deref().unwrap_or_default();
        match stage {
            1 => {
                history.extend(stage1_pretrain(&mut model, items, &plan.stage1)?.history);
            }
            2 => {
                let qa = qa_items(&model, dataset)?;
                history.extend(stage2_instruction_tune(&mut model, &qa, &plan.stage2)?);
            }
            _ => {
                history.extend(stage3_feedback_finetune(&mut model, items, &plan.stage3)?.history);
            }
        }
        on_stage_done(&model, stage)?;
    }
    Ok((model, history))
}
