//! Toy-scale multi-perspective scoring network.
//!
//! Score path: image encoder and text encoder feed a querying transformer
//! whose mean-pooled queries drive one regressor head per perspective.
//! Instruction path: a second querying transformer, seeded from the first
//! through a zero-initialized linear map, feeds an adapter and a small causal
//! decoder that answers questions. Feedback path: widened heads read the
//! concatenation of both pooled representations.

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::dataset::{PromptRecord, RgbImage};
use crate::levels::{LevelVocabularies, Perspective};
use crate::params::{Graph, ParamStore};
use crate::segment::{segment_rule_based, StyleLexicon};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model configuration: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

const MASKED: f64 = -1e9;

/// Lowercases, splits on whitespace and separates punctuation into single-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Inverse of [`tokenize`] up to whitespace: no space before `,;:.!?` and none around `-`.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    for t in tokens {
        let t = t.as_ref();
        let attaches_left = matches!(t, "," | ";" | ":" | "." | "!" | "?" | "-");
        if !glue_next && !attaches_left {
            out.push(' ');
        }
        out.push_str(t);
        glue_next = t == "-";
    }
    out
}

/// Token list with the four special tokens first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials followed by every distinct token of `texts`, sorted.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| (*s).to_owned())
            .chain(words.into_iter().filter(|w| !SPECIAL_TOKENS.contains(&w.as_str())))
            .collect();
        Self::from_tokens(tokens).expect("built vocabularies are well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..4] != SPECIAL_TOKENS {
            return Err(ModelError::Config(
                "vocabulary must start with the special tokens".into(),
            ));
        }
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(ModelError::Config("vocabulary has duplicate tokens".into()));
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    First,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_image_layers: usize,
    pub n_text_layers: usize,
    pub n_qformer_layers: usize,
    pub n_decoder_layers: usize,
    pub n_queries: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub max_text_len: usize,
    pub answer_max_len: usize,
    pub vocab: Vec<String>,
    pub levels: LevelVocabularies,
    pub n_regressors: usize,
    pub fix_rate: f64,
    /// Head output is `score_center + score_scale * h`.
    pub score_center: f64,
    pub score_scale: f64,
    pub pooling: Pooling,
    /// Canonical instruction per head, used by the feedback path.
    pub instructions: Vec<String>,
    /// Stage-1 to stage-2 connection; disabling it is an ablation.
    pub zero_conv: bool,
    /// Append style/content/atmosphere annotations to prompts.
    pub segment_prompts: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            n_image_layers: 2,
            n_text_layers: 1,
            n_qformer_layers: 2,
            n_decoder_layers: 1,
            n_queries: 4,
            patch_size: 4,
            image_size: 16,
            max_text_len: 32,
            answer_max_len: 12,
            vocab: SPECIAL_TOKENS.iter().map(|s| (*s).to_owned()).collect(),
            levels: LevelVocabularies::default(),
            n_regressors: 3,
            fix_rate: 0.7,
            score_center: 50.0,
            score_scale: 25.0,
            pooling: Pooling::Mean,
            instructions: Perspective::ALL.iter().map(|p| p.instruction().to_owned()).collect(),
            zero_conv: true,
            segment_prompts: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Config(m.to_owned()));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail("d_model must be a positive multiple of n_heads");
        }
        if self.n_queries == 0 {
            return fail("n_queries must be at least 1");
        }
        if self.n_regressors == 0 {
            return fail("n_regressors must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.fix_rate) {
            return fail("fix_rate must lie in [0, 1]");
        }
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail("image_size must be a positive multiple of patch_size");
        }
        if self.max_text_len == 0 || self.answer_max_len == 0 {
            return fail("max_text_len and answer_max_len must be positive");
        }
        if self.instructions.len() != self.n_regressors {
            return fail("need exactly one instruction per regressor head");
        }
        if !(self.score_scale.is_finite() && self.score_scale != 0.0 && self.score_center.is_finite()) {
            return fail("score affine map must be finite and non-degenerate");
        }
        self.levels.validate().map_err(ModelError::Config)?;
        Vocab::from_tokens(self.vocab.clone())?;
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Number of leading image-encoder blocks frozen by `fix_rate`.
    pub fn frozen_image_layers(&self) -> usize {
        // The epsilon keeps products such as 0.29 * 100 from rounding down a whole layer.
        ((self.fix_rate * self.n_image_layers as f64) + 1e-9).floor() as usize
    }

    fn decoder_positions(&self) -> usize {
        self.n_queries + self.max_text_len + self.answer_max_len + 1
    }

    /// Instructions defaulting to the canonical perspective wording for the first `n` heads.
    pub fn default_instructions(n: usize) -> Vec<String> {
        Perspective::ALL
            .iter()
            .take(n)
            .map(|p| p.instruction().to_owned())
            .collect()
    }
}

/// Which parameter groups a training stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageScope {
    Frozen,
    ScorePath,
    InstructionPath,
    FeedbackHeads,
}

/// The network together with its parameters and the last completed training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub stage: u8,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn randn(&mut self, name: String, shape: &[usize], std: f64) {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.insert(name, t);
    }

    fn zeros(&mut self, name: String, shape: &[usize]) {
        self.store.insert(name, Tensor::zeros(shape));
    }

    fn linear(&mut self, p: &str, din: usize, dout: usize) {
        self.randn(format!("{p}.w"), &[din, dout], (1.0 / din as f64).sqrt());
        self.zeros(format!("{p}.b"), &[dout]);
    }

    fn layer_norm(&mut self, p: &str, d: usize) {
        self.store.insert(format!("{p}.g"), Tensor::full(&[d], 1.0));
        self.zeros(format!("{p}.b"), &[d]);
    }

    fn attention(&mut self, p: &str, d: usize) {
        for proj in ["q", "k", "v", "o"] {
            self.linear(&format!("{p}.{proj}"), d, d);
        }
    }

    fn ffn(&mut self, p: &str, d: usize) {
        self.linear(&format!("{p}.fc1"), d, 2 * d);
        self.linear(&format!("{p}.fc2"), 2 * d, d);
    }

    fn block(&mut self, p: &str, d: usize) {
        self.layer_norm(&format!("{p}.ln1"), d);
        self.attention(&format!("{p}.attn"), d);
        self.layer_norm(&format!("{p}.ln2"), d);
        self.ffn(&format!("{p}.ffn"), d);
    }

    fn qformer(&mut self, p: &str, cfg: &ModelConfig) {
        let d = cfg.d_model;
        self.randn(format!("{p}.queries"), &[cfg.n_queries, d], 1.0);
        for l in 0..cfg.n_qformer_layers {
            let lp = format!("{p}.layer.{l}");
            self.layer_norm(&format!("{lp}.ln1"), d);
            self.attention(&format!("{lp}.sa"), d);
            self.layer_norm(&format!("{lp}.ln2"), d);
            self.attention(&format!("{lp}.ca"), d);
            self.layer_norm(&format!("{lp}.ln3"), d);
            self.ffn(&format!("{lp}.ffn"), d);
        }
    }
}

/// Intermediate values of one score-path forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ScorePath {
    pub image: Var,
    pub text: Var,
    pub queries: Var,
    pub pooled: Var,
}

/// Constant score-path features for one (prompt, image) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFeatures {
    pub image: Tensor,
    pub queries: Tensor,
    pub pooled: Tensor,
}

fn linear(g: &mut Graph<'_>, x: Var, p: &str) -> Result<Var> {
    let w = g.param(&format!("{p}.w"))?;
    let b = g.param(&format!("{p}.b"))?;
    let y = g.tape.matmul(x, w)?;
    Ok(g.tape.add_bias(y, b)?)
}

fn layer_norm(g: &mut Graph<'_>, x: Var, p: &str) -> Result<Var> {
    let gain = g.param(&format!("{p}.g"))?;
    let bias = g.param(&format!("{p}.b"))?;
    Ok(g.tape.layer_norm(x, gain, bias)?)
}

fn causal_mask(t: usize) -> Tensor {
    let data = (0..t * t).map(|i| if i % t > i / t { MASKED } else { 0.0 }).collect();
    Tensor::new(vec![t, t], data).expect("mask shape")
}

/// Multi-head scaled dot-product attention of `xq` over `xkv`.
fn attention(g: &mut Graph<'_>, xq: Var, xkv: Var, p: &str, n_heads: usize, mask: Option<Var>) -> Result<Var> {
    let q = linear(g, xq, &format!("{p}.q"))?;
    let k = linear(g, xkv, &format!("{p}.k"))?;
    let v = linear(g, xkv, &format!("{p}.v"))?;
    let d = g.tape.shape(q)[1];
    let dh = d / n_heads;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.tape.slice(q, 1, h * dh, dh)?;
        let kh = g.tape.slice(k, 1, h * dh, dh)?;
        let vh = g.tape.slice(v, 1, h * dh, dh)?;
        let kt = g.tape.transpose(kh)?;
        let s = g.tape.matmul(qh, kt)?;
        let mut s = g.tape.scale(s, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            s = g.tape.add(s, m)?;
        }
        let a = g.tape.softmax(s)?;
        heads.push(g.tape.matmul(a, vh)?);
    }
    let joined = if n_heads == 1 {
        heads[0]
    } else {
        g.tape.concat(&heads, 1)?
    };
    linear(g, joined, &format!("{p}.o"))
}

fn ffn(g: &mut Graph<'_>, x: Var, p: &str) -> Result<Var> {
    let h = linear(g, x, &format!("{p}.fc1"))?;
    let h = g.tape.gelu(h);
    linear(g, h, &format!("{p}.fc2"))
}

/// Pre-norm transformer block.
fn block(g: &mut Graph<'_>, x: Var, p: &str, n_heads: usize, mask: Option<Var>) -> Result<Var> {
    let n = layer_norm(g, x, &format!("{p}.ln1"))?;
    let a = attention(g, n, n, &format!("{p}.attn"), n_heads, mask)?;
    let x = g.tape.add(x, a)?;
    let n = layer_norm(g, x, &format!("{p}.ln2"))?;
    let f = ffn(g, n, &format!("{p}.ffn"))?;
    Ok(g.tape.add(x, f)?)
}

/// Querying transformer: queries and text tokens self-attend jointly, then
/// queries alone cross-attend to the image. Returns the updated queries.
pub fn qformer_forward(
    g: &mut Graph<'_>,
    prefix: &str,
    n_layers: usize,
    n_heads: usize,
    queries: Var,
    text: Var,
    image: Var,
) -> Result<Var> {
    let (k, d) = g.tape.tensor(queries).dims2("qformer")?;
    for (name, v) in [("text", text), ("image", image)] {
        let (_, dv) = g.tape.tensor(v).dims2("qformer")?;
        if dv != d {
            return Err(TensorError::Shape {
                op: if name == "text" {
                    "qformer text"
                } else {
                    "qformer image"
                },
                lhs: g.tape.shape(queries).to_vec(),
                rhs: g.tape.shape(v).to_vec(),
            }
            .into());
        }
    }
    let mut q = queries;
    let mut t = text;
    for l in 0..n_layers {
        let lp = format!("{prefix}.layer.{l}");
        let n_text = g.tape.shape(t)[0];
        let h = g.tape.concat(&[q, t], 0)?;
        let n = layer_norm(g, h, &format!("{lp}.ln1"))?;
        let a = attention(g, n, n, &format!("{lp}.sa"), n_heads, None)?;
        let h = g.tape.add(h, a)?;
        q = g.tape.slice(h, 0, 0, k)?;
        t = g.tape.slice(h, 0, k, n_text)?;
        let n = layer_norm(g, q, &format!("{lp}.ln2"))?;
        let c = attention(g, n, image, &format!("{lp}.ca"), n_heads, None)?;
        q = g.tape.add(q, c)?;
        let n = layer_norm(g, q, &format!("{lp}.ln3"))?;
        let f = ffn(g, n, &format!("{lp}.ffn"))?;
        q = g.tape.add(q, f)?;
    }
    Ok(q)
}

/// Flattens non-overlapping `p × p` patches into rows of `p·p·3` values.
pub fn patchify(image: &RgbImage, p: usize) -> Result<Tensor> {
    let side = image.width / p;
    let mut data = Vec::with_capacity(image.width * image.height * 3);
    for py in 0..image.height / p {
        for px in 0..side {
            for dy in 0..p {
                for dx in 0..p {
                    data.extend_from_slice(&image.pixel(px * p + dx, py * p + dy));
                }
            }
        }
    }
    Ok(Tensor::new(vec![(image.height / p) * side, p * p * 3], data)?)
}

impl Model {
    /// Fresh model with deterministic initialization from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::from_tokens(config.vocab.clone())?;
        let mut params = ParamStore::new();
        let d = config.d_model;
        let v = vocab.len();
        let mut init = Init {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let pp = config.patch_size * config.patch_size * 3;
        init.linear("image.patch", pp, d);
        init.randn("image.pos".into(), &[config.n_patches(), d], 0.5);
        for l in 0..config.n_image_layers {
            init.block(&format!("image.block.{l}"), d);
        }
        init.layer_norm("image.ln_f", d);

        init.randn("text.tok".into(), &[v, d], 1.0);
        init.randn("text.pos".into(), &[config.max_text_len, d], 0.5);
        for l in 0..config.n_text_layers {
            init.block(&format!("text.block.{l}"), d);
        }
        init.layer_norm("text.ln_f", d);

        init.qformer("qformer", &config);
        for i in 0..config.n_regressors {
            init.linear(&format!("head.{i}.fc1"), d, d);
            init.linear(&format!("head.{i}.fc2"), d, 1);
        }

        init.qformer("inst", &config);
        init.zeros("zero_conv.w".into(), &[d, d]);
        init.zeros("zero_conv.b".into(), &[d]);
        init.linear("adapter", d, d);
        init.randn("decoder.tok".into(), &[v, d], 1.0);
        init.randn("decoder.pos".into(), &[config.decoder_positions(), d], 0.5);
        for l in 0..config.n_decoder_layers {
            init.block(&format!("decoder.block.{l}"), d);
        }
        init.layer_norm("decoder.ln_f", d);
        init.linear("decoder.out", d, v);

        let mut model = Self {
            config,
            vocab,
            params,
            stage: 0,
        };
        model.set_scope(StageScope::ScorePath);
        Ok(model)
    }

    /// Number of regression heads; attention heads are `config.n_heads`.
    #[allow(clippy::misnamed_getters)]
    pub fn n_heads(&self) -> usize {
        self.config.n_regressors
    }

    pub fn has_feedback_heads(&self) -> bool {
        self.params.contains("feedback_head.0.fc1.w")
    }

    /// Marks parameters trainable for the given scope; everything else is frozen.
    pub fn set_scope(&mut self, scope: StageScope) {
        let frozen_layers = self.config.frozen_image_layers();
        let image_trainable = move |name: &str| -> bool {
            if let Some(rest) = name.strip_prefix("image.block.") {
                let layer: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(0);
                return layer >= frozen_layers;
            }
            // Patch and positional embeddings freeze together with the first block.
            frozen_layers == 0
        };
        self.params.set_trainable(|name| match scope {
            StageScope::Frozen => false,
            StageScope::ScorePath => {
                if name.starts_with("image.") {
                    image_trainable(name)
                } else {
                    ["text.", "qformer.", "head."].iter().any(|p| name.starts_with(p))
                }
            }
            StageScope::InstructionPath => ["inst.", "zero_conv.", "adapter.", "decoder."]
                .iter()
                .any(|p| name.starts_with(p)),
            StageScope::FeedbackHeads => name.starts_with("feedback_head."),
        });
    }

    /// Prompt text fed to the text encoder.
    pub fn compose(&self, raw: &str) -> String {
        compose_prompt(&self.config, raw)
    }

    /// Prompt text for a manifest record, preferring a stored segmentation.
    pub fn compose_record(&self, prompt: &PromptRecord) -> String {
        compose_record(&self.config, prompt)
    }

    /// Token ids truncated to `max_text_len`.
    pub fn text_ids(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = self.vocab.encode(text);
        if ids.is_empty() {
            return Err(ModelError::Input("text has no tokens".into()));
        }
        ids.truncate(self.config.max_text_len);
        Ok(ids)
    }

    pub fn encode_image(&self, g: &mut Graph<'_>, image: &RgbImage) -> Result<Var> {
        let s = self.config.image_size;
        if image.width != s || image.height != s {
            return Err(TensorError::Shape {
                op: "encode_image",
                lhs: vec![image.height, image.width],
                rhs: vec![s, s],
            }
            .into());
        }
        let patches = g.tape.constant(patchify(image, self.config.patch_size)?);
        let x = linear(g, patches, "image.patch")?;
        let pos = g.param("image.pos")?;
        let mut x = g.tape.add(x, pos)?;
        for l in 0..self.config.n_image_layers {
            x = block(g, x, &format!("image.block.{l}"), self.config.n_heads, None)?;
        }
        layer_norm(g, x, "image.ln_f")
    }

    pub fn encode_text(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(ModelError::Input("text has no tokens".into()));
        }
        if ids.len() > self.config.max_text_len {
            return Err(ModelError::Input(format!(
                "{} tokens exceed max_text_len {}",
                ids.len(),
                self.config.max_text_len
            )));
        }
        let table = g.param("text.tok")?;
        let x = g.tape.embedding(table, ids)?;
        let pos = g.param("text.pos")?;
        let pos = g.tape.slice(pos, 0, 0, ids.len())?;
        let mut x = g.tape.add(x, pos)?;
        for l in 0..self.config.n_text_layers {
            x = block(g, x, &format!("text.block.{l}"), self.config.n_heads, None)?;
        }
        layer_norm(g, x, "text.ln_f")
    }

    pub fn pool(&self, g: &mut Graph<'_>, queries: Var) -> Result<Var> {
        Ok(match self.config.pooling {
            Pooling::Mean => g.tape.mean_axis(queries, 0)?,
            Pooling::First => g.tape.slice(queries, 0, 0, 1)?,
        })
    }

    /// Score path up to the pooled query representation.
    pub fn score_path(&self, g: &mut Graph<'_>, text_ids: &[usize], image: &RgbImage) -> Result<ScorePath> {
        let img = self.encode_image(g, image)?;
        let text = self.encode_text(g, text_ids)?;
        let q0 = g.param("qformer.queries")?;
        let queries = qformer_forward(
            g,
            "qformer",
            self.config.n_qformer_layers,
            self.config.n_heads,
            q0,
            text,
            img,
        )?;
        let pooled = self.pool(g, queries)?;
        Ok(ScorePath {
            image: img,
            text,
            queries,
            pooled,
        })
    }

    fn affine(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let scaled = g.tape.scale(h, self.config.score_scale);
        let center = g.tape.constant(Tensor::full(&[1, 1], self.config.score_center));
        Ok(g.tape.add(scaled, center)?)
    }

    /// Regressor head `i` on a pooled `[1, d]` representation; returns a `[1, 1]` score.
    pub fn head(&self, g: &mut Graph<'_>, i: usize, pooled: Var) -> Result<Var> {
        let h = linear(g, pooled, &format!("head.{i}.fc1"))?;
        let h = g.tape.gelu(h);
        let h = linear(g, h, &format!("head.{i}.fc2"))?;
        self.affine(g, h)
    }

    /// Widened head `i` on the concatenated `[1, 2d]` representation.
    pub fn feedback_head(&self, g: &mut Graph<'_>, i: usize, pooled: Var, pooled_inst: Var) -> Result<Var> {
        let x = g.tape.concat(&[pooled, pooled_inst], 1)?;
        let h = linear(g, x, &format!("feedback_head.{i}.fc1"))?;
        let h = g.tape.gelu(h);
        let h = linear(g, h, &format!("feedback_head.{i}.fc2"))?;
        self.affine(g, h)
    }

    /// Scores in head order for a prompt that is already composed.
    pub fn predict_scores_text(&self, text: &str, image: &RgbImage) -> Result<Vec<f64>> {
        let ids = self.text_ids(text)?;
        let mut g = Graph::new(&self.params);
        let path = self.score_path(&mut g, &ids, image)?;
        (0..self.n_heads())
            .map(|i| {
                let s = self.head(&mut g, i, path.pooled)?;
                Ok(g.tape.value(s)[0])
            })
            .collect()
    }

    /// Scores in head order (quality, authenticity, correspondence, ...).
    pub fn predict_scores(&self, prompt: &str, image: &RgbImage) -> Result<Vec<f64>> {
        self.predict_scores_text(&self.compose(prompt), image)
    }

    /// Frozen score-path values, reusable as constants while later stages train.
    pub fn score_features(&self, text: &str, image: &RgbImage) -> Result<ScoreFeatures> {
        let ids = self.text_ids(text)?;
        let mut g = Graph::new(&self.params);
        let path = self.score_path(&mut g, &ids, image)?;
        Ok(ScoreFeatures {
            image: g.tape.tensor(path.image).clone(),
            queries: g.tape.tensor(path.queries).clone(),
            pooled: g.tape.tensor(path.pooled).clone(),
        })
    }

    /// Instruction-aware representation `[K, d]`. `stage1_queries` of `None` disables the connection.
    pub fn instruction_path(
        &self,
        g: &mut Graph<'_>,
        stage1_queries: Option<Var>,
        instruction_ids: &[usize],
        image: Var,
    ) -> Result<Var> {
        let inst_text = self.encode_text(g, instruction_ids)?;
        let mut q0 = g.param("inst.queries")?;
        if let (Some(q1), true) = (stage1_queries, self.config.zero_conv) {
            let bridged = linear(g, q1, "zero_conv")?;
            q0 = g.tape.add(q0, bridged)?;
        }
        qformer_forward(
            g,
            "inst",
            self.config.n_qformer_layers,
            self.config.n_heads,
            q0,
            inst_text,
            image,
        )
    }

    /// Instruction-aware representation for a composed prompt, image and instruction.
    pub fn instruction_forward(&self, text: &str, image: &RgbImage, instruction: &str) -> Result<Tensor> {
        let features = self.score_features(text, image)?;
        let inst = self.text_ids(instruction)?;
        let mut g = Graph::new(&self.params);
        let img = g.tape.constant(features.image);
        let q1 = g.tape.constant(features.queries);
        let rep = self.instruction_path(&mut g, Some(q1), &inst, img)?;
        Ok(g.tape.tensor(rep).clone())
    }

    /// Decoder logits `[K + |instruction| + |answer_in|, V]`.
    pub fn decoder_logits(
        &self,
        g: &mut Graph<'_>,
        rep: Var,
        instruction_ids: &[usize],
        answer_in: &[usize],
    ) -> Result<Var> {
        let prefix = linear(g, rep, "adapter")?;
        let ids: Vec<usize> = instruction_ids.iter().chain(answer_in).copied().collect();
        let table = g.param("decoder.tok")?;
        let tok = g.tape.embedding(table, &ids)?;
        let x = g.tape.concat(&[prefix, tok], 0)?;
        let t = g.tape.shape(x)[0];
        if t > self.config.decoder_positions() {
            return Err(ModelError::Input(format!("decoder sequence of {t} is too long")));
        }
        let pos = g.param("decoder.pos")?;
        let pos = g.tape.slice(pos, 0, 0, t)?;
        let mut x = g.tape.add(x, pos)?;
        let mask = g.tape.constant(causal_mask(t));
        for l in 0..self.config.n_decoder_layers {
            x = block(g, x, &format!("decoder.block.{l}"), self.config.n_heads, Some(mask))?;
        }
        let x = layer_norm(g, x, "decoder.ln_f")?;
        linear(g, x, "decoder.out")
    }

    /// Next-token cross-entropy over the answer and the stop token only.
    pub fn answer_loss(
        &self,
        g: &mut Graph<'_>,
        rep: Var,
        instruction_ids: &[usize],
        answer_ids: &[usize],
    ) -> Result<Var> {
        let answer = &answer_ids[..answer_ids.len().min(self.config.answer_max_len)];
        let mut input = vec![BOS];
        input.extend_from_slice(answer);
        let logits = self.decoder_logits(g, rep, instruction_ids, &input)?;
        let start = self.config.n_queries + instruction_ids.len();
        let scored = g.tape.slice(logits, 0, start, input.len())?;
        let mut targets = answer.to_vec();
        targets.push(EOS);
        Ok(g.tape.cross_entropy(scored, &targets)?)
    }

    /// Greedy decoding from a fixed instruction-aware representation.
    pub fn decode_greedy(&self, rep: &Tensor, instruction_ids: &[usize]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        while out.len() < self.config.answer_max_len {
            let mut g = Graph::new(&self.params);
            let r = g.tape.constant(rep.clone());
            let mut input = vec![BOS];
            input.extend_from_slice(&out);
            let logits = self.decoder_logits(&mut g, r, instruction_ids, &input)?;
            let last = g.tape.tensor(logits).dims2("decode")?.0 - 1;
            let row = g.tape.tensor(logits).row(last);
            let next = argmax(row);
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }

    /// Answer tokens for a question about a (composed prompt, image) pair.
    pub fn answer_tokens(&self, text: &str, image: &RgbImage, instruction: &str) -> Result<Vec<String>> {
        let rep = self.instruction_forward(text, image, instruction)?;
        let ids = self.decode_greedy(&rep, &self.text_ids(instruction)?)?;
        Ok(ids.iter().map(|&i| self.vocab.token(i).to_owned()).collect())
    }

    pub fn answer(&self, text: &str, image: &RgbImage, instruction: &str) -> Result<String> {
        Ok(detokenize(&self.answer_tokens(text, image, instruction)?))
    }

    /// Creates `feedback_head.*` from `head.*` with zero weights on the instruction half,
    /// so the widened heads initially reproduce the stage-1 scores.
    pub fn widen_heads(&mut self) -> Result<()> {
        let d = self.config.d_model;
        for i in 0..self.n_heads() {
            let w1 = self
                .params
                .get(&format!("head.{i}.fc1.w"))
                .ok_or_else(|| ModelError::Config(format!("head {i} missing")))?;
            let mut wide = w1.data().to_vec();
            wide.extend(std::iter::repeat_n(0.0, d * d));
            self.params
                .insert(format!("feedback_head.{i}.fc1.w"), Tensor::new(vec![2 * d, d], wide)?);
            for name in ["fc1.b", "fc2.w", "fc2.b"] {
                let t = self
                    .params
                    .get(&format!("head.{i}.{name}"))
                    .cloned()
                    .expect("head exists");
                self.params.insert(format!("feedback_head.{i}.{name}"), t);
            }
        }
        Ok(())
    }

    /// Pooled instruction-aware representation for head `i`'s canonical instruction.
    pub fn feedback_features(&self, features: &ScoreFeatures, i: usize) -> Result<Tensor> {
        let inst = self.text_ids(&self.config.instructions[i])?;
        let mut g = Graph::new(&self.params);
        let img = g.tape.constant(features.image.clone());
        let q1 = g.tape.constant(features.queries.clone());
        let rep = self.instruction_path(&mut g, Some(q1), &inst, img)?;
        let pooled = self.pool(&mut g, rep)?;
        Ok(g.tape.tensor(pooled).clone())
    }

    /// Feedback-path scores in head order.
    pub fn feedback_scores_text(&self, text: &str, image: &RgbImage) -> Result<Vec<f64>> {
        if !self.has_feedback_heads() {
            return Err(ModelError::Config("feedback heads require stages 1 and 2".into()));
        }
        let features = self.score_features(text, image)?;
        (0..self.n_heads())
            .map(|i| {
                let inst = self.feedback_features(&features, i)?;
                self.feedback_score_from(&features.pooled, &inst, i)
            })
            .collect()
    }

    pub fn feedback_scores(&self, prompt: &str, image: &RgbImage) -> Result<Vec<f64>> {
        self.feedback_scores_text(&self.compose(prompt), image)
    }

    /// Widened head `i` on precomputed pooled representations.
    pub fn feedback_score_from(&self, pooled: &Tensor, pooled_inst: &Tensor, i: usize) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let a = g.tape.constant(pooled.clone());
        let b = g.tape.constant(pooled_inst.clone());
        let s = self.feedback_head(&mut g, i, a, b)?;
        Ok(g.tape.value(s)[0])
    }

    /// Scores used for evaluation: feedback path once available, else the score path.
    pub fn final_scores_text(&self, text: &str, image: &RgbImage) -> Result<Vec<f64>> {
        if self.has_feedback_heads() {
            self.feedback_scores_text(text, image)
        } else {
            self.predict_scores_text(text, image)
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut config = self.config.clone();
        config.vocab = self.vocab.tokens().to_vec();
        Checkpoint {
            stage: self.stage,
            config_json: serde_json::to_string(&config).expect("config serializes"),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let config: ModelConfig =
            serde_json::from_str(&ck.config_json).map_err(|e| ModelError::Config(e.to_string()))?;
        let reference = Self::new(config.clone())?;
        for (name, t) in reference.params.iter() {
            match ck.params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(ModelError::Config(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Config(format!("checkpoint lacks `{name}`"))),
            }
        }
        let mut model = Self {
            vocab: reference.vocab,
            config,
            params: ck.params,
            stage: ck.stage,
        };
        model.set_scope(StageScope::Frozen);
        Ok(model)
    }
}

/// Raw prompt, or the prompt followed by its rule-based annotations when segmentation is on.
pub fn compose_prompt(config: &ModelConfig, raw: &str) -> String {
    if config.segment_prompts {
        if let Some(s) = segment_rule_based(raw, &StyleLexicon::default()) {
            return s.composed;
        }
    }
    raw.to_owned()
}

/// Like [`compose_prompt`] but uses a segmentation stored in the manifest when present.
pub fn compose_record(config: &ModelConfig, prompt: &PromptRecord) -> String {
    match (&prompt.segmented, config.segment_prompts) {
        (Some(s), true) => s.composed.clone(),
        _ => compose_prompt(config, &prompt.raw_text),
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Binds every parameter as a leaf on a fresh tape, for gradient checks over the whole model.
pub fn bind_all(store: &ParamStore) -> (Tape, HashMap<String, Var>) {
    let mut tape = Tape::new();
    let bound = store.iter().map(|(n, t)| (n.clone(), tape.leaf(t.clone()))).collect();
    (tape, bound)
}
