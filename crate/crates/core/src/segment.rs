//! Prompt segmentation into style, content and atmosphere annotations.

use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::levels::normalize_words;

pub const DEFAULT_STYLE: &str = "realistic";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentedPrompt {
    pub style: String,
    pub content: String,
    pub atmosphere: String,
    /// Raw prompt followed by the three annotations; always starts with the raw prompt byte-exact.
    pub composed: String,
}

impl SegmentedPrompt {
    /// Assembles a prompt from its parts. `None` when the style is blank.
    pub fn assemble(raw: &str, style: &str, content: &str, atmosphere: &str) -> Option<Self> {
        if style.trim().is_empty() {
            return None;
        }
        Some(Self {
            style: style.to_owned(),
            content: content.to_owned(),
            atmosphere: atmosphere.to_owned(),
            composed: format!("{raw} style: {style}; content: {content}; atmosphere: {atmosphere}"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleLexicon {
    pub styles: Vec<String>,
    pub moods: Vec<String>,
}

fn owned(words: &[&str]) -> Vec<String> {
    words.iter().map(|s| (*s).to_owned()).collect()
}

impl Default for StyleLexicon {
    fn default() -> Self {
        Self {
            styles: owned(&[
                "painting",
                "artistic",
                "realistic",
                "fashion",
                "texture",
                "fiction",
                "cartoon",
                "anime",
                "sketch",
                "photograph",
                "photorealistic",
                "illustration",
                "drawing",
                "surreal",
                "abstract",
                "vintage",
                "minimalist",
                "cyberpunk",
                "impressionist",
                "pixel art",
            ]),
            moods: owned(&[
                "eerie",
                "gloomy",
                "cheerful",
                "peaceful",
                "serene",
                "mysterious",
                "dramatic",
                "melancholic",
                "romantic",
                "joyful",
                "calm",
                "tense",
                "cozy",
                "happy",
                "sad",
                "lonely",
                "dreamy",
                "majestic",
                "spooky",
                "somber",
            ]),
        }
    }
}

/// A whitespace token of the raw prompt with its normalized words.
struct Token<'a> {
    text: &'a str,
    words: Vec<String>,
}

/// Finds lexicon entries in token order; returns (first token, token count, entry) per hit.
fn find_hits(tokens: &[Token<'_>], lexicon: &[String]) -> Vec<(usize, usize, String)> {
    let entries: Vec<(Vec<String>, &String)> = lexicon.iter().map(|e| (normalize_words(e), e)).collect();
    let flat: Vec<(usize, &str)> = tokens
        .iter()
        .enumerate()
        .flat_map(|(i, t)| t.words.iter().map(move |w| (i, w.as_str())))
        .collect();
    let mut hits = Vec::new();
    let mut pos = 0;
    while pos < flat.len() {
        let best = entries
            .iter()
            .filter(|(words, _)| {
                !words.is_empty()
                    && pos + words.len() <= flat.len()
                    && words.iter().zip(&flat[pos..]).all(|(a, (_, b))| a == b)
            })
            .max_by_key(|(words, _)| words.len());
        match best {
            Some((words, entry)) => {
                let first = flat[pos].0;
                let last = flat[pos + words.len() - 1].0;
                hits.push((first, last - first + 1, (*entry).clone()));
                pos += words.len();
            }
            None => pos += 1,
        }
    }
    hits
}

/// Deterministic lexicon-based segmentation. Returns `None` only for a blank prompt.
pub fn segment_rule_based(raw: &str, lexicon: &StyleLexicon) -> Option<SegmentedPrompt> {
    if raw.trim().is_empty() {
        return None;
    }
    let tokens: Vec<Token<'_>> = raw
        .split_whitespace()
        .map(|text| Token {
            text,
            words: normalize_words(text),
        })
        .collect();
    let style_hits = find_hits(&tokens, &lexicon.styles);
    let mood_hits = find_hits(&tokens, &lexicon.moods);
    let style = style_hits
        .first()
        .map(|h| h.2.clone())
        .unwrap_or_else(|| DEFAULT_STYLE.to_owned());
    let mut removed = vec![false; tokens.len()];
    for (start, len, _) in style_hits.iter().chain(&mood_hits) {
        removed[*start..start + len].iter_mut().for_each(|r| *r = true);
    }
    let content: Vec<&str> = tokens
        .iter()
        .zip(&removed)
        .filter(|(_, r)| !**r)
        .map(|(t, _)| t.text)
        .collect();
    let content = if content.is_empty() {
        raw.trim().to_owned()
    } else {
        content.join(" ")
    };
    let mut moods: Vec<String> = Vec::new();
    for (_, _, m) in mood_hits {
        if !moods.contains(&m) {
            moods.push(m);
        }
    }
    SegmentedPrompt::assemble(raw, &style, &content, &moods.join(", "))
}

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("no segmentation endpoint configured")]
    NoEndpoint,
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("invalid segmentation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    /// Sent verbatim as a bearer token when present.
    pub bearer_token: Option<String>,
    pub max_in_flight: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            timeout_ms: 5000,
            bearer_token: None,
            max_in_flight: 4,
        }
    }
}

impl EndpointConfig {
    /// Parses a TOML document, then applies `MINTIQA_SEGMENT_*` environment overrides.
    pub fn from_toml(text: &str) -> Result<Self, SegmentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| SegmentError::Config(e.to_string()))?;
        cfg.with_env(|k| std::env::var(k).ok())
    }

    /// Applies overrides from `lookup` (`MINTIQA_SEGMENT_ENDPOINT`, `_TIMEOUT_MS`, `_TOKEN`, `_MAX_IN_FLIGHT`).
    pub fn with_env(mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<Self, SegmentError> {
        if let Some(v) = lookup("MINTIQA_SEGMENT_ENDPOINT") {
            self.endpoint = Some(v);
        }
        if let Some(v) = lookup("MINTIQA_SEGMENT_TIMEOUT_MS") {
            self.timeout_ms = v
                .parse()
                .map_err(|_| SegmentError::Config(format!("timeout `{v}` is not an integer")))?;
        }
        if let Some(v) = lookup("MINTIQA_SEGMENT_TOKEN") {
            self.bearer_token = Some(v);
        }
        if let Some(v) = lookup("MINTIQA_SEGMENT_MAX_IN_FLIGHT") {
            self.max_in_flight = v
                .parse()
                .map_err(|_| SegmentError::Config(format!("max_in_flight `{v}` is not an integer")))?;
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationResult {
    pub segmented: SegmentedPrompt,
    /// True when the rule-based path produced the result after a service failure.
    pub fallback: bool,
    pub warning: Option<String>,
}

#[derive(Serialize)]
struct Request<'a> {
    prompt: &'a str,
    fields: [&'static str; 3],
}

#[derive(Deserialize)]
struct Response {
    style: String,
    content: String,
    atmosphere: String,
}

fn call_service(raw: &str, config: &EndpointConfig, endpoint: &str) -> Result<SegmentedPrompt, String> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(config.timeout_ms.max(1))))
        .build()
        .into();
    let mut req = agent.post(endpoint);
    if let Some(token) = &config.bearer_token {
        req = req.header("Authorization", &format!("Bearer {token}"));
    }
    let body = Request {
        prompt: raw,
        fields: ["style", "content", "atmosphere"],
    };
    let mut resp = req.send_json(&body).map_err(|e| format!("request failed: {e}"))?;
    let parsed: Response = resp
        .body_mut()
        .read_json()
        .map_err(|e| format!("malformed response: {e}"))?;
    SegmentedPrompt::assemble(raw, &parsed.style, &parsed.content, &parsed.atmosphere)
        .ok_or_else(|| "malformed response: empty style".to_owned())
}

/// Segments through the external completion service, falling back to the rules on any service failure.
pub fn segment_external(
    raw: &str,
    config: &EndpointConfig,
    lexicon: &StyleLexicon,
) -> Result<SegmentationResult, SegmentError> {
    let endpoint = config.endpoint.as_deref().ok_or(SegmentError::NoEndpoint)?;
    let rules = || segment_rule_based(raw, lexicon).ok_or(SegmentError::EmptyPrompt);
    if raw.trim().is_empty() {
        return Err(SegmentError::EmptyPrompt);
    }
    match call_service(raw, config, endpoint) {
        Ok(segmented) => Ok(SegmentationResult {
            segmented,
            fallback: false,
            warning: None,
        }),
        Err(message) => {
            warn!("segmentation service: {message}; using rule-based fallback");
            Ok(SegmentationResult {
                segmented: rules()?,
                fallback: true,
                warning: Some(message),
            })
        }
    }
}

/// Segments many prompts with at most `max_in_flight` concurrent requests. Output order matches input.
pub fn segment_external_batch(
    raws: &[String],
    config: &EndpointConfig,
    lexicon: &StyleLexicon,
) -> Result<Vec<SegmentationResult>, SegmentError> {
    if config.endpoint.is_none() {
        return Err(SegmentError::NoEndpoint);
    }
    let width = config.max_in_flight.max(1);
    let mut out = Vec::with_capacity(raws.len());
    for chunk in raws.chunks(width) {
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|raw| s.spawn(move || segment_external(raw, config, lexicon)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("segmentation worker panicked"))
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}
