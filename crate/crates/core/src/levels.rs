//! Evaluation perspectives, fine-grained factors and their level vocabularies.

use std::fmt;

use serde::{Deserialize, Serialize};

/// One of the three evaluation dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perspective {
    Quality,
    Authenticity,
    Correspondence,
}

impl Perspective {
    pub const ALL: [Perspective; 3] = [Self::Quality, Self::Authenticity, Self::Correspondence];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Quality => "quality",
            Self::Authenticity => "authenticity",
            Self::Correspondence => "correspondence",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// The canonical dimension question.
    pub fn question(self) -> &'static str {
        match self {
            Self::Quality => "How is the quality of the image?",
            Self::Authenticity => "How is the authenticity of the image?",
            Self::Correspondence => "How is the correspondence between the image and its text prompt?",
        }
    }

    /// Default instruction fed to the instruction branch when fine-tuning this perspective's head.
    pub fn instruction(self) -> &'static str {
        match self {
            Self::Quality => "how is the quality of the image",
            Self::Authenticity => "how is the authenticity of the image",
            Self::Correspondence => "how is the correspondence between the image and its text prompt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

impl fmt::Display for Perspective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The five single-choice annotation factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Clarity,
    Outline,
    DetailRichness,
    GeometryDistortion,
    TextImageConsistency,
}

impl Factor {
    pub const ALL: [Factor; 5] = [
        Self::Clarity,
        Self::Outline,
        Self::DetailRichness,
        Self::GeometryDistortion,
        Self::TextImageConsistency,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Self::Clarity => "clarity",
            Self::Outline => "outline",
            Self::DetailRichness => "detail_richness",
            Self::GeometryDistortion => "geometry_distortion",
            Self::TextImageConsistency => "text_image_consistency",
        }
    }

    pub fn perspective(self) -> Perspective {
        match self {
            Self::Clarity | Self::Outline | Self::DetailRichness => Perspective::Quality,
            Self::GeometryDistortion => Perspective::Authenticity,
            Self::TextImageConsistency => Perspective::Correspondence,
        }
    }

    /// Factor-specific single-choice question.
    pub fn question(self) -> &'static str {
        match self {
            Self::Clarity => "How is the clarity of the image?",
            Self::Outline => "How recognizable is the outline of the image?",
            Self::DetailRichness => "How rich are the details of the image?",
            Self::GeometryDistortion => "How is the geometry distortion of the image?",
            Self::TextImageConsistency => "How consistent is the image with its text prompt?",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.id() == s)
    }
}

/// Closed level vocabularies for the five factors, ordered worst to best.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelVocabularies {
    pub clarity: Vec<String>,
    pub outline: Vec<String>,
    pub detail_richness: Vec<String>,
    pub geometry_distortion: Vec<String>,
    pub text_image_consistency: Vec<String>,
}

fn owned(words: &[&str]) -> Vec<String> {
    words.iter().map(|s| (*s).to_owned()).collect()
}

impl Default for LevelVocabularies {
    fn default() -> Self {
        Self {
            clarity: owned(&["very blurry", "partially blurry", "essentially clear", "very clear"]),
            outline: owned(&[
                "unrecognizable outline",
                "partially recognizable",
                "essentially recognizable",
                "fully recognizable",
            ]),
            detail_richness: owned(&[
                "very poor details",
                "limited details",
                "adequate details",
                "rich details",
            ]),
            geometry_distortion: owned(&["highly distorted", "partially distorted", "essentially distortion-free"]),
            text_image_consistency: owned(&[
                "highly inconsistent",
                "partially inconsistent",
                "essentially consistent",
            ]),
        }
    }
}

/// Lowercases and turns every non-alphanumeric character into a word break.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

impl LevelVocabularies {
    pub fn get(&self, factor: Factor) -> &[String] {
        match factor {
            Factor::Clarity => &self.clarity,
            Factor::Outline => &self.outline,
            Factor::DetailRichness => &self.detail_richness,
            Factor::GeometryDistortion => &self.geometry_distortion,
            Factor::TextImageConsistency => &self.text_image_consistency,
        }
    }

    pub fn contains(&self, factor: Factor, level: &str) -> bool {
        self.get(factor).iter().any(|l| l == level)
    }

    /// Every vocabulary is non-empty and no token's word sequence occurs inside another's.
    pub fn validate(&self) -> Result<(), String> {
        for factor in Factor::ALL {
            validate_vocabulary(self.get(factor)).map_err(|e| format!("{}: {e}", factor.id()))?;
        }
        Ok(())
    }
}

fn contains_seq(hay: &[String], needle: &[String]) -> bool {
    needle.len() <= hay.len() && hay.windows(needle.len()).any(|w| w == needle)
}

pub fn validate_vocabulary(vocab: &[String]) -> Result<(), String> {
    if vocab.is_empty() {
        return Err("empty vocabulary".into());
    }
    let words: Vec<Vec<String>> = vocab.iter().map(|t| normalize_words(t)).collect();
    for (i, a) in words.iter().enumerate() {
        if a.is_empty() {
            return Err(format!("token `{}` has no words", vocab[i]));
        }
        for (j, b) in words.iter().enumerate() {
            if i != j && contains_seq(b, a) {
                return Err(format!("`{}` occurs inside `{}`", vocab[i], vocab[j]));
            }
        }
    }
    Ok(())
}
