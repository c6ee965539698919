//! Manifest schema, ingestion, prompt-level splits and QA-pair generation.
//!
//! A manifest is JSON Lines. The first non-empty line is a header
//! `{"schema_version": 1}`; every following line carries a `kind` tag:
//! `prompt`, `image`, `mos` or `annotation`. Image paths are relative to the
//! manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::levels::{Factor, LevelVocabularies, Perspective};
use crate::segment::SegmentedPrompt;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SceneCategory {
    #[serde(rename = "people")]
    People,
    #[serde(rename = "animals")]
    Animals,
    #[serde(rename = "artifacts")]
    Artifacts,
    #[serde(rename = "illustrations")]
    Illustrations,
    #[serde(rename = "indoor scenes")]
    IndoorScenes,
    #[serde(rename = "outdoor scenes")]
    OutdoorScenes,
    #[serde(rename = "vehicles")]
    Vehicles,
    #[serde(rename = "produce & plants")]
    ProducePlants,
    #[serde(rename = "food & beverage")]
    FoodBeverage,
    #[serde(rename = "world knowledge")]
    WorldKnowledge,
}

impl SceneCategory {
    pub const ALL: [SceneCategory; 10] = [
        Self::People,
        Self::Animals,
        Self::Artifacts,
        Self::Illustrations,
        Self::IndoorScenes,
        Self::OutdoorScenes,
        Self::Vehicles,
        Self::ProducePlants,
        Self::FoodBeverage,
        Self::WorldKnowledge,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ChallengeCategory {
    #[serde(rename = "basic")]
    Basic,
    #[serde(rename = "simple detail")]
    SimpleDetail,
    #[serde(rename = "fine-grained detail")]
    FineGrainedDetail,
    #[serde(rename = "complex")]
    Complex,
    #[serde(rename = "quantity")]
    Quantity,
    #[serde(rename = "imagination")]
    Imagination,
    #[serde(rename = "style & format")]
    StyleFormat,
    #[serde(rename = "perspective")]
    Perspective,
    #[serde(rename = "writing & symbols")]
    WritingSymbols,
    #[serde(rename = "linguistic structures")]
    LinguisticStructures,
}

impl ChallengeCategory {
    pub const ALL: [ChallengeCategory; 10] = [
        Self::Basic,
        Self::SimpleDetail,
        Self::FineGrainedDetail,
        Self::Complex,
        Self::Quantity,
        Self::Imagination,
        Self::StyleFormat,
        Self::Perspective,
        Self::WritingSymbols,
        Self::LinguisticStructures,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt_id: String,
    pub raw_text: String,
    pub scene_category: SceneCategory,
    pub challenge_category: ChallengeCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmented: Option<SegmentedPrompt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub prompt_id: String,
    pub generator_tag: String,
    pub file_path: String,
    pub width: u32,
    pub height: u32,
}

/// MOS triplet on [0, 100]; a database may carry only some perspectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosRecord {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub authenticity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correspondence: Option<f64>,
}

impl MosRecord {
    pub fn get(&self, p: Perspective) -> Option<f64> {
        match p {
            Perspective::Quality => self.quality,
            Perspective::Authenticity => self.authenticity,
            Perspective::Correspondence => self.correspondence,
        }
    }
}

/// Five single-choice factor answers plus free-text explanation for one image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FineGrainedAnnotation {
    pub image_id: String,
    pub clarity: String,
    pub outline: String,
    pub detail_richness: String,
    pub geometry_distortion: String,
    pub text_image_consistency: String,
    #[serde(default)]
    pub explanation_text: String,
}

impl FineGrainedAnnotation {
    pub fn level(&self, factor: Factor) -> &str {
        match factor {
            Factor::Clarity => &self.clarity,
            Factor::Outline => &self.outline,
            Factor::DetailRichness => &self.detail_richness,
            Factor::GeometryDistortion => &self.geometry_distortion,
            Factor::TextImageConsistency => &self.text_image_consistency,
        }
    }

    pub fn validate(&self, vocab: &LevelVocabularies) -> std::result::Result<(), String> {
        for f in Factor::ALL {
            if !vocab.contains(f, self.level(f)) {
                return Err(format!("`{}` is not a valid {} level", self.level(f), f.id()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub image_id: String,
    pub dimension: Perspective,
    /// Set when the answer is a single level of this factor.
    pub factor: Option<Factor>,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ManifestLine {
    Prompt(PromptRecord),
    Image(ImageRecord),
    Mos(MosRecord),
    Annotation(FineGrainedAnnotation),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct DatasetStats {
    pub n_prompts: usize,
    pub n_images: usize,
    pub n_mos: usize,
    pub n_annotations: usize,
    pub prompts_by_scene: BTreeMap<SceneCategory, usize>,
    pub prompts_by_challenge: BTreeMap<ChallengeCategory, usize>,
    pub images_by_generator: BTreeMap<String, usize>,
    /// Number of distinct (scene, challenge) cells with at least one prompt.
    pub taxonomy_cells_covered: usize,
}

/// An immutable, cross-referenced collection of prompts, images and labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub base_dir: PathBuf,
    pub prompts: Vec<PromptRecord>,
    pub images: Vec<ImageRecord>,
    pub mos: Vec<MosRecord>,
    pub annotations: Vec<FineGrainedAnnotation>,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub vocabularies: LevelVocabularies,
    /// Require every referenced image file to exist.
    pub check_files: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            vocabularies: LevelVocabularies::default(),
            check_files: true,
        }
    }
}

fn line_err(line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Line {
        line,
        message: message.into(),
    }
}

/// Loads and validates a manifest file.
pub fn load_manifest(path: impl AsRef<Path>, options: &LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_owned(),
        source,
    })?;
    let base = path.parent().map(Path::to_owned).unwrap_or_default();
    read_manifest(BufReader::new(file), base, options)
}

/// Parses a manifest from any reader; image paths resolve against `base_dir`.
pub fn read_manifest(reader: impl BufRead, base_dir: PathBuf, options: &LoadOptions) -> Result<Dataset> {
    let mut ds = Dataset {
        base_dir,
        ..Default::default()
    };
    let mut header_seen = false;
    let mut prompt_ids: HashMap<String, usize> = HashMap::new();
    let mut image_lines: HashMap<String, usize> = HashMap::new();
    let mut pending_refs: Vec<(usize, String, &'static str)> = Vec::new();
    let mut mos_seen = BTreeSet::new();
    let mut ann_seen = BTreeSet::new();

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| line_err(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            let header: Header = serde_json::from_str(&line)
                .map_err(|e| line_err(lineno, format!("expected schema_version header: {e}")))?;
            if header.schema_version != SCHEMA_VERSION {
                return Err(line_err(
                    lineno,
                    format!("unsupported schema_version {}", header.schema_version),
                ));
            }
            header_seen = true;
            continue;
        }
        let record: ManifestLine = serde_json::from_str(&line).map_err(|e| line_err(lineno, e.to_string()))?;
        match record {
            ManifestLine::Prompt(p) => {
                if p.raw_text.trim().is_empty() {
                    return Err(line_err(lineno, format!("prompt `{}` has empty text", p.prompt_id)));
                }
                if prompt_ids.insert(p.prompt_id.clone(), lineno).is_some() {
                    return Err(line_err(lineno, format!("duplicate prompt_id `{}`", p.prompt_id)));
                }
                ds.prompts.push(p);
            }
            ManifestLine::Image(img) => {
                if image_lines.insert(img.image_id.clone(), lineno).is_some() {
                    return Err(line_err(lineno, format!("duplicate image_id `{}`", img.image_id)));
                }
                if options.check_files && !ds.base_dir.join(&img.file_path).is_file() {
                    return Err(line_err(lineno, format!("image file `{}` not found", img.file_path)));
                }
                pending_refs.push((lineno, img.prompt_id.clone(), "prompt"));
                ds.images.push(img);
            }
            ManifestLine::Mos(m) => {
                for p in Perspective::ALL {
                    if let Some(v) = m.get(p) {
                        if !(0.0..=100.0).contains(&v) {
                            return Err(line_err(lineno, format!("{p} MOS {v} outside [0, 100]")));
                        }
                    }
                }
                if !mos_seen.insert(m.image_id.clone()) {
                    return Err(line_err(lineno, format!("duplicate MOS for `{}`", m.image_id)));
                }
                pending_refs.push((lineno, m.image_id.clone(), "image"));
                ds.mos.push(m);
            }
            ManifestLine::Annotation(a) => {
                a.validate(&options.vocabularies).map_err(|e| line_err(lineno, e))?;
                if !ann_seen.insert(a.image_id.clone()) {
                    return Err(line_err(lineno, format!("duplicate annotation for `{}`", a.image_id)));
                }
                pending_refs.push((lineno, a.image_id.clone(), "image"));
                ds.annotations.push(a);
            }
        }
    }
    for (lineno, id, kind) in pending_refs {
        let known = match kind {
            "prompt" => prompt_ids.contains_key(&id),
            _ => image_lines.contains_key(&id),
        };
        if !known {
            return Err(line_err(lineno, format!("unknown {kind} `{id}`")));
        }
    }
    Ok(ds)
}

impl Dataset {
    pub fn write_manifest(&self, w: &mut impl Write) -> io::Result<()> {
        let mut line = |v: &dyn erased::Json| -> io::Result<()> {
            w.write_all(v.to_json().as_bytes())?;
            w.write_all(b"\n")
        };
        line(&Header {
            schema_version: SCHEMA_VERSION,
        })?;
        for p in &self.prompts {
            line(&ManifestLine::Prompt(p.clone()))?;
        }
        for i in &self.images {
            line(&ManifestLine::Image(i.clone()))?;
        }
        for m in &self.mos {
            line(&ManifestLine::Mos(m.clone()))?;
        }
        for a in &self.annotations {
            line(&ManifestLine::Annotation(a.clone()))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io_err = |source| DatasetError::Io {
            path: path.to_owned(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        self.write_manifest(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    pub fn stats(&self) -> DatasetStats {
        let mut s = DatasetStats {
            n_prompts: self.prompts.len(),
            n_images: self.images.len(),
            n_mos: self.mos.len(),
            n_annotations: self.annotations.len(),
            ..Default::default()
        };
        let mut cells = BTreeSet::new();
        for p in &self.prompts {
            *s.prompts_by_scene.entry(p.scene_category).or_default() += 1;
            *s.prompts_by_challenge.entry(p.challenge_category).or_default() += 1;
            cells.insert((p.scene_category, p.challenge_category));
        }
        for i in &self.images {
            *s.images_by_generator.entry(i.generator_tag.clone()).or_default() += 1;
        }
        s.taxonomy_cells_covered = cells.len();
        s
    }

    pub fn prompt(&self, prompt_id: &str) -> Option<&PromptRecord> {
        self.prompts.iter().find(|p| p.prompt_id == prompt_id)
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    pub fn image_path(&self, image: &ImageRecord) -> PathBuf {
        self.base_dir.join(&image.file_path)
    }

    pub fn mos_by_image(&self) -> HashMap<&str, &MosRecord> {
        self.mos.iter().map(|m| (m.image_id.as_str(), m)).collect()
    }

    /// Perspectives for which at least one MOS is present, in canonical order.
    pub fn mos_perspectives(&self) -> Vec<Perspective> {
        Perspective::ALL
            .into_iter()
            .filter(|&p| self.mos.iter().any(|m| m.get(p).is_some()))
            .collect()
    }

    /// QA pairs for every annotated image.
    pub fn qa_pairs(&self) -> Vec<QaPair> {
        self.annotations.iter().flat_map(generate_qa_pairs).collect()
    }

    /// The subset containing only the given prompts and everything hanging off them.
    fn restrict(&self, prompts: &BTreeSet<&str>) -> Dataset {
        let images: Vec<ImageRecord> = self
            .images
            .iter()
            .filter(|i| prompts.contains(i.prompt_id.as_str()))
            .cloned()
            .collect();
        let ids: BTreeSet<&str> = images.iter().map(|i| i.image_id.as_str()).collect();
        Dataset {
            base_dir: self.base_dir.clone(),
            prompts: self
                .prompts
                .iter()
                .filter(|p| prompts.contains(p.prompt_id.as_str()))
                .cloned()
                .collect(),
            mos: self
                .mos
                .iter()
                .filter(|m| ids.contains(m.image_id.as_str()))
                .cloned()
                .collect(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| ids.contains(a.image_id.as_str()))
                .cloned()
                .collect(),
            images,
        }
    }
}

mod erased {
    pub trait Json {
        fn to_json(&self) -> String;
    }
    impl<T: serde::Serialize> Json for T {
        fn to_json(&self) -> String {
            serde_json::to_string(self).expect("manifest records always serialize")
        }
    }
}

/// Splits by prompt so all images of a prompt land on one side. Deterministic in `seed`.
pub fn split(dataset: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::Split(format!("ratio {ratio} must lie in (0, 1)")));
    }
    let mut ids: Vec<&str> = dataset.prompts.iter().map(|p| p.prompt_id.as_str()).collect();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * ids.len() as f64).round() as usize;
    if n_train == 0 || n_train == ids.len() {
        return Err(DatasetError::Split(format!(
            "ratio {ratio} over {} prompts leaves one side empty",
            ids.len()
        )));
    }
    let train: BTreeSet<&str> = ids[..n_train].iter().copied().collect();
    let test: BTreeSet<&str> = ids[n_train..].iter().copied().collect();
    Ok((dataset.restrict(&train), dataset.restrict(&test)))
}

/// Template questions for one annotation: the three canonical dimension
/// questions, one question per factor, and the free-text explanation if any.
pub fn generate_qa_pairs(annotation: &FineGrainedAnnotation) -> Vec<QaPair> {
    let pair = |dimension: Perspective, factor: Option<Factor>, question: &str, answer: String| QaPair {
        image_id: annotation.image_id.clone(),
        dimension,
        factor,
        question: question.to_owned(),
        answer,
    };
    let mut pairs = vec![
        pair(
            Perspective::Quality,
            None,
            Perspective::Quality.question(),
            format!(
                "{}, {}, {}",
                annotation.clarity, annotation.outline, annotation.detail_richness
            ),
        ),
        pair(
            Perspective::Authenticity,
            None,
            Perspective::Authenticity.question(),
            annotation.geometry_distortion.clone(),
        ),
        pair(
            Perspective::Correspondence,
            None,
            Perspective::Correspondence.question(),
            annotation.text_image_consistency.clone(),
        ),
    ];
    for f in Factor::ALL {
        pairs.push(pair(
            f.perspective(),
            Some(f),
            f.question(),
            annotation.level(f).to_owned(),
        ));
    }
    if !annotation.explanation_text.trim().is_empty() {
        pairs.push(pair(
            Perspective::Correspondence,
            None,
            "Why does the image deserve this assessment?",
            annotation.explanation_text.clone(),
        ));
    }
    pairs
}

/// Decoded RGB pixels in [0, 1], row-major height × width × 3.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * 3, "pixel buffer size");
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Per-channel mean.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for px in self.data.chunks(3) {
            for c in 0..3 {
                m[c] += px[c];
            }
        }
        let n = (self.width * self.height) as f64;
        m.map(|v| v / n)
    }
}

/// Decodes a PNG or JPEG file.
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| DatasetError::Image {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Ok(RgbImage::new(w as usize, h as usize, data))
}
