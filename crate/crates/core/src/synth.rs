//! Procedural toy corpus whose labels are exact functions of pixel statistics.
//!
//! Each image is a flat colour field with per-channel tints and vertical
//! stripes. Labels on [0, 100]:
//! - quality: mean intensity over all pixels and channels
//! - authenticity: mean absolute deviation from the per-channel mean (stripe contrast)
//! - correspondence: mean of the channel named in the prompt

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    ChallengeCategory, Dataset, DatasetError, FineGrainedAnnotation, ImageRecord, MosRecord, PromptRecord,
    SceneCategory,
};
use crate::levels::LevelVocabularies;

pub const COLORS: [&str; 3] = ["red", "green", "blue"];
const OBJECTS: [&str; 10] = [
    "cube", "ball", "tree", "house", "cat", "boat", "flower", "car", "cup", "bird",
];
const STYLES: [&str; 4] = ["painting", "sketch", "cartoon", "photograph"];

const BASE: (f64, f64) = (0.3, 0.7);
const TINT: f64 = 0.12;
const STRIPE: f64 = 0.12;
// Label ranges bounding each statistic for the parameter ranges above.
const QUALITY_RANGE: (f64, f64) = (BASE.0 - TINT, BASE.1 + TINT);
const AUTH_RANGE: (f64, f64) = (0.0, STRIPE);
const CORR_RANGE: (f64, f64) = (BASE.0 - TINT, BASE.1 + TINT);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_prompts: usize,
    pub images_per_prompt: usize,
    pub image_size: usize,
    /// Number of leading images that receive fine-grained annotations.
    pub n_annotated: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_prompts: 50,
            images_per_prompt: 4,
            image_size: 16,
            n_annotated: 20,
            seed: 7,
        }
    }
}

/// Pixel statistics that define the labels, each on [0, 1] before rescaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelStats {
    pub mean: f64,
    pub contrast: f64,
    pub channel_means: [f64; 3],
}

/// Statistics of interleaved 8-bit RGB data.
pub fn pixel_stats(rgb: &[u8]) -> PixelStats {
    let n = (rgb.len() / 3) as f64;
    let mut channel_means = [0.0; 3];
    for px in rgb.chunks(3) {
        for c in 0..3 {
            channel_means[c] += f64::from(px[c]) / 255.0;
        }
    }
    channel_means = channel_means.map(|s| s / n);
    let mut dev = 0.0;
    for px in rgb.chunks(3) {
        for c in 0..3 {
            dev += (f64::from(px[c]) / 255.0 - channel_means[c]).abs();
        }
    }
    PixelStats {
        mean: channel_means.iter().sum::<f64>() / 3.0,
        contrast: dev / (3.0 * n),
        channel_means,
    }
}

fn rescale(v: f64, (lo, hi): (f64, f64)) -> f64 {
    (100.0 * (v - lo) / (hi - lo)).clamp(0.0, 100.0)
}

/// Labels (quality, authenticity, correspondence) for an image and the colour its prompt names.
pub fn labels(stats: &PixelStats, color: usize) -> [f64; 3] {
    [
        rescale(stats.mean, QUALITY_RANGE),
        rescale(stats.contrast, AUTH_RANGE),
        rescale(stats.channel_means[color], CORR_RANGE),
    ]
}

fn bucket(score: f64, n: usize) -> usize {
    ((score / 100.0 * n as f64) as usize).min(n - 1)
}

/// Fine-grained levels chosen by bucketing the labels, worst level first.
pub fn annotate(image_id: &str, l: [f64; 3], vocab: &LevelVocabularies) -> FineGrainedAnnotation {
    let pick = |levels: &[String], score: f64| levels[bucket(score, levels.len())].clone();
    FineGrainedAnnotation {
        image_id: image_id.to_owned(),
        clarity: pick(&vocab.clarity, l[1]),
        outline: pick(&vocab.outline, l[0]),
        detail_richness: pick(&vocab.detail_richness, (l[0] + l[1]) / 2.0),
        geometry_distortion: pick(&vocab.geometry_distortion, l[1]),
        text_image_consistency: pick(&vocab.text_image_consistency, l[2]),
        explanation_text: String::new(),
    }
}

fn render(size: usize, base: f64, tints: [f64; 3], stripe: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(size * size * 3);
    for _y in 0..size {
        for x in 0..size {
            let s = if (x / 2) % 2 == 0 { stripe } else { -stripe };
            for t in tints {
                out.push(((base + t + s).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Writes PNG images plus `manifest.jsonl` into `dir` and returns the dataset.
pub fn generate(dir: &Path, cfg: &SynthConfig) -> Result<Dataset, DatasetError> {
    let io_err = |path: &Path| {
        let path = path.to_owned();
        move |source| DatasetError::Io { path, source }
    };
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let vocab = LevelVocabularies::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ds = Dataset {
        base_dir: dir.to_owned(),
        ..Default::default()
    };
    for p in 0..cfg.n_prompts {
        let color = rng.random_range(0..COLORS.len());
        let object = OBJECTS[rng.random_range(0..OBJECTS.len())];
        let raw_text = if rng.random_bool(0.3) {
            let style = STYLES[rng.random_range(0..STYLES.len())];
            format!("a {style} of a {} {object}", COLORS[color])
        } else {
            format!("a {} {object}", COLORS[color])
        };
        let prompt_id = format!("p{p:03}");
        ds.prompts.push(PromptRecord {
            prompt_id: prompt_id.clone(),
            raw_text,
            scene_category: SceneCategory::ALL[p % 10],
            challenge_category: ChallengeCategory::ALL[(p / 10) % 10],
            segmented: None,
        });
        for k in 0..cfg.images_per_prompt {
            let base = rng.random_range(BASE.0..BASE.1);
            let tints = [0; 3].map(|_| rng.random_range(-TINT..TINT));
            let stripe = rng.random_range(0.0..STRIPE);
            let rgb = render(cfg.image_size, base, tints, stripe);
            let l = labels(&pixel_stats(&rgb), color);
            let image_id = format!("{prompt_id}_{k}");
            let file_path = format!("images/{image_id}.png");
            let path = dir.join(&file_path);
            let side = cfg.image_size as u32;
            let buf = image::RgbImage::from_raw(side, side, rgb).expect("buffer matches size");
            buf.save(&path).map_err(|e| DatasetError::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
            if ds.annotations.len() < cfg.n_annotated {
                ds.annotations.push(annotate(&image_id, l, &vocab));
            }
            ds.images.push(ImageRecord {
                image_id: image_id.clone(),
                prompt_id: prompt_id.clone(),
                generator_tag: format!("gen{}", k % 6),
                file_path,
                width: side,
                height: side,
            });
            ds.mos.push(MosRecord {
                image_id,
                quality: Some(l[0]),
                authenticity: Some(l[1]),
                correspondence: Some(l[2]),
            });
        }
    }
    ds.save(dir.join("manifest.jsonl"))?;
    Ok(ds)
}
