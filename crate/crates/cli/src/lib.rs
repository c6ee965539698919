//! Command implementations behind the `mintiqa` binary.
//!
//! Every command except `serve` is a pure function of its inputs and seed.

pub mod server;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use mintiqa::checkpoint::Checkpoint;
use mintiqa::dataset::{load_manifest, split, Dataset, LoadOptions, MosRecord};
use mintiqa::eval::{evaluate_dataset, vqa_eval};
use mintiqa::levels::Perspective;
use mintiqa::metrics::VqaReport;
use mintiqa::model::Model;
use mintiqa::segment::{segment_external_batch, segment_rule_based, EndpointConfig, StyleLexicon};
use mintiqa::study::{process_study, read_ratings_jsonl, RejectionPolicy};
use mintiqa::synth::{generate, SynthConfig};
use mintiqa::train::{run_stages, write_history, TrainPlan};
use serde::Serialize;

/// Writes pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    load_manifest(path, &LoadOptions::default()).with_context(|| format!("loading manifest {}", path.display()))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Model::from_checkpoint(ck).with_context(|| format!("restoring model from {}", path.display()))
}

pub struct ProcessStudyArgs {
    pub ratings: PathBuf,
    pub policy: Option<PathBuf>,
    /// When given, a copy of this manifest with the computed MOS is written next to the reports.
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
}

/// Writes `mos.json` (image id to per-perspective MOS), `report.json` and optionally
/// `manifest.jsonl` into `out`.
pub fn cmd_process_study(args: &ProcessStudyArgs) -> Result<()> {
    let policy: RejectionPolicy = match &args.policy {
        Some(p) => read_toml(p)?,
        None => RejectionPolicy::default(),
    };
    let file = File::open(&args.ratings).with_context(|| format!("opening {}", args.ratings.display()))?;
    let ratings =
        read_ratings_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", args.ratings.display()))?;
    let outcome = process_study(&ratings, &policy)?;
    ensure_dir(&args.out)?;
    write_json(&args.out.join("mos.json"), &outcome.mos.scores)?;
    write_json(&args.out.join("report.json"), &outcome.report)?;
    if let Some(manifest) = &args.manifest {
        let mut ds = load_dataset(manifest)?;
        ds.mos = ds
            .images
            .iter()
            .filter(|img| outcome.mos.scores.contains_key(&img.image_id))
            .map(|img| MosRecord {
                image_id: img.image_id.clone(),
                quality: outcome.mos.get(&img.image_id, Perspective::Quality),
                authenticity: outcome.mos.get(&img.image_id, Perspective::Authenticity),
                correspondence: outcome.mos.get(&img.image_id, Perspective::Correspondence),
            })
            .collect();
        rebase_absolute(&mut ds)?;
        ds.save(args.out.join("manifest.jsonl"))?;
    }
    log::info!(
        "{} images scored, {:.2}% of ratings rejected",
        outcome.mos.scores.len(),
        100.0 * outcome.report.rejection_rate
    );
    Ok(())
}

/// Which stages `--stage` selects.
pub fn parse_stages(s: &str) -> Result<Vec<u8>> {
    match s {
        "all" => Ok(vec![1, 2, 3]),
        "1" | "2" | "3" => Ok(vec![s.parse()?]),
        _ => bail!("stage must be 1, 2, 3 or all, got `{s}`"),
    }
}

pub struct TrainArgs {
    pub manifest: PathBuf,
    pub config: Option<PathBuf>,
    pub stage: String,
    pub checkpoint: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

/// Runs the selected stages; writes `stage{n}.ckpt` after each one and `history.jsonl` at the end.
pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let stages = parse_stages(&args.stage)?;
    let mut plan: TrainPlan = match &args.config {
        Some(p) => read_toml(p)?,
        None => TrainPlan::default(),
    };
    if let Some(seed) = args.seed {
        plan.model.init_seed = seed;
        for s in [&mut plan.stage1, &mut plan.stage2, &mut plan.stage3] {
            s.seed = seed;
        }
    }
    let ds = load_dataset(&args.manifest)?;
    let start = args.checkpoint.as_deref().map(load_model).transpose()?;
    ensure_dir(&args.out)?;
    let (_, history) = run_stages(&plan, &ds, start, &stages, |model, stage| {
        let path = args.out.join(format!("stage{stage}.ckpt"));
        log::info!("stage {stage} done, writing {}", path.display());
        model
            .to_checkpoint()
            .save(&path)
            .map_err(|e| mintiqa::TrainError::Config(format!("writing {}: {e}", path.display())))
    })?;
    let path = args.out.join("history.jsonl");
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    write_history(&mut w, &history)?;
    w.flush()?;
    Ok(())
}

/// Flat per-dimension row of the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub srcc: f64,
    pub plcc: f64,
    pub krcc: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preference_accuracy: Option<f64>,
}

pub fn cmd_eval(manifest: &Path, checkpoint: &Path) -> Result<BTreeMap<Perspective, EvalRow>> {
    let ds = load_dataset(manifest)?;
    let model = load_model(checkpoint)?;
    let report = evaluate_dataset(&model, &ds)?;
    Ok(report
        .into_iter()
        .map(|(p, h)| {
            let c = h.correlations;
            (
                p,
                EvalRow {
                    srcc: c.srcc,
                    plcc: c.plcc,
                    krcc: c.krcc,
                    n: c.n,
                    preference_accuracy: h.preference_accuracy,
                },
            )
        })
        .collect())
}

pub fn cmd_vqa_eval(manifest: &Path, checkpoint: &Path) -> Result<VqaReport> {
    let ds = load_dataset(manifest)?;
    let model = load_model(checkpoint)?;
    Ok(vqa_eval(&model, &model, &ds)?)
}

/// Writes a report to `out`, or to stdout without one.
pub fn emit_report(out: Option<&Path>, value: &impl Serialize) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                ensure_dir(dir)?;
            }
            write_json(path, value)
        }
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

/// Makes every image path absolute so the manifest can live anywhere.
fn rebase_absolute(ds: &mut Dataset) -> Result<()> {
    let base = fs::canonicalize(&ds.base_dir).with_context(|| format!("resolving {}", ds.base_dir.display()))?;
    for img in &mut ds.images {
        img.file_path = base.join(&img.file_path).to_string_lossy().into_owned();
    }
    ds.base_dir = base;
    Ok(())
}

/// Writes `train.jsonl` and `test.jsonl`, split by prompt.
pub fn cmd_split(manifest: &Path, ratio: f64, seed: u64, out: &Path) -> Result<()> {
    let mut ds = load_dataset(manifest)?;
    rebase_absolute(&mut ds)?;
    let (train, test) = split(&ds, ratio, seed)?;
    ensure_dir(out)?;
    train.save(out.join("train.jsonl"))?;
    test.save(out.join("test.jsonl"))?;
    log::info!("{} train / {} test prompts", train.prompts.len(), test.prompts.len());
    Ok(())
}

pub fn cmd_synth(out: &Path, cfg: &SynthConfig) -> Result<()> {
    ensure!(
        cfg.n_prompts > 0 && cfg.images_per_prompt > 0,
        "synthetic corpus must be non-empty"
    );
    ensure_dir(out)?;
    let ds = generate(out, cfg)?;
    log::info!("wrote {} images to {}", ds.images.len(), out.display());
    Ok(())
}

/// Fills in the segmented form of every prompt. Uses the external service when an endpoint
/// is configured and the lexicon rules otherwise (or on service failure).
pub fn cmd_segment(manifest: &Path, endpoint: Option<&Path>, out: &Path) -> Result<()> {
    let mut ds = load_dataset(manifest)?;
    rebase_absolute(&mut ds)?;
    let lexicon = StyleLexicon::default();
    let config = match endpoint {
        Some(p) => {
            EndpointConfig::from_toml(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?
        }
        None => EndpointConfig::default().with_env(|k| std::env::var(k).ok())?,
    };
    if config.endpoint.is_some() {
        let raws: Vec<String> = ds.prompts.iter().map(|p| p.raw_text.clone()).collect();
        let results = segment_external_batch(&raws, &config, &lexicon)?;
        let fallbacks = results.iter().filter(|r| r.fallback).count();
        if fallbacks > 0 {
            log::warn!("{fallbacks} prompts segmented by the fallback rules");
        }
        for (p, r) in ds.prompts.iter_mut().zip(results) {
            p.segmented = Some(r.segmented);
        }
    } else {
        for p in &mut ds.prompts {
            p.segmented = segment_rule_based(&p.raw_text, &lexicon);
        }
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    ds.save(out)?;
    Ok(())
}
