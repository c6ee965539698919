//! Subjective-study processing: subject screening, per-subject z-scores, MOS.
//!
//! Each perspective is processed independently. Per subject, ratings are
//! standardised with that subject's own mean and sample standard deviation,
//! mapped linearly so that z = -3..3 covers 0..100, and clamped to that range.
//! The MOS of an image is the mean rescaled score over its surviving ratings.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::levels::Perspective;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StudyError {
    #[error("no ratings")]
    NoRatings,
    #[error("rating {rating} out of [0, 5] for subject `{subject_id}` image `{image_id}`")]
    OutOfRange {
        subject_id: String,
        image_id: String,
        rating: f64,
    },
    #[error("duplicate rating for subject `{subject_id}` image `{image_id}` ({perspective})")]
    Duplicate {
        subject_id: String,
        image_id: String,
        perspective: Perspective,
    },
    #[error("{perspective}: need at least 3 subjects, found {found}")]
    TooFewSubjects { perspective: Perspective, found: usize },
    #[error("{perspective}: every subject was rejected; thresholds are too strict")]
    AllRejected { perspective: Perspective },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, StudyError>;

/// One subject's 0-5 rating of one image from one perspective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRatingRecord {
    pub subject_id: String,
    pub image_id: String,
    pub perspective: Perspective,
    pub rating: f64,
}

/// Screening thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RejectionPolicy {
    /// Subjects whose ratings correlate below this with the leave-one-out panel mean are dropped.
    pub subject_corr_min: f64,
    /// A rating is dropped when its z-score lies further than this many per-image
    /// standard deviations from the image's mean z-score.
    pub z_abs_max: f64,
}

impl Default for RejectionPolicy {
    fn default() -> Self {
        Self {
            subject_corr_min: 0.2,
            z_abs_max: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectStats {
    pub subject_id: String,
    pub perspective: Perspective,
    pub mu: f64,
    /// Sample standard deviation (N - 1 denominator); `None` with fewer than two ratings.
    pub sigma: Option<f64>,
    pub n_rated: usize,
}

impl SubjectStats {
    fn usable(&self) -> bool {
        matches!(self.sigma, Some(s) if s > 0.0)
    }
}

/// Rescaled z-scores keyed by perspective, image and subject.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ZTable {
    pub values: BTreeMap<Perspective, BTreeMap<String, BTreeMap<String, f64>>>,
    /// Subjects excluded from a perspective because their ratings have no spread.
    pub degenerate: Vec<(String, Perspective)>,
}

impl ZTable {
    pub fn get(&self, subject: &str, image: &str, perspective: Perspective) -> Option<f64> {
        self.values.get(&perspective)?.get(image)?.get(subject).copied()
    }
}

/// Per-image MOS on [0, 100].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MosTable {
    pub scores: BTreeMap<String, BTreeMap<Perspective, f64>>,
    /// Number of subjects contributing at least one rating, per perspective.
    pub valid_subjects: BTreeMap<Perspective, usize>,
}

impl MosTable {
    pub fn get(&self, image: &str, perspective: Perspective) -> Option<f64> {
        self.scores.get(image)?.get(&perspective).copied()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerspectiveReport {
    pub n_subjects: usize,
    pub n_ratings: usize,
    pub rejected_subjects: Vec<String>,
    pub degenerate_subjects: Vec<String>,
    /// Ratings dropped by the subject-level check.
    pub n_rejected_by_subject: usize,
    /// Ratings dropped individually.
    pub n_rejected_ratings: usize,
    pub rejection_rate: f64,
    pub valid_subjects: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub perspectives: BTreeMap<Perspective, PerspectiveReport>,
    pub n_ratings: usize,
    pub n_rejected: usize,
    pub rejection_rate: f64,
    /// `(image_id, perspective)` pairs with no surviving rating; absent from the MOS table.
    pub images_without_ratings: Vec<(String, Perspective)>,
}

/// Range and uniqueness checks.
pub fn validate(ratings: &[RawRatingRecord]) -> Result<()> {
    if ratings.is_empty() {
        return Err(StudyError::NoRatings);
    }
    let mut seen = BTreeSet::new();
    for r in ratings {
        if !(0.0..=5.0).contains(&r.rating) {
            return Err(StudyError::OutOfRange {
                subject_id: r.subject_id.clone(),
                image_id: r.image_id.clone(),
                rating: r.rating,
            });
        }
        if !seen.insert((&r.subject_id, &r.image_id, r.perspective)) {
            return Err(StudyError::Duplicate {
                subject_id: r.subject_id.clone(),
                image_id: r.image_id.clone(),
                perspective: r.perspective,
            });
        }
    }
    Ok(())
}

type SubjectRatings<'a> = BTreeMap<&'a str, BTreeMap<&'a str, f64>>;

fn by_perspective(ratings: &[RawRatingRecord]) -> BTreeMap<Perspective, SubjectRatings<'_>> {
    let mut out: BTreeMap<Perspective, SubjectRatings<'_>> = BTreeMap::new();
    for r in ratings {
        out.entry(r.perspective)
            .or_default()
            .entry(r.subject_id.as_str())
            .or_default()
            .insert(r.image_id.as_str(), r.rating);
    }
    out
}

fn stats_of(subject: &str, perspective: Perspective, ratings: &BTreeMap<&str, f64>) -> SubjectStats {
    let n = ratings.len();
    let mu = ratings.values().sum::<f64>() / n as f64;
    let sigma = (n >= 2).then(|| (ratings.values().map(|r| (r - mu).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    SubjectStats {
        subject_id: subject.to_owned(),
        perspective,
        mu,
        sigma,
        n_rated: n,
    }
}

/// Per-subject, per-perspective mean and standard deviation.
pub fn subject_stats(ratings: &[RawRatingRecord]) -> Vec<SubjectStats> {
    by_perspective(ratings)
        .into_iter()
        .flat_map(|(p, subjects)| {
            subjects
                .into_iter()
                .map(move |(s, rs)| stats_of(s, p, &rs))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// `100 (z + 3) / 6`, clamped to [0, 100].
pub fn rescale_z(z: f64) -> f64 {
    (100.0 * (z + 3.0) / 6.0).clamp(0.0, 100.0)
}

/// Rescaled z-scores for every rating of every subject with a usable spread.
pub fn z_score_normalize(ratings: &[RawRatingRecord]) -> ZTable {
    let mut table = ZTable::default();
    for (p, subjects) in by_perspective(ratings) {
        let per_image = table.values.entry(p).or_default();
        for (subject, rs) in subjects {
            let stats = stats_of(subject, p, &rs);
            if !stats.usable() {
                table.degenerate.push((subject.to_owned(), p));
                continue;
            }
            let sigma = stats.sigma.expect("usable implies sigma");
            for (image, r) in rs {
                per_image
                    .entry(image.to_owned())
                    .or_default()
                    .insert(subject.to_owned(), rescale_z((r - stats.mu) / sigma));
            }
        }
    }
    table
}

fn correlation(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Two-level screening: whole subjects by agreement with the rest of the panel,
/// then individual ratings that stray too far from their image's consensus.
pub fn reject_outliers(
    ratings: &[RawRatingRecord],
    policy: &RejectionPolicy,
) -> Result<(Vec<RawRatingRecord>, RejectionReport)> {
    validate(ratings)?;
    let mut report = RejectionReport {
        n_ratings: ratings.len(),
        ..Default::default()
    };
    let mut dropped: BTreeSet<(&str, &str, Perspective)> = BTreeSet::new();
    let mut dropped_subjects: BTreeSet<(&str, Perspective)> = BTreeSet::new();

    for (p, subjects) in by_perspective(ratings) {
        if subjects.len() < 3 {
            return Err(StudyError::TooFewSubjects {
                perspective: p,
                found: subjects.len(),
            });
        }
        let mut pr = PerspectiveReport {
            n_subjects: subjects.len(),
            n_ratings: subjects.values().map(BTreeMap::len).sum(),
            ..Default::default()
        };

        let mut image_sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for rs in subjects.values() {
            for (&img, &r) in rs {
                let e = image_sums.entry(img).or_default();
                e.0 += r;
                e.1 += 1;
            }
        }
        let mut kept: BTreeMap<&str, &BTreeMap<&str, f64>> = BTreeMap::new();
        for (&subject, rs) in &subjects {
            let (own, loo): (Vec<f64>, Vec<f64>) = rs
                .iter()
                .filter_map(|(img, &r)| {
                    let (sum, n) = image_sums[img];
                    (n > 1).then(|| (r, (sum - r) / (n - 1) as f64))
                })
                .unzip();
            match correlation(&own, &loo) {
                Some(c) if c < policy.subject_corr_min => {
                    pr.rejected_subjects.push(subject.to_owned());
                    pr.n_rejected_by_subject += rs.len();
                    dropped_subjects.insert((subject, p));
                }
                _ => {
                    kept.insert(subject, rs);
                }
            }
        }
        if kept.is_empty() {
            return Err(StudyError::AllRejected { perspective: p });
        }

        // Rating-level screening on z-scores of the surviving subjects.
        let mut z_by_image: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
        for (&subject, rs) in &kept {
            let stats = stats_of(subject, p, rs);
            if !stats.usable() {
                pr.degenerate_subjects.push(subject.to_owned());
                continue;
            }
            let sigma = stats.sigma.expect("usable implies sigma");
            for (&img, &r) in rs.iter() {
                z_by_image
                    .entry(img)
                    .or_default()
                    .push((subject, (r - stats.mu) / sigma));
            }
        }
        for (img, zs) in &z_by_image {
            if zs.len() < 3 {
                continue;
            }
            let n = zs.len() as f64;
            let mean = zs.iter().map(|(_, z)| z).sum::<f64>() / n;
            let sd = (zs.iter().map(|(_, z)| (z - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            if sd == 0.0 {
                continue;
            }
            for &(subject, z) in zs {
                if (z - mean).abs() > policy.z_abs_max * sd {
                    dropped.insert((subject, img, p));
                    pr.n_rejected_ratings += 1;
                }
            }
        }
        let contributing: BTreeSet<&str> = z_by_image
            .iter()
            .flat_map(|(img, zs)| {
                zs.iter()
                    .filter(|(s, _)| !dropped.contains(&(*s, *img, p)))
                    .map(|(s, _)| *s)
            })
            .collect();
        pr.valid_subjects = contributing.len();
        pr.rejection_rate = (pr.n_rejected_by_subject + pr.n_rejected_ratings) as f64 / pr.n_ratings as f64;
        report.n_rejected += pr.n_rejected_by_subject + pr.n_rejected_ratings;
        report.perspectives.insert(p, pr);
    }
    report.rejection_rate = report.n_rejected as f64 / report.n_ratings as f64;

    let kept = ratings
        .iter()
        .filter(|r| {
            !dropped_subjects.contains(&(r.subject_id.as_str(), r.perspective))
                && !dropped.contains(&(r.subject_id.as_str(), r.image_id.as_str(), r.perspective))
        })
        .cloned()
        .collect();
    Ok((kept, report))
}

/// Mean rescaled z-score per image and perspective. Returns the table and the
/// `(image, perspective)` pairs from `expected` that have no surviving rating.
pub fn compute_mos(z: &ZTable, expected: &BTreeSet<(String, Perspective)>) -> (MosTable, Vec<(String, Perspective)>) {
    let mut table = MosTable::default();
    for (&p, images) in &z.values {
        let mut subjects = BTreeSet::new();
        for (image, zs) in images {
            if zs.is_empty() {
                continue;
            }
            let mos = zs.values().sum::<f64>() / zs.len() as f64;
            table.scores.entry(image.clone()).or_default().insert(p, mos);
            subjects.extend(zs.keys());
        }
        table.valid_subjects.insert(p, subjects.len());
    }
    let missing = expected
        .iter()
        .filter(|(img, p)| table.get(img, *p).is_none())
        .cloned()
        .collect();
    (table, missing)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutcome {
    pub mos: MosTable,
    pub report: RejectionReport,
    pub z: ZTable,
}

/// Screening, normalisation and averaging in one pass.
pub fn process_study(ratings: &[RawRatingRecord], policy: &RejectionPolicy) -> Result<StudyOutcome> {
    let (kept, mut report) = reject_outliers(ratings, policy)?;
    let z = z_score_normalize(&kept);
    let expected = ratings.iter().map(|r| (r.image_id.clone(), r.perspective)).collect();
    let (mos, missing) = compute_mos(&z, &expected);
    for (p, n) in &mos.valid_subjects {
        if let Some(pr) = report.perspectives.get_mut(p) {
            pr.valid_subjects = *n;
            pr.degenerate_subjects = z
                .degenerate
                .iter()
                .filter(|(_, dp)| dp == p)
                .map(|(s, _)| s.clone())
                .collect();
        }
    }
    report.images_without_ratings = missing;
    Ok(StudyOutcome { mos, report, z })
}

#[derive(Deserialize)]
struct SubmissionLine {
    subject_id: String,
    image_id: String,
    payload: SubmissionPayload,
}

#[derive(Deserialize)]
struct SubmissionPayload {
    scores: BTreeMap<Perspective, f64>,
}

/// Reads JSON Lines of [`RawRatingRecord`]s. Lines exported by the annotation
/// server (`{subject_id, image_id, payload: {scores: ...}}`) are also accepted;
/// for those the latest submission per subject and image wins.
pub fn read_ratings_jsonl(reader: impl BufRead) -> Result<Vec<RawRatingRecord>> {
    let mut direct = Vec::new();
    let mut submitted: BTreeMap<(String, String, Perspective), (usize, f64)> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| StudyError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| StudyError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let parse_err = |e: serde_json::Error| StudyError::Parse {
            line: lineno,
            message: e.to_string(),
        };
        if value.get("payload").is_some() {
            let sub: SubmissionLine = serde_json::from_value(value).map_err(parse_err)?;
            for (p, rating) in sub.payload.scores {
                submitted.insert((sub.subject_id.clone(), sub.image_id.clone(), p), (lineno, rating));
            }
        } else {
            direct.push((
                lineno,
                serde_json::from_value::<RawRatingRecord>(value).map_err(parse_err)?,
            ));
        }
    }
    let mut all: Vec<(usize, RawRatingRecord)> = direct;
    all.extend(
        submitted
            .into_iter()
            .map(|((subject_id, image_id, perspective), (line, rating))| {
                (
                    line,
                    RawRatingRecord {
                        subject_id,
                        image_id,
                        perspective,
                        rating,
                    },
                )
            }),
    );
    all.sort_by_key(|(line, _)| *line);
    Ok(all.into_iter().map(|(_, r)| r).collect())
}
