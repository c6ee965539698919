//! Brute-force recomputation of the study pipeline over dense index matrices,
//! plus seeded synthetic panels.

use std::collections::BTreeMap;

use mintiqa::levels::Perspective;
use mintiqa::study::RawRatingRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub struct PanelConfig {
    pub n_subjects: usize,
    pub n_images: usize,
    /// Probability that a subject skips an image.
    pub missing: f64,
    /// Probability that a rating is replaced by uniform noise on [0, 5].
    pub wild: f64,
    /// Subjects (by index) whose ratings are mirrored as `5 - r`.
    pub inverted: Vec<usize>,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for PanelConfig {
    fn default() -> Self {
        Self {
            n_subjects: 10,
            n_images: 20,
            missing: 0.0,
            wild: 0.0,
            inverted: Vec::new(),
            noise_sd: 0.4,
            seed: 0,
        }
    }
}

pub fn subject(s: usize) -> String {
    format!("subj{s:02}")
}

pub fn image(i: usize) -> String {
    format!("img{i:03}")
}

/// Honest raters share per-image truths and differ by offset, spread and noise.
/// Returns the ratings and the number of wild ratings injected.
pub fn panel(cfg: &PanelConfig) -> (Vec<RawRatingRecord>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sd).unwrap();
    let mut out = Vec::new();
    let mut n_wild = 0;
    for p in Perspective::ALL {
        let truth: Vec<f64> = (0..cfg.n_images).map(|_| rng.random_range(0.5..4.5)).collect();
        for s in 0..cfg.n_subjects {
            let offset = rng.random_range(-0.4..0.4);
            let spread = rng.random_range(0.7..1.3);
            for (i, t) in truth.iter().enumerate() {
                if rng.random_bool(cfg.missing) {
                    continue;
                }
                let mut r = (2.5 + spread * (t - 2.5) + offset + noise.sample(&mut rng)).clamp(0.0, 5.0);
                if rng.random_bool(cfg.wild) {
                    r = rng.random_range(0.0..=5.0);
                    n_wild += 1;
                }
                if cfg.inverted.contains(&s) {
                    r = 5.0 - r;
                }
                out.push(RawRatingRecord {
                    subject_id: subject(s),
                    image_id: image(i),
                    perspective: p,
                    rating: r,
                });
            }
        }
    }
    (out, n_wild)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    (x.len() >= 2 && sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Per-subject z-scores over the present entries of row `s`; `None` for unusable rows.
fn row_z(row: &[Option<f64>]) -> Option<Vec<Option<f64>>> {
    let present: Vec<f64> = row.iter().flatten().copied().collect();
    if present.len() < 2 {
        return None;
    }
    let (mu, sd) = (mean(&present), sample_sd(&present));
    (sd > 0.0).then(|| row.iter().map(|r| r.map(|r| (r - mu) / sd)).collect())
}

pub struct OracleOutcome {
    /// `(subject, image, perspective)` to rescaled z-score after screening.
    pub z: BTreeMap<(String, String, Perspective), f64>,
    pub mos: BTreeMap<(String, Perspective), f64>,
    pub rejected_subjects: BTreeMap<Perspective, Vec<String>>,
    pub n_rejected: usize,
}

/// Screening then normalisation then averaging, on dense `subject x image` matrices.
// Index loops keep rows and columns of the dense matrices visibly aligned.
#[allow(clippy::needless_range_loop)]
pub fn oracle(ratings: &[RawRatingRecord], corr_min: f64, z_max: f64) -> OracleOutcome {
    let mut subjects: Vec<String> = ratings.iter().map(|r| r.subject_id.clone()).collect();
    subjects.sort();
    subjects.dedup();
    let mut images: Vec<String> = ratings.iter().map(|r| r.image_id.clone()).collect();
    images.sort();
    images.dedup();
    let si = |s: &str| subjects.iter().position(|x| x == s).unwrap();
    let ii = |i: &str| images.iter().position(|x| x == i).unwrap();

    let mut out = OracleOutcome {
        z: BTreeMap::new(),
        mos: BTreeMap::new(),
        rejected_subjects: BTreeMap::new(),
        n_rejected: 0,
    };
    for p in Perspective::ALL {
        let mut m = vec![vec![None; images.len()]; subjects.len()];
        for r in ratings.iter().filter(|r| r.perspective == p) {
            m[si(&r.subject_id)][ii(&r.image_id)] = Some(r.rating);
        }
        let rated: Vec<usize> = (0..subjects.len())
            .filter(|&s| m[s].iter().any(Option::is_some))
            .collect();
        if rated.is_empty() {
            continue;
        }

        // Subject level: correlation with the mean of everybody else.
        let mut keep = vec![false; subjects.len()];
        for &s in &rated {
            let (mut own, mut rest) = (Vec::new(), Vec::new());
            for i in 0..images.len() {
                let Some(r) = m[s][i] else { continue };
                let others: Vec<f64> = (0..subjects.len())
                    .filter(|&o| o != s)
                    .filter_map(|o| m[o][i])
                    .collect();
                if !others.is_empty() {
                    own.push(r);
                    rest.push(mean(&others));
                }
            }
            match pearson(&own, &rest) {
                Some(c) if c < corr_min => {
                    out.rejected_subjects.entry(p).or_default().push(subjects[s].clone());
                    out.n_rejected += m[s].iter().flatten().count();
                    for v in m[s].iter_mut() {
                        *v = None;
                    }
                }
                _ => keep[s] = true,
            }
        }

        // Rating level: z-scores against the per-image spread.
        let z: Vec<Option<Vec<Option<f64>>>> = m.iter().map(|row| row_z(row)).collect();
        let mut drop = Vec::new();
        for i in 0..images.len() {
            let col: Vec<(usize, f64)> = (0..subjects.len())
                .filter(|&s| keep[s])
                .filter_map(|s| z[s].as_ref().and_then(|row| row[i]).map(|v| (s, v)))
                .collect();
            if col.len() < 3 {
                continue;
            }
            let vals: Vec<f64> = col.iter().map(|c| c.1).collect();
            let (mu, sd) = (mean(&vals), sample_sd(&vals));
            if sd == 0.0 {
                continue;
            }
            drop.extend(
                col.iter()
                    .filter(|(_, v)| (v - mu).abs() > z_max * sd)
                    .map(|&(s, _)| (s, i)),
            );
        }
        out.n_rejected += drop.len();
        for (s, i) in drop {
            m[s][i] = None;
        }

        // Renormalise the survivors and average.
        for s in 0..subjects.len() {
            if let Some(row) = row_z(&m[s]) {
                for (i, zv) in row.iter().enumerate() {
                    if let Some(zv) = zv {
                        let zp = (100.0 * (zv + 3.0) / 6.0).clamp(0.0, 100.0);
                        out.z.insert((subjects[s].clone(), images[i].clone(), p), zp);
                    }
                }
            }
        }
        for img in &images {
            let col: Vec<f64> = out
                .z
                .iter()
                .filter(|((_, i, q), _)| i == img && *q == p)
                .map(|(_, v)| *v)
                .collect();
            if !col.is_empty() {
                out.mos.insert((img.clone(), p), mean(&col));
            }
        }
    }
    out
}
