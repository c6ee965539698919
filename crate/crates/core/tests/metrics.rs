#[allow(dead_code)]
mod common {
    pub mod metric_oracle;
}

use common::metric_oracle::{kendall_tau_b, pearson, spearman};
use mintiqa::levels::{Factor, LevelVocabularies, Perspective};
use mintiqa::metrics::{
    distill_and_match, krcc, plcc, preference_accuracy, srcc, vqa_accuracy, LevelMatch, MetricError, ScoreSeries,
    VqaItem,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 100 points on a coarse grid so both sides contain ties.
fn tied_series(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..100).map(|_| rng.random_range(0..25) as f64 / 5.0).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|v| ((v + rng.random_range(-1.0..1.0)) * 4.0).round() / 4.0)
        .collect();
    (x, y)
}

#[test]
fn correlations_match_textbook_formulas() {
    for seed in 0..20 {
        let (x, y) = tied_series(seed);
        let s = ScoreSeries::new(x.clone(), y.clone()).unwrap();
        assert!((srcc(&s).unwrap() - spearman(&x, &y)).abs() <= 1e-12, "seed {seed}");
        assert!((plcc(&s).unwrap() - pearson(&x, &y)).abs() <= 1e-12, "seed {seed}");
        assert!(
            (krcc(&s).unwrap() - kendall_tau_b(&x, &y)).abs() <= 1e-12,
            "seed {seed}: {} vs {}",
            krcc(&s).unwrap(),
            kendall_tau_b(&x, &y)
        );
    }
}

/// Strictly increasing maps that keep distinct inputs on [0, 5] distinct.
fn monotone(kind: usize, a: f64, b: f64) -> impl Fn(f64) -> f64 {
    move |v: f64| match kind {
        0 => a * v + b,
        1 => (a * v).exp() + b,
        2 => (v + 1.0).powf(a + 0.5),
        3 => 1.0 / (1.0 + (-(a * (v - 2.5))).exp()),
        _ => (v + a).ln() + v * b.abs(),
    }
}

#[test]
fn rank_metrics_ignore_monotone_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (x, y) = tied_series(3);
    let base = ScoreSeries::new(x.clone(), y.clone()).unwrap();
    let (s0, k0) = (srcc(&base).unwrap(), krcc(&base).unwrap());
    for t in 0..50 {
        let f = monotone(t % 5, rng.random_range(0.2..2.0), rng.random_range(-3.0..3.0));
        let fx: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let s = ScoreSeries::new(fx, y.clone()).unwrap();
        assert!((srcc(&s).unwrap() - s0).abs() <= 1e-12, "transform {t}");
        assert!((krcc(&s).unwrap() - k0).abs() <= 1e-12, "transform {t}");
    }
}

#[test]
fn degenerate_series_are_errors() {
    let s = ScoreSeries::new(vec![1.0; 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    assert!(matches!(srcc(&s), Err(MetricError::Undefined(_))));
    assert!(matches!(plcc(&s), Err(MetricError::Undefined(_))));
    assert!(matches!(krcc(&s), Err(MetricError::Undefined(_))));
    assert!(ScoreSeries::new(vec![1.0], vec![1.0]).is_err());
    assert!(ScoreSeries::new(vec![1.0, 2.0], vec![1.0]).is_err());
}

#[test]
fn preference_ties_count_half() {
    assert_eq!(
        preference_accuracy(&[(2.0, 1.0), (1.0, 1.0), (0.0, 1.0), (3.0, 1.0)]).unwrap(),
        0.625
    );
    assert!(preference_accuracy(&[]).is_err());
}

fn items(n: usize, factor: Factor, mut answer: impl FnMut(usize, &str, &[String]) -> String) -> Vec<VqaItem> {
    let vocab = LevelVocabularies::default();
    let levels = vocab.get(factor).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64 + factor as u64);
    (0..n)
        .map(|i| {
            let reference = levels[rng.random_range(0..levels.len())].clone();
            VqaItem {
                image_id: format!("img{i}"),
                dimension: factor.perspective(),
                factor,
                question: factor.question().to_owned(),
                model_answer_text: answer(i, &reference, &levels),
                reference_answer: reference,
            }
        })
        .collect()
}

#[test]
fn oracle_answers_score_one() {
    let vocab = LevelVocabularies::default();
    for f in Factor::ALL {
        let its = items(500, f, |_, r, _| format!("I would say the image is {r}."));
        let report = vqa_accuracy(&its, &vocab).unwrap();
        assert_eq!(report[&f.perspective()].accuracy, 1.0, "{f:?}");
    }
}

#[test]
fn random_answers_hit_the_chance_rate() {
    let vocab = LevelVocabularies::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pick = |levels: &[String]| levels[rng.random_range(0..levels.len())].clone();
    let three = items(10_000, Factor::TextImageConsistency, |_, _, l| pick(l));
    let acc3 = vqa_accuracy(&three, &vocab).unwrap()[&Perspective::Correspondence].accuracy;
    assert!((acc3 - 1.0 / 3.0).abs() <= 0.02, "{acc3}");
    let four = items(10_000, Factor::Clarity, |_, _, l| pick(l));
    let acc4 = vqa_accuracy(&four, &vocab).unwrap()[&Perspective::Quality].accuracy;
    assert!((acc4 - 0.25).abs() <= 0.02, "{acc4}");
}

#[test]
fn two_level_averaging_weights_images_equally() {
    let vocab = LevelVocabularies::default();
    let mk = |img: &str, f: Factor, ok: bool| VqaItem {
        image_id: img.into(),
        dimension: Perspective::Quality,
        factor: f,
        question: String::new(),
        reference_answer: vocab.get(f)[0].clone(),
        model_answer_text: if ok { vocab.get(f)[0].clone() } else { "no idea".into() },
    };
    // Image a: 1/3 correct; image b: 1/1 correct. Per-image mean 2/3, pooled mean 2/4.
    let its = vec![
        mk("a", Factor::Clarity, true),
        mk("a", Factor::Outline, false),
        mk("a", Factor::DetailRichness, false),
        mk("b", Factor::Clarity, true),
    ];
    let r = &vqa_accuracy(&its, &vocab).unwrap()[&Perspective::Quality];
    assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!((r.n_images, r.n_questions, r.n_nomatch), (2, 4, 2));
}

#[test]
fn distillation_prefers_longest_then_earliest() {
    let vocab: Vec<String> = ["clear", "very clear", "blurry"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    assert_eq!(
        distill_and_match("It is Very CLEAR, not blurry", &vocab).unwrap(),
        LevelMatch::Level("very clear".into())
    );
    assert_eq!(
        distill_and_match("blurry but clear", &vocab).unwrap(),
        LevelMatch::Level("blurry".into())
    );
    assert_eq!(distill_and_match("unsure", &vocab).unwrap(), LevelMatch::NoMatch);
}

proptest! {
    #[test]
    fn srcc_is_symmetric_and_bounded(seed in 0u64..10_000) {
        let (x, y) = tied_series(seed);
        let a = srcc(&ScoreSeries::new(x.clone(), y.clone()).unwrap()).unwrap();
        let b = srcc(&ScoreSeries::new(y, x).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn reversing_one_side_negates_rank_metrics(seed in 0u64..10_000) {
        let (x, y) = tied_series(seed);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let s = ScoreSeries::new(x, y.clone()).unwrap();
        let r = ScoreSeries::new(neg, y).unwrap();
        prop_assert!((srcc(&s).unwrap() + srcc(&r).unwrap()).abs() < 1e-12);
        prop_assert!((krcc(&s).unwrap() + krcc(&r).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn any_exact_level_is_recovered(f in 0usize..5, i in 0usize..4, prefix in "[a-z ]{0,12}") {
        let vocab = LevelVocabularies::default();
        let levels = vocab.get(Factor::ALL[f]);
        let level = &levels[i % levels.len()];
        // Filler words cannot form a level on their own when they contain no level words.
        let filler: String = prefix.split_whitespace().filter(|w| levels.iter().all(|l| !l.contains(*w))).collect::<Vec<_>>().join(" ");
        let got = distill_and_match(&format!("{filler} {level}."), levels).unwrap();
        prop_assert_eq!(got, LevelMatch::Level(level.clone()));
    }
}
