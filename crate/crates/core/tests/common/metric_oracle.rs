//! Textbook correlation formulas, written for clarity rather than speed.

use std::collections::BTreeMap;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}

/// Rank of each value: one plus the number strictly below, plus half the other ties.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let below = v.iter().filter(|&&b| b < a).count() as f64;
            let equal = v.iter().filter(|&&b| b == a).count() as f64;
            1.0 + below + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

/// Kendall tau-b from tie-group sizes: (C - D) / sqrt((n0 - n1)(n0 - n2)).
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let (mut c, mut d) = (0i64, 0i64);
    for i in 0..n {
        for j in 0..n {
            if i < j {
                let s = (x[i] - x[j]).signum() * (y[i] - y[j]).signum();
                if x[i] != x[j] && y[i] != y[j] {
                    if s > 0.0 {
                        c += 1;
                    } else {
                        d += 1;
                    }
                }
            }
        }
    }
    let tie_pairs = |v: &[f64]| -> i64 {
        let mut groups: BTreeMap<u64, i64> = BTreeMap::new();
        for a in v {
            // Adding 0.0 folds -0.0 into 0.0.
            *groups.entry((a + 0.0).to_bits()).or_default() += 1;
        }
        groups.values().map(|t| t * (t - 1) / 2).sum()
    };
    let n0 = (n * (n - 1) / 2) as i64;
    (c - d) as f64 / (((n0 - tie_pairs(x)) * (n0 - tie_pairs(y))) as f64).sqrt()
}
