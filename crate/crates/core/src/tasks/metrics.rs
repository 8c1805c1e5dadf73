use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Precision, recall and F-score of `probs > tau` against `mask`. An empty
/// prediction of an empty mask scores 1 everywhere; any other zero
/// denominator scores 0.
pub fn metrics_prf(probs: &[f32], mask: &[bool], tau: f32) -> Prf {
    assert_eq!(probs.len(), mask.len(), "prediction and mask sizes differ");
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &m) in probs.iter().zip(mask) {
        match (p > tau, m) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp == 0 && tp + fn_ == 0 {
        return Prf {
            precision: 1.0,
            recall: 1.0,
            f: 1.0,
        };
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f,
    }
}

/// Fraction of bits where `probs > 0.5` disagrees with `target`.
pub fn metrics_bit_error(probs: &[f32], target: &[u8]) -> f64 {
    assert_eq!(probs.len(), target.len(), "prediction and target sizes differ");
    if probs.is_empty() {
        return 0.0;
    }
    let wrong = probs
        .iter()
        .zip(target)
        .filter(|(p, t)| (**p > 0.5) != (**t != 0))
        .count();
    wrong as f64 / probs.len() as f64
}

/// Mean and (population) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
