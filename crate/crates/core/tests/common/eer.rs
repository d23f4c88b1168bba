//! Exhaustive EER oracle and random trial sets.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Brute-force sweep: every distinct score and `+∞` as a threshold, with
/// FAR and FRR recounted from scratch at each one.
pub fn eer_oracle(scores: &[f64], target: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let n_tar = target.iter().filter(|&&t| t).count() as f64;
    let n_imp = target.len() as f64 - n_tar;
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&th| {
            let mut far = 0.0;
            let mut frr = 0.0;
            for (s, &t) in scores.iter().zip(target) {
                if t && *s < th {
                    frr += 1.0;
                }
                if !t && *s >= th {
                    far += 1.0;
                }
            }
            (far / n_imp, frr / n_tar)
        })
        .collect();
    let j = points.iter().position(|(far, frr)| far - frr <= 0.0).unwrap();
    let (far, frr) = points[j];
    if j == 0 || far == frr {
        return 100.0 * far;
    }
    let (pfar, pfrr) = points[j - 1];
    // Point on the segment where FAR − FRR vanishes.
    let lambda = (pfar - pfrr) / ((pfar - pfrr) - (far - frr));
    100.0 * (pfar + lambda * (far - pfar))
}

pub fn random_set(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = r.random_range(2..200);
    let mut target: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
    target[0] = true;
    target[1] = false;
    target.shuffle(r);
    let shift = r.random_range(0.0..2.0);
    let coarse = r.random_bool(0.3);
    let scores = target
        .iter()
        .map(|&t| {
            let s: f64 = r.random_range(-1.0..1.0) + if t { shift } else { 0.0 };
            // Quantized sets exercise ties.
            if coarse {
                (s * 4.0).round() / 4.0
            } else {
                s
            }
        })
        .collect();
    (scores, target)
}
