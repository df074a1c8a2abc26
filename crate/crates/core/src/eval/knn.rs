//! Stratified train/test splits classified by k nearest neighbours.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    /// Macro averages over classes.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoclassifyReport {
    /// Per-metric medians over trials.
    pub median: ClassMetrics,
    pub trials: Vec<ClassMetrics>,
    pub k_nn: usize,
    pub train_fraction: f64,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Majority label among the `k` nearest training points. Ties go to the
/// tied class with the smaller summed distance, then the smaller label.
pub fn knn_predict(train: &[(&[f64], &str)], query: &[f64], k: usize) -> String {
    let mut d: Vec<(f64, usize)> = train.iter().enumerate().map(|(i, (x, _))| (dist2(x, query), i)).collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for &(dd, i) in d.iter().take(k.max(1)) {
        let e = votes.entry(train[i].1).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += dd.sqrt();
    }
    votes
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.total_cmp(&a.1 .1)).then(b.0.cmp(a.0)))
        .map(|(l, _)| l.to_string())
        .unwrap_or_default()
}

pub fn classification_metrics(truth: &[&str], predicted: &[String]) -> ClassMetrics {
    let classes: Vec<&str> = {
        let mut c: Vec<&str> = truth.to_vec();
        c.sort();
        c.dedup();
        c
    };
    let correct = truth.iter().zip(predicted).filter(|(t, p)| **t == p.as_str()).count();
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for c in &classes {
        let tp = truth.iter().zip(predicted).filter(|(t, p)| *t == c && p.as_str() == *c).count() as f64;
        let pred = predicted.iter().filter(|p| p.as_str() == *c).count() as f64;
        let actual = truth.iter().filter(|t| *t == c).count() as f64;
        let precision = if pred > 0.0 { tp / pred } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        p_sum += precision;
        r_sum += recall;
        f_sum += f1;
    }
    let nc = classes.len().max(1) as f64;
    ClassMetrics {
        accuracy: correct as f64 / truth.len().max(1) as f64,
        precision: p_sum / nc,
        recall: r_sum / nc,
        f1: f_sum / nc,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `trials` stratified splits (`train_fraction` of each class to training,
/// at least one member on each side), each scored by kNN.
pub fn knn_coclassify(
    points: &[Vec<f64>],
    labels: &[String],
    train_fraction: f64,
    k_nn: usize,
    seed: u64,
    trials: usize,
) -> Result<CoclassifyReport> {
    if points.len() != labels.len() {
        return Err(Error::dim("knn_coclassify", format!("{} points vs {} labels", points.len(), labels.len())));
    }
    if trials == 0 || k_nn == 0 || !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument("knn_coclassify: need trials, k_nn > 0 and a fraction in (0, 1)".into()));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(l.as_str()).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::InsufficientData("co-classification needs at least 2 classes".into()));
    }
    let small: Vec<String> = by_class.iter().filter(|(_, v)| v.len() < 2).map(|(c, _)| c.to_string()).collect();
    if !small.is_empty() {
        return Err(Error::InsufficientData(format!(
            "classes with fewer than 2 members: {}",
            small.join(", ")
        )));
    }
    let mut results = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let (mut tr, mut te) = (Vec::new(), Vec::new());
        for idx in by_class.values() {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            let n_tr = ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len() - 1);
            tr.extend_from_slice(&idx[..n_tr]);
            te.extend_from_slice(&idx[n_tr..]);
        }
        let train: Vec<(&[f64], &str)> = tr.iter().map(|&i| (points[i].as_slice(), labels[i].as_str())).collect();
        let truth: Vec<&str> = te.iter().map(|&i| labels[i].as_str()).collect();
        let predicted: Vec<String> = te.iter().map(|&i| knn_predict(&train, &points[i], k_nn)).collect();
        results.push(classification_metrics(&truth, &predicted));
    }
    let med = |f: fn(&ClassMetrics) -> f64| median(results.iter().map(f).collect());
    Ok(CoclassifyReport {
        median: ClassMetrics {
            accuracy: med(|m| m.accuracy),
            precision: med(|m| m.precision),
            recall: med(|m| m.recall),
            f1: med(|m| m.f1),
        },
        trials: results,
        k_nn,
        train_fraction,
    })
}
