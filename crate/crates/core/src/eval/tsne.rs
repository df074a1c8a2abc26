//! Exact t-SNE: O(n^2) affinities and gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    /// `None` picks `max(n / early_exaggeration / 4, 50)`.
    pub learning_rate: Option<f64>,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    /// Entropy tolerance of the bandwidth search, in nats.
    pub entropy_tol: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: None,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            entropy_tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsneResult {
    pub points: Vec<[f64; 2]>,
    pub kl_initial: f64,
    pub kl_final: f64,
    /// Achieved entropy of each conditional distribution, in nats.
    pub entropies: Vec<f64>,
}

fn sq_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Row `i` of the conditional affinities at precision `beta`, and its
/// entropy in nats.
fn conditional_row(d: &[f64], i: usize, beta: f64, row: &mut [f64]) -> f64 {
    let n = row.len();
    // Shift by the nearest distance so the largest weight is 1.
    let dmin = (0..n).filter(|&j| j != i).map(|j| d[j]).fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for j in 0..n {
        row[j] = if j == i { 0.0 } else { (-(d[j] - dmin) * beta).exp() };
        sum += row[j];
    }
    let mut h = 0.0;
    for j in 0..n {
        row[j] /= sum;
        if row[j] > 0.0 {
            h -= row[j] * row[j].ln();
        }
    }
    h
}

/// Conditional affinities with each row's entropy matched to
/// `ln(perplexity)` by bisection on the precision.
pub fn calibrated_affinities(d: &[f64], n: usize, perplexity: f64, tol: f64) -> (Vec<f64>, Vec<f64>) {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut entropies = vec![0.0; n];
    for i in 0..n {
        let di = &d[i * n..(i + 1) * n];
        let row = &mut p[i * n..(i + 1) * n];
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0;
        let mut h = conditional_row(di, i, beta, row);
        for _ in 0..200 {
            if (h - target).abs() <= tol {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
            h = conditional_row(di, i, beta, row);
        }
        entropies[i] = h;
    }
    (p, entropies)
}

fn kl(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dy = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                num[i * n + j] = 1.0 / (1.0 + dy);
                z += num[i * n + j];
            }
        }
    }
    p.iter()
        .zip(&num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &q)| pij * (pij / (q / z).max(1e-300)).ln())
        .sum()
}

/// Gradient of KL(P || Q) with P scaled by `exag`; `num` is scratch space.
fn kl_gradient(p: &[f64], y: &[[f64; 2]], exag: f64, num: &mut [f64], grad: &mut [[f64; 2]]) {
    let n = y.len();
    let mut z = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dy = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
            let q = 1.0 / (1.0 + dy);
            num[i * n + j] = q;
            num[j * n + i] = q;
            z += 2.0 * q;
        }
    }
    for i in 0..n {
        let mut g = [0.0; 2];
        for j in 0..n {
            if i == j {
                continue;
            }
            let q = num[i * n + j];
            let m = (exag * p[i * n + j] - q / z) * q;
            g[0] += m * (y[i][0] - y[j][0]);
            g[1] += m * (y[i][1] - y[j][1]);
        }
        grad[i] = [4.0 * g[0], 4.0 * g[1]];
    }
}

pub fn tsne(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    let n = x.len();
    if !(cfg.perplexity > 0.0) {
        return Err(Error::InvalidArgument(format!("perplexity {} must be positive", cfg.perplexity)));
    }
    if (n as f64) < 3.0 * cfg.perplexity {
        return Err(Error::InvalidArgument(format!(
            "perplexity {} too large for {n} points (need n >= 3 * perplexity)",
            cfg.perplexity
        )));
    }
    if let Some(d0) = x.first().map(|v| v.len()) {
        if x.iter().any(|v| v.len() != d0) {
            return Err(Error::dim("tsne", "rows differ in length"));
        }
    }
    let d = sq_distances(x);
    let (cond, entropies) = calibrated_affinities(&d, n, cfg.perplexity, cfg.entropy_tol);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1e-2).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let kl_initial = kl(&p, &y);

    let lr = cfg
        .learning_rate
        .unwrap_or_else(|| (n as f64 / cfg.early_exaggeration / 4.0).max(50.0));
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![[0.0f64; 2]; n];
    // Short runs still get a plain phase to undo the exaggeration.
    let exag_iters = cfg.exaggeration_iters.min(cfg.iterations / 2);
    for it in 0..cfg.iterations {
        let exag = if it < exag_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < exag_iters { 0.5 } else { 0.8 };
        kl_gradient(&p, &y, exag, &mut num, &mut grad);
        for i in 0..n {
            for a in 0..2 {
                let same_sign = (grad[i][a] > 0.0) == (velocity[i][a] > 0.0);
                gains[i][a] = if same_sign { gains[i][a] * 0.8 } else { gains[i][a] + 0.2 }.max(0.01);
                velocity[i][a] = momentum * velocity[i][a] - lr * gains[i][a] * grad[i][a];
                y[i][a] += velocity[i][a];
            }
        }
        // Keep the embedding centred.
        for a in 0..2 {
            let mean = y.iter().map(|p| p[a]).sum::<f64>() / n as f64;
            y.iter_mut().for_each(|p| p[a] -= mean);
        }
    }
    let kl_final = kl(&p, &y);
    Ok(TsneResult {
        points: y,
        kl_initial,
        kl_final,
        entropies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n_each: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nrm = Normal::new(0.0, 1.0).unwrap();
        (0..2 * n_each)
            .map(|i| {
                let c = if i < n_each { 0.0 } else { 20.0 };
                (0..5).map(|_| c + nrm.sample(&mut rng)).collect()
            })
            .collect()
    }

    fn small() -> TsneConfig {
        TsneConfig {
            perplexity: 10.0,
            iterations: 500,
            ..TsneConfig::default()
        }
    }

    #[test]
    fn entropies_hit_the_target() {
        let x = blobs(30, 1);
        let r = tsne(&x, &TsneConfig { iterations: 0, ..small() }).unwrap();
        for h in r.entropies {
            assert!((h - 10f64.ln()).abs() <= 1e-3, "{h}");
        }
    }

    #[test]
    fn separated_blobs_stay_separated() {
        let x = blobs(30, 2);
        let r = tsne(&x, &small()).unwrap();
        let centroid = |s: &[[f64; 2]]| {
            let n = s.len() as f64;
            [s.iter().map(|p| p[0]).sum::<f64>() / n, s.iter().map(|p| p[1]).sum::<f64>() / n]
        };
        let (a, b) = r.points.split_at(30);
        let (ca, cb) = (centroid(a), centroid(b));
        let between = ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt();
        let intra = |s: &[[f64; 2]]| {
            let mut t = 0.0;
            let mut c = 0;
            for i in 0..s.len() {
                for j in i + 1..s.len() {
                    t += ((s[i][0] - s[j][0]).powi(2) + (s[i][1] - s[j][1]).powi(2)).sqrt();
                    c += 1;
                }
            }
            t / c as f64
        };
        let mean_intra = 0.5 * (intra(a) + intra(b));
        assert!(between > 3.0 * mean_intra, "{between} vs {mean_intra}");
        assert!(r.kl_final <= r.kl_initial);
    }

    #[test]
    fn duplicates_land_together() {
        let mut x = blobs(20, 3);
        x.push(x[5].clone());
        let r = tsne(&x, &small()).unwrap();
        let n = r.points.len();
        let dist = |i: usize, j: usize| {
            ((r.points[i][0] - r.points[j][0]).powi(2) + (r.points[i][1] - r.points[j][1]).powi(2)).sqrt()
        };
        let mut all: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| dist(i, j)).collect();
        all.sort_by(f64::total_cmp);
        let median = all[all.len() / 2];
        assert!(dist(5, n - 1) < median / 10.0, "{} vs {median}", dist(5, n - 1));
    }

    #[test]
    fn deterministic_under_seed() {
        let x = blobs(15, 4);
        let cfg = TsneConfig {
            perplexity: 5.0,
            iterations: 100,
            ..TsneConfig::default()
        };
        let a = tsne(&x, &cfg).unwrap();
        let b = tsne(&x, &cfg).unwrap();
        let bits = |r: &TsneResult| r.points.iter().flat_map(|p| [p[0].to_bits(), p[1].to_bits()]).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 7;
        let mut p: Vec<f64> = (0..n * n).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
        for i in 0..n {
            p[i * n + i] = 0.0;
            for j in 0..i {
                p[i * n + j] = p[j * n + i];
            }
        }
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        let y: Vec<[f64; 2]> = (0..n).map(|_| [rand::Rng::random_range(&mut rng, -2.0..2.0), rand::Rng::random_range(&mut rng, -2.0..2.0)]).collect();
        let mut grad = vec![[0.0; 2]; n];
        kl_gradient(&p, &y, 1.0, &mut vec![0.0; n * n], &mut grad);
        let h = 1e-6;
        for i in 0..n {
            for a in 0..2 {
                let (mut yp, mut ym) = (y.clone(), y.clone());
                yp[i][a] += h;
                ym[i][a] -= h;
                let fd = (kl(&p, &yp) - kl(&p, &ym)) / (2.0 * h);
                assert!((fd - grad[i][a]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", grad[i][a]);
            }
        }
    }

    #[test]
    fn oversized_perplexity_is_refused() {
        let x = blobs(5, 5);
        assert!(tsne(&x, &TsneConfig::default()).is_err());
    }
}
