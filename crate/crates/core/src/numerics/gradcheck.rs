//! Central finite-difference gradient checks at 64-bit.
//!
//! Coordinates whose perturbation changes a ReLU sign or a max-pool winner
//! are skipped: the function is not differentiable across such a kink and
//! the difference quotient is meaningless there.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::{CbamVars, LayerSpec};
use crate::error::Result;

pub const STEP: f64 = 1e-3;
/// Step for whole-model objectives, whose curvature through small-batch
/// normalisation makes the O(h^2) truncation of a 1e-3 step visible on
/// coordinates with tiny gradients.
pub const COMPOSITE_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of checking one op over several random instances.
#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub step: f64,
    pub instances: usize,
    pub coordinates: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Default)]
struct Tally {
    coordinates: usize,
    skipped: usize,
    max_err: f64,
}

/// Builds a fresh graph from input values and returns `(graph, loss, vars)`
/// with one var per input whose gradient is compared.
pub trait Evaluator {
    fn eval(&mut self, inputs: &[Tensor<f64>]) -> Result<(Graph<f64>, Var, Vec<Var>)>;
}

impl<F> Evaluator for F
where
    F: FnMut(&[Tensor<f64>]) -> Result<(Graph<f64>, Var, Vec<Var>)>,
{
    fn eval(&mut self, inputs: &[Tensor<f64>]) -> Result<(Graph<f64>, Var, Vec<Var>)> {
        self(inputs)
    }
}

/// Wraps a graph-building closure over fresh trainable leaves.
pub fn leaves<F>(mut build: F) -> impl FnMut(&[Tensor<f64>]) -> Result<(Graph<f64>, Var, Vec<Var>)>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    move |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok((g, loss, vars))
    }
}

fn loss_at(ev: &mut impl Evaluator, inputs: &[Tensor<f64>]) -> Result<(f64, u64)> {
    let (g, loss, _) = ev.eval(inputs)?;
    Ok((g.value(loss).data()[0], g.kink_signature()))
}

/// Checks one instance. Tensors with more than `max_coords` entries are
/// checked on a random subset of that size.
fn check_instance(
    ev: &mut impl Evaluator,
    inputs: &mut [Tensor<f64>],
    max_coords: usize,
    step: f64,
    rng: &mut ChaCha8Rng,
    tally: &mut Tally,
) -> Result<()> {
    let (mut g, loss, vars) = ev.eval(inputs)?;
    let base_sig = g.kink_signature();
    g.backward(loss)?;
    let analytic: Vec<Option<Tensor<f64>>> = vars.iter().map(|&v| g.grad(v).cloned()).collect();
    drop(g);

    for (ti, grad) in analytic.iter().enumerate() {
        let n = inputs[ti].len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            sample(rng, n, max_coords).into_vec()
        };
        for j in coords {
            let orig = inputs[ti].data()[j];
            inputs[ti].data_mut()[j] = orig + step;
            let (fp, sp) = loss_at(ev, inputs)?;
            inputs[ti].data_mut()[j] = orig - step;
            let (fm, sm) = loss_at(ev, inputs)?;
            inputs[ti].data_mut()[j] = orig;
            if sp != base_sig || sm != base_sig {
                tally.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * step);
            let a = grad.as_ref().map_or(0.0, |t| t.data()[j]);
            tally.coordinates += 1;
            tally.max_err = tally.max_err.max(relative_error(a, numeric));
        }
    }
    Ok(())
}

/// Runs `instances` seeded checks at [`STEP`]; `make` draws the inputs of
/// one instance.
pub fn check_case<E, M>(name: &str, seed: u64, instances: usize, max_coords: usize, make: M, ev: E) -> Result<CaseReport>
where
    E: Evaluator,
    M: FnMut(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
{
    check_case_with_step(name, seed, instances, max_coords, STEP, make, ev)
}

pub fn check_case_with_step<E, M>(
    name: &str,
    seed: u64,
    instances: usize,
    max_coords: usize,
    step: f64,
    mut make: M,
    mut ev: E,
) -> Result<CaseReport>
where
    E: Evaluator,
    M: FnMut(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
{
    let mut tally = Tally::default();
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64));
        let mut inputs = make(&mut rng);
        check_instance(&mut ev, &mut inputs, max_coords, step, &mut rng, &mut tally)?;
    }
    Ok(CaseReport {
        name: name.to_string(),
        step,
        instances,
        coordinates: tally.coordinates,
        skipped_kinks: tally.skipped,
        max_rel_err: tally.max_err,
        passed: tally.max_err < TOLERANCE && tally.coordinates > 0,
    })
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, rng)
}

fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, &mut rng)
}

/// Scalarizes `out` with a fixed random projection.
fn project(g: &mut Graph<f64>, out: Var, salt: u64) -> Result<Var> {
    let w = projection(g.shape(out), 0xfeed ^ salt);
    g.weighted_sum(out, w)
}

/// Finite-difference checks of the numerics layer set: conv, batchnorm
/// (train and eval), spatial softmax, Gaussian rendering, upsampling, CBAM,
/// MSE and the elementwise ops the networks compose.
pub fn layer_suite(seed: u64, instances: usize) -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();

    let conv = LayerSpec::conv(2, 3, 3, 2, 1);
    out.push(check_case(
        "conv2d",
        seed,
        instances,
        64,
        |r| vec![randn(&[2, 2, 4, 4], r), randn(&[3, 2, 3, 3], r), randn(&[3], r)],
        leaves(|g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), &conv)?;
            project(g, y, 1)
        }),
    )?);

    out.push(check_case(
        "batchnorm2d",
        seed,
        instances,
        64,
        |r| vec![randn(&[3, 2, 3, 3], r), randn(&[2], r), randn(&[2], r)],
        leaves(|g, v| {
            let (y, _, _) = g.batchnorm_train(v[0], v[1], v[2])?;
            project(g, y, 2)
        }),
    )?);

    out.push(check_case(
        "batchnorm2d_eval",
        seed,
        instances,
        64,
        |r| vec![randn(&[2, 2, 3, 3], r), randn(&[2], r), randn(&[2], r)],
        leaves(|g, v| {
            let y = g.batchnorm_eval(v[0], v[1], v[2], &[0.3, -0.2], &[0.5, 2.0])?;
            project(g, y, 3)
        }),
    )?);

    out.push(check_case(
        "spatial_softmax",
        seed,
        instances,
        64,
        |r| vec![randn(&[1, 2, 4, 4], r)],
        leaves(|g, v| {
            let (coords, probs) = g.spatial_softmax_keypoints(v[0])?;
            let a = project(g, coords, 4)?;
            let b = project(g, probs, 5)?;
            g.add(a, b)
        }),
    )?);

    out.push(check_case(
        "gaussian_render",
        seed,
        instances,
        64,
        |r| {
            vec![
                Tensor::uniform(&[1, 3, 2], -0.8, 0.8, r),
                Tensor::uniform(&[3], 0.2, 0.8, r),
            ]
        },
        leaves(|g, v| {
            let y = g.gaussian_render(v[0], v[1], 5, 6)?;
            project(g, y, 6)
        }),
    )?);

    out.push(check_case(
        "bilinear_upsample",
        seed,
        instances,
        64,
        |r| vec![randn(&[1, 2, 3, 3], r)],
        leaves(|g, v| {
            let y = g.bilinear_upsample(v[0], 2)?;
            project(g, y, 7)
        }),
    )?);

    let (c, hid) = (4usize, 2usize);
    out.push(check_case(
        "cbam",
        seed,
        instances,
        64,
        |r| {
            let mut v = vec![randn(&[2, c, 3, 3], r)];
            for (_, s) in CbamVars::param_shapes(c, hid) {
                let mut t = randn(&s, r);
                t.data_mut().iter_mut().for_each(|x| *x *= 0.5);
                v.push(t);
            }
            v
        },
        leaves(|g, v| {
            let p = CbamVars {
                channels: c,
                hidden: hid,
                mlp1_w: v[1],
                mlp1_b: v[2],
                mlp2_w: v[3],
                mlp2_b: v[4],
                spatial_w: v[5],
                spatial_b: v[6],
            };
            let y = g.cbam_block(v[0], &p)?.output;
            project(g, y, 8)
        }),
    )?);

    out.push(check_case(
        "mse_loss",
        seed,
        instances,
        64,
        |r| vec![randn(&[2, 3, 2, 2], r)],
        leaves(|g, v| {
            let t = g.constant(projection(&[2, 3, 2, 2], 9));
            g.mse_loss(v[0], t)
        }),
    )?);

    out.push(check_case(
        "elementwise",
        seed,
        instances,
        64,
        |r| vec![randn(&[2, 3, 2, 2], r), randn(&[1, 3, 1, 1], r)],
        leaves(|g, v| {
            let a = g.sigmoid(v[0])?;
            let b = g.softplus(v[1])?;
            let c = g.mul_bcast(a, b)?;
            let d = g.add_bcast(c, v[1])?;
            let e = g.relu(d)?;
            let f = g.sub(e, a)?;
            let h = g.scale(f, 0.7)?;
            let k = g.add_scalar(h, 0.1)?;
            let m = g.mul(k, v[0])?;
            let gm = g.global_max_pool(m)?;
            let ga = g.global_avg_pool(m)?;
            let s1 = project(g, gm, 10)?;
            let s2 = project(g, ga, 11)?;
            let s = g.add(s1, s2)?;
            g.mean(s)
        }),
    )?);

    Ok(out)
}

/// Random input in the unit interval, handy for heatmap-like inputs.
pub fn unit_uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 0.0, 1.0, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floors_tiny_values() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-9, 0.0) < 1e-2);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // f(x) = sum(x^2), but we report grads of a different function by
        // evaluating the loss with a doubled input.
        let mut flip = false;
        let ev = move |inputs: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let x = g.param(inputs[0].clone());
            let sq = g.mul(x, x)?;
            let s = g.sum(sq)?;
            let loss = if flip { g.scale(s, 2.0)? } else { s };
            flip = true;
            Ok((g, loss, vec![x]))
        };
        let r = check_case("bogus", 1, 1, 64, |r| vec![randn(&[3], r)], ev).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn layer_suite_passes() {
        for r in layer_suite(7, 3).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }
}
