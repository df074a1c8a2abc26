//! The complete finite-difference suite: numerics layers, transport in both
//! weighting modes, and the whole training objective on a tiny model.

use std::cell::RefCell;
use std::rc::Rc;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::numerics::gradcheck::{check_case, check_case_with_step, layer_suite, leaves, CaseReport, COMPOSITE_STEP};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::transporter::forward::training_forward_split;
use crate::transporter::{AttentionMode, BnMode, ModelConfig, TransporterModel};

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub instances: usize,
    pub cases: Vec<CaseReport>,
    pub passed: bool,
    pub elapsed_ms: u128,
}

fn transport_case(seed: u64, instances: usize, weighted: bool) -> Result<CaseReport> {
    let name = if weighted { "transport_weighted" } else { "transport" };
    check_case(
        name,
        seed,
        instances,
        64,
        |r| {
            let mut v = vec![
                Tensor::randn(&[2, 3, 3, 3], r),
                Tensor::randn(&[2, 3, 3, 3], r),
                Tensor::uniform(&[2, 2, 3, 3], 0.0, 1.0, r),
                Tensor::uniform(&[2, 2, 3, 3], 0.0, 1.0, r),
            ];
            if weighted {
                v.push(Tensor::uniform(&[2], 0.0, 1.0, r));
            }
            v
        },
        leaves(move |g, v| {
            let e = g.transport(v[0], v[1], v[2], v[3], v.get(4).copied())?;
            let w = Tensor::randn(g.shape(e), &mut <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0x7a));
            g.weighted_sum(e, w)
        }),
    )
}

/// Configuration the full-objective check runs on.
pub fn tiny_config(attention: AttentionMode, cbam: bool) -> ModelConfig {
    ModelConfig {
        input_size: 16,
        in_channels: 2,
        k: 2,
        feature_channels: 4,
        width: 4,
        attention,
        cbam,
    }
}

fn training_case(seed: u64, instances: usize, attention: AttentionMode, cbam: bool) -> Result<CaseReport> {
    let cfg = tiny_config(attention, cbam);
    let name = match attention {
        AttentionMode::None => "training_forward",
        AttentionMode::TransportWeight => "training_forward_transport_weight",
        AttentionMode::LearnedSigma => "training_forward_learned_sigma",
    };
    let names: Vec<String> = {
        let m = TransporterModel::new(cfg.clone(), 0)?;
        m.params.params().map(|(n, _)| n.to_string()).collect()
    };
    // Frames and buffers of the current instance, set by `make`.
    let frames: Rc<RefCell<Option<(Tensor<f64>, Tensor<f64>, ParamStore<f64>)>>> = Rc::new(RefCell::new(None));
    let shared = Rc::clone(&frames);
    let make_cfg = cfg.clone();
    let make = move |r: &mut ChaCha8Rng| {
        let mut model = TransporterModel::new(make_cfg.clone(), r.random()).expect("valid tiny config").cast::<f64>();
        // Move BN affine terms and biases off their init values.
        let names: Vec<String> = model.params.params().map(|(n, _)| n.to_string()).collect();
        for n in &names {
            let p = model.params.param_mut(n).expect("listed");
            if p.shape().len() == 1 {
                let j = Tensor::uniform(p.shape(), -0.3, 0.3, r);
                p.data_mut().iter_mut().zip(j.data()).for_each(|(a, b)| *a += b);
            }
        }
        let s = make_cfg.input_size;
        let shape = [2, make_cfg.in_channels, s, s];
        let src = Tensor::uniform(&shape, 0.0, 1.0, r);
        let tgt = Tensor::uniform(&shape, 0.0, 1.0, r);
        let inputs = model.params.params().map(|(_, t)| t.clone()).collect();
        *shared.borrow_mut() = Some((src, tgt, model.params.clone()));
        inputs
    };
    let ev = move |inputs: &[Tensor<f64>]| {
        let guard = frames.borrow();
        let (src, tgt, base) = guard.as_ref().expect("make runs first");
        let frozen = TransporterModel {
            config: cfg.clone(),
            params: base.clone(),
        };
        let mut model = frozen.clone();
        for (n, t) in names.iter().zip(inputs) {
            *model.params.param_mut(n)? = t.clone();
        }
        let mut g = Graph::new();
        let f = training_forward_split(&mut g, &frozen, &model, src, tgt, BnMode::Train)?;
        let vars = names.iter().map(|n| f.params[n]).collect();
        Ok((g, f.loss, vars))
    };
    check_case_with_step(name, seed, instances, 6, COMPOSITE_STEP, make, ev)
}

/// Runs every case with `instances` random draws each.
pub fn run(seed: u64, instances: usize) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut cases = layer_suite(seed, instances)?;
    cases.push(transport_case(seed, instances, false)?);
    cases.push(transport_case(seed, instances, true)?);
    cases.push(training_case(seed, instances, AttentionMode::None, true)?);
    cases.push(training_case(seed, instances, AttentionMode::TransportWeight, false)?);
    cases.push(training_case(seed, instances, AttentionMode::LearnedSigma, false)?);
    let passed = cases.iter().all(|c| c.passed);
    Ok(SuiteReport {
        seed,
        instances,
        cases,
        passed,
        elapsed_ms: start.elapsed().as_millis(),
    })
}
