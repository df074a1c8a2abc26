//! The optimization loop.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cache::FrameSource;
use super::config::TrainConfig;
use super::pairs::PairIndex;
use crate::error::{Error, Result};
use crate::numerics::{adam_step, t32, AdamConfig, AdamState, Graph, Tensor};
use crate::transporter::{eval_loss, training_forward, BnMode, Checkpoint, TransporterModel};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST: &str = "best.ustk";
pub const LAST: &str = "last.ustk";
pub const FINAL: &str = "final.ustk";

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TransporterModel<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

pub struct TrainData<'a> {
    pub source: &'a dyn FrameSource,
    pub train: Vec<PairIndex>,
    pub val: Vec<PairIndex>,
}

/// Stream of the per-epoch shuffle; independent of everything before the
/// epoch so resumed runs replay the same order.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x100 + epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn load_batch(src: &dyn FrameSource, pairs: &[&PairIndex]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut a = Vec::with_capacity(pairs.len());
    let mut b = Vec::with_capacity(pairs.len());
    for p in pairs {
        a.push(src.frame(&p.video, p.t)?);
        b.push(src.frame(&p.video, p.t_plus_i)?);
    }
    Ok((Tensor::stack(&a)?, Tensor::stack(&b)?))
}

/// Mean inference-mode loss over `pairs`, weighted by batch size.
pub fn mean_eval_loss(model: &TransporterModel<f32>, src: &dyn FrameSource, pairs: &[PairIndex], batch: usize) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for chunk in pairs.chunks(batch) {
        let refs: Vec<&PairIndex> = chunk.iter().collect();
        let (a, b) = load_batch(src, &refs)?;
        sum += eval_loss(model, &a, &b)? * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

fn dump_batch(out: &Path, epoch: usize, step: usize, pairs: &[&PairIndex], a: &Tensor<f32>, b: &Tensor<f32>, err: &Error) -> PathBuf {
    let dir = out.join("nan_dump");
    let res = (|| -> Result<()> {
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        t32::write_file(&dir.join("source.t32"), a)?;
        t32::write_file(&dir.join("target.t32"), b)?;
        let info = serde_json::json!({
            "epoch": epoch,
            "step": step,
            "error": err.to_string(),
            "pairs": pairs,
            "source_finite": a.all_finite(),
            "target_finite": b.all_finite(),
        });
        let p = dir.join("batch.json");
        fs::write(&p, serde_json::to_vec_pretty(&info)?).map_err(Error::io(&p))
    })();
    if let Err(e) = res {
        log::error!("could not write the NaN dump: {e}");
    }
    dir
}

fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut buf = Vec::new();
    for m in metrics {
        serde_json::to_writer(&mut buf, m)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(Error::io(path))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Trains from scratch, or continues `resume` (a `last.ustk`), writing
/// checkpoints and the metrics log to `out`.
pub fn train(cfg: &TrainConfig, data: &TrainData<'_>, out: &Path, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::InsufficientData("no training pairs".into()));
    }
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let metrics_path = out.join(METRICS_FILE);

    let (mut model, mut adam, start, mut best, mut metrics) = match resume {
        Some(ck) => {
            let diff = crate::transporter::checkpoint::config_diff(&ck.model.config, &cfg.model);
            if !diff.is_empty() {
                return Err(Error::ArchitectureMismatch(diff.join(", ")));
            }
            let adam = ck.adam.ok_or_else(|| Error::InvalidArgument("resume checkpoint has no optimizer state".into()))?;
            let kept = match read_metrics(&metrics_path) {
                Ok(m) => m.into_iter().filter(|m| m.epoch < ck.epoch).collect(),
                Err(_) => Vec::new(),
            };
            (ck.model, adam, ck.epoch, ck.best_val_loss, kept)
        }
        None => {
            let model = TransporterModel::new(cfg.model.clone(), cfg.seed)?;
            let adam = AdamState::new(AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            })?;
            (model, adam, 0, None, Vec::new())
        }
    };
    let rtfpm_hash = Some(cfg.rtfpm.hash());
    let checkpoint = |model: &TransporterModel<f32>, adam: &AdamState, epoch: usize, best: Option<f64>| Checkpoint {
        model: model.clone(),
        adam: Some(adam.clone()),
        rtfpm_hash: rtfpm_hash.clone(),
        epoch,
        seed: cfg.seed,
        best_val_loss: best,
    };

    for epoch in start..cfg.epochs {
        let t0 = Instant::now();
        let lr = cfg.lr_at(epoch);
        adam.set_lr(lr);
        let order = epoch_order(cfg.seed, epoch, data.train.len());
        let (mut sum, mut count) = (0.0f64, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let pairs: Vec<&PairIndex> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (a, b) = load_batch(data.source, &pairs)?;
            let step_result = (|| -> Result<_> {
                let mut g = Graph::new();
                let f = training_forward(&mut g, &model, &a, &b, BnMode::Train)?;
                let loss = g.value(f.loss).data()[0];
                if !loss.is_finite() {
                    return Err(Error::NonFinite { op: "training loss" });
                }
                g.backward(f.loss)?;
                let grads: BTreeMap<String, Tensor<f32>> = f
                    .params
                    .iter()
                    .filter_map(|(n, &v)| g.grad(v).map(|t| (n.clone(), t.clone())))
                    .collect();
                if grads.values().any(|t| !t.all_finite()) {
                    return Err(Error::NonFinite { op: "training gradient" });
                }
                Ok((loss, grads, f.stats))
            })();
            let (loss, grads, stats) = match step_result {
                Ok(r) => r,
                Err(e) if e.is_numerical() => {
                    let dir = dump_batch(out, epoch, step, &pairs, &a, &b, &e);
                    log::error!("{e} at epoch {epoch} step {step}; batch dumped to {}", dir.display());
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            adam_step(&mut model.params, &grads, &mut adam)?;
            model.apply_bn_stats(&stats)?;
            sum += loss as f64 * chunk.len() as f64;
            count += chunk.len();
        }
        let train_loss = sum / count as f64;
        let train_ms = t0.elapsed().as_millis() as u64;
        metrics.push(EpochMetrics {
            epoch,
            split: "train".into(),
            loss: train_loss,
            lr,
            wall_ms: train_ms,
        });

        let t1 = Instant::now();
        let score = if data.val.is_empty() {
            train_loss
        } else {
            let v = mean_eval_loss(&model, data.source, &data.val, cfg.batch_size)?;
            metrics.push(EpochMetrics {
                epoch,
                split: "val".into(),
                loss: v,
                lr,
                wall_ms: t1.elapsed().as_millis() as u64,
            });
            v
        };
        if !score.is_finite() {
            return Err(Error::NonFinite { op: "validation loss" });
        }
        log::info!("epoch {epoch}: train {train_loss:.6} score {score:.6} lr {lr} ({train_ms} ms)");
        let improved = best.is_none_or(|b| score < b);
        if improved {
            best = Some(score);
        }
        let ck = checkpoint(&model, &adam, epoch + 1, best);
        if improved {
            ck.save(&out.join(BEST))?;
        }
        ck.save(&out.join(LAST))?;
        write_metrics(&metrics_path, &metrics)?;
    }

    let final_path = out.join(FINAL);
    checkpoint(&model, &adam, cfg.epochs.max(start), best).save(&final_path)?;
    write_metrics(&metrics_path, &metrics)?;
    Ok(TrainOutcome {
        model,
        metrics,
        final_checkpoint: final_path,
        best_checkpoint: out.join(BEST),
    })
}
