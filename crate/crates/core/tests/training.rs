use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use sonokey::harness::{generate, scenes, write_video};
use sonokey::io::Dataset;
use sonokey::numerics::Tensor;
use sonokey::rtfpm::{input_map, RtfpmConfig};
use sonokey::training::{
    mean_eval_loss, pair_pools, preprocess_cache, read_metrics, train, FpmCache, MemoryFrames, PairIndex, TrainConfig,
    TrainData,
};
use sonokey::transporter::{AttentionMode, Checkpoint, ModelConfig};
use sonokey::Error;

const SIZE: usize = 32;

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        pairs_train: 16,
        pairs_val: 4,
        seed: 17,
        model: ModelConfig {
            input_size: SIZE,
            k: 3,
            feature_channels: 4,
            width: 4,
            attention: AttentionMode::LearnedSigma,
            cbam: true,
            ..ModelConfig::default()
        },
        rtfpm: RtfpmConfig {
            size: SIZE,
            ..RtfpmConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn dataset(root: &Path, videos: usize, frames: usize) -> Dataset {
    for v in 0..videos {
        let spec = scenes::band_streaks_overlay(128, frames, 100 + v as u64);
        write_video(root, &format!("scan{v}"), &generate(&spec).unwrap()).unwrap();
    }
    Dataset::open(root).unwrap()
}

fn tree_digest(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let meta = fs::metadata(&p).unwrap();
                let h = Sha256::digest(fs::read(&p).unwrap());
                let stamp = format!("{:?} {:?}", h.as_slice(), meta.modified().unwrap());
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), stamp);
            }
        }
    }
    out
}

struct Fixture {
    _tmp: tempfile::TempDir,
    cache: FpmCache,
    train: Vec<PairIndex>,
    val: Vec<PairIndex>,
    root: std::path::PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(&tmp.path().join("data"), 3, 24);
    let cfg = config(1);
    let (cache, _) = preprocess_cache(&ds, &cfg.rtfpm, &tmp.path().join("cache"), 1).unwrap();
    let (train, val) = pair_pools(&cache.videos(), &cfg).unwrap();
    Fixture {
        root: tmp.path().to_path_buf(),
        _tmp: tmp,
        cache,
        train,
        val,
    }
}

fn run(f: &Fixture, cfg: &TrainConfig, out: &str) -> sonokey::training::TrainOutcome {
    let data = TrainData {
        source: &f.cache,
        train: f.train.clone(),
        val: f.val.clone(),
    };
    train(cfg, &data, &f.root.join(out), None).unwrap()
}

#[test]
fn cache_is_reused_and_matches_fresh_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(&tmp.path().join("data"), 1, 12);
    let cfg = RtfpmConfig {
        size: SIZE,
        ..RtfpmConfig::default()
    };
    let root = tmp.path().join("cache");
    let (cache, first) = preprocess_cache(&ds, &cfg, &root, 2).unwrap();
    assert_eq!((first.computed, first.reused), (12, 0));
    let before = tree_digest(&cache.dir);

    let (_, second) = preprocess_cache(&ds, &cfg, &root, 2).unwrap();
    assert_eq!((second.computed, second.reused), (0, 12));
    assert_eq!(tree_digest(&cache.dir), before, "reuse rewrote cache files");

    for i in [0, 5, 11] {
        let fresh = input_map(&ds.read_frame("scan0", i).unwrap(), &cfg).unwrap();
        let cached = sonokey::training::FrameSource::frame(&cache, "scan0", i).unwrap();
        let fresh: Vec<u32> = fresh.iter().map(|v| v.to_bits()).collect();
        let cached: Vec<u32> = cached.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(fresh, cached);
    }

    let changed = RtfpmConfig { sigma0: 0.6, ..cfg };
    let (other, third) = preprocess_cache(&ds, &changed, &root, 2).unwrap();
    assert_ne!(other.dir, cache.dir);
    assert_eq!((third.computed, third.reused), (12, 0));
}

#[test]
fn edited_frame_is_recomputed() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(&tmp.path().join("data"), 1, 11);
    let cfg = RtfpmConfig {
        size: SIZE,
        ..RtfpmConfig::default()
    };
    let root = tmp.path().join("cache");
    preprocess_cache(&ds, &cfg, &root, 1).unwrap();
    let other = ds.read_frame("scan0", 3).unwrap();
    sonokey::io::write_pgm(&ds.frame_path("scan0", 4), &other).unwrap();
    let (_, stats) = preprocess_cache(&ds, &cfg, &root, 1).unwrap();
    assert_eq!((stats.computed, stats.reused), (1, 10));
}

#[test]
fn toy_run_lowers_the_loss_and_is_reproducible() {
    let f = fixture();
    let cfg = config(5);
    let cache_before = tree_digest(&f.cache.dir);
    let a = run(&f, &cfg, "a");
    let train: Vec<f64> = a.metrics.iter().filter(|m| m.split == "train").map(|m| m.loss).collect();
    assert_eq!(train.len(), 5);
    assert!(train[4] < train[0], "{train:?}");
    assert_eq!(tree_digest(&f.cache.dir), cache_before, "training touched the cache");

    let logged = read_metrics(&f.root.join("a/metrics.jsonl")).unwrap();
    assert_eq!(logged, a.metrics);
    for m in &logged {
        assert_eq!(m.lr, cfg.lr_at(m.epoch));
    }
    for name in ["best.ustk", "last.ustk", "final.ustk"] {
        assert!(f.root.join("a").join(name).is_file(), "{name}");
    }

    let cfg2 = config(2);
    let b = run(&f, &cfg2, "b");
    let c = run(&f, &cfg2, "c");
    let losses = |o: &sonokey::training::TrainOutcome| o.metrics.iter().map(|m| m.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&b), losses(&c));
    assert_eq!(
        fs::read(&b.final_checkpoint).unwrap(),
        fs::read(&c.final_checkpoint).unwrap()
    );
    // The first two epochs of the longer run follow the same path.
    assert_eq!(losses(&b)[..], losses(&a)[..4]);
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let f = fixture();
    let full = run(&f, &config(3), "full");

    run(&f, &config(1), "part");
    let ck = Checkpoint::load(&f.root.join("part/last.ustk")).unwrap();
    assert_eq!(ck.epoch, 1);
    let data = TrainData {
        source: &f.cache,
        train: f.train.clone(),
        val: f.val.clone(),
    };
    let resumed = train(&config(3), &data, &f.root.join("part"), Some(ck)).unwrap();
    assert_eq!(
        fs::read(&full.final_checkpoint).unwrap(),
        fs::read(&resumed.final_checkpoint).unwrap()
    );
    let strip = |m: &[sonokey::training::EpochMetrics]| m.iter().map(|m| (m.epoch, m.split.clone(), m.loss.to_bits())).collect::<Vec<_>>();
    assert_eq!(strip(&full.metrics), strip(&read_metrics(&f.root.join("part/metrics.jsonl")).unwrap()));
}

#[test]
fn validation_leaves_parameters_untouched() {
    let f = fixture();
    let out = run(&f, &config(1), "v");
    let before = Checkpoint {
        model: out.model.clone(),
        adam: None,
        rtfpm_hash: None,
        epoch: 0,
        seed: 0,
        best_val_loss: None,
    }
    .to_bytes();
    let l1 = mean_eval_loss(&out.model, &f.cache, &f.val, 4).unwrap();
    let l2 = mean_eval_loss(&out.model, &f.cache, &f.val, 4).unwrap();
    let after = Checkpoint {
        model: out.model.clone(),
        adam: None,
        rtfpm_hash: None,
        epoch: 0,
        seed: 0,
        best_val_loss: None,
    }
    .to_bytes();
    assert_eq!(Sha256::digest(before), Sha256::digest(after));
    assert_eq!(l1.to_bits(), l2.to_bits());
}

#[test]
fn non_finite_input_aborts_with_a_dump() {
    let mut frames = MemoryFrames::default();
    let mut pairs = Vec::new();
    for t in 0..12 {
        let mut x = Tensor::full(&[10, SIZE, SIZE], 0.5f32);
        if t == 3 {
            x.data_mut()[7] = f32::NAN;
        }
        frames.0.insert(("v".into(), t), x);
    }
    for t in 0..4 {
        pairs.push(PairIndex {
            video: "v".into(),
            t,
            t_plus_i: t + 1,
        });
    }
    let tmp = tempfile::tempdir().unwrap();
    let data = TrainData {
        source: &frames,
        train: pairs,
        val: vec![],
    };
    let err = train(&config(1), &data, tmp.path(), None).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    let info: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("nan_dump/batch.json")).unwrap()).unwrap();
    assert_eq!(info["source_finite"], false);
    assert!(tmp.path().join("nan_dump/source.t32").is_file());
}
