//! One function per subcommand. Each writes its outputs, the resolved config
//! and a manifest into the run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use sonokey::eval::{
    detect_video, embed_video, knn_coclassify, sp_sn, tsne, EmbeddingRecord, Reference, TsneConfig, DEFAULT_RADIUS_256,
};
use sonokey::harness::{oracle_score, Tracks};
use sonokey::io::Dataset;
use sonokey::numerics::{t32, Tensor};
use sonokey::rtfpm::RtfpmConfig;
use sonokey::training::{pair_pools, preprocess_cache, train, FpmCache, TrainConfig, TrainData};
use sonokey::transporter::{Checkpoint, FrameKeypoints};
use sonokey::{Error, Result};

pub const CACHE_ENV: &str = "UST_CACHE_DIR";

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `resolved_config.json` and `manifest.json` into `out`.
pub fn write_run_record<C: Serialize>(out: &Path, command: &str, config: &C, inputs: serde_json::Value, outputs: &[&str]) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let resolved = serde_json::to_vec_pretty(config)?;
    write(&out.join("resolved_config.json"), &resolved)?;
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config_sha256": sha256_hex(&resolved),
        "inputs": inputs,
        "outputs": outputs,
    });
    write(&out.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)
}

pub fn cache_root(data: &Path) -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| data.join(".fpm_cache"))
}

pub fn preprocess(data: &Path, cfg: &TrainConfig, workers: usize, out: &Path) -> Result<FpmCache> {
    cfg.rtfpm.validate()?;
    let ds = Dataset::open(data)?;
    let (cache, stats) = preprocess_cache(&ds, &cfg.rtfpm, &cache_root(data), workers)?;
    let summary = json!({
        "cache_dir": cache.dir,
        "computed": stats.computed,
        "reused": stats.reused,
        "frames": stats.computed + stats.reused,
    });
    write_run_record(out, "preprocess", &cfg.rtfpm, json!({"data": data}), &["preprocess.json"])?;
    write(&out.join("preprocess.json"), &serde_json::to_vec_pretty(&summary)?)?;
    Ok(cache)
}

pub fn train_cmd(data: &Path, cfg: &TrainConfig, workers: usize, out: &Path, resume: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let ds = Dataset::open(data)?;
    let (cache, _) = preprocess_cache(&ds, &cfg.rtfpm, &cache_root(data), workers)?;
    let (tr, va) = pair_pools(&cache.videos(), cfg)?;
    write_run_record(
        out,
        "train",
        cfg,
        json!({"data": data, "resume": resume}),
        &["pairs.json", "metrics.jsonl", "best.ustk", "last.ustk", "final.ustk"],
    )?;
    write(&out.join("pairs.json"), &serde_json::to_vec_pretty(&json!({"train": tr, "val": va}))?)?;
    let resume = match resume {
        Some(p) => Some(Checkpoint::load_matching(p, &cfg.model)?),
        None => None,
    };
    let data = TrainData {
        source: &cache,
        train: tr,
        val: va,
    };
    train(cfg, &data, out, resume)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Defaults to the `rtfpm` section of the training run's resolved config
    /// next to the checkpoint.
    pub rtfpm: Option<RtfpmConfig>,
    pub correction: Option<Reference>,
    pub batch_size: usize,
    pub overlays: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            rtfpm: None,
            correction: None,
            batch_size: 16,
            overlays: true,
        }
    }
}

/// The input-map config a checkpoint was trained with.
fn rtfpm_for(ck: &Checkpoint, ck_path: &Path, given: Option<&RtfpmConfig>) -> Result<RtfpmConfig> {
    let cfg = match given {
        Some(c) => c.clone(),
        None => {
            let p = ck_path.parent().unwrap_or(Path::new(".")).join("resolved_config.json");
            let text = fs::read_to_string(&p).map_err(io_err(&p))?;
            let train: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Format {
                kind: "config",
                path: p.clone(),
                detail: e.to_string(),
            })?;
            train.rtfpm
        }
    };
    if let Some(h) = &ck.rtfpm_hash {
        if *h != cfg.hash() {
            return Err(Error::ArchitectureMismatch(format!(
                "{}: trained on input-map config {h}, given {}",
                ck_path.display(),
                cfg.hash()
            )));
        }
    }
    Ok(cfg)
}

/// One line of `keypoints.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointLine {
    pub video: String,
    pub frame: usize,
    pub k: usize,
    /// Normalized `[-1, 1]`.
    pub x: f64,
    pub y: f64,
    /// Frame pixels.
    pub px: f64,
    pub py: f64,
    pub sigma: f64,
    pub weight: f64,
    pub confidence: f64,
}

pub fn keypoint_lines(video: &str, frame: usize, kp: &FrameKeypoints) -> Vec<KeypointLine> {
    (0..kp.coords.len())
        .map(|j| KeypointLine {
            video: video.to_string(),
            frame,
            k: j,
            x: kp.coords[j][0],
            y: kp.coords[j][1],
            px: kp.pixels[j][0],
            py: kp.pixels[j][1],
            sigma: kp.sigma[j],
            weight: kp.weight[j],
            confidence: kp.confidence[j],
        })
        .collect()
}

pub fn infer(data: &Path, ck_path: &Path, cfg: &InferConfig, out: &Path) -> Result<()> {
    let ds = Dataset::open(data)?;
    let ck = Checkpoint::load(ck_path)?;
    let rt = rtfpm_for(&ck, ck_path, cfg.rtfpm.as_ref())?;
    let resolved = InferConfig {
        rtfpm: Some(rt.clone()),
        ..cfg.clone()
    };
    write_run_record(
        out,
        "infer",
        &resolved,
        json!({"data": data, "checkpoint": ck_path}),
        &["keypoints.jsonl", "overlays/"],
    )?;
    let mut buf = Vec::new();
    for (video, indices) in &ds.videos {
        let frames = ds.read_video(video)?;
        let kps = detect_video(&ck.model, &frames, &rt, cfg.correction, cfg.batch_size)?;
        let odir = out.join("overlays").join(video);
        if cfg.overlays {
            fs::create_dir_all(&odir).map_err(io_err(&odir))?;
        }
        for ((&idx, kp), frame) in indices.iter().zip(&kps).zip(&frames) {
            for line in keypoint_lines(video, idx, kp) {
                serde_json::to_writer(&mut buf, &line)?;
                buf.push(b'\n');
            }
            if cfg.overlays {
                let img = crate::overlay::render(frame, kp);
                crate::overlay::save(&odir.join(format!("frame_{idx:06}.png")), &img)?;
            }
        }
    }
    write(&out.join("keypoints.jsonl"), &buf)
}

pub fn read_keypoints(path: &Path) -> Result<BTreeMap<String, BTreeMap<usize, Vec<(f64, f64)>>>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out: BTreeMap<String, BTreeMap<usize, Vec<(f64, f64)>>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let k: KeypointLine = serde_json::from_str(line).map_err(|e| Error::Format {
            kind: "keypoints",
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", n + 1),
        })?;
        out.entry(k.video).or_default().entry(k.frame).or_default().push((k.px, k.py));
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Detection radius in frame pixels; defaults to 8 px scaled from a
    /// 256 px frame.
    pub radius_px: Option<f64>,
}

pub fn eval_cmd(data: &Path, keypoints: &Path, cfg: &EvalConfig, out: &Path) -> Result<serde_json::Value> {
    let ds = Dataset::open(data)?;
    let kps = read_keypoints(keypoints)?;
    let mut all_kps = Vec::new();
    let mut all_masks = Vec::new();
    let mut per_video = serde_json::Map::new();
    let mut radius_used = None;
    for (video, frames) in &kps {
        let (mut vk, mut vm) = (Vec::new(), Vec::new());
        for (&idx, pts) in frames {
            let mask = ds.read_mask(video, idx)?.ok_or_else(|| {
                Error::InsufficientData(format!("no mask for frame {idx} of video {video}"))
            })?;
            vk.push(pts.clone());
            vm.push(mask);
        }
        let side = vm[0].dim().1 as f64;
        let radius = cfg.radius_px.unwrap_or(DEFAULT_RADIUS_256 * side / 256.0);
        radius_used = Some(radius);
        let rep = sp_sn(&vk, &vm, radius)?;
        let tracks_path = ds.tracks_path(video);
        let tracking = if tracks_path.exists() {
            let tracks: Tracks = serde_json::from_slice(&fs::read(&tracks_path).map_err(io_err(&tracks_path))?)?;
            let sub = Tracks {
                elements: tracks.elements.clone(),
                points: frames.keys().map(|&i| tracks.points.get(i).cloned().unwrap_or_default()).collect(),
            };
            oracle_score(&sub, &vk).ok()
        } else {
            None
        };
        per_video.insert(
            video.clone(),
            json!({"sp": rep.sp, "sn": rep.sn, "sp_pooled": rep.sp_pooled, "sn_pooled": rep.sn_pooled, "tracking_error_px": tracking, "frames": rep.frames}),
        );
        all_kps.extend(vk);
        all_masks.extend(vm);
    }
    let radius = radius_used.ok_or_else(|| Error::InsufficientData("keypoint file is empty".into()))?;
    let overall = sp_sn(&all_kps, &all_masks, radius)?;
    let report = json!({
        "radius_px": radius,
        "sp": overall.sp,
        "sn": overall.sn,
        "sp_pooled": overall.sp_pooled,
        "sn_pooled": overall.sn_pooled,
        "videos": per_video,
    });
    write_run_record(out, "eval", cfg, json!({"data": data, "keypoints": keypoints}), &["report.json"])?;
    write(&out.join("report.json"), &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

/// Identity of one embedding row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingMeta {
    pub video: String,
    pub frame: usize,
    pub label: Option<String>,
}

pub fn embed(data: &Path, ck_path: &Path, cfg: &InferConfig, out: &Path) -> Result<Vec<EmbeddingRecord>> {
    let ds = Dataset::open(data)?;
    let labels = ds.labels()?;
    let ck = Checkpoint::load(ck_path)?;
    let rt = rtfpm_for(&ck, ck_path, cfg.rtfpm.as_ref())?;
    let resolved = InferConfig {
        rtfpm: Some(rt.clone()),
        ..cfg.clone()
    };
    write_run_record(
        out,
        "embed",
        &resolved,
        json!({"data": data, "checkpoint": ck_path}),
        &["embeddings.t32", "embeddings.jsonl"],
    )?;
    let mut records = Vec::new();
    for (video, indices) in &ds.videos {
        let frames = ds.read_video(video)?;
        let frames = match cfg.correction {
            Some(how) => sonokey::eval::frame_average_correct(&frames, how)?,
            None => frames,
        };
        let pairs: Vec<(usize, ndarray::Array2<f32>)> = indices.iter().copied().zip(frames).collect();
        records.extend(embed_video(&ck.model, video, &pairs, labels.get(video).map(String::as_str), &rt, cfg.batch_size)?);
    }
    write_embeddings(out, &records)?;
    Ok(records)
}

pub fn write_embeddings(out: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.vector.len());
    let flat: Vec<f32> = records.iter().flat_map(|r| r.vector.iter().copied()).collect();
    t32::write_file(&out.join("embeddings.t32"), &Tensor::new(&[records.len(), dim], flat)?)?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(
            &mut buf,
            &EmbeddingMeta {
                video: r.video.clone(),
                frame: r.frame,
                label: r.label.clone(),
            },
        )?;
        buf.push(b'\n');
    }
    write(&out.join("embeddings.jsonl"), &buf)
}

pub fn read_embeddings(dir: &Path) -> Result<(Vec<Vec<f64>>, Vec<EmbeddingMeta>)> {
    let t = t32::read_file(&dir.join("embeddings.t32"))?;
    let p = dir.join("embeddings.jsonl");
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let meta: Vec<EmbeddingMeta> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect::<Result<_>>()?;
    if t.shape().len() != 2 || t.shape()[0] != meta.len() {
        return Err(Error::Format {
            kind: "embeddings",
            path: dir.to_path_buf(),
            detail: format!("{:?} rows vs {} labels", t.shape(), meta.len()),
        });
    }
    let d = t.shape()[1];
    let rows = (0..meta.len())
        .map(|i| t.data()[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect())
        .collect();
    Ok((rows, meta))
}

pub fn tsne_cmd(embeddings: &Path, cfg: &TsneConfig, out: &Path) -> Result<()> {
    let (x, meta) = read_embeddings(embeddings)?;
    let res = tsne(&x, cfg)?;
    write_run_record(out, "tsne", cfg, json!({"embeddings": embeddings}), &["tsne.csv", "tsne.json"])?;
    let mut csv = String::from("x,y,label,video,frame\n");
    for (p, m) in res.points.iter().zip(&meta) {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            p[0],
            p[1],
            m.label.as_deref().unwrap_or(""),
            m.video,
            m.frame
        ));
    }
    write(&out.join("tsne.csv"), csv.as_bytes())?;
    let summary = json!({"kl_initial": res.kl_initial, "kl_final": res.kl_final, "points": res.points.len()});
    write(&out.join("tsne.json"), &serde_json::to_vec_pretty(&summary)?)
}

pub fn read_points_csv(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |n: usize, d: &str| Error::Format {
        kind: "csv",
        path: path.to_path_buf(),
        detail: format!("line {n}: {d}"),
    };
    let (mut pts, mut labels) = (Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 3 {
            return Err(bad(n + 1, "expected x,y,label"));
        }
        let x = f[0].parse::<f64>().map_err(|_| bad(n + 1, "bad x"))?;
        let y = f[1].parse::<f64>().map_err(|_| bad(n + 1, "bad y"))?;
        if f[2].is_empty() {
            return Err(bad(n + 1, "missing label"));
        }
        pts.push(vec![x, y]);
        labels.push(f[2].to_string());
    }
    Ok((pts, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifyConfig {
    pub k_nn: usize,
    pub train_fraction: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            k_nn: 5,
            train_fraction: 0.7,
            trials: 10,
            seed: 0,
        }
    }
}

pub fn classify_cmd(points: &Path, cfg: &ClassifyConfig, out: &Path) -> Result<sonokey::eval::CoclassifyReport> {
    let (x, labels) = read_points_csv(points)?;
    let rep = knn_coclassify(&x, &labels, cfg.train_fraction, cfg.k_nn, cfg.seed, cfg.trials)?;
    write_run_record(out, "classify", cfg, json!({"points": points}), &["classify.json"])?;
    write(&out.join("classify.json"), &serde_json::to_vec_pretty(&rep)?)?;
    Ok(rep)
}
