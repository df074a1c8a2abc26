//! On-disk cache of network inputs:
//!
//! ```text
//! <root>/<config hash>/manifest.json
//! <root>/<config hash>/<video>/frame_000000.t32
//! ```
//!
//! A cached map is reused only when its source frame's SHA-256 matches the
//! one recorded in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::numerics::{t32, Tensor};
use crate::rtfpm::{hex, input_map, RtfpmConfig, RtfpmManifest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub rtfpm: RtfpmManifest,
    /// Video to frame index to SHA-256 of the source PGM.
    pub frames: BTreeMap<String, BTreeMap<usize, String>>,
}

#[derive(Clone, Debug)]
pub struct FpmCache {
    pub dir: PathBuf,
    pub manifest: CacheManifest,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub computed: usize,
    pub reused: usize,
}

/// Anything that yields the `[C, S, S]` network input of a dataset frame.
pub trait FrameSource: Sync {
    fn frame(&self, video: &str, index: usize) -> Result<Tensor<f32>>;
}

pub fn cache_file(dir: &Path, video: &str, index: usize) -> PathBuf {
    dir.join(video).join(format!("frame_{index:06}.t32"))
}

impl FpmCache {
    /// Opens an existing cache directory.
    pub fn open(dir: &Path) -> Result<Self> {
        let p = dir.join("manifest.json");
        let bytes = fs::read(&p).map_err(Error::io(&p))?;
        let manifest = serde_json::from_slice(&bytes)?;
        Ok(FpmCache {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    /// Video to sorted cached frame indices.
    pub fn videos(&self) -> BTreeMap<String, Vec<usize>> {
        self.manifest
            .frames
            .iter()
            .map(|(v, f)| (v.clone(), f.keys().copied().collect()))
            .collect()
    }
}

impl FrameSource for FpmCache {
    fn frame(&self, video: &str, index: usize) -> Result<Tensor<f32>> {
        t32::read_file(&cache_file(&self.dir, video, index))
    }
}

/// In-memory frames, for tests and small runs.
#[derive(Clone, Debug, Default)]
pub struct MemoryFrames(pub BTreeMap<(String, usize), Tensor<f32>>);

impl FrameSource for MemoryFrames {
    fn frame(&self, video: &str, index: usize) -> Result<Tensor<f32>> {
        self.0
            .get(&(video.to_string(), index))
            .cloned()
            .ok_or_else(|| Error::InsufficientData(format!("no frame {index} of video {video}")))
    }
}

fn sha256(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

/// Computes (or reuses) the network input of every dataset frame under
/// `cfg`, on at most `workers` threads.
pub fn preprocess_cache(ds: &Dataset, cfg: &RtfpmConfig, root: &Path, workers: usize) -> Result<(FpmCache, CacheStats)> {
    cfg.validate()?;
    let dir = root.join(cfg.hash());
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let old = FpmCache::open(&dir).ok().map(|c| c.manifest);
    let old = old.filter(|m| m.rtfpm == RtfpmManifest::new(cfg));

    let jobs: Vec<(String, usize)> = ds
        .videos
        .iter()
        .flat_map(|(v, f)| f.iter().map(move |&i| (v.clone(), i)))
        .collect();
    for v in ds.videos.keys() {
        let d = dir.join(v);
        fs::create_dir_all(&d).map_err(Error::io(&d))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let results: Vec<Result<(String, usize, String, bool)>> = pool.install(|| {
        jobs.par_iter()
            .map(|(v, i)| {
                let src = ds.frame_path(v, *i);
                let bytes = fs::read(&src).map_err(Error::io(&src))?;
                let digest = sha256(&bytes);
                let out = cache_file(&dir, v, *i);
                let fresh = old
                    .as_ref()
                    .and_then(|m| m.frames.get(v))
                    .and_then(|f| f.get(i))
                    .is_some_and(|d| *d == digest)
                    && out.is_file();
                if !fresh {
                    let frame = crate::io::decode_pgm(&bytes, &src)?;
                    let map = input_map(&frame, cfg)?;
                    let (c, h, w) = map.dim();
                    let t = Tensor::new(&[c, h, w], map.into_iter().collect())?;
                    write_atomic(&out, &t32::to_bytes(&t))?;
                }
                Ok((v.clone(), *i, digest, fresh))
            })
            .collect()
    });
    let mut stats = CacheStats::default();
    let mut frames: BTreeMap<String, BTreeMap<usize, String>> = BTreeMap::new();
    for r in results {
        let (v, i, d, fresh) = r?;
        if fresh {
            stats.reused += 1;
        } else {
            stats.computed += 1;
        }
        frames.entry(v).or_default().insert(i, d);
    }
    let manifest = CacheManifest {
        rtfpm: RtfpmManifest::new(cfg),
        frames,
    };
    if old.as_ref() != Some(&manifest) {
        write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    }
    log::info!(
        "input cache {}: {} computed, {} reused",
        dir.display(),
        stats.computed,
        stats.reused
    );
    Ok((FpmCache { dir, manifest }, stats))
}
