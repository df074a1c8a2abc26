//! `synth`: writes harness videos in the dataset layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sonokey::harness::{generate, scenes, write_video, SceneSpec};
use sonokey::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    BandStreaksOverlay,
    BandClass,
    StreakClass,
}

/// `count` videos of a built-in scene family; video `i` uses seed
/// `seed + i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub family: Family,
    pub prefix: String,
    pub count: usize,
    pub n_frames: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub label: Option<String>,
}

fn default_size() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoSpec {
    pub id: String,
    pub scene: SceneSpec,
    #[serde(default)]
    pub label: Option<String>,
}

/// Either explicit scenes, scene families, or both.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub videos: Vec<VideoSpec>,
    pub families: Vec<FamilySpec>,
}

impl SynthConfig {
    /// Every video to write, with `seed_offset` added to all seeds.
    pub fn expand(&self, seed_offset: u64) -> Vec<VideoSpec> {
        let mut out: Vec<VideoSpec> = self
            .videos
            .iter()
            .map(|v| VideoSpec {
                scene: SceneSpec {
                    seed: v.scene.seed.wrapping_add(seed_offset),
                    ..v.scene.clone()
                },
                ..v.clone()
            })
            .collect();
        for f in &self.families {
            for i in 0..f.count {
                let seed = f.seed.wrapping_add(seed_offset).wrapping_add(i as u64);
                let scene = match f.family {
                    Family::BandStreaksOverlay => scenes::band_streaks_overlay(f.size, f.n_frames, seed),
                    Family::BandClass => scenes::band_class(f.size, f.n_frames, seed),
                    Family::StreakClass => scenes::streak_class(f.size, f.n_frames, seed),
                };
                out.push(VideoSpec {
                    id: format!("{}{i:03}", f.prefix),
                    scene,
                    label: f.label.clone(),
                });
            }
        }
        out
    }
}

/// Accepts a [`SynthConfig`] or a bare [`SceneSpec`] (one video, `video000`).
pub fn parse(value: serde_json::Value) -> Result<SynthConfig> {
    let is_synth = value
        .as_object()
        .is_some_and(|o| o.contains_key("videos") || o.contains_key("families"));
    if is_synth {
        serde_json::from_value(value).map_err(|e| Error::InvalidArgument(format!("synth config: {e}")))
    } else {
        let scene: SceneSpec =
            serde_json::from_value(value).map_err(|e| Error::InvalidArgument(format!("scene config: {e}")))?;
        Ok(SynthConfig {
            videos: vec![VideoSpec {
                id: "video000".into(),
                scene,
                label: None,
            }],
            families: vec![],
        })
    }
}

pub fn write_dataset(cfg: &SynthConfig, seed_offset: u64, out: &Path) -> Result<Vec<String>> {
    let videos = cfg.expand(seed_offset);
    if videos.is_empty() {
        return Err(Error::InvalidArgument("synth config lists no videos".into()));
    }
    let mut ids = Vec::new();
    let mut labels = BTreeMap::new();
    for v in &videos {
        if ids.contains(&v.id) {
            return Err(Error::InvalidArgument(format!("duplicate video id {}", v.id)));
        }
        write_video(out, &v.id, &generate(&v.scene)?)?;
        if let Some(l) = &v.label {
            labels.insert(v.id.clone(), l.clone());
        }
        ids.push(v.id.clone());
    }
    if !labels.is_empty() {
        let p = out.join("labels.json");
        fs::write(&p, serde_json::to_vec_pretty(&labels)?).map_err(|e| Error::Io { path: p, source: e })?;
    }
    Ok(ids)
}
