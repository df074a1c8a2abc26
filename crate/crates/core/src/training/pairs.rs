//! Frame-pair sampling: one source frame per `stride` frames and a target a
//! few frames later.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairIndex {
    pub video: String,
    pub t: usize,
    pub t_plus_i: usize,
}

/// A contiguous run of frames of one video; positions index the video's
/// sorted frame list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub video: String,
    pub frames: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub pairs: Vec<PairIndex>,
    /// Distinct source frames available.
    pub sources: usize,
    /// True when `n` exceeded `sources` and sources were reused.
    pub with_replacement: bool,
}

/// Draws `n` pairs from `segments`. Sources sit at positions `0, stride,
/// 2*stride, ...` of each segment (any that has a later frame); the target
/// offset is uniform on `[1, min(max_offset, frames left)]`. When `n` is at
/// most the number of sources they are drawn without replacement; otherwise
/// every source is used once and the rest are drawn with replacement.
pub fn sample_pairs(segments: &[Segment], n: usize, seed: u64, stride: usize, max_offset: usize) -> Result<Sampled> {
    if stride == 0 || max_offset == 0 {
        return Err(Error::InvalidArgument("sample_pairs: stride and max_offset must be positive".into()));
    }
    let need = max_offset + 1;
    let short: Vec<String> = segments
        .iter()
        .filter(|s| s.frames.len() < need)
        .map(|s| format!("{} ({} frames)", s.video, s.frames.len()))
        .collect();
    if !short.is_empty() {
        return Err(Error::InsufficientData(format!(
            "pair sampling needs at least {need} frames per video; too short: {}",
            short.join(", ")
        )));
    }
    let mut sources = Vec::new();
    for (si, s) in segments.iter().enumerate() {
        for p in (0..s.frames.len() - 1).step_by(stride) {
            sources.push((si, p));
        }
    }
    if sources.is_empty() {
        return Err(Error::InsufficientData("pair sampling: no source frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<(usize, usize)> = if n <= sources.len() {
        let mut all = sources.clone();
        all.partial_shuffle(&mut rng, n);
        let mut chosen = all[..n].to_vec();
        chosen.sort();
        chosen
    } else {
        let mut v = sources.clone();
        v.extend((sources.len()..n).map(|_| sources[rng.random_range(0..sources.len())]));
        v
    };
    let with_replacement = n > sources.len();
    if with_replacement {
        log::warn!(
            "requested {n} pairs from {} distinct source frames; sampling with replacement",
            sources.len()
        );
    }
    let pairs = picked
        .drain(..)
        .map(|(si, p)| {
            let s = &segments[si];
            let hi = max_offset.min(s.frames.len() - 1 - p);
            let i = rng.random_range(1..=hi);
            PairIndex {
                video: s.video.clone(),
                t: s.frames[p],
                t_plus_i: s.frames[p + i],
            }
        })
        .collect();
    Ok(Sampled {
        pairs,
        sources: sources.len(),
        with_replacement,
    })
}

/// Disjoint train and validation segments. With two or more videos whole
/// videos go to validation in proportion `val_fraction` (at least one, never
/// all); with a single video its tail frames do.
pub fn split_segments(videos: &BTreeMap<String, Vec<usize>>, val_fraction: f64, seed: u64) -> (Vec<Segment>, Vec<Segment>) {
    let seg = |v: &str, f: &[usize]| Segment {
        video: v.to_string(),
        frames: f.to_vec(),
    };
    if val_fraction <= 0.0 || videos.is_empty() {
        return (videos.iter().map(|(v, f)| seg(v, f)).collect(), vec![]);
    }
    if videos.len() == 1 {
        let (v, f) = videos.iter().next().expect("one video");
        let cut = f.len() - ((f.len() as f64 * val_fraction).round() as usize).clamp(1, f.len().saturating_sub(1).max(1));
        return (vec![seg(v, &f[..cut])], vec![seg(v, &f[cut..])]);
    }
    let mut names: Vec<&String> = videos.keys().collect();
    names.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((names.len() as f64 * val_fraction).round() as usize).clamp(1, names.len() - 1);
    let mut val: Vec<&String> = names[..n_val].to_vec();
    let mut train: Vec<&String> = names[n_val..].to_vec();
    val.sort();
    train.sort();
    (
        train.iter().map(|v| seg(v, &videos[*v])).collect(),
        val.iter().map(|v| seg(v, &videos[*v])).collect(),
    )
}

/// Train and validation pair pools of one run. Both are drawn once from the
/// run seed and reused every epoch.
pub fn pair_pools(
    videos: &BTreeMap<String, Vec<usize>>,
    cfg: &super::TrainConfig,
) -> Result<(Vec<PairIndex>, Vec<PairIndex>)> {
    let frac = cfg.pairs_val as f64 / (cfg.pairs_train + cfg.pairs_val) as f64;
    let (tr, va) = split_segments(videos, frac, cfg.seed);
    let train = sample_pairs(&tr, cfg.pairs_train, cfg.seed, cfg.source_stride, cfg.max_offset)?.pairs;
    let val = if va.is_empty() || cfg.pairs_val == 0 {
        vec![]
    } else {
        sample_pairs(&va, cfg.pairs_val, cfg.seed ^ 0x76616c, cfg.source_stride, cfg.max_offset)?.pairs
    };
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(n: usize) -> Vec<Segment> {
        vec![Segment {
            video: "v".into(),
            frames: (0..n).collect(),
        }]
    }

    #[test]
    fn one_source_per_ten_frames() {
        let s = sample_pairs(&one(100), 10, 3, 10, 10).unwrap();
        let t: Vec<usize> = s.pairs.iter().map(|p| p.t).collect();
        assert_eq!(t, (0..100).step_by(10).collect::<Vec<_>>());
        assert!(!s.with_replacement);
        for p in &s.pairs {
            assert!(p.t_plus_i > p.t && p.t_plus_i - p.t <= 10 && p.t_plus_i < 100);
        }
    }

    #[test]
    fn same_seed_same_pairs() {
        let a = sample_pairs(&one(200), 7, 42, 10, 10).unwrap();
        assert_eq!(a, sample_pairs(&one(200), 7, 42, 10, 10).unwrap());
        assert_ne!(a.pairs, sample_pairs(&one(200), 7, 43, 10, 10).unwrap().pairs);
    }

    #[test]
    fn exhaustion_switches_to_replacement() {
        let s = sample_pairs(&one(30), 8, 1, 10, 10).unwrap();
        assert_eq!(s.sources, 3);
        assert!(s.with_replacement);
        assert_eq!(s.pairs.len(), 8);
        let mut firsts: Vec<usize> = s.pairs[..3].iter().map(|p| p.t).collect();
        firsts.sort();
        assert_eq!(firsts, vec![0, 10, 20]);
        assert!(s.pairs.iter().all(|p| [0, 10, 20].contains(&p.t)));
    }

    #[test]
    fn short_videos_are_listed() {
        let segs = vec![
            Segment {
                video: "ok".into(),
                frames: (0..20).collect(),
            },
            Segment {
                video: "tiny".into(),
                frames: (0..5).collect(),
            },
        ];
        let err = sample_pairs(&segs, 4, 0, 10, 10).unwrap_err().to_string();
        assert!(err.contains("tiny (5 frames)") && !err.contains("ok ("), "{err}");
    }

    #[test]
    fn offsets_stay_inside_the_video() {
        // Last source at 20 has only 4 later frames.
        let s = sample_pairs(&one(25), 300, 9, 10, 10).unwrap();
        assert!(s.pairs.iter().all(|p| p.t_plus_i <= 24));
        assert!(s.pairs.iter().filter(|p| p.t == 20).all(|p| p.t_plus_i - p.t <= 4));
    }

    #[test]
    fn splits_are_disjoint() {
        let videos: BTreeMap<String, Vec<usize>> = (0..6).map(|i| (format!("v{i}"), (0..20).collect())).collect();
        let (tr, va) = split_segments(&videos, 1.0 / 3.0, 5);
        assert_eq!((tr.len(), va.len()), (4, 2));
        assert!(tr.iter().all(|t| va.iter().all(|v| v.video != t.video)));

        let single: BTreeMap<String, Vec<usize>> = [("a".to_string(), (0..90).collect())].into();
        let (tr, va) = split_segments(&single, 1.0 / 3.0, 5);
        assert_eq!(tr[0].frames, (0..60).collect::<Vec<_>>());
        assert_eq!(va[0].frames, (60..90).collect::<Vec<_>>());
    }
}
