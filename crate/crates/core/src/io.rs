//! Binary PGM (P5) frames and the on-disk dataset layout:
//!
//! ```text
//! <root>/videos/<video>/frame_000000.pgm
//! <root>/masks/<video>/frame_000000.pgm     (0 / 255, optional)
//! <root>/tracks/<video>.json                (optional)
//! <root>/labels.json                        ({"<video>": "<class>"}, optional)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};

fn pgm_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "pgm",
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Decodes a P5 image to values in `[0, 1]`. Supports 8- and 16-bit samples.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Array2<f32>> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(pgm_err(path, "truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| pgm_err(path, "non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(pgm_err(path, format!("expected magic P5, found {}", fields[0])));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| pgm_err(path, format!("bad {what} {s:?}")))
    };
    let (w, h, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(pgm_err(path, format!("unsupported geometry {w}x{h} maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = w * h * bpp;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| pgm_err(path, format!("raster needs {need} bytes, found {}", bytes.len().saturating_sub(pos))))?;
    let m = maxval as f32;
    let data: Vec<f32> = if bpp == 1 {
        raster.iter().map(|&b| (b as f32 / m).min(1.0)).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|p| (u16::from_be_bytes([p[0], p[1]]) as f32 / m).min(1.0))
            .collect()
    };
    Ok(Array2::from_shape_vec((h, w), data).expect("raster size checked"))
}

/// 8-bit quantization used for every frame written to disk.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The value an 8-bit sample decodes to.
pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

pub fn encode_pgm(img: &Array2<f32>) -> Vec<u8> {
    let (h, w) = img.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.iter().map(|&v| quantize(v)));
    out
}

pub fn read_pgm(path: &Path) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_pgm(&bytes, path)
}

pub fn write_pgm(path: &Path, img: &Array2<f32>) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(Error::io(path))
}

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:06}.pgm")
}

fn parse_frame_name(name: &str) -> Option<usize> {
    name.strip_prefix("frame_")?.strip_suffix(".pgm")?.parse().ok()
}

/// Index of a dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    /// Video id to its frame indices, sorted.
    pub videos: BTreeMap<String, Vec<usize>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let vdir = root.join("videos");
        let entries = fs::read_dir(&vdir).map_err(Error::io(&vdir))?;
        let mut videos = BTreeMap::new();
        for e in entries {
            let e = e.map_err(Error::io(&vdir))?;
            if !e.file_type().map_err(Error::io(e.path()))?.is_dir() {
                continue;
            }
            let id = e.file_name().to_string_lossy().into_owned();
            let mut frames: Vec<usize> = fs::read_dir(e.path())
                .map_err(Error::io(e.path()))?
                .filter_map(|f| f.ok())
                .filter_map(|f| parse_frame_name(&f.file_name().to_string_lossy()))
                .collect();
            frames.sort_unstable();
            if !frames.is_empty() {
                videos.insert(id, frames);
            }
        }
        if videos.is_empty() {
            return Err(Error::InsufficientData(format!("no videos under {}", vdir.display())));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            videos,
        })
    }

    pub fn frame_path(&self, video: &str, index: usize) -> PathBuf {
        self.root.join("videos").join(video).join(frame_name(index))
    }

    pub fn mask_path(&self, video: &str, index: usize) -> PathBuf {
        self.root.join("masks").join(video).join(frame_name(index))
    }

    pub fn tracks_path(&self, video: &str) -> PathBuf {
        self.root.join("tracks").join(format!("{video}.json"))
    }

    pub fn read_frame(&self, video: &str, index: usize) -> Result<Array2<f32>> {
        read_pgm(&self.frame_path(video, index))
    }

    pub fn read_video(&self, video: &str) -> Result<Vec<Array2<f32>>> {
        let frames = self
            .videos
            .get(video)
            .ok_or_else(|| Error::InsufficientData(format!("unknown video {video}")))?;
        frames.iter().map(|&i| self.read_frame(video, i)).collect()
    }

    /// Binary mask (`> 0.5`) for a frame, if present.
    pub fn read_mask(&self, video: &str, index: usize) -> Result<Option<Array2<bool>>> {
        let p = self.mask_path(video, index);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(read_pgm(&p)?.mapv(|v| v > 0.5)))
    }

    /// `{"video": "label"}` from `labels.json`, empty if absent.
    pub fn labels(&self) -> Result<BTreeMap<String, String>> {
        let p = self.root.join("labels.json");
        if !p.exists() {
            return Ok(BTreeMap::new());
        }
        let s = fs::read_to_string(&p).map_err(Error::io(&p))?;
        serde_json::from_str(&s).map_err(|e| Error::Format {
            kind: "labels",
            path: p,
            detail: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_with_comments() {
        let mut b = b"P5\n# made by hand\n3 2\n# max\n255\n".to_vec();
        b.extend([0, 128, 255, 10, 20, 30]);
        let img = decode_pgm(&b, Path::new("x")).unwrap();
        assert_eq!(img.dim(), (2, 3));
        assert_eq!(img[(0, 2)], 1.0);
        assert_eq!(img[(1, 0)], 10.0 / 255.0);
    }

    #[test]
    fn sixteen_bit() {
        let mut b = b"P5 2 1 65535\n".to_vec();
        b.extend([0xff, 0xff, 0x00, 0x00]);
        let img = decode_pgm(&b, Path::new("x")).unwrap();
        assert_eq!(img.into_raw_vec_and_offset().0, vec![1.0, 0.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0", Path::new("x")).is_err());
        assert!(decode_pgm(b"P5\n4 4\n255\n\0\0", Path::new("x")).is_err());
        assert!(decode_pgm(b"P5\n4", Path::new("x")).is_err());
    }

    #[test]
    fn frame_names() {
        assert_eq!(frame_name(12), "frame_000012.pgm");
        assert_eq!(parse_frame_name("frame_000012.pgm"), Some(12));
        assert_eq!(parse_frame_name("mask.pgm"), None);
    }

    proptest! {
        #[test]
        fn round_trip_is_exact_on_8bit_values(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let img = Array2::from_shape_fn((h, w), |(r, c)| {
                ((seed.wrapping_mul(31).wrapping_add((r * w + c) as u64 * 2654435761)) % 256) as f32 / 255.0
            });
            let back = decode_pgm(&encode_pgm(&img), Path::new("mem")).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
