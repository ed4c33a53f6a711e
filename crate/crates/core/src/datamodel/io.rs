//! Clip directories: `frame_000001.png …` (8-bit RGB), `meta.json`, and an
//! optional `landmarks.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AgeValue, FaceLandmarks, Frame, VideoClip};
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";
pub const LANDMARKS_FILE: &str = "landmarks.json";

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub subject_id: String,
    pub apparent_age: Option<AgeValue>,
    pub motion_seed: Option<u64>,
    pub frame_count: usize,
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{:06}.png", index + 1)
}

/// `[-1, 1]` → `0..=255`.
pub fn quantize(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn dequantize(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn frame_to_rgb8(frame: &Frame) -> image::RgbImage {
    let (h, w) = (frame.height(), frame.width());
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let c = c.min(frame.channels() - 1);
            quantize(frame.get(c, y as usize, x as usize))
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn frame_from_rgb8(img: &image::RgbImage) -> Result<Frame> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Frame::from_fn(h, w, 3, |c, y, x| {
        dequantize(img.get_pixel(x as u32, y as u32)[c])
    })
}

pub fn write_frame_png(frame: &Frame, path: &Path) -> Result<()> {
    frame_to_rgb8(frame)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(format!("writing {}", path.display()), std::io::Error::other(e)))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_clip(clip: &VideoClip, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for (i, frame) in clip.frames().iter().enumerate() {
        write_frame_png(frame, &dir.join(frame_file_name(i)))?;
    }
    let meta = ClipMeta {
        subject_id: clip.subject_id.clone(),
        apparent_age: clip.apparent_age,
        motion_seed: clip.motion_seed,
        frame_count: clip.frame_count(),
    };
    write_json(&meta, &dir.join(META_FILE))?;
    if let Some(landmarks) = &clip.landmarks {
        write_json(landmarks, &dir.join(LANDMARKS_FILE))?;
    }
    Ok(())
}

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries =
        fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("frame_") && name.ends_with(".png") {
            paths.push(entry.path());
        }
    }
    paths.sort();
    Ok(paths)
}

pub fn load_clip(dir: &Path) -> Result<VideoClip> {
    let paths = frame_paths(dir)?;
    if paths.is_empty() {
        return Err(Error::Ingest {
            path: dir.to_path_buf(),
            index: 0,
            reason: "no frames".into(),
        });
    }
    let mut frames: Vec<Frame> = Vec::with_capacity(paths.len());
    for (index, path) in paths.iter().enumerate() {
        let ingest = |reason: String| Error::Ingest {
            path: path.clone(),
            index,
            reason,
        };
        let img = image::open(path).map_err(|e| ingest(e.to_string()))?.to_rgb8();
        let frame = frame_from_rgb8(&img).map_err(|e| ingest(e.to_string()))?;
        if let Some(first) = frames.first() {
            if !first.same_shape(&frame) {
                return Err(ingest(format!(
                    "size {}×{} differs from first frame {}×{}",
                    frame.height(),
                    frame.width(),
                    first.height(),
                    first.width()
                )));
            }
        }
        frames.push(frame);
    }

    let meta_path = dir.join(META_FILE);
    let meta: Option<ClipMeta> = if meta_path.exists() {
        Some(read_json(&meta_path)?)
    } else {
        None
    };
    let subject = meta
        .as_ref()
        .map(|m| m.subject_id.clone())
        .unwrap_or_else(|| {
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
    let mut clip = VideoClip::new(subject, frames)?;
    if let Some(meta) = meta {
        if meta.frame_count != clip.frame_count() {
            return Err(Error::Ingest {
                path: dir.to_path_buf(),
                index: clip.frame_count(),
                reason: format!(
                    "meta.json declares {} frames, found {}",
                    meta.frame_count,
                    clip.frame_count()
                ),
            });
        }
        clip.apparent_age = meta.apparent_age;
        clip.motion_seed = meta.motion_seed;
    }
    let lm_path = dir.join(LANDMARKS_FILE);
    if lm_path.exists() {
        let landmarks: Vec<FaceLandmarks> = read_json(&lm_path)?;
        clip = clip.with_landmarks(landmarks)?;
    }
    Ok(clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_clip() -> VideoClip {
        let frames = (0..3)
            .map(|t| {
                Frame::from_fn(64, 64, 3, |c, y, x| {
                    (((x * 7 + y * 3 + c * 11 + t * 5) % 255) as f32 / 127.0) - 1.0
                })
                .unwrap()
            })
            .collect();
        VideoClip::new("subject_0007", frames)
            .unwrap()
            .with_age(AgeValue::new(42.0).unwrap())
            .with_motion_seed(99)
    }

    #[test]
    fn save_load_within_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let clip = test_clip();
        save_clip(&clip, dir.path()).unwrap();
        assert!(dir.path().join("frame_000001.png").exists());
        assert!(dir.path().join("frame_000003.png").exists());
        let back = load_clip(dir.path()).unwrap();
        assert_eq!(back.frame_count(), 3);
        assert_eq!(back.subject_id, "subject_0007");
        assert_eq!(back.apparent_age, clip.apparent_age);
        assert_eq!(back.motion_seed, Some(99));
        for (a, b) in clip.frames().iter().zip(back.frames()) {
            assert!(a.max_abs_diff(b).unwrap() <= 1.0 / 127.5);
        }
    }

    #[test]
    fn meta_json_keys() {
        let dir = tempfile::tempdir().unwrap();
        save_clip(&test_clip(), dir.path()).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(META_FILE)).unwrap()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["apparent_age", "frame_count", "motion_seed", "subject_id"]);
    }

    #[test]
    fn empty_directory_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_clip(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no frames"), "{err}");
    }

    #[test]
    fn inconsistent_sizes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_frame_png(&Frame::filled(64, 64, 3, 0.0).unwrap(), &dir.path().join(frame_file_name(0))).unwrap();
        write_frame_png(&Frame::filled(32, 32, 3, 0.0).unwrap(), &dir.path().join(frame_file_name(1))).unwrap();
        match load_clip(dir.path()).unwrap_err() {
            Error::Ingest { index, .. } => assert_eq!(index, 1),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn corrupt_frame_names_index() {
        let dir = tempfile::tempdir().unwrap();
        write_frame_png(&Frame::filled(16, 16, 3, 0.0).unwrap(), &dir.path().join(frame_file_name(0))).unwrap();
        fs::write(dir.path().join(frame_file_name(1)), b"not a png").unwrap();
        match load_clip(dir.path()).unwrap_err() {
            Error::Ingest { index, .. } => assert_eq!(index, 1),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn quantization_round_trip_bound() {
        for i in 0..=2000 {
            let v = -1.0 + i as f32 / 1000.0;
            assert!((dequantize(quantize(v)) - v).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }
}
