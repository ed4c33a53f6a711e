//! `manifest.json`: the index of a generated dataset.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::AgeValue;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Frames produced by recursive midpoint interpolation over `keyframes`
/// keyframes at recursion `depth`: `(k − 1)(2^d − 1) + k`.
pub fn interpolated_frame_count(keyframes: usize, depth: u32) -> usize {
    if keyframes == 0 {
        return 0;
    }
    (keyframes - 1) * ((1usize << depth) - 1) + keyframes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub resolution: usize,
    pub keyframes_per_video: usize,
    pub recursion_depth: u32,
    pub frames_per_video: usize,
    pub cpbd_threshold: f64,
    pub ages: Vec<AgeValue>,
    pub subjects: Vec<SubjectRecord>,
    #[serde(default)]
    pub errata: Vec<Erratum>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub identity_seed: u64,
    pub motion_seed: u64,
    pub ages: Vec<AgeValue>,
    pub videos: Vec<AgeVideo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeVideo {
    pub age: AgeValue,
    /// Clip directory, relative to the dataset root.
    pub path: PathBuf,
    pub frame_count: usize,
    pub motion_seed: u64,
    /// Mean per-frame sharpness; absent for planned (unrendered) entries.
    pub sharpness: Option<f64>,
}

/// A subject dropped during generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Erratum {
    pub subject_id: String,
    pub stage: String,
    pub reason: String,
    #[serde(default)]
    pub scores: Vec<(AgeValue, f64)>,
}

impl SubjectRecord {
    pub fn video(&self, age: AgeValue) -> Option<&AgeVideo> {
        self.videos.iter().find(|v| v.age == age)
    }
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest: DatasetManifest = super::io::read_json(&root.join(MANIFEST_FILE))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported manifest version {}",
                manifest.format_version
            )));
        }
        Ok(manifest)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        super::io::write_json(self, &root.join(MANIFEST_FILE))
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    pub fn video_count(&self) -> usize {
        self.subjects.iter().map(|s| s.videos.len()).sum()
    }

    /// Structural checks; never touches the filesystem.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Manifest(msg));
        let expected =
            interpolated_frame_count(self.keyframes_per_video, self.recursion_depth);
        if self.frames_per_video != expected {
            return bad(format!(
                "frames_per_video {} but {} keyframes at depth {} give {}",
                self.frames_per_video, self.keyframes_per_video, self.recursion_depth, expected
            ));
        }
        let mut ids = BTreeSet::new();
        for subject in &self.subjects {
            let id = &subject.subject_id;
            if !ids.insert(id.as_str()) {
                return bad(format!("duplicate subject {id}"));
            }
            if subject.ages.is_empty() {
                return bad(format!("subject {id} lists no ages"));
            }
            for age in &subject.ages {
                let n = subject.videos.iter().filter(|v| v.age == *age).count();
                if n != 1 {
                    return bad(format!("subject {id} has {n} videos for age {age}"));
                }
            }
            if subject.videos.len() != subject.ages.len() {
                return bad(format!("subject {id} has videos for unlisted ages"));
            }
            let first = &subject.videos[0];
            for video in &subject.videos {
                if video.frame_count != first.frame_count {
                    return bad(format!(
                        "subject {id}: age {} has {} frames, age {} has {}",
                        video.age, video.frame_count, first.age, first.frame_count
                    ));
                }
                if video.frame_count != self.frames_per_video {
                    return bad(format!(
                        "subject {id}: age {} has {} frames, manifest declares {}",
                        video.age, video.frame_count, self.frames_per_video
                    ));
                }
                if video.motion_seed != subject.motion_seed {
                    return bad(format!(
                        "subject {id}: age {} uses motion seed {}, subject seed is {}",
                        video.age, video.motion_seed, subject.motion_seed
                    ));
                }
                if let Some(score) = video.sharpness {
                    if score < self.cpbd_threshold {
                        return bad(format!(
                            "subject {id}: age {} sharpness {score} below threshold {}",
                            video.age, self.cpbd_threshold
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus a frame-count check of every clip
    /// directory under `root`.
    pub fn validate_on_disk(&self, root: &Path) -> Result<()> {
        self.validate()?;
        for subject in &self.subjects {
            for video in &subject.videos {
                let dir = root.join(&video.path);
                let count = std::fs::read_dir(&dir)
                    .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
                    .filter_map(|e| e.ok())
                    .filter(|e| {
                        let n = e.file_name();
                        let n = n.to_string_lossy();
                        n.starts_with("frame_") && n.ends_with(".png")
                    })
                    .count();
                if count != video.frame_count {
                    return Err(Error::Manifest(format!(
                        "{} holds {count} frames, manifest says {}",
                        dir.display(),
                        video.frame_count
                    )));
                }
            }
        }
        Ok(())
    }
}
