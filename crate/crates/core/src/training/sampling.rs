use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;

use super::TrainConfig;
use crate::datamodel::io::load_clip;
use crate::datamodel::manifest::DatasetManifest;
use crate::datamodel::{AgeValue, Frame, VideoClip};
use crate::error::{Error, Result};

/// Everything random about one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub subject_id: String,
    pub input_age: AgeValue,
    pub target_age: AgeValue,
    pub delta_t: usize,
    pub start: usize,
    pub reversed: bool,
}

/// Subject, both ages (independently, self-pairs included), interval,
/// window start and reversal.
pub fn sample_plan<R: Rng>(manifest: &DatasetManifest, config: &TrainConfig, rng: &mut R) -> Result<SamplePlan> {
    if manifest.subjects.is_empty() {
        return Err(Error::Manifest("dataset has no subjects".into()));
    }
    let subject = &manifest.subjects[rng.random_range(0..manifest.subjects.len())];
    if subject.ages.is_empty() {
        return Err(Error::Manifest(format!("subject {} lists no ages", subject.subject_id)));
    }
    let input_age = subject.ages[rng.random_range(0..subject.ages.len())];
    let target_age = subject.ages[rng.random_range(0..subject.ages.len())];
    let delta_t = config.delta_t_choices[rng.random_range(0..config.delta_t_choices.len())];
    let span = config.window_span(delta_t);
    if span > manifest.frames_per_video {
        return Err(Error::config(format!(
            "a {}-frame window at Δt = {delta_t} spans {span} frames; videos have {}",
            config.window_frames, manifest.frames_per_video
        )));
    }
    let start = rng.random_range(0..=manifest.frames_per_video - span);
    let reversed = rng.random_bool(config.reverse_prob);
    for age in [input_age, target_age] {
        if subject.video(age).is_none() {
            return Err(Error::Manifest(format!("subject {} has no video for age {age}", subject.subject_id)));
        }
    }
    Ok(SamplePlan {
        subject_id: subject.subject_id.clone(),
        input_age,
        target_age,
        delta_t,
        start,
        reversed,
    })
}

/// Lazily loaded clips of one dataset root.
#[derive(Debug, Default)]
pub struct ClipCache {
    root: PathBuf,
    clips: HashMap<PathBuf, Arc<VideoClip>>,
}

impl ClipCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ClipCache {
            root: root.into(),
            clips: HashMap::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn get(&mut self, relative: &Path) -> Result<Arc<VideoClip>> {
        if let Some(c) = self.clips.get(relative) {
            return Ok(c.clone());
        }
        let clip = Arc::new(load_clip(&self.root.join(relative))?);
        self.clips.insert(relative.to_path_buf(), clip.clone());
        Ok(clip)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// `window_frames` frames every `delta_t` from `start`, reversed on request.
pub fn load_window(clip: &VideoClip, plan: &SamplePlan, window_frames: usize) -> Result<Vec<Frame>> {
    let last = plan.start + (window_frames - 1) * plan.delta_t;
    if last >= clip.frame_count() {
        return Err(Error::validation(format!(
            "window ends at frame {last}, clip {} has {} frames",
            clip.subject_id,
            clip.frame_count()
        )));
    }
    let mut frames: Vec<Frame> = (0..window_frames)
        .map(|i| clip.frames()[plan.start + i * plan.delta_t].clone())
        .collect();
    if plan.reversed {
        frames.reverse();
    }
    Ok(frames)
}

#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub plan: SamplePlan,
    pub input: Vec<Frame>,
    pub gt: Vec<Frame>,
}

pub fn sample_training_pair<R: Rng>(
    manifest: &DatasetManifest,
    cache: &mut ClipCache,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainingSample> {
    let plan = sample_plan(manifest, config, rng)?;
    let subject = manifest
        .subject(&plan.subject_id)
        .ok_or_else(|| Error::Manifest(format!("unknown subject {}", plan.subject_id)))?;
    let clip_for = |age: AgeValue| {
        subject
            .video(age)
            .map(|v| v.path.clone())
            .ok_or_else(|| Error::Manifest(format!("subject {} has no video for age {age}", subject.subject_id)))
    };
    let input_clip = cache.get(&clip_for(plan.input_age)?)?;
    let gt_clip = cache.get(&clip_for(plan.target_age)?)?;
    Ok(TrainingSample {
        input: load_window(&input_clip, &plan, config.window_frames)?,
        gt: load_window(&gt_clip, &plan, config.window_frames)?,
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::manifest::{AgeVideo, SubjectRecord, MANIFEST_VERSION};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn manifest(ages: &[f64]) -> DatasetManifest {
        let ages: Vec<AgeValue> = ages.iter().map(|a| AgeValue::new(*a).unwrap()).collect();
        DatasetManifest {
            format_version: MANIFEST_VERSION,
            seed: 0,
            resolution: 64,
            keyframes_per_video: 8,
            recursion_depth: 3,
            frames_per_video: 57,
            cpbd_threshold: 0.5,
            ages: ages.clone(),
            subjects: (0..3)
                .map(|i| SubjectRecord {
                    subject_id: format!("s{i}"),
                    identity_seed: i,
                    motion_seed: i,
                    ages: ages.clone(),
                    videos: ages
                        .iter()
                        .map(|a| AgeVideo {
                            age: *a,
                            path: format!("s{i}/{a}").into(),
                            frame_count: 57,
                            motion_seed: i,
                            sharpness: None,
                        })
                        .collect(),
                })
                .collect(),
            errata: vec![],
        }
    }

    #[test]
    fn seeded_plans_repeat() {
        let m = manifest(&[18.0, 50.0, 85.0]);
        let cfg = TrainConfig::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_plan(&m, &cfg, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn windows_fit_and_self_pairs_occur() {
        let m = manifest(&[18.0, 50.0, 85.0]);
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut same = 0;
        for _ in 0..3000 {
            let p = sample_plan(&m, &cfg, &mut rng).unwrap();
            assert!(p.start + cfg.window_span(p.delta_t) <= 57);
            same += (p.input_age == p.target_age) as usize;
        }
        let frac = same as f64 / 3000.0;
        assert!((frac - 1.0 / 3.0).abs() < 0.04, "{frac}");
    }

    #[test]
    fn missing_age_video_is_manifest_error() {
        let mut m = manifest(&[18.0, 85.0]);
        for s in &mut m.subjects {
            s.videos.pop();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let errs = (0..50)
            .filter_map(|_| sample_plan(&m, &TrainConfig::default(), &mut rng).err())
            .collect::<Vec<_>>();
        assert!(!errs.is_empty());
        assert!(errs.iter().all(|e| matches!(e, Error::Manifest(_))));
    }

    #[test]
    fn oversized_window_is_config_error() {
        let mut m = manifest(&[18.0]);
        m.frames_per_video = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_plan(&m, &TrainConfig::default(), &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn window_reversal() {
        let frames: Vec<Frame> = (0..20).map(|i| Frame::filled(16, 16, 3, i as f32 / 20.0).unwrap()).collect();
        let clip = VideoClip::new("x", frames).unwrap();
        let mut plan = SamplePlan {
            subject_id: "x".into(),
            input_age: AgeValue::new(20.0).unwrap(),
            target_age: AgeValue::new(20.0).unwrap(),
            delta_t: 3,
            start: 2,
            reversed: false,
        };
        let fwd = load_window(&clip, &plan, 4).unwrap();
        assert_eq!(fwd.iter().map(|f| f.get(0, 0, 0)).collect::<Vec<_>>(), [0.1, 0.25, 0.4, 0.55]);
        plan.reversed = true;
        let rev = load_window(&clip, &plan, 4).unwrap();
        assert_eq!(rev[0], fwd[3]);
        plan.start = 11;
        assert!(load_window(&clip, &plan, 4).is_err());
    }
}
