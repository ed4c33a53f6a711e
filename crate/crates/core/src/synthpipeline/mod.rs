//! Paired multi-age video factory: aged stills → posed keyframes →
//! recursive midpoint interpolation, one clip per (subject, age).
//!
//! Every stage sits behind a trait; [`ProceduralBackend`] implements all of
//! them deterministically and [`SubprocessBackend`] forwards them to an
//! external program.

mod procedural;
mod sharpness;
mod subprocess;

pub use procedural::{
    age_ramp, render, FaceGeometry, ProceduralBackend, AGE_RAMP, CHEEK_DROP, CROW_OFFSET, EXPRESSION_DIMS, WRINKLE_PERIOD,
    ZONE_RADIUS,
};
pub use sharpness::{sharpness_filter, EdgeWidthSharpness, SharpnessEstimator, SharpnessVerdict, P_JNB};
pub use subprocess::SubprocessBackend;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::io::{save_clip, write_json};
use crate::datamodel::manifest::{
    interpolated_frame_count, AgeVideo, DatasetManifest, Erratum, SubjectRecord, MANIFEST_VERSION,
};
use crate::datamodel::{AgeValue, FaceLandmarks, Frame, VideoClip};
use crate::error::{Error, Result};

/// Per-frame pose sidecar written next to every clip.
pub const POSES_FILE: &str = "poses.json";

/// Noise seed driving one identity; identical across ages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdentitySeed(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseBounds {
    /// Radians, per axis.
    pub max_rotation: f64,
    /// Fraction of the frame, per axis.
    pub max_translation: f64,
    pub max_expression: f64,
    pub expression_dims: usize,
}

impl Default for PoseBounds {
    fn default() -> Self {
        PoseBounds {
            max_rotation: 0.35,
            max_translation: 0.05,
            max_expression: 1.0,
            expression_dims: EXPRESSION_DIMS,
        }
    }
}

/// Rotation `[yaw, pitch, roll]`, translation `[x, y]` and expression
/// coefficients of one keyframe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseExpressionSample {
    pub rotation: [f64; 3],
    pub translation: [f64; 2],
    pub expression: Vec<f64>,
}

impl PoseExpressionSample {
    pub fn neutral(expression_dims: usize) -> Self {
        PoseExpressionSample {
            rotation: [0.0; 3],
            translation: [0.0; 2],
            expression: vec![0.0; expression_dims],
        }
    }

    pub fn sample<R: Rng>(rng: &mut R, bounds: &PoseBounds) -> Self {
        let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let rotation = [sym(bounds.max_rotation), sym(bounds.max_rotation), sym(bounds.max_rotation)];
        let translation = [sym(bounds.max_translation), sym(bounds.max_translation)];
        let expression = (0..bounds.expression_dims).map(|_| sym(bounds.max_expression)).collect();
        PoseExpressionSample {
            rotation,
            translation,
            expression,
        }
    }

    pub fn validate(&self, bounds: &PoseBounds) -> Result<()> {
        let within = |v: f64, m: f64| v.is_finite() && v.abs() <= m;
        if !self.rotation.iter().all(|r| within(*r, bounds.max_rotation)) {
            return Err(Error::validation(format!("rotation {:?} exceeds ±{}", self.rotation, bounds.max_rotation)));
        }
        if !self.translation.iter().all(|t| within(*t, bounds.max_translation)) {
            return Err(Error::validation(format!(
                "translation {:?} exceeds ±{}",
                self.translation, bounds.max_translation
            )));
        }
        if self.expression.len() != bounds.expression_dims {
            return Err(Error::validation(format!(
                "expected {} expression coefficients, got {}",
                bounds.expression_dims,
                self.expression.len()
            )));
        }
        if !self.expression.iter().all(|e| within(*e, bounds.max_expression)) {
            return Err(Error::validation(format!(
                "expression {:?} exceeds ±{}",
                self.expression, bounds.max_expression
            )));
        }
        Ok(())
    }

    pub fn midpoint(&self, other: &Self) -> Self {
        let mid = |a: f64, b: f64| 0.5 * (a + b);
        PoseExpressionSample {
            rotation: std::array::from_fn(|i| mid(self.rotation[i], other.rotation[i])),
            translation: std::array::from_fn(|i| mid(self.translation[i], other.translation[i])),
            expression: self.expression.iter().zip(&other.expression).map(|(a, b)| mid(*a, *b)).collect(),
        }
    }
}

/// Output of the still stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Still {
    pub identity: IdentitySeed,
    pub age: AgeValue,
    pub frame: Frame,
    pub landmarks: FaceLandmarks,
}

/// A keyframe or interpolated frame with its pose metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFrame {
    pub frame: Frame,
    pub landmarks: FaceLandmarks,
    pub pose: PoseExpressionSample,
}

/// Renders one identity at one age.
pub trait StillBackend: Send + Sync {
    fn name(&self) -> &str;
    fn synthesize(&self, identity: IdentitySeed, age: AgeValue, resolution: usize) -> Result<Still>;
}

/// Re-poses a still.
pub trait KeyframeBackend: Send + Sync {
    fn name(&self) -> &str;
    fn keyframe(&self, still: &Still, sample: &PoseExpressionSample) -> Result<MotionFrame>;
}

/// Produces the frame halfway between two frames of the same clip.
pub trait InterpolationBackend: Send + Sync {
    fn name(&self) -> &str;
    fn midpoint(&self, still: &Still, a: &MotionFrame, b: &MotionFrame) -> Result<MotionFrame>;
}

/// Pixel-wise average; poses and landmarks are averaged too.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearBlend;

impl InterpolationBackend for LinearBlend {
    fn name(&self) -> &str {
        "linear_blend"
    }

    fn midpoint(&self, _still: &Still, a: &MotionFrame, b: &MotionFrame) -> Result<MotionFrame> {
        if !a.frame.same_shape(&b.frame) {
            return Err(Error::validation("cannot blend frames of different shapes"));
        }
        let data = a.frame.data().iter().zip(b.frame.data()).map(|(x, y)| 0.5 * (x + y)).collect();
        Ok(MotionFrame {
            frame: Frame::new(a.frame.height(), a.frame.width(), a.frame.channels(), data)?,
            landmarks: a.landmarks.midpoint(&b.landmarks),
            pose: a.pose.midpoint(&b.pose),
        })
    }
}

#[derive(Clone)]
pub struct Backends {
    pub still: Arc<dyn StillBackend>,
    pub keyframe: Arc<dyn KeyframeBackend>,
    pub interpolation: Arc<dyn InterpolationBackend>,
    pub sharpness: Arc<dyn SharpnessEstimator>,
}

impl Backends {
    pub fn procedural() -> Self {
        Backends {
            still: Arc::new(ProceduralBackend),
            keyframe: Arc::new(ProceduralBackend),
            interpolation: Arc::new(ProceduralBackend),
            sharpness: Arc::new(EdgeWidthSharpness::default()),
        }
    }
}

/// `n` ages evenly spaced over `[lo, hi]`.
pub fn age_grid(n: usize, lo: f64, hi: f64) -> Result<Vec<AgeValue>> {
    match n {
        0 => Ok(vec![]),
        1 => Ok(vec![AgeValue::new(lo)?]),
        _ => (0..n)
            .map(|i| AgeValue::new(lo + (hi - lo) * i as f64 / (n - 1) as f64))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub subjects: usize,
    pub ages: Vec<AgeValue>,
    pub keyframes_per_video: usize,
    pub recursion_depth: u32,
    pub frames_per_video: usize,
    pub cpbd_threshold: f64,
    pub resolution: usize,
    pub seed: u64,
    /// First subject index; lets a held-out set share the seed space.
    pub first_subject: usize,
    pub pose_bounds: PoseBounds,
    /// Extra attempts per still before a subject is dropped.
    pub max_retries: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let ages = [18.0, 50.0, 85.0].map(|a| AgeValue::new(a).expect("valid age")).to_vec();
        PipelineConfig {
            subjects: 4,
            ages,
            keyframes_per_video: 8,
            recursion_depth: 3,
            frames_per_video: 57,
            cpbd_threshold: 0.5,
            resolution: 64,
            seed: 0,
            first_subject: 0,
            pose_bounds: PoseBounds::default(),
            max_retries: 1,
        }
    }
}

impl PipelineConfig {
    /// Full-scale bookkeeping: 4,248 subjects × 14 ages at 512².
    pub fn full() -> Self {
        PipelineConfig {
            subjects: 4248,
            ages: age_grid(14, 18.0, 85.0).expect("valid grid"),
            resolution: 512,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.keyframes_per_video < 2 {
            return Err(Error::config("at least two keyframes are needed"));
        }
        let expected = interpolated_frame_count(self.keyframes_per_video, self.recursion_depth);
        if self.frames_per_video != expected {
            return Err(Error::config(format!(
                "frames_per_video {} but {} keyframes at depth {} give {expected}",
                self.frames_per_video, self.keyframes_per_video, self.recursion_depth
            )));
        }
        if self.resolution == 0 || self.resolution % crate::datamodel::SPATIAL_MULTIPLE != 0 {
            return Err(Error::config(format!(
                "resolution {} must be a positive multiple of {}",
                self.resolution,
                crate::datamodel::SPATIAL_MULTIPLE
            )));
        }
        if !(0.0..=1.0).contains(&self.cpbd_threshold) {
            return Err(Error::config("cpbd_threshold must lie in [0, 1]"));
        }
        let mut sorted: Vec<f64> = self.ages.iter().map(|a| a.years()).collect();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("ages must be distinct"));
        }
        Ok(())
    }

    pub fn subject_id(&self, index: usize) -> String {
        format!("subject_{index:04}")
    }

    pub fn identity_seed(&self, index: usize) -> IdentitySeed {
        IdentitySeed(mix_seed(self.seed, 2 * index as u64))
    }

    pub fn motion_seed(&self, index: usize) -> u64 {
        mix_seed(self.seed, 2 * index as u64 + 1)
    }
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Directory name of one age's clip.
pub fn age_dir_name(age: AgeValue) -> String {
    format!("age_{:06.2}", age.years())
}

/// Keyframe poses of one subject; depends only on the motion seed.
pub fn motion_samples(motion_seed: u64, count: usize, bounds: &PoseBounds) -> Vec<PoseExpressionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(motion_seed);
    (0..count).map(|_| PoseExpressionSample::sample(&mut rng, bounds)).collect()
}

/// Stage 1: one still per age. Backend failures are retried `retries` times.
pub fn synthesize_aged_stills(
    identity: IdentitySeed,
    ages: &[AgeValue],
    resolution: usize,
    backend: &dyn StillBackend,
    retries: usize,
) -> Result<Vec<(AgeValue, Still)>> {
    ages.iter()
        .map(|&age| {
            let mut attempt = 0;
            loop {
                match backend.synthesize(identity, age, resolution) {
                    Ok(still) => return Ok((age, still)),
                    Err(e) if attempt < retries => {
                        log::warn!("{} failed for age {age} (attempt {}): {e}", backend.name(), attempt + 1);
                        attempt += 1;
                    }
                    Err(e) => {
                        return Err(Error::Backend {
                            backend: backend.name().into(),
                            reason: format!("age {age}: {e}"),
                        })
                    }
                }
            }
        })
        .collect()
}

/// Stage 2: one keyframe per sample.
pub fn generate_keyframes(
    still: &Still,
    samples: &[PoseExpressionSample],
    expected: usize,
    bounds: &PoseBounds,
    backend: &dyn KeyframeBackend,
) -> Result<Vec<MotionFrame>> {
    if samples.len() != expected {
        return Err(Error::validation(format!("expected {expected} pose samples, got {}", samples.len())));
    }
    for s in samples {
        s.validate(bounds)?;
    }
    samples.iter().map(|s| backend.keyframe(still, s)).collect()
}

fn fill_between(
    still: &Still,
    a: &MotionFrame,
    b: &MotionFrame,
    depth: u32,
    backend: &dyn InterpolationBackend,
    out: &mut Vec<MotionFrame>,
) -> Result<()> {
    if depth == 0 {
        return Ok(());
    }
    let m = backend.midpoint(still, a, b)?;
    fill_between(still, a, &m, depth - 1, backend, out)?;
    out.push(m.clone());
    fill_between(still, &m, b, depth - 1, backend, out)
}

/// Stage 3: inserts `2^depth − 1` recursive midpoints between consecutive
/// keyframes. Keyframes keep their frames and land at indices `k·2^depth`.
pub fn interpolate_motion(
    still: &Still,
    keyframes: &[MotionFrame],
    depth: u32,
    backend: &dyn InterpolationBackend,
) -> Result<Vec<MotionFrame>> {
    if keyframes.len() < 2 {
        return Err(Error::validation("interpolation needs at least two keyframes"));
    }
    let mut out = Vec::with_capacity(interpolated_frame_count(keyframes.len(), depth));
    out.push(keyframes[0].clone());
    for pair in keyframes.windows(2) {
        fill_between(still, &pair[0], &pair[1], depth, backend, &mut out).map_err(|e| Error::Backend {
            backend: backend.name().into(),
            reason: format!("interpolation stopped after {} frames: {e}", out.len()),
        })?;
        out.push(pair[1].clone());
    }
    Ok(out)
}

/// Manifest entries for `config` without rendering anything.
pub fn plan_dataset(config: &PipelineConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let subjects = (config.first_subject..config.first_subject + config.subjects)
        .map(|i| {
            let id = config.subject_id(i);
            let motion_seed = config.motion_seed(i);
            SubjectRecord {
                identity_seed: config.identity_seed(i).0,
                motion_seed,
                ages: config.ages.clone(),
                videos: config
                    .ages
                    .iter()
                    .map(|&age| AgeVideo {
                        age,
                        path: PathBuf::from(&id).join(age_dir_name(age)),
                        frame_count: config.frames_per_video,
                        motion_seed,
                        sharpness: None,
                    })
                    .collect(),
                subject_id: id,
            }
        })
        .collect();
    Ok(DatasetManifest {
        format_version: MANIFEST_VERSION,
        seed: config.seed,
        resolution: config.resolution,
        keyframes_per_video: config.keyframes_per_video,
        recursion_depth: config.recursion_depth,
        frames_per_video: config.frames_per_video,
        cpbd_threshold: config.cpbd_threshold,
        ages: config.ages.clone(),
        subjects,
        errata: vec![],
    })
}

/// A rendered clip plus its per-frame poses.
#[derive(Debug, Clone)]
pub struct RenderedClip {
    pub clip: VideoClip,
    pub poses: Vec<PoseExpressionSample>,
}

/// All three stages for one (subject, age), in memory.
pub fn render_clip(
    config: &PipelineConfig,
    backends: &Backends,
    subject: usize,
    age: AgeValue,
) -> Result<RenderedClip> {
    let id = config.subject_id(subject);
    let motion_seed = config.motion_seed(subject);
    let samples = motion_samples(motion_seed, config.keyframes_per_video, &config.pose_bounds);
    let (_, still) = synthesize_aged_stills(
        config.identity_seed(subject),
        &[age],
        config.resolution,
        backends.still.as_ref(),
        config.max_retries,
    )?
    .remove(0);
    let keys = generate_keyframes(
        &still,
        &samples,
        config.keyframes_per_video,
        &config.pose_bounds,
        backends.keyframe.as_ref(),
    )?;
    let motion = interpolate_motion(&still, &keys, config.recursion_depth, backends.interpolation.as_ref())?;
    let poses = motion.iter().map(|m| m.pose.clone()).collect();
    let landmarks = motion.iter().map(|m| m.landmarks.clone()).collect();
    let frames = motion.into_iter().map(|m| m.frame).collect();
    let clip = VideoClip::new(id, frames)?
        .with_age(age)
        .with_motion_seed(motion_seed)
        .with_landmarks(landmarks)?;
    Ok(RenderedClip { clip, poses })
}

fn build_subject(
    config: &PipelineConfig,
    backends: &Backends,
    root: &Path,
    index: usize,
) -> Result<std::result::Result<SubjectRecord, Erratum>> {
    let id = config.subject_id(index);
    let staging = root.join(format!("{id}.partial"));
    let io = |what: &str, p: &Path, e| Error::io(format!("{what} {}", p.display()), e);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| io("removing", &staging, e))?;
    }
    let motion_seed = config.motion_seed(index);
    let mut videos = Vec::new();
    let mut scores = Vec::new();
    let fail = |stage: &str, reason: String, scores: Vec<(AgeValue, f64)>| -> Result<_> {
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| io("removing", &staging, e))?;
        }
        log::warn!("dropping {id} at {stage}: {reason}");
        Ok(Err(Erratum {
            subject_id: id.clone(),
            stage: stage.into(),
            reason,
            scores,
        }))
    };
    for &age in &config.ages {
        let rendered = match render_clip(config, backends, index, age) {
            Ok(r) => r,
            Err(e) => return fail("render", e.to_string(), scores),
        };
        let verdict = match sharpness_filter(&rendered.clip, backends.sharpness.as_ref(), config.cpbd_threshold) {
            Ok(v) => v,
            Err(e) => return fail("sharpness", e.to_string(), scores),
        };
        scores.push((age, verdict.score));
        if !verdict.accepted {
            let reason = format!(
                "age {age}: sharpness {:.4} below threshold {}",
                verdict.score, config.cpbd_threshold
            );
            return fail("sharpness", reason, scores);
        }
        let rel = PathBuf::from(&id).join(age_dir_name(age));
        let dir = staging.join(age_dir_name(age));
        save_clip(&rendered.clip, &dir)?;
        write_json(&rendered.poses, &dir.join(POSES_FILE))?;
        videos.push(AgeVideo {
            age,
            path: rel,
            frame_count: rendered.clip.frame_count(),
            motion_seed,
            sharpness: Some(verdict.score),
        });
    }
    let final_dir = root.join(&id);
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir).map_err(|e| io("removing", &final_dir, e))?;
    }
    fs::rename(&staging, &final_dir).map_err(|e| io("publishing", &final_dir, e))?;
    Ok(Ok(SubjectRecord {
        subject_id: id,
        identity_seed: config.identity_seed(index).0,
        motion_seed,
        ages: config.ages.clone(),
        videos,
    }))
}

/// Renders every (subject, age) clip under `root` and writes the manifest.
/// Subjects run on `workers` threads; output does not depend on the count.
pub fn build_dataset(config: &PipelineConfig, backends: &Backends, root: &Path, workers: usize) -> Result<DatasetManifest> {
    let mut manifest = plan_dataset(config)?;
    fs::create_dir_all(root).map_err(|e| Error::io(format!("creating {}", root.display()), e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    let indices: Vec<usize> = (config.first_subject..config.first_subject + config.subjects).collect();
    let outcomes: Vec<_> = pool.install(|| {
        indices
            .par_iter()
            .map(|&i| build_subject(config, backends, root, i))
            .collect::<Result<Vec<_>>>()
    })?;
    manifest.subjects.clear();
    for outcome in outcomes {
        match outcome {
            Ok(record) => manifest.subjects.push(record),
            Err(erratum) => manifest.errata.push(erratum),
        }
    }
    manifest.validate()?;
    manifest.save(root)?;
    Ok(manifest)
}

/// Per-frame poses of a clip directory.
pub fn load_poses(clip_dir: &Path) -> Result<Vec<PoseExpressionSample>> {
    crate::datamodel::io::read_json(&clip_dir.join(POSES_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn age(y: f64) -> AgeValue {
        AgeValue::new(y).unwrap()
    }

    fn brute_force_count(k: usize, d: u32) -> usize {
        fn between(d: u32) -> usize {
            if d == 0 {
                0
            } else {
                2 * between(d - 1) + 1
            }
        }
        k + (k - 1) * between(d)
    }

    fn constant_frames(n: usize, v: f32) -> Vec<MotionFrame> {
        let still = ProceduralBackend.synthesize(IdentitySeed(0), age(20.0), 16).unwrap();
        (0..n)
            .map(|_| MotionFrame {
                frame: Frame::filled(16, 16, 3, v).unwrap(),
                landmarks: still.landmarks.clone(),
                pose: PoseExpressionSample::neutral(EXPRESSION_DIMS),
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn count_law(k in 2usize..6, d in 0u32..4) {
            let still = ProceduralBackend.synthesize(IdentitySeed(0), age(20.0), 16).unwrap();
            let frames = interpolate_motion(&still, &constant_frames(k, 0.1), d, &LinearBlend).unwrap();
            prop_assert_eq!(frames.len(), brute_force_count(k, d));
            prop_assert_eq!(frames.len(), interpolated_frame_count(k, d));
        }
    }

    #[test]
    fn full_default_count_and_keyframe_slots() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.frames_per_video, 57);
        let still = ProceduralBackend.synthesize(IdentitySeed(4), age(30.0), 16).unwrap();
        let samples = motion_samples(1, 8, &cfg.pose_bounds);
        let keys = generate_keyframes(&still, &samples, 8, &cfg.pose_bounds, &ProceduralBackend).unwrap();
        let frames = interpolate_motion(&still, &keys, 3, &ProceduralBackend).unwrap();
        assert_eq!(frames.len(), 57);
        for (k, key) in keys.iter().enumerate() {
            assert_eq!(&frames[8 * k], key);
        }
        let two = interpolate_motion(&still, &keys[..2], 1, &ProceduralBackend).unwrap();
        assert_eq!(two.len(), 3);
    }

    #[test]
    fn blending_equal_frames_is_constant() {
        let still = ProceduralBackend.synthesize(IdentitySeed(0), age(20.0), 16).unwrap();
        let frames = interpolate_motion(&still, &constant_frames(8, 0.3), 3, &LinearBlend).unwrap();
        assert_eq!(frames.len(), 57);
        assert!(frames.iter().all(|f| f.frame.data().iter().all(|v| *v == 0.3)));
    }

    #[test]
    fn keyframes_are_pairwise_distinct_and_bounded() {
        let bounds = PoseBounds::default();
        let still = ProceduralBackend.synthesize(IdentitySeed(2), age(60.0), 32).unwrap();
        let samples = motion_samples(7, 8, &bounds);
        let keys = generate_keyframes(&still, &samples, 8, &bounds, &ProceduralBackend).unwrap();
        for i in 0..8 {
            for j in i + 1..8 {
                assert!(keys[i].frame.max_abs_diff(&keys[j].frame).unwrap() > 0.0);
            }
        }
        let mut bad = samples.clone();
        bad[3].rotation[0] = 0.5;
        assert!(generate_keyframes(&still, &bad, 8, &bounds, &ProceduralBackend).is_err());
        assert!(generate_keyframes(&still, &samples[..7], 8, &bounds, &ProceduralBackend).is_err());
    }

    #[test]
    fn stills_empty_ages_and_retry() {
        struct Flaky(std::sync::atomic::AtomicUsize);
        impl StillBackend for Flaky {
            fn name(&self) -> &str {
                "flaky"
            }
            fn synthesize(&self, identity: IdentitySeed, age: AgeValue, resolution: usize) -> Result<Still> {
                if self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst) == 0 {
                    return Err(Error::validation("transient"));
                }
                ProceduralBackend.synthesize(identity, age, resolution)
            }
        }
        assert!(synthesize_aged_stills(IdentitySeed(1), &[], 16, &ProceduralBackend, 0).unwrap().is_empty());
        let flaky = Flaky(Default::default());
        assert!(synthesize_aged_stills(IdentitySeed(1), &[age(30.0)], 16, &flaky, 1).is_ok());
        let flaky = Flaky(Default::default());
        assert!(matches!(
            synthesize_aged_stills(IdentitySeed(1), &[age(30.0)], 16, &flaky, 0),
            Err(Error::Backend { .. })
        ));
    }

    #[test]
    fn interpolation_failure_reports_partial_progress() {
        struct Broken;
        impl InterpolationBackend for Broken {
            fn name(&self) -> &str {
                "broken"
            }
            fn midpoint(&self, _: &Still, _: &MotionFrame, _: &MotionFrame) -> Result<MotionFrame> {
                Err(Error::validation("no"))
            }
        }
        let still = ProceduralBackend.synthesize(IdentitySeed(0), age(20.0), 16).unwrap();
        let err = interpolate_motion(&still, &constant_frames(3, 0.0), 2, &Broken).unwrap_err();
        assert!(err.to_string().contains("after 1 frames"), "{err}");
    }

    #[test]
    fn full_plan_validates_without_media() {
        let m = plan_dataset(&PipelineConfig::full()).unwrap();
        assert_eq!(m.subjects.len(), 4248);
        assert_eq!(m.ages.len(), 14);
        assert_eq!(m.video_count(), 4248 * 14);
        assert_eq!(m.frames_per_video, 57);
        m.validate().unwrap();
        assert_eq!(m.ages.first().unwrap().years(), 18.0);
        assert_eq!(m.ages.last().unwrap().years(), 85.0);
    }

    #[test]
    fn seeds_are_distinct_per_subject() {
        let cfg = PipelineConfig::default();
        let ids: std::collections::BTreeSet<u64> = (0..100).map(|i| cfg.identity_seed(i).0).collect();
        assert_eq!(ids.len(), 100);
        assert_ne!(cfg.identity_seed(3).0, cfg.motion_seed(3));
    }
}
