//! Temporal-consistency, age and identity metrics.

mod age;
mod corpus;
mod roi;

pub use age::{wrinkle_band_energy, AgeEstimate, AgeEstimator, WrinkleEnergyEstimator, AGE_BINS};
pub use corpus::{
    evaluate_corpus, EvalBackends, EvalConfig, EvalReport, EvalRow, EvalSummary, ReAger, TargetAggregate, DEBUG_ROI_DIR,
    ROWS_FILE, SUMMARY_FILE,
};
pub use roi::{
    clip_rois, crop, draw_rois, extract_rois, ClipSidecar, FixedLandmarks, LandmarkBackend, Region, RoiBox, RoiGeometry,
    RoiSpec,
};

use serde::{Deserialize, Serialize};

use crate::datamodel::{Frame, VideoClip};
use crate::error::{Error, Result};
use crate::nn::scalar;
use crate::training::PerceptualLoss;

/// Denominators below this are treated as static and skipped.
pub const TRWC_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrwcResult {
    pub value: f64,
    /// Ratio terms that entered the mean.
    pub used: usize,
    /// Terms dropped for a near-zero real-clip distance.
    pub skipped: usize,
}

impl TrwcResult {
    pub fn skip_fraction(&self) -> f64 {
        self.skipped as f64 / (self.used + self.skipped) as f64
    }
}

/// Region-wise temporal change of `generated` relative to `real`: the mean
/// over regions and frame pairs `(t, t + Δt)` of
/// `d(gen_t, gen_{t+Δt}) / d(real_t, real_{t+Δt})` on ROI crops.
pub fn trwc_with_rois(
    generated: &VideoClip,
    real: &VideoClip,
    interval: usize,
    dist: &dyn PerceptualLoss,
    rois: &[RoiSpec],
) -> Result<TrwcResult> {
    let n = real.frame_count();
    if generated.frame_count() != n {
        return Err(Error::validation(format!(
            "generated clip has {} frames, real clip {n}",
            generated.frame_count()
        )));
    }
    if interval == 0 || n <= interval {
        return Err(Error::validation(format!("TRWC needs more than Δt = {interval} frames, got {n}")));
    }
    if generated.height() != real.height() || generated.width() != real.width() {
        return Err(Error::validation("generated and real frame sizes differ"));
    }
    let (mut sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for roi in rois {
        if roi.boxes.len() != n {
            return Err(Error::validation(format!("{} boxes for {n} frames", roi.boxes.len())));
        }
        for t in 0..n - interval {
            let (b0, b1) = (roi.boxes[t], roi.boxes[t + interval]);
            let den = scalar(&dist.distance(&crop(&real.frames()[t], b0)?, &crop(&real.frames()[t + interval], b1)?)?)?;
            if den < TRWC_EPSILON {
                skipped += 1;
                continue;
            }
            let num = scalar(&dist.distance(
                &crop(&generated.frames()[t], b0)?,
                &crop(&generated.frames()[t + interval], b1)?,
            )?)?;
            sum += num / den;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Metric(format!(
            "all {skipped} TRWC terms have a static real reference"
        )));
    }
    Ok(TrwcResult {
        value: sum / used as f64,
        used,
        skipped,
    })
}

/// [`trwc_with_rois`] with boxes from `landmarks` applied to the real clip.
pub fn trwc(
    generated: &VideoClip,
    real: &VideoClip,
    interval: usize,
    dist: &dyn PerceptualLoss,
    landmarks: &dyn LandmarkBackend,
    geometry: &RoiGeometry,
) -> Result<TrwcResult> {
    let rois = clip_rois(real, landmarks, geometry)?;
    trwc_with_rois(generated, real, interval, dist, &rois)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TAgeMode {
    /// Mean |E[age]_t − E[age]_{t+1}|.
    #[default]
    ExpectedDiff,
    /// Mean 1 − cos(p_t, p_{t+1}) of the age distributions.
    Cosine,
}

impl std::str::FromStr for TAgeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expected_diff" => Ok(TAgeMode::ExpectedDiff),
            "cosine" => Ok(TAgeMode::Cosine),
            _ => Err(Error::config(format!("unknown T-Age mode {s:?} (expected_diff | cosine)"))),
        }
    }
}

fn estimates(clip: &VideoClip, estimator: &dyn AgeEstimator) -> Result<Vec<AgeEstimate>> {
    clip.frames()
        .iter()
        .enumerate()
        .map(|(i, f)| estimator.estimate(f, clip.landmarks.as_ref().map(|l| &l[i])))
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Metric("cosine of a zero vector".into()));
    }
    Ok(dot / (na * nb))
}

/// Frame-to-frame age consistency; lower is steadier.
pub fn t_age(clip: &VideoClip, estimator: &dyn AgeEstimator, mode: TAgeMode) -> Result<f64> {
    if clip.frame_count() < 2 {
        return Err(Error::validation("T-Age needs at least two frames"));
    }
    let est = estimates(clip, estimator)?;
    let mut sum = 0.0;
    for pair in est.windows(2) {
        sum += match mode {
            TAgeMode::ExpectedDiff => (pair[0].expected_age - pair[1].expected_age).abs(),
            TAgeMode::Cosine => 1.0 - cosine(&pair[0].distribution, &pair[1].distribution)?,
        };
    }
    Ok(sum / (est.len() - 1) as f64)
}

/// Mean over all frames of all clips of |E[age] − target|.
pub fn age_mae(clips: &[VideoClip], target: crate::datamodel::AgeValue, estimator: &dyn AgeEstimator) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for clip in clips {
        for e in estimates(clip, estimator)? {
            sum += (e.expected_age - target.years()).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::validation("age MAE over an empty set"));
    }
    Ok(sum / n as f64)
}

pub trait FaceEmbedder: Send + Sync {
    fn name(&self) -> &str;

    fn embed(&self, frame: &Frame) -> Result<Vec<f64>>;
}

/// Block-averaged colour thumbnail with its mean removed. Stands in for a
/// face-recognition network on synthetic data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowFrequencyEmbedding {
    pub grid: usize,
}

impl Default for LowFrequencyEmbedding {
    fn default() -> Self {
        LowFrequencyEmbedding { grid: 8 }
    }
}

impl FaceEmbedder for LowFrequencyEmbedding {
    fn name(&self) -> &str {
        "low_frequency"
    }

    fn embed(&self, frame: &Frame) -> Result<Vec<f64>> {
        let (h, w, ch) = (frame.height(), frame.width(), frame.channels());
        let g = self.grid;
        if g == 0 || h < g || w < g {
            return Err(Error::validation(format!("{h}×{w} frame is smaller than the {g}×{g} grid")));
        }
        let mut v = Vec::with_capacity(ch * g * g);
        for c in 0..ch {
            for gy in 0..g {
                for gx in 0..g {
                    let (y0, y1) = (gy * h / g, (gy + 1) * h / g);
                    let (x0, x1) = (gx * w / g, (gx + 1) * w / g);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            s += frame.get(c, y, x) as f64;
                        }
                    }
                    v.push(s / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        Ok(v.into_iter().map(|x| x - mean).collect())
    }
}

/// Mean frame-wise cosine similarity of embeddings.
pub fn identity_similarity(a: &VideoClip, b: &VideoClip, embedder: &dyn FaceEmbedder) -> Result<f64> {
    if a.frame_count() != b.frame_count() {
        return Err(Error::validation("identity similarity needs equal frame counts"));
    }
    let mut sum = 0.0;
    for (fa, fb) in a.frames().iter().zip(b.frames()) {
        sum += cosine(&embedder.embed(fa)?, &embedder.embed(fb)?)
            .map_err(|_| Error::Metric(format!("{} produced a zero embedding", embedder.name())))?;
    }
    Ok(sum / a.frame_count() as f64)
}

/// Dense optical flow between two frames, `(dx, dy)` per pixel in row-major
/// order. No implementation ships; warping-error metrics plug in here.
pub trait FlowBackend: Send + Sync {
    fn name(&self) -> &str;

    fn flow(&self, from: &Frame, to: &Frame) -> Result<Vec<[f32; 2]>>;
}
