use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    age_mae, clip_rois, draw_rois, identity_similarity, t_age, trwc_with_rois, AgeEstimator, ClipSidecar, FaceEmbedder,
    LandmarkBackend, LowFrequencyEmbedding, RoiGeometry, TAgeMode, WrinkleEnergyEstimator,
};
use crate::datamodel::io::{frame_file_name, load_clip, write_frame_png, write_json};
use crate::datamodel::manifest::DatasetManifest;
use crate::datamodel::{AgeValue, VideoClip};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::training::{GradientFeatureDistance, PerceptualLoss};

pub const ROWS_FILE: &str = "rows.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const DEBUG_ROI_DIR: &str = "debug_roi";

/// Anything that re-ages a clip.
pub trait ReAger: Send + Sync {
    fn reage(&self, clip: &VideoClip, input_age: AgeValue, target_age: AgeValue) -> Result<VideoClip>;
}

impl ReAger for Generator {
    fn reage(&self, clip: &VideoClip, input_age: AgeValue, target_age: AgeValue) -> Result<VideoClip> {
        self.generate_video(clip, input_age, target_age, 1)
    }
}

#[derive(Clone)]
pub struct EvalBackends {
    pub perceptual: Arc<dyn PerceptualLoss>,
    pub age: Arc<dyn AgeEstimator>,
    pub landmarks: Arc<dyn LandmarkBackend>,
    pub embedder: Arc<dyn FaceEmbedder>,
}

impl EvalBackends {
    /// Gradient-feature distance, wrinkle-energy ages calibrated at
    /// `resolution`, sidecar landmarks, low-frequency embeddings.
    pub fn procedural(resolution: usize) -> Result<Self> {
        Ok(EvalBackends {
            perceptual: Arc::new(GradientFeatureDistance::default()),
            age: Arc::new(WrinkleEnergyEstimator::procedural(resolution)?),
            landmarks: Arc::new(ClipSidecar),
            embedder: Arc::new(LowFrequencyEmbedding::default()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub targets: Vec<AgeValue>,
    /// Age video used as input; defaults to the dataset age farthest from
    /// the mean target.
    pub input_age: Option<AgeValue>,
    pub trwc_interval: usize,
    pub t_age_mode: TAgeMode,
    pub roi: RoiGeometry,
    /// Restrict to these subject ids.
    pub subjects: Option<Vec<String>>,
    pub debug_roi: bool,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            targets: [65.0, 75.0, 85.0].iter().map(|a| AgeValue::new(*a).expect("valid age")).collect(),
            input_age: None,
            trwc_interval: 1,
            t_age_mode: TAgeMode::ExpectedDiff,
            roi: RoiGeometry::default(),
            subjects: None,
            debug_roi: false,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub subject_id: String,
    pub input_age: f64,
    pub target_age: f64,
    pub frames: usize,
    pub trwc: Option<f64>,
    pub trwc_skipped: Option<usize>,
    pub t_age: Option<f64>,
    pub age_mae: Option<f64>,
    pub identity: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetAggregate {
    pub target_age: f64,
    pub clips: usize,
    pub failures: usize,
    pub trwc: Option<f64>,
    pub t_age: Option<f64>,
    pub age_mae: Option<f64>,
    pub identity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub dataset: PathBuf,
    pub trwc_interval: usize,
    pub t_age_mode: TAgeMode,
    pub roi: RoiGeometry,
    pub perceptual_backend: String,
    pub age_backend: String,
    pub rows: usize,
    pub failures: usize,
    pub trwc_skipped_fraction: Option<f64>,
    pub targets: Vec<TargetAggregate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: EvalSummary,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn pick_input_age(manifest: &DatasetManifest, cfg: &EvalConfig) -> Result<AgeValue> {
    if let Some(a) = cfg.input_age {
        return Ok(a);
    }
    let target_mean = cfg.targets.iter().map(|a| a.years()).sum::<f64>() / cfg.targets.len() as f64;
    let mut best: Option<AgeValue> = None;
    for &a in &manifest.ages {
        if best.is_none_or(|b| (a.years() - target_mean).abs() > (b.years() - target_mean).abs()) {
            best = Some(a);
        }
    }
    best.ok_or_else(|| Error::Manifest("dataset lists no ages".into()))
}

struct Job {
    subject_id: String,
    clip_path: Option<PathBuf>,
    target: AgeValue,
}

fn evaluate_one(
    job: &Job,
    input_age: AgeValue,
    model: &dyn ReAger,
    cfg: &EvalConfig,
    backends: &EvalBackends,
    debug_dir: Option<&Path>,
) -> Result<EvalRow> {
    let path = job
        .clip_path
        .as_ref()
        .ok_or_else(|| Error::Manifest(format!("subject {} has no video for age {input_age}", job.subject_id)))?;
    let input = load_clip(path)?;
    let generated = model.reage(&input, input_age, job.target)?;
    let rois = clip_rois(&input, backends.landmarks.as_ref(), &cfg.roi)?;
    let tr = trwc_with_rois(&generated, &input, cfg.trwc_interval, backends.perceptual.as_ref(), &rois)?;
    let mut scored = generated.clone();
    scored.landmarks = Some(backends.landmarks.landmarks(&input)?);
    let steadiness = t_age(&scored, backends.age.as_ref(), cfg.t_age_mode)?;
    let mae = age_mae(std::slice::from_ref(&scored), job.target, backends.age.as_ref())?;
    let identity = identity_similarity(&generated, &input, backends.embedder.as_ref())?;
    if let Some(dir) = debug_dir {
        let dir = dir.join(format!("{}_to_{:06.2}", job.subject_id, job.target.years()));
        fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (t, frame) in generated.frames().iter().enumerate() {
            let boxes: Vec<_> = rois.iter().map(|r| r.boxes[t]).collect();
            write_frame_png(&draw_rois(frame, &boxes)?, &dir.join(frame_file_name(t)))?;
        }
    }
    Ok(EvalRow {
        subject_id: job.subject_id.clone(),
        input_age: input_age.years(),
        target_age: job.target.years(),
        frames: input.frame_count(),
        trwc: Some(tr.value),
        trwc_skipped: Some(tr.skipped),
        t_age: Some(steadiness),
        age_mae: Some(mae),
        identity: Some(identity),
        error: None,
    })
}

/// Re-ages one input video per subject to every target age and scores the
/// results. Per-clip failures become rows with `error` set; aggregates use
/// the successful rows. With `out`, writes `rows.csv` and `summary.json`
/// (and ROI overlays when `debug_roi` is set).
pub fn evaluate_corpus(
    dataset: &Path,
    model: &dyn ReAger,
    cfg: &EvalConfig,
    backends: &EvalBackends,
    out: Option<&Path>,
) -> Result<EvalReport> {
    if cfg.targets.is_empty() {
        return Err(Error::config("no target ages"));
    }
    let manifest = DatasetManifest::load(dataset)?;
    manifest.validate()?;
    let input_age = pick_input_age(&manifest, cfg)?;
    let subjects: Vec<_> = manifest
        .subjects
        .iter()
        .filter(|s| cfg.subjects.as_ref().is_none_or(|keep| keep.contains(&s.subject_id)))
        .collect();
    if subjects.is_empty() {
        return Err(Error::validation("empty corpus: no subjects to evaluate"));
    }
    let jobs: Vec<Job> = subjects
        .iter()
        .flat_map(|s| {
            let clip_path = s.video(input_age).map(|v| dataset.join(&v.path));
            cfg.targets.iter().map(move |&target| Job {
                subject_id: s.subject_id.clone(),
                clip_path: clip_path.clone(),
                target,
            })
        })
        .collect();
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|e| Error::io(format!("creating {}", o.display()), e))?;
    }
    let debug_dir = match (out, cfg.debug_roi) {
        (Some(o), true) => Some(o.join(DEBUG_ROI_DIR)),
        _ => None,
    };
    let run = |job: &Job| {
        evaluate_one(job, input_age, model, cfg, backends, debug_dir.as_deref()).unwrap_or_else(|e| {
            log::warn!("{} → {}: {e}", job.subject_id, job.target);
            EvalRow {
                subject_id: job.subject_id.clone(),
                input_age: input_age.years(),
                target_age: job.target.years(),
                frames: 0,
                trwc: None,
                trwc_skipped: None,
                t_age: None,
                age_mae: None,
                identity: None,
                error: Some(e.to_string()),
            }
        })
    };
    let rows: Vec<EvalRow> = if cfg.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::config(format!("worker pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    } else {
        jobs.iter().map(run).collect()
    };

    let targets = cfg
        .targets
        .iter()
        .map(|t| {
            let group: Vec<&EvalRow> = rows.iter().filter(|r| r.target_age == t.years()).collect();
            TargetAggregate {
                target_age: t.years(),
                clips: group.len(),
                failures: group.iter().filter(|r| r.error.is_some()).count(),
                trwc: mean(group.iter().map(|r| r.trwc)),
                t_age: mean(group.iter().map(|r| r.t_age)),
                age_mae: mean(group.iter().map(|r| r.age_mae)),
                identity: mean(group.iter().map(|r| r.identity)),
            }
        })
        .collect();
    let skipped: usize = rows.iter().filter_map(|r| r.trwc_skipped).sum();
    let scored: usize = rows
        .iter()
        .filter(|r| r.trwc.is_some())
        .map(|r| 3 * r.frames.saturating_sub(cfg.trwc_interval))
        .sum();
    let summary = EvalSummary {
        dataset: dataset.to_path_buf(),
        trwc_interval: cfg.trwc_interval,
        t_age_mode: cfg.t_age_mode,
        roi: cfg.roi,
        perceptual_backend: backends.perceptual.name().into(),
        age_backend: backends.age.name().into(),
        rows: rows.len(),
        failures: rows.iter().filter(|r| r.error.is_some()).count(),
        trwc_skipped_fraction: (scored > 0).then(|| skipped as f64 / scored as f64),
        targets,
    };
    if let Some(o) = out {
        let mut w = csv::Writer::from_path(o.join(ROWS_FILE))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("writing rows.csv", e))?;
        write_json(&summary, &o.join(SUMMARY_FILE))?;
    }
    Ok(EvalReport { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Identity;

    impl ReAger for Identity {
        fn reage(&self, clip: &VideoClip, _: AgeValue, target: AgeValue) -> Result<VideoClip> {
            Ok(clip.clone().with_age(target))
        }
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = crate::synthpipeline::plan_dataset(&crate::synthpipeline::PipelineConfig::default()).unwrap();
        m.subjects.clear();
        m.save(dir.path()).unwrap();
        let backends = EvalBackends {
            perceptual: Arc::new(GradientFeatureDistance::default()),
            age: Arc::new(WrinkleEnergyEstimator {
                table: vec![(18.0, 0.0), (85.0, 1.0)],
                sigma: 3.0,
            }),
            landmarks: Arc::new(ClipSidecar),
            embedder: Arc::new(LowFrequencyEmbedding::default()),
        };
        let err = evaluate_corpus(dir.path(), &Identity, &EvalConfig::default(), &backends, None);
        assert!(err.is_err());
    }

    #[test]
    fn input_age_is_farthest_from_targets() {
        let m = crate::synthpipeline::plan_dataset(&crate::synthpipeline::PipelineConfig::default()).unwrap();
        let a = pick_input_age(&m, &EvalConfig::default()).unwrap();
        assert_eq!(a.years(), 18.0);
        let young = EvalConfig {
            targets: vec![AgeValue::new(25.0).unwrap()],
            ..Default::default()
        };
        assert_eq!(pick_input_age(&m, &young).unwrap().years(), 85.0);
    }
}
