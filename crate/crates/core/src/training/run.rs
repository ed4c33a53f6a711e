use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    hinge_d_loss, load_window, sample_plan, sample_training_pair, total_generator_loss, Adam, ClipCache, GradientFeatureDistance, LossWeights,
    PerceptualLoss, SamplePlan, TrainConfig,
};
use crate::datamodel::io::{read_json, write_json};
use crate::datamodel::manifest::DatasetManifest;
use crate::datamodel::{Frame, VideoClip};
use crate::discriminator::{ImageDiscConfig, ImageDiscriminator, VideoDiscConfig, VideoDiscInput, VideoDiscriminator};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::{scalar, Checkpoint};

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.csv";

/// Everything needed to start (or resume) a run; stored as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub name: String,
    pub dataset: PathBuf,
    pub run_root: PathBuf,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub generator: GeneratorConfig,
    pub image_disc: ImageDiscConfig,
    pub video_disc: VideoDiscConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            name: "default".into(),
            dataset: PathBuf::from("data"),
            run_root: PathBuf::from("run"),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            generator: GeneratorConfig::default(),
            image_disc: ImageDiscConfig::default(),
            video_disc: VideoDiscConfig::default(),
        }
    }
}

impl TrainRunConfig {
    /// Small networks for 64×64 CPU runs.
    pub fn desk(dataset: impl Into<PathBuf>) -> Self {
        TrainRunConfig {
            dataset: dataset.into(),
            generator: GeneratorConfig::desk(),
            image_disc: ImageDiscConfig::desk(),
            video_disc: VideoDiscConfig::desk(),
            ..Default::default()
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run_root.join(&self.name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config(format!("invalid run name {:?}", self.name)));
        }
        self.train.validate()?;
        self.weights.validate()?;
        self.generator.validate()
    }
}

/// One row of `log.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub adv_image: f64,
    pub adv_video: f64,
    pub d_image: f64,
    pub d_video: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub final_record: Option<LossRecord>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    iteration: usize,
    detail: &'a str,
    samples: Vec<String>,
    parameter_max_abs: Vec<(String, f64)>,
}

pub struct Trainer {
    config: TrainRunConfig,
    manifest: DatasetManifest,
    cache: ClipCache,
    generator: Generator,
    image_disc: ImageDiscriminator,
    video_disc: VideoDiscriminator,
    gen_opt: Adam,
    image_opt: Adam,
    video_opt: Adam,
    perceptual: Box<dyn PerceptualLoss>,
    iteration: usize,
    run_dir: PathBuf,
}

fn checkpoint_name(iteration: usize) -> String {
    format!("ckpt_{iteration:06}.safetensors")
}

/// Highest-numbered `ckpt_<iter>.safetensors` in `run_dir`.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    let entries = fs::read_dir(run_dir).map_err(|e| Error::io(format!("listing {}", run_dir.display()), e))?;
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(n) = name
            .strip_prefix("ckpt_")
            .and_then(|s| s.strip_suffix(".safetensors"))
            .and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, entry.path()));
        }
    }
    Ok(best)
}

fn stack_batch(frames: &[&Frame], dtype: DType) -> Result<Tensor> {
    let ts = frames
        .iter()
        .map(|f| f.to_tensor(dtype, &candle_core::Device::Cpu))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

/// Concatenates every window of `extent` consecutive steps along the batch
/// axis, yielding `extent` tensors.
fn sliding_triples(seq: &[Tensor], extent: usize) -> Result<Vec<Tensor>> {
    let windows = seq.len() + 1 - extent;
    (0..extent)
        .map(|k| {
            let parts: Vec<&Tensor> = (0..windows).map(|j| &seq[j + k]).collect();
            Ok(Tensor::cat(&parts, 0)?)
        })
        .collect()
}

fn repeat_ages(ages: &[f64], times: usize) -> Vec<f64> {
    (0..times).flat_map(|_| ages.iter().copied()).collect()
}

impl Trainer {
    /// Creates `run_root/name/`, writes `config.json` and the log header.
    pub fn new(config: TrainRunConfig) -> Result<Self> {
        config.validate()?;
        let run_dir = config.run_dir();
        if run_dir.join(CONFIG_FILE).exists() {
            return Err(Error::config(format!(
                "{} already holds a run; resume it or pick another name",
                run_dir.display()
            )));
        }
        fs::create_dir_all(&run_dir).map_err(|e| Error::io(format!("creating {}", run_dir.display()), e))?;
        let trainer = Trainer::build(config, run_dir)?;
        write_json(&trainer.config, &trainer.run_dir.join(CONFIG_FILE))?;
        let mut w = csv::Writer::from_path(trainer.run_dir.join(LOG_FILE))?;
        w.write_record(["iteration", "total", "l1", "perceptual", "adv_image", "adv_video", "d_image", "d_video"])?;
        w.flush().map_err(|e| Error::io("writing log header", e))?;
        Ok(trainer)
    }

    /// Reopens a run directory at its latest checkpoint; log rows past the
    /// checkpoint are dropped.
    pub fn resume(run_dir: &Path) -> Result<Self> {
        let config: TrainRunConfig = read_json(&run_dir.join(CONFIG_FILE))?;
        config.validate()?;
        let mut trainer = Trainer::build(config, run_dir.to_path_buf())?;
        let Some((iteration, path)) = latest_checkpoint(run_dir)? else {
            return Err(Error::Checkpoint(format!("no checkpoint in {}", run_dir.display())));
        };
        let ck = Checkpoint::load(&path)?;
        trainer.generator.params().load_tensors(&ck.tensors, "generator.")?;
        trainer.image_disc.params().load_tensors(&ck.tensors, "image_disc.")?;
        trainer.video_disc.params().load_tensors(&ck.tensors, "video_disc.")?;
        let step_of = |key: &str| -> Result<u64> {
            ck.metadata
                .get(key)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {key}")))
        };
        trainer.gen_opt.load_state(&ck.tensors, "adam.generator.", step_of("adam_generator_step")?)?;
        trainer.image_opt.load_state(&ck.tensors, "adam.image_disc.", step_of("adam_image_disc_step")?)?;
        trainer.video_opt.load_state(&ck.tensors, "adam.video_disc.", step_of("adam_video_disc_step")?)?;
        trainer.iteration = iteration;

        let log_path = run_dir.join(LOG_FILE);
        let mut rows: Vec<LossRecord> = Vec::new();
        for row in csv::Reader::from_path(&log_path)?.deserialize() {
            let row: LossRecord = row?;
            if row.iteration <= iteration {
                rows.push(row);
            }
        }
        let mut w = csv::Writer::from_path(&log_path)?;
        if rows.is_empty() {
            w.write_record(["iteration", "total", "l1", "perceptual", "adv_image", "adv_video", "d_image", "d_video"])?;
        }
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("rewriting log", e))?;
        log::info!("resumed {} at iteration {iteration}", run_dir.display());
        Ok(trainer)
    }

    fn build(config: TrainRunConfig, run_dir: PathBuf) -> Result<Self> {
        let manifest = DatasetManifest::load(&config.dataset)?;
        manifest.validate()?;
        if manifest.resolution % (1 << config.generator.depth) != 0 {
            return Err(Error::config(format!(
                "dataset resolution {} is not divisible by 2^{}",
                manifest.resolution, config.generator.depth
            )));
        }
        let t = &config.train;
        let adam = || Adam::new(t.learning_rate, t.adam_beta1, t.adam_beta2);
        Ok(Trainer {
            cache: ClipCache::new(&config.dataset),
            generator: Generator::new(config.generator.clone(), DType::F32)?,
            image_disc: ImageDiscriminator::new(config.image_disc.clone(), DType::F32)?,
            video_disc: VideoDiscriminator::new(config.video_disc.clone(), DType::F32)?,
            gen_opt: adam(),
            image_opt: adam(),
            video_opt: adam(),
            perceptual: Box::new(GradientFeatureDistance::default()),
            iteration: 0,
            manifest,
            config,
            run_dir,
        })
    }

    pub fn with_perceptual(mut self, backend: Box<dyn PerceptualLoss>) -> Self {
        self.perceptual = backend;
        self
    }

    pub fn config(&self) -> &TrainRunConfig {
        &self.config
    }

    /// Changes the iteration budget (e.g. to extend a resumed run) and
    /// rewrites `config.json`.
    pub fn set_iterations(&mut self, iterations: usize) -> Result<()> {
        self.config.train.iterations = iterations;
        write_json(&self.config, &self.run_dir.join(CONFIG_FILE))
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn image_disc(&self) -> &ImageDiscriminator {
        &self.image_disc
    }

    pub fn video_disc(&self) -> &VideoDiscriminator {
        &self.video_disc
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    fn rng_for(&self, iteration: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed);
        rng.set_stream(iteration as u64);
        rng
    }

    /// One critic update (both critics) followed by one generator update.
    pub fn step(&mut self) -> Result<LossRecord> {
        let iteration = self.iteration + 1;
        let mut rng = self.rng_for(iteration);
        let cfg = self.config.train.clone();
        let samples = (0..cfg.batch_size)
            .map(|_| sample_training_pair(&self.manifest, &mut self.cache, &cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let plans: Vec<&SamplePlan> = samples.iter().map(|s| &s.plan).collect();
        let dtype = self.generator.dtype();
        let steps = cfg.window_frames;
        let inputs = (0..steps)
            .map(|t| stack_batch(&samples.iter().map(|s| &s.input[t]).collect::<Vec<_>>(), dtype))
            .collect::<Result<Vec<_>>>()?;
        let gts = (0..steps)
            .map(|t| stack_batch(&samples.iter().map(|s| &s.gt[t]).collect::<Vec<_>>(), dtype))
            .collect::<Result<Vec<_>>>()?;
        let in_age: Vec<f64> = plans.iter().map(|p| p.input_age.normalized()).collect();
        let tar_age: Vec<f64> = plans.iter().map(|p| p.target_age.normalized()).collect();

        let unrolled = self.generator.unroll(&inputs, &in_age, &tar_age, 1)?;
        let extent = self.config.video_disc.temporal_extent;
        let (video_real, video_fake) = match self.config.video_disc.input {
            VideoDiscInput::Outputs => (gts.clone(), unrolled.outputs.clone()),
            VideoDiscInput::Deltas => (
                gts.iter().zip(&inputs).map(|(g, i)| Ok((g - i)?)).collect::<Result<Vec<_>>>()?,
                unrolled.deltas.clone(),
            ),
        };
        let img_ages = repeat_ages(&tar_age, steps);
        let vid_ages = repeat_ages(&tar_age, steps + 1 - extent);
        let w = self.config.weights;

        let mut d_image = 0.0;
        if w.adv_image > 0.0 {
            let real = self.image_disc.forward(&Tensor::cat(&gts, 0)?, &img_ages, None)?;
            let fake_in = Tensor::cat(&unrolled.outputs, 0)?.detach();
            let fake = self.image_disc.forward(&fake_in, &img_ages, None)?;
            let loss = hinge_d_loss(&real, &fake)?;
            d_image = scalar(&loss)?;
            self.check_finite(iteration, "d_image", d_image, &plans)?;
            self.image_opt.step(self.image_disc.params(), &loss.backward()?)?;
        }
        let mut d_video = 0.0;
        if w.adv_video > 0.0 {
            let real = self.video_disc.forward(&sliding_triples(&video_real, extent)?, &vid_ages, None)?;
            let fake_seq: Vec<Tensor> = video_fake.iter().map(|t| t.detach()).collect();
            let fake = self.video_disc.forward(&sliding_triples(&fake_seq, extent)?, &vid_ages, None)?;
            let loss = hinge_d_loss(&real, &fake)?;
            d_video = scalar(&loss)?;
            self.check_finite(iteration, "d_video", d_video, &plans)?;
            self.video_opt.step(self.video_disc.params(), &loss.backward()?)?;
        }

        let image_scores = if w.adv_image > 0.0 {
            Some(self.image_disc.forward(&Tensor::cat(&unrolled.outputs, 0)?, &img_ages, None)?)
        } else {
            None
        };
        let video_scores = if w.adv_video > 0.0 {
            Some(self.video_disc.forward(&sliding_triples(&video_fake, extent)?, &vid_ages, None)?)
        } else {
            None
        };
        let loss = total_generator_loss(
            &unrolled.outputs,
            &gts,
            image_scores.as_ref(),
            video_scores.as_ref(),
            &w,
            self.perceptual.as_ref(),
        )?;
        let total = loss.total_value()?;
        self.check_finite(iteration, "generator total", total, &plans)?;
        self.gen_opt.step(self.generator.params(), &loss.total.backward()?)?;

        let record = LossRecord {
            iteration,
            total,
            l1: loss.l1,
            perceptual: loss.perceptual,
            adv_image: loss.adv_image,
            adv_video: loss.adv_video,
            d_image,
            d_video,
        };
        self.append_log(&record)?;
        self.iteration = iteration;
        if cfg.checkpoint_every > 0 && iteration % cfg.checkpoint_every == 0 {
            self.save_checkpoint()?;
        }
        Ok(record)
    }

    /// Mean L1 between outputs and inputs over `count` fixed same-age
    /// windows; the windows depend only on the seed, not the iteration.
    pub fn probe_l1(&mut self, count: usize) -> Result<f64> {
        if count == 0 {
            return Err(Error::validation("probe needs at least one window"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed);
        rng.set_stream(u64::MAX);
        let cfg = self.config.train.clone();
        let dtype = self.generator.dtype();
        let mut sum = 0.0;
        for _ in 0..count {
            let mut plan = sample_plan(&self.manifest, &cfg, &mut rng)?;
            plan.target_age = plan.input_age;
            let subject = self
                .manifest
                .subject(&plan.subject_id)
                .ok_or_else(|| Error::Manifest(format!("unknown subject {}", plan.subject_id)))?;
            let path = subject
                .video(plan.input_age)
                .map(|v| v.path.clone())
                .ok_or_else(|| Error::Manifest(format!("subject {} has no video for age {}", plan.subject_id, plan.input_age)))?;
            let clip = self.cache.get(&path)?;
            let frames = load_window(&clip, &plan, cfg.window_frames)?;
            let inputs = frames
                .iter()
                .map(|f| f.to_tensor(dtype, &candle_core::Device::Cpu))
                .collect::<Result<Vec<_>>>()?;
            let age = [plan.input_age.normalized()];
            let out = self.generator.unroll(&inputs, &age, &age, 1)?;
            let mut l1 = 0.0;
            for (o, i) in out.outputs.iter().zip(&inputs) {
                l1 += scalar(&(o - i)?.abs()?.mean_all()?.to_dtype(DType::F64)?)?;
            }
            sum += l1 / inputs.len() as f64;
        }
        Ok(sum / count as f64)
    }

    fn check_finite(&self, iteration: usize, what: &str, value: f64, plans: &[&SamplePlan]) -> Result<()> {
        if value.is_finite() {
            return Ok(());
        }
        let detail = format!("{what} = {value}");
        let mut parameter_max_abs = Vec::new();
        for (prefix, params) in [
            ("generator.", self.generator.params()),
            ("image_disc.", self.image_disc.params()),
            ("video_disc.", self.video_disc.params()),
        ] {
            for (path, var) in params.iter() {
                let m = scalar(&var.as_tensor().abs()?.flatten_all()?.max(0)?)?;
                parameter_max_abs.push((format!("{prefix}{path}"), m));
            }
        }
        let diag = Diagnostics {
            iteration,
            detail: &detail,
            samples: plans.iter().map(|p| format!("{p:?}")).collect(),
            parameter_max_abs,
        };
        let path = self.run_dir.join(format!("diagnostics_{iteration:06}.json"));
        write_json(&diag, &path)?;
        log::error!("non-finite loss at iteration {iteration}; diagnostics in {}", path.display());
        Err(Error::NonFinite { iteration, detail })
    }

    fn append_log(&self, record: &LossRecord) -> Result<()> {
        let path = self.run_dir.join(LOG_FILE);
        let file = fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        w.serialize(record)?;
        w.flush().map_err(|e| Error::io("appending log", e))?;
        Ok(())
    }

    pub fn save_checkpoint(&self) -> Result<PathBuf> {
        let mut ck = self.generator.to_checkpoint()?;
        ck.tensors.extend(self.image_disc.params().to_tensors("image_disc."));
        ck.tensors.extend(self.video_disc.params().to_tensors("video_disc."));
        ck.tensors.extend(self.gen_opt.state_tensors("adam.generator."));
        ck.tensors.extend(self.image_opt.state_tensors("adam.image_disc."));
        ck.tensors.extend(self.video_opt.state_tensors("adam.video_disc."));
        let meta = &mut ck.metadata;
        meta.insert("iteration".into(), self.iteration.to_string());
        meta.insert("adam_generator_step".into(), self.gen_opt.step_count().to_string());
        meta.insert("adam_image_disc_step".into(), self.image_opt.step_count().to_string());
        meta.insert("adam_video_disc_step".into(), self.video_opt.step_count().to_string());
        meta.insert("run_config".into(), serde_json::to_string(&self.config)?);
        let path = self.run_dir.join(checkpoint_name(self.iteration));
        ck.save(&path)?;
        Ok(path)
    }

    /// Runs until `config.train.iterations`; always leaves a final checkpoint.
    pub fn run(&mut self) -> Result<TrainSummary> {
        let mut last = None;
        let total = self.config.train.iterations;
        while self.iteration < total {
            let r = self.step()?;
            if r.iteration == 1 || r.iteration % 10 == 0 || r.iteration == total {
                log::info!(
                    "iter {}/{total}: total {:.5} l1 {:.5} perceptual {:.5} d_image {:.4} d_video {:.4}",
                    r.iteration,
                    r.total,
                    r.l1,
                    r.perceptual,
                    r.d_image,
                    r.d_video
                );
            }
            last = Some(r);
        }
        let ckpt = self.run_dir.join(checkpoint_name(self.iteration));
        let checkpoint = if ckpt.exists() { ckpt } else { self.save_checkpoint()? };
        Ok(TrainSummary {
            iterations: self.iteration,
            final_record: last,
            checkpoint: Some(checkpoint),
        })
    }
}

/// Mean per-frame L1 between inputs and outputs when input and target age
/// are the clip's own age.
pub fn self_reconstruction_l1(generator: &Generator, clips: &[VideoClip]) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::validation("no clips to reconstruct"));
    }
    let mut sum = 0.0;
    for clip in clips {
        let age = clip
            .apparent_age
            .ok_or_else(|| Error::validation(format!("clip {} has no apparent age", clip.subject_id)))?;
        let out = generator.generate_video(clip, age, age, 1)?;
        let mut per = 0.0;
        for (a, b) in clip.frames().iter().zip(out.frames()) {
            per += a.mean_abs_diff(b)?;
        }
        sum += per / clip.frame_count() as f64;
    }
    Ok(sum / clips.len() as f64)
}
