//! Objective and optimization loop.
//!
//! The generator loss is `λ_L1·L1 + λ_p·perceptual + λ_adv,I·adv_I +
//! λ_adv,V·adv_V`; both critics use the hinge objective.

mod optim;
mod perceptual;
mod run;
mod sampling;

pub use optim::Adam;
pub use perceptual::{GradientFeatureDistance, PerceptualLoss};
pub use run::{
    latest_checkpoint, self_reconstruction_l1, LossRecord, TrainRunConfig, TrainSummary, Trainer, CONFIG_FILE,
    LOG_FILE,
};
pub use sampling::{load_window, sample_plan, sample_training_pair, ClipCache, SamplePlan, TrainingSample};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub adv_image: f64,
    pub adv_video: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            adv_image: 0.025,
            adv_video: 0.025,
            perceptual: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.adv_image, self.adv_video, self.perceptual];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    /// Multipliers in breakdown order `(l1, perceptual, adv_image, adv_video)`.
    pub fn multipliers(&self) -> [f64; 4] {
        [self.l1, self.perceptual, self.adv_image, self.adv_video]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub delta_t_choices: Vec<usize>,
    pub reverse_prob: f64,
    /// Frames per training window, taken every `Δt` raw frames.
    pub window_frames: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            iterations: 500,
            batch_size: 2,
            delta_t_choices: vec![3, 5, 7],
            reverse_prob: 0.5,
            window_frames: 4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            checkpoint_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule.
    pub fn full() -> Self {
        TrainConfig {
            iterations: 250_000,
            batch_size: 4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta_t_choices.is_empty() || self.delta_t_choices.contains(&0) {
            return Err(Error::config("delta_t_choices must be non-empty positive intervals"));
        }
        if !(0.0..=1.0).contains(&self.reverse_prob) {
            return Err(Error::config(format!("reverse_prob {} outside [0, 1]", self.reverse_prob)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.window_frames < 3 {
            return Err(Error::config("window_frames must be at least 3"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Raw frames spanned by a window at interval `dt`.
    pub fn window_span(&self, dt: usize) -> usize {
        (self.window_frames - 1) * dt + 1
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::validation(format!("{what}: shapes {:?} and {:?} differ", a.dims(), b.dims())));
    }
    Ok(())
}

/// `mean(max(0, 1 − real)) + mean(max(0, 1 + fake))`.
pub fn hinge_d_loss(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    check_same_shape(real_scores, fake_scores, "hinge_d_loss")?;
    let real = real_scores.affine(-1.0, 1.0)?.relu()?.mean_all()?;
    let fake = fake_scores.affine(1.0, 1.0)?.relu()?.mean_all()?;
    Ok((real + fake)?)
}

/// `−mean(fake)`.
pub fn hinge_g_loss(fake_scores: &Tensor) -> Result<Tensor> {
    Ok(fake_scores.mean_all()?.neg()?)
}

/// Unweighted components plus the differentiable weighted total.
#[derive(Debug, Clone)]
pub struct GeneratorLoss {
    pub total: Tensor,
    pub l1: f64,
    pub perceptual: f64,
    pub adv_image: f64,
    pub adv_video: f64,
    pub weights: LossWeights,
}

impl GeneratorLoss {
    pub fn total_value(&self) -> Result<f64> {
        scalar(&self.total)
    }

    pub fn components(&self) -> [f64; 4] {
        [self.l1, self.perceptual, self.adv_image, self.adv_video]
    }

    /// `Σ λ_i·c_i` recomputed from the breakdown.
    pub fn weighted_sum(&self) -> f64 {
        self.components()
            .iter()
            .zip(self.weights.multipliers())
            .map(|(c, w)| c * w)
            .sum()
    }
}

/// Per-frame-averaged L1 and perceptual distance between `outputs` and `gt`
/// (each a list of `B × 3 × H × W`), plus the generator side of both critics.
/// Terms whose weight is zero are skipped entirely; missing score maps count
/// as zero.
pub fn total_generator_loss(
    outputs: &[Tensor],
    gt: &[Tensor],
    image_scores: Option<&Tensor>,
    video_scores: Option<&Tensor>,
    weights: &LossWeights,
    perceptual: &dyn PerceptualLoss,
) -> Result<GeneratorLoss> {
    if outputs.len() != gt.len() || outputs.is_empty() {
        return Err(Error::validation(format!(
            "output clip has {} frames, ground truth {}",
            outputs.len(),
            gt.len()
        )));
    }
    let n = outputs.len() as f64;
    let mut l1_terms = Vec::with_capacity(outputs.len());
    let mut p_terms = Vec::with_capacity(outputs.len());
    for (o, g) in outputs.iter().zip(gt) {
        check_same_shape(o, g, "output/ground-truth frame")?;
        l1_terms.push((o - g)?.abs()?.mean_all()?);
        if weights.perceptual > 0.0 {
            p_terms.push(perceptual.distance(o, g)?);
        }
    }
    let l1 = (Tensor::stack(&l1_terms, 0)?.sum_all()? / n)?;
    let mut total = l1.affine(weights.l1, 0.0)?;
    let mut breakdown = [scalar(&l1)?, 0.0, 0.0, 0.0];
    if !p_terms.is_empty() {
        let p = (Tensor::stack(&p_terms, 0)?.sum_all()? / n)?;
        breakdown[1] = scalar(&p)?;
        total = (total + p.affine(weights.perceptual, 0.0)?)?;
    }
    for (slot, (scores, w)) in [(image_scores, weights.adv_image), (video_scores, weights.adv_video)]
        .into_iter()
        .enumerate()
    {
        if let (Some(s), true) = (scores, w > 0.0) {
            let adv = hinge_g_loss(s)?;
            breakdown[2 + slot] = scalar(&adv)?;
            total = (total + adv.affine(w, 0.0)?)?;
        }
    }
    Ok(GeneratorLoss {
        total,
        l1: breakdown[0],
        perceptual: breakdown[1],
        adv_image: breakdown[2],
        adv_video: breakdown[3],
        weights: *weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn filled(v: f64, dims: &[usize]) -> Tensor {
        Tensor::full(v, dims, &Device::Cpu).unwrap()
    }

    #[test]
    fn hinge_examples() {
        let d = |r: f64, f: f64| scalar(&hinge_d_loss(&filled(r, &[2, 1, 4, 4]), &filled(f, &[2, 1, 4, 4])).unwrap()).unwrap();
        assert_eq!(d(1.0, -1.0), 0.0);
        assert_eq!(d(0.0, 0.0), 2.0);
        assert_eq!(d(3.0, -3.0), 0.0);
        let g = |f: f64| scalar(&hinge_g_loss(&filled(f, &[3, 1, 2, 2])).unwrap()).unwrap();
        assert_eq!(g(2.0), -2.0);
        assert_eq!(g(0.0), 0.0);
    }

    #[test]
    fn hinge_g_gradient_is_uniform() {
        let var = candle_core::Var::from_tensor(&filled(0.3, &[1, 1, 4, 5])).unwrap();
        let grads = hinge_g_loss(var.as_tensor()).unwrap().backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(g.iter().all(|v| *v == -1.0 / 20.0));
    }

    #[test]
    fn hinge_shape_mismatch() {
        assert!(hinge_d_loss(&filled(0.0, &[1, 4]), &filled(0.0, &[1, 5])).is_err());
    }

    #[test]
    fn loss_examples() {
        let p = GradientFeatureDistance::default();
        let w = LossWeights::default();
        let a = vec![filled(0.25, &[1, 3, 16, 16]); 2];
        let zero = filled(0.0, &[1, 1, 2, 2]);
        let same = total_generator_loss(&a, &a, Some(&zero), Some(&zero), &w, &p).unwrap();
        assert_eq!(same.total_value().unwrap(), 0.0);

        let out = vec![filled(0.5, &[1, 3, 16, 16]); 3];
        let gt = vec![filled(0.0, &[1, 3, 16, 16]); 3];
        let only_l1 = total_generator_loss(&out, &gt, None, None, &w, &p).unwrap();
        assert!((only_l1.l1 - 0.5).abs() < 1e-12);
        assert_eq!(w.multipliers(), [1.0, 1.0, 0.025, 0.025]);
    }

    #[test]
    fn length_mismatch_rejected() {
        let p = GradientFeatureDistance::default();
        let a = vec![filled(0.0, &[1, 3, 16, 16]); 2];
        let b = vec![filled(0.0, &[1, 3, 16, 16]); 3];
        assert!(total_generator_loss(&a, &b, None, None, &LossWeights::default(), &p).is_err());
    }

    #[test]
    fn total_is_weighted_sum_of_components() {
        let p = GradientFeatureDistance::default();
        let w = LossWeights {
            l1: 0.7,
            adv_image: 0.3,
            adv_video: 0.2,
            perceptual: 1.3,
        };
        let wave = |phase: f64| {
            let data: Vec<f64> = (0..3 * 16 * 16).map(|i| ((i as f64) * 0.37 + phase).sin() * 0.6).collect();
            Tensor::from_vec(data, (1, 3, 16, 16), &Device::Cpu).unwrap()
        };
        let out = vec![wave(0.0), wave(1.0)];
        let gt = vec![wave(0.4), wave(2.0)];
        let img = Tensor::from_vec(vec![0.2, -0.7, 1.3, 0.1], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let vid = Tensor::from_vec(vec![0.5, -1.5], (1, 1, 2, 1, 1), &Device::Cpu).unwrap();
        let loss = total_generator_loss(&out, &gt, Some(&img), Some(&vid), &w, &p).unwrap();
        assert!(loss.components().iter().all(|c| *c != 0.0));
        assert!((loss.total_value().unwrap() - loss.weighted_sum()).abs() < 1e-9);
        assert_eq!(loss.total.dtype(), DType::F64);
    }

    fn grad_check_setup() -> (crate::generator::Generator, Vec<Tensor>, Vec<Tensor>) {
        use crate::generator::{Generator, GeneratorConfig};
        let cfg = GeneratorConfig {
            resolution: 16,
            base_channels: 4,
            hidden_channels: 4,
            depth: 2,
            seed: 11,
            ..Default::default()
        };
        let g = Generator::new(cfg, DType::F64).unwrap();
        let clip = |phase: f64| -> Vec<Tensor> {
            (0..3)
                .map(|t| {
                    let data: Vec<f64> = (0..3 * 16 * 16)
                        .map(|i| 0.4 * ((i as f64) * 0.13 + phase + t as f64 * 0.5).sin())
                        .collect();
                    Tensor::from_vec(data, (1, 3, 16, 16), &Device::Cpu).unwrap()
                })
                .collect()
        };
        (g, clip(0.0), clip(0.9))
    }

    #[test]
    fn generator_loss_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let (g, input, gt) = grad_check_setup();
        let w = LossWeights {
            adv_image: 0.0,
            adv_video: 0.0,
            ..Default::default()
        };
        let p = GradientFeatureDistance::default();
        let loss = || {
            let u = g.unroll(&input, &[0.2], &[0.7], 1).unwrap();
            total_generator_loss(&u.outputs, &gt, None, None, &w, &p).unwrap().total
        };
        let grads = loss().backward().unwrap();
        let vars: Vec<_> = g.params().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let (name, var) = &vars[rng.random_range(0..vars.len())];
            let n = var.elem_count();
            let idx = rng.random_range(0..n);
            let orig = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let eval = |delta: f64| {
                let mut v = orig.clone();
                v[idx] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
                scalar(&loss()).unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            var.set(&Tensor::from_vec(orig, var.dims(), &Device::Cpu).unwrap()).unwrap();
            let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()[idx];
            let scale = analytic.abs().max(numeric.abs());
            if scale < 1e-7 {
                continue;
            }
            let rel = (analytic - numeric).abs() / scale;
            assert!(rel <= 1e-3, "{name}[{idx}]: analytic {analytic}, numeric {numeric}");
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-3);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let full = TrainConfig::full();
        assert_eq!((full.iterations, full.batch_size, full.learning_rate), (250_000, 4, 1e-4));
        assert!(TrainConfig {
            delta_t_choices: vec![],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            reverse_prob: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            l1: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(TrainConfig::default().window_span(7), 22);
    }
}
