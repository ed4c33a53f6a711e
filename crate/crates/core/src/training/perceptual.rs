use candle_core::{DType, Device, Tensor};

use crate::datamodel::Frame;
use crate::error::{Error, Result};
use crate::nn::{binomial_blur, scalar};

/// Differentiable patch distance between two `B × C × H × W` batches.
///
/// Implementations must be non-negative and zero for identical inputs.
pub trait PerceptualLoss: Send + Sync {
    fn name(&self) -> &str;

    /// Scalar distance averaged over the batch.
    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor>;

    fn frame_distance(&self, a: &Frame, b: &Frame) -> Result<f64> {
        if !a.same_shape(b) {
            return Err(Error::validation("perceptual distance needs equal frame shapes"));
        }
        let ta = a.to_tensor(DType::F64, &Device::Cpu)?;
        let tb = b.to_tensor(DType::F64, &Device::Cpu)?;
        scalar(&self.distance(&ta, &tb)?)
    }
}

/// Multi-scale L2 distance between finite-difference image gradients.
///
/// Gradients ignore a constant offset, so `d(x, x + c) = 0`. Each scale
/// halves the resolution with a binomial blur.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientFeatureDistance {
    pub scales: usize,
}

impl Default for GradientFeatureDistance {
    fn default() -> Self {
        GradientFeatureDistance { scales: 3 }
    }
}

fn gradient_energy(d: &Tensor) -> Result<Option<Tensor>> {
    let (_, _, h, w) = d.dims4()?;
    if h < 2 || w < 2 {
        return Ok(None);
    }
    let dx = (d.narrow(3, 1, w - 1)? - d.narrow(3, 0, w - 1)?)?;
    let dy = (d.narrow(2, 1, h - 1)? - d.narrow(2, 0, h - 1)?)?;
    Ok(Some((dx.sqr()?.mean_all()? + dy.sqr()?.mean_all()?)?))
}

impl PerceptualLoss for GradientFeatureDistance {
    fn name(&self) -> &str {
        "gradient_features"
    }

    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(Error::validation(format!(
                "perceptual distance: shapes {:?} and {:?} differ",
                a.dims(),
                b.dims()
            )));
        }
        // Gradient features are linear, so the feature difference is the
        // feature map of the image difference.
        let mut d = (a - b)?;
        let mut total = Tensor::zeros((), a.dtype(), a.device())?;
        for s in 0..self.scales.max(1) {
            match gradient_energy(&d)? {
                Some(e) => total = (total + e)?,
                None => break,
            }
            if s + 1 < self.scales {
                let (_, _, h, w) = d.dims4()?;
                if h < 4 || w < 4 {
                    break;
                }
                d = binomial_blur(&d, 2)?;
            }
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(seed: u64, size: usize) -> Frame {
        Frame::from_fn(size, size, 3, |c, y, x| {
            let v = (seed as usize * 131 + c * 17 + y * 29 + x * 7) % 97;
            v as f32 / 48.5 - 1.0
        })
        .unwrap()
    }

    #[test]
    fn zero_on_identical_and_offsets() {
        let p = GradientFeatureDistance::default();
        let a = noise(1, 32);
        assert_eq!(p.frame_distance(&a, &a).unwrap(), 0.0);
        let shifted = Frame::new(32, 32, 3, a.data().iter().map(|v| v * 0.5 + 0.25).collect()).unwrap();
        let half = Frame::new(32, 32, 3, a.data().iter().map(|v| v * 0.5).collect()).unwrap();
        assert!(p.frame_distance(&shifted, &half).unwrap() < 1e-12);
    }

    #[test]
    fn positive_and_symmetric() {
        let p = GradientFeatureDistance::default();
        let (a, b) = (noise(1, 16), noise(2, 16));
        let ab = p.frame_distance(&a, &b).unwrap();
        assert!(ab > 0.0);
        assert!((ab - p.frame_distance(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn tiny_inputs_do_not_fail() {
        let p = GradientFeatureDistance { scales: 5 };
        let a = Tensor::ones((1, 3, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 3, 3, 3), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(scalar(&p.distance(&a, &b).unwrap()).unwrap(), 0.0);
    }
}
