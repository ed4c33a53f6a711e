//! Conditional critics: a PatchGAN image discriminator over RGB + target-age
//! plane, and a 3D-convolutional video discriminator over three consecutive
//! frames with the same conditioning plane.
//!
//! Every layer is followed by a leaky activation; there is no normalization.
//! Strided layers use 4×4 kernels with stride 2 and padding 1; stride-1
//! layers pad 1 before and 2 after so spatial size is kept.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::datamodel::{AgeMask, Frame};
use crate::error::{Error, Result};
use crate::generator::ShapeRow;
use crate::nn::{self, record, Conv2d, Conv3d, Pad2, ParamStore, Trace};

const KERNEL: usize = 4;
const STRIDED_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageDiscConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for ImageDiscConfig {
    fn default() -> Self {
        ImageDiscConfig {
            in_channels: 4,
            widths: vec![64, 128, 256, 512],
            leaky_slope: 0.2,
            seed: 1,
        }
    }
}

impl ImageDiscConfig {
    pub fn desk() -> Self {
        ImageDiscConfig {
            widths: vec![16, 32, 64, 128],
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.widths.len() != 4 || self.widths.contains(&0) {
            return Err(Error::config("image discriminator needs four positive widths"));
        }
        Ok(())
    }
}

/// What the video critic sees besides the target-age plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VideoDiscInput {
    /// Output frames (default).
    #[default]
    Outputs,
    /// Delta images instead of frames.
    Deltas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VideoDiscConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    /// Consecutive frames per sample.
    pub temporal_extent: usize,
    pub temporal_kernel: usize,
    pub input: VideoDiscInput,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for VideoDiscConfig {
    fn default() -> Self {
        VideoDiscConfig {
            in_channels: 4,
            widths: vec![32, 64, 128, 256],
            temporal_extent: 3,
            temporal_kernel: 4,
            input: VideoDiscInput::Outputs,
            leaky_slope: 0.2,
            seed: 2,
        }
    }
}

impl VideoDiscConfig {
    pub fn desk() -> Self {
        VideoDiscConfig {
            widths: vec![8, 16, 32, 64],
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.widths.len() != 4 || self.widths.contains(&0) {
            return Err(Error::config("video discriminator needs four positive widths"));
        }
        if self.temporal_extent == 0 || self.temporal_kernel < 2 {
            return Err(Error::config("temporal extent must be ≥ 1 and kernel ≥ 2"));
        }
        Ok(())
    }

    /// Temporal padding of the first layer: grows the time axis by one.
    fn first_pad_t(&self) -> (usize, usize) {
        let p = self.temporal_kernel / 2;
        (p, p)
    }

    /// Temporal "same" padding for later layers.
    fn same_pad_t(&self) -> (usize, usize) {
        let total = self.temporal_kernel - 1;
        (total / 2, total - total / 2)
    }

    /// Length of the time axis inside the network.
    pub fn temporal_groups(&self) -> usize {
        let (a, b) = self.first_pad_t();
        nn::conv_out_len(self.temporal_extent, self.temporal_kernel, 1, a, b)
    }
}

fn layer_plan(i: usize) -> (usize, Pad2, &'static str) {
    if i < STRIDED_LAYERS {
        (2, Pad2::uniform(1), "")
    } else {
        (1, Pad2::same(KERNEL), " (Stride = 1)")
    }
}

/// `B × 1 × H × W` plane per batch item.
fn mask_planes(values: &[f64], h: usize, w: usize, like: &Tensor) -> Result<Tensor> {
    let data: Vec<f64> = values.iter().flat_map(|v| std::iter::repeat_n(*v, h * w)).collect();
    Ok(Tensor::from_vec(data, (values.len(), 1, h, w), like.device())?.to_dtype(like.dtype())?)
}

pub struct ImageDiscriminator {
    config: ImageDiscConfig,
    params: ParamStore,
    layers: Vec<Conv2d>,
}

impl ImageDiscriminator {
    pub fn new(config: ImageDiscConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype, config.seed);
        let gain = nn::leaky_gain(config.leaky_slope);
        let mut widths = config.widths.clone();
        widths.push(1);
        let mut cin = config.in_channels;
        let mut layers = Vec::new();
        for (i, &cout) in widths.iter().enumerate() {
            let (stride, pad, _) = layer_plan(i);
            layers.push(Conv2d::new(&mut params, &format!("conv.{i}"), cin, cout, KERNEL, stride, pad, gain)?);
            cin = cout;
        }
        Ok(ImageDiscriminator {
            config,
            params,
            layers,
        })
    }

    pub fn config(&self) -> &ImageDiscConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `frames`: `B × 3 × H × W`; `target_age`: normalized age per item.
    pub fn forward(&self, frames: &Tensor, target_age: &[f64], mut trace: Option<&mut Trace>) -> Result<Tensor> {
        let (b, _, h, w) = frames.dims4()?;
        if target_age.len() != b {
            return Err(Error::validation("one target age per batch item"));
        }
        let mut x = Tensor::cat(&[frames, &mask_planes(target_age, h, w, frames)?], 1)?;
        record(&mut trace, "Video with Target Mask", &[w, h, x.dim(1)?]);
        for (i, layer) in self.layers.iter().enumerate() {
            x = nn::leaky_relu(&layer.forward(&x)?, self.config.leaky_slope)?;
            let (_, c, h, w) = x.dims4()?;
            record(&mut trace, format!("4×4 Conv{}", layer_plan(i).2), &[w, h, c]);
        }
        Ok(x)
    }

    /// Score map (`1 × 1 × h × w`) for one frame and its target-age plane.
    pub fn image_disc_forward(&self, frame: &Frame, target_mask: &AgeMask) -> Result<Tensor> {
        if frame.height() != target_mask.height || frame.width() != target_mask.width {
            return Err(Error::validation("frame and target mask sizes differ"));
        }
        let x = frame.to_tensor(self.params.dtype(), self.params.device())?;
        self.forward(&x, &[target_mask.value() as f64], None)
    }
}

pub fn image_disc_shapes(config: &ImageDiscConfig, resolution: usize) -> Vec<ShapeRow> {
    let mut rows = vec![ShapeRow::new("Video with Target Mask", &[resolution, resolution, config.in_channels])];
    let mut size = resolution;
    let mut widths = config.widths.clone();
    widths.push(1);
    for (i, c) in widths.into_iter().enumerate() {
        let (stride, pad, suffix) = layer_plan(i);
        size = nn::conv_out_len(size, KERNEL, stride, pad.top, pad.bottom);
        rows.push(ShapeRow::new(format!("4×4 Conv{suffix}"), &[size, size, c]));
    }
    rows
}

pub struct VideoDiscriminator {
    config: VideoDiscConfig,
    params: ParamStore,
    layers: Vec<Conv3d>,
}

impl VideoDiscriminator {
    pub fn new(config: VideoDiscConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype, config.seed);
        let gain = nn::leaky_gain(config.leaky_slope);
        let mut widths = config.widths.clone();
        widths.push(1);
        let mut cin = config.in_channels;
        let mut layers = Vec::new();
        for (i, &cout) in widths.iter().enumerate() {
            let (stride, pad, _) = layer_plan(i);
            let pad_t = if i == 0 { config.first_pad_t() } else { config.same_pad_t() };
            layers.push(Conv3d::new(
                &mut params,
                &format!("conv3d.{i}"),
                cin,
                cout,
                config.temporal_kernel,
                KERNEL,
                stride,
                pad_t,
                pad,
                gain,
            )?);
            cin = cout;
        }
        Ok(VideoDiscriminator {
            config,
            params,
            layers,
        })
    }

    pub fn config(&self) -> &VideoDiscConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// `frames`: `temporal_extent` tensors of `B × 3 × H × W`. Returns
    /// `B × 1 × T × h × w`.
    pub fn forward(&self, frames: &[Tensor], target_age: &[f64], mut trace: Option<&mut Trace>) -> Result<Tensor> {
        if frames.len() != self.config.temporal_extent {
            return Err(Error::validation(format!(
                "video discriminator takes {} frames, got {}",
                self.config.temporal_extent,
                frames.len()
            )));
        }
        let (b, _, h, w) = frames[0].dims4()?;
        if target_age.len() != b {
            return Err(Error::validation("one target age per batch item"));
        }
        let mask = mask_planes(target_age, h, w, &frames[0])?;
        let stacked = frames
            .iter()
            .map(|f| Ok(Tensor::cat(&[f, &mask], 1)?))
            .collect::<Result<Vec<_>>>()?;
        let mut x = Tensor::stack(&stacked, 2)?;
        record(&mut trace, "Video with Target Mask", &[w, h, frames.len(), x.dim(1)?]);
        for (i, layer) in self.layers.iter().enumerate() {
            x = nn::leaky_relu(&layer.forward(&x)?, self.config.leaky_slope)?;
            let (_, c, t, h, w) = x.dims5()?;
            record(&mut trace, format!("4×4 3D Conv{}", layer_plan(i).2), &[w, h, c, t]);
        }
        Ok(x)
    }

    pub fn video_disc_forward(&self, frames: &[Frame], target_mask: &AgeMask) -> Result<Tensor> {
        if let Some(f) = frames.iter().find(|f| f.height() != target_mask.height || f.width() != target_mask.width) {
            return Err(Error::validation(format!(
                "frame {}×{} does not match mask {}×{}",
                f.height(),
                f.width(),
                target_mask.height,
                target_mask.width
            )));
        }
        let xs = frames
            .iter()
            .map(|f| f.to_tensor(self.params.dtype(), self.params.device()))
            .collect::<Result<Vec<_>>>()?;
        self.forward(&xs, &[target_mask.value() as f64], None)
    }
}

/// Rows of the video critic; the input row lists (frames, channels), later
/// rows (channels, time).
pub fn video_disc_shapes(config: &VideoDiscConfig, resolution: usize) -> Vec<ShapeRow> {
    let mut rows = vec![ShapeRow::new(
        "Video with Target Mask",
        &[resolution, resolution, config.temporal_extent, config.in_channels],
    )];
    let t = config.temporal_groups();
    let mut size = resolution;
    let mut widths = config.widths.clone();
    widths.push(1);
    for (i, c) in widths.into_iter().enumerate() {
        let (stride, pad, suffix) = layer_plan(i);
        size = nn::conv_out_len(size, KERNEL, stride, pad.top, pad.bottom);
        rows.push(ShapeRow::new(format!("4×4 3D Conv{suffix}"), &[size, size, c, t]));
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{make_age_mask, AgeValue};
    use crate::generator::trace_to_rows;

    fn frame(seed: usize, size: usize) -> Frame {
        Frame::from_fn(size, size, 3, |c, y, x| {
            (((seed * 37 + c * 11 + y * 5 + x * 3) % 89) as f32) / 44.5 - 1.0
        })
        .unwrap()
    }

    fn mask(years: f64, size: usize) -> AgeMask {
        make_age_mask(AgeValue::new(years).unwrap(), size, size).unwrap()
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        nn::scalar(&(a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap()).unwrap()
    }

    #[test]
    fn image_disc_desk_shape_and_trace() {
        let d = ImageDiscriminator::new(ImageDiscConfig::default(), DType::F32).unwrap();
        let x = frame(1, 64).to_tensor(DType::F32, &Device::Cpu).unwrap();
        let mut trace = Trace::new();
        let y = d.forward(&x, &[0.5], Some(&mut trace)).unwrap();
        assert_eq!(y.dims(), &[1, 1, 8, 8]);
        assert_eq!(trace_to_rows(&trace), image_disc_shapes(d.config(), 64));
    }

    #[test]
    fn video_disc_desk_shape_and_trace() {
        let d = VideoDiscriminator::new(VideoDiscConfig::default(), DType::F32).unwrap();
        let xs: Vec<_> = (0..3).map(|i| frame(i, 64).to_tensor(DType::F32, &Device::Cpu).unwrap()).collect();
        let mut trace = Trace::new();
        let y = d.forward(&xs, &[0.5], Some(&mut trace)).unwrap();
        assert_eq!(y.dims(), &[1, 1, 4, 8, 8]);
        assert_eq!(trace_to_rows(&trace), video_disc_shapes(d.config(), 64));
    }

    #[test]
    fn wrong_frame_count_rejected() {
        let d = VideoDiscriminator::new(VideoDiscConfig::desk(), DType::F32).unwrap();
        let frames = vec![frame(0, 16), frame(1, 16)];
        assert!(d.video_disc_forward(&frames, &mask(30.0, 16)).is_err());
    }

    #[test]
    fn size_mismatch_rejected() {
        let d = ImageDiscriminator::new(ImageDiscConfig::desk(), DType::F32).unwrap();
        assert!(d.image_disc_forward(&frame(0, 32), &mask(30.0, 16)).is_err());
    }

    #[test]
    fn zero_weights_give_zero_scores() {
        let d = ImageDiscriminator::new(ImageDiscConfig::desk(), DType::F32).unwrap();
        d.params().zero_prefix("").unwrap();
        let y = d.image_disc_forward(&frame(3, 64), &mask(60.0, 64)).unwrap();
        assert_eq!(nn::scalar(&y.abs().unwrap().flatten_all().unwrap().max(0).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn temporal_order_matters() {
        let d = VideoDiscriminator::new(VideoDiscConfig::desk(), DType::F64).unwrap();
        let frames: Vec<_> = (0..3).map(|i| frame(i * 7 + 1, 32)).collect();
        let reversed: Vec<_> = frames.iter().rev().cloned().collect();
        let m = mask(40.0, 32);
        let a = d.video_disc_forward(&frames, &m).unwrap();
        let b = d.video_disc_forward(&reversed, &m).unwrap();
        assert!(max_abs(&a, &b) > 1e-6);
    }

    #[test]
    fn both_critics_are_conditional() {
        let img = ImageDiscriminator::new(ImageDiscConfig::desk(), DType::F64).unwrap();
        let vid = VideoDiscriminator::new(VideoDiscConfig::desk(), DType::F64).unwrap();
        let f = frame(5, 32);
        let frames = vec![frame(1, 32), frame(2, 32), frame(3, 32)];
        let (young, old) = (mask(18.0, 32), mask(85.0, 32));
        let d_img = max_abs(
            &img.image_disc_forward(&f, &young).unwrap(),
            &img.image_disc_forward(&f, &old).unwrap(),
        );
        let d_vid = max_abs(
            &vid.video_disc_forward(&frames, &young).unwrap(),
            &vid.video_disc_forward(&frames, &old).unwrap(),
        );
        assert!(d_img > 1e-6, "{d_img}");
        assert!(d_vid > 1e-6, "{d_vid}");
    }

    /// Highest input row/column reachable from output index 0 through the
    /// layer stack (inclusive), walked backwards layer by layer.
    fn receptive_reach_of_origin() -> isize {
        let mut hi = 0isize;
        for i in (0..5).rev() {
            let (stride, pad, _) = layer_plan(i);
            hi = hi * stride as isize - pad.top as isize + KERNEL as isize - 1;
        }
        hi
    }

    #[test]
    fn patch_locality() {
        let d = ImageDiscriminator::new(ImageDiscConfig::desk(), DType::F64).unwrap();
        let reach = receptive_reach_of_origin();
        assert!(reach < 63, "receptive field reaches {reach}");
        let base = frame(9, 64);
        let mut data = base.data().to_vec();
        for c in 0..3 {
            data[(c * 64 + 63) * 64 + 63] = 0.0;
        }
        let poked = Frame::new(64, 64, 3, data).unwrap();
        let m = mask(50.0, 64);
        let a = d.image_disc_forward(&base, &m).unwrap();
        let b = d.image_disc_forward(&poked, &m).unwrap();
        let a00 = a.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
        let b00 = b.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
        assert_eq!(a00, b00);
        // the bottom-right patch does see the change
        assert!(max_abs(&a, &b) > 0.0);
    }
}
