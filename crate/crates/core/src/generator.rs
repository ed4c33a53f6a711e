//! Recurrent re-aging generator.
//!
//! Each time step concatenates three masked neighbor frames, the previous
//! output frame and the previous hidden state, runs them through a U-Net
//! (the recurrent block) and splits the result into a 3-channel delta image
//! and a new hidden state. The output frame is `clamp(input + delta)`.

use std::fmt;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::datamodel::{mask_frame, AgeValue, Frame, MaskedFrame, VideoClip};
use crate::error::{Error, Result};
use crate::nn::{self, record, Checkpoint, Conv2d, Pad2, ParamStore, Trace};

/// RGB channels per frame.
pub const FRAME_CHANNELS: usize = 3;
/// Neighbor frames consumed per step.
pub const NEIGHBORS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub base_channels: usize,
    pub hidden_channels: usize,
    /// Number of down/up sampling stages.
    pub depth: usize,
    pub leaky_slope: f64,
    pub skip_connections: bool,
    /// Init gain of the final 1×1 convolution; small values start the
    /// generator near the identity.
    pub head_gain: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            resolution: 512,
            base_channels: 64,
            hidden_channels: 64,
            depth: 4,
            leaky_slope: 0.2,
            skip_connections: true,
            head_gain: 1.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Small network for 64×64 CPU experiments.
    pub fn desk() -> Self {
        GeneratorConfig {
            resolution: 64,
            base_channels: 8,
            hidden_channels: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.base_channels == 0 || self.hidden_channels == 0 {
            return Err(Error::config("generator sizes must be positive"));
        }
        let factor = 1usize << self.depth;
        if self.resolution % factor != 0 {
            return Err(Error::config(format!(
                "resolution {} is not divisible by 2^{} = {factor}",
                self.resolution, self.depth
            )));
        }
        if !(0.0..=1.0).contains(&self.leaky_slope) {
            return Err(Error::config("leaky_slope must lie in [0, 1]"));
        }
        if !(self.head_gain.is_finite() && self.head_gain >= 0.0) {
            return Err(Error::config("head_gain must be finite and non-negative"));
        }
        Ok(())
    }

    /// Channels entering the block: three masked frames, previous output,
    /// previous hidden state.
    pub fn input_channels(&self) -> usize {
        NEIGHBORS * MaskedFrame::CHANNELS + FRAME_CHANNELS + self.hidden_channels
    }

    /// Channels leaving the final 1×1 convolution: delta + hidden.
    pub fn output_channels(&self) -> usize {
        FRAME_CHANNELS + self.hidden_channels
    }

    /// Encoder widths from full resolution down to the bottleneck.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..=self.depth).map(|i| self.base_channels << i).collect()
    }

    /// Decoder widths after each upsampling stage.
    pub fn decoder_channels(&self) -> Vec<usize> {
        (0..self.depth).rev().map(|i| self.base_channels << i).collect()
    }
}

/// One row of a layer/shape table, dims listed as in the architecture
/// tables (`w × h × c …`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeRow {
    pub layer: String,
    pub dims: Vec<usize>,
}

impl ShapeRow {
    pub fn new(layer: impl Into<String>, dims: &[usize]) -> Self {
        ShapeRow {
            layer: layer.into(),
            dims: dims.to_vec(),
        }
    }
}

impl fmt::Display for ShapeRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{:<40} {}", self.layer, dims.join(" × "))
    }
}

pub fn trace_to_rows(trace: &Trace) -> Vec<ShapeRow> {
    trace.iter().map(|(n, d)| ShapeRow::new(n.clone(), d)).collect()
}

/// `B × C × H × W` → `[w, h, c]`.
fn whc(t: &Tensor) -> Result<Vec<usize>> {
    let (_, c, h, w) = t.dims4()?;
    Ok(vec![w, h, c])
}

/// Rows of one down-sampling layer applied to a `w × h × c` input.
pub fn downsample_layer_shapes(w: usize, h: usize, c: usize) -> Vec<ShapeRow> {
    vec![
        ShapeRow::new("MaxBlurPool", &[w / 2, h / 2, c]),
        ShapeRow::new("3×3 Conv + LeakyReLU", &[w / 2, h / 2, 2 * c]),
        ShapeRow::new("3×3 Conv + LeakyReLU", &[w / 2, h / 2, 2 * c]),
    ]
}

/// Rows of one up-sampling layer applied to a `w × h × c` input.
pub fn upsample_layer_shapes(w: usize, h: usize, c: usize) -> Vec<ShapeRow> {
    vec![
        ShapeRow::new("BlurUpSample", &[2 * w, 2 * h, c]),
        ShapeRow::new("3×3 Conv + LeakyReLU", &[2 * w, 2 * h, c / 2]),
        ShapeRow::new("3×3 Conv + LeakyReLU", &[2 * w, 2 * h, c / 2]),
    ]
}

/// Analytic shape table of the recurrent block, computed from the config
/// alone. Sub-layer rows are named `<Layer>[i]/<sublayer>`.
pub fn recurrent_block_shapes(config: &GeneratorConfig) -> Vec<ShapeRow> {
    let r = config.resolution;
    let mut rows = vec![
        ShapeRow::new("Input (Video)", &[r, r, NEIGHBORS, MaskedFrame::CHANNELS]),
        ShapeRow::new("Reshape", &[r, r, NEIGHBORS * MaskedFrame::CHANNELS]),
        ShapeRow::new("Previous Hidden State", &[r, r, config.hidden_channels]),
        ShapeRow::new("Previous Output", &[r, r, FRAME_CHANNELS]),
        ShapeRow::new("Concatenation", &[r, r, config.input_channels()]),
        ShapeRow::new("3×3 Conv + LeakyReLU", &[r, r, config.base_channels]),
        ShapeRow::new("3×3 Conv + LeakyReLU", &[r, r, config.base_channels]),
    ];
    let (mut size, mut c) = (r, config.base_channels);
    for i in 0..config.depth {
        for sub in downsample_layer_shapes(size, size, c) {
            rows.push(ShapeRow::new(format!("DownSampleLayer[{i}]/{}", sub.layer), &sub.dims));
        }
        size /= 2;
        c *= 2;
        rows.push(ShapeRow::new("DownSampleLayer", &[size, size, c]));
    }
    for i in 0..config.depth {
        for sub in upsample_layer_shapes(size, size, c) {
            rows.push(ShapeRow::new(format!("UpSampleLayer[{i}]/{}", sub.layer), &sub.dims));
        }
        size *= 2;
        c /= 2;
        rows.push(ShapeRow::new("UpSampleLayer", &[size, size, c]));
    }
    rows.push(ShapeRow::new("1×1 Conv", &[r, r, config.output_channels()]));
    rows.push(ShapeRow::new("Output Delta Image", &[r, r, FRAME_CHANNELS]));
    rows.push(ShapeRow::new(
        "Output Hidden State + LeakyReLU",
        &[r, r, config.hidden_channels],
    ));
    rows
}

/// Whole-generator rows for an `n`-frame input.
pub fn generator_shapes(config: &GeneratorConfig, n: usize) -> Vec<ShapeRow> {
    let r = config.resolution;
    vec![
        ShapeRow::new("Input (Video)", &[r, r, n, FRAME_CHANNELS]),
        ShapeRow::new("Recurrent Blocks (× N)", &[r, r, n, config.output_channels()]),
        ShapeRow::new("Output (Video)", &[r, r, n, FRAME_CHANNELS]),
    ]
}

struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn new(ps: &mut ParamStore, path: &str, cin: usize, cout: usize, gain: f64) -> Result<Self> {
        Ok(DoubleConv {
            a: Conv2d::new(ps, &format!("{path}.conv_a"), cin, cout, 3, 1, Pad2::uniform(1), gain)?,
            b: Conv2d::new(ps, &format!("{path}.conv_b"), cout, cout, 3, 1, Pad2::uniform(1), gain)?,
        })
    }

    fn forward(&self, x: &Tensor, slope: f64, prefix: &str, trace: &mut Option<&mut Trace>) -> Result<Tensor> {
        let x = nn::leaky_relu(&self.a.forward(x)?, slope)?;
        record(trace, format!("{prefix}3×3 Conv + LeakyReLU"), &whc(&x)?);
        let x = nn::leaky_relu(&self.b.forward(&x)?, slope)?;
        record(trace, format!("{prefix}3×3 Conv + LeakyReLU"), &whc(&x)?);
        Ok(x)
    }
}

/// The per-step U-Net.
pub struct RecurrentBlock {
    config: GeneratorConfig,
    stem: DoubleConv,
    down: Vec<DoubleConv>,
    up: Vec<DoubleConv>,
    head: Conv2d,
}

impl RecurrentBlock {
    fn new(config: &GeneratorConfig, ps: &mut ParamStore) -> Result<Self> {
        let gain = nn::leaky_gain(config.leaky_slope);
        let enc = config.encoder_channels();
        let stem = DoubleConv::new(ps, "rb.stem", config.input_channels(), enc[0], gain)?;
        let down = (0..config.depth)
            .map(|i| DoubleConv::new(ps, &format!("rb.down.{i}"), enc[i], enc[i + 1], gain))
            .collect::<Result<Vec<_>>>()?;
        let up = (0..config.depth)
            .map(|i| {
                let level = config.depth - i;
                let cin = enc[level];
                let cout = enc[level - 1];
                let skip = if config.skip_connections { cout } else { 0 };
                DoubleConv::new(ps, &format!("rb.up.{i}"), cin + skip, cout, gain)
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Conv2d::new(ps, "rb.head", enc[0], config.output_channels(), 1, 1, Pad2::uniform(0), config.head_gain)?;
        Ok(RecurrentBlock {
            config: config.clone(),
            stem,
            down,
            up,
            head,
        })
    }

    /// `x`: `B × input_channels × H × W` → `(hidden, delta)`.
    pub fn forward(&self, x: &Tensor, mut trace: Option<&mut Trace>) -> Result<(Tensor, Tensor)> {
        let slope = self.config.leaky_slope;
        let mut h = self.stem.forward(x, slope, "", &mut trace)?;
        let mut skips = vec![h.clone()];
        for (i, layer) in self.down.iter().enumerate() {
            let prefix = format!("DownSampleLayer[{i}]/");
            h = nn::max_blur_pool(&h)?;
            record(&mut trace, format!("{prefix}MaxBlurPool"), &whc(&h)?);
            h = layer.forward(&h, slope, &prefix, &mut trace)?;
            record(&mut trace, "DownSampleLayer", &whc(&h)?);
            skips.push(h.clone());
        }
        skips.pop();
        for (i, layer) in self.up.iter().enumerate() {
            let prefix = format!("UpSampleLayer[{i}]/");
            h = nn::blur_upsample(&h)?;
            record(&mut trace, format!("{prefix}BlurUpSample"), &whc(&h)?);
            let skip = skips.pop().expect("one skip per level");
            if self.config.skip_connections {
                h = Tensor::cat(&[&h, &skip], 1)?;
            }
            h = layer.forward(&h, slope, &prefix, &mut trace)?;
            record(&mut trace, "UpSampleLayer", &whc(&h)?);
        }
        let out = self.head.forward(&h)?;
        record(&mut trace, "1×1 Conv", &whc(&out)?);
        let delta = out.narrow(1, 0, FRAME_CHANNELS)?;
        record(&mut trace, "Output Delta Image", &whc(&delta)?);
        let hidden = nn::leaky_relu(
            &out.narrow(1, FRAME_CHANNELS, self.config.hidden_channels)?,
            slope,
        )?;
        record(&mut trace, "Output Hidden State + LeakyReLU", &whc(&hidden)?);
        Ok((hidden, delta))
    }
}

/// Carried state between steps: hidden map and previous output frame.
#[derive(Debug, Clone)]
pub struct RecurrentState {
    /// `B × hidden_channels × H × W`.
    pub hidden: Tensor,
    /// `B × 3 × H × W`.
    pub prev_output: Tensor,
}

impl RecurrentState {
    /// Zero hidden map; the previous output starts as the first input frame.
    pub fn initial(config: &GeneratorConfig, first_frame: &Tensor) -> Result<Self> {
        let (b, _, h, w) = first_frame.dims4()?;
        Ok(RecurrentState {
            hidden: Tensor::zeros((b, config.hidden_channels, h, w), first_frame.dtype(), first_frame.device())?,
            prev_output: first_frame.clone(),
        })
    }
}

/// Additive residual predicted by the generator; unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaImage {
    pub height: usize,
    pub width: usize,
    /// Channel-major `3 × H × W`.
    pub data: Vec<f32>,
}

impl DeltaImage {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        if c != FRAME_CHANNELS {
            return Err(Error::validation(format!("delta has {c} channels")));
        }
        Ok(DeltaImage {
            height: h,
            width: w,
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        DeltaImage {
            height,
            width,
            data: vec![0.0; FRAME_CHANNELS * height * width],
        }
    }
}

/// `clamp(input + delta, -1, 1)`.
pub fn compose_output(delta: &DeltaImage, input: &Frame) -> Result<Frame> {
    if delta.height != input.height() || delta.width != input.width() || input.channels() != FRAME_CHANNELS {
        return Err(Error::validation(format!(
            "delta {}×{} does not match frame {}×{}×{}",
            delta.height,
            delta.width,
            input.channels(),
            input.height(),
            input.width()
        )));
    }
    let data = input.data().iter().zip(&delta.data).map(|(a, d)| a + d).collect();
    Frame::new(input.height(), input.width(), FRAME_CHANNELS, data)
}

/// Clamped neighbor indices `(t − Δt, t, t + Δt)` for every `t` (0-based).
pub fn neighbor_indices(n: usize, interval: usize) -> Vec<[usize; 3]> {
    (0..n)
        .map(|t| [t.saturating_sub(interval), t, (t + interval).min(n - 1)])
        .collect()
}

/// Outputs of an unrolled sequence, one `B × 3 × H × W` tensor per step.
#[derive(Debug, Clone)]
pub struct Unrolled {
    pub outputs: Vec<Tensor>,
    pub deltas: Vec<Tensor>,
}

pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    block: RecurrentBlock,
}

impl Generator {
    pub fn new(config: GeneratorConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype, config.seed);
        let block = RecurrentBlock::new(&config, &mut params)?;
        Ok(Generator {
            config,
            params,
            block,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn block(&self) -> &RecurrentBlock {
        &self.block
    }

    /// Zeroes the final 1×1 convolution: every delta becomes 0.
    pub fn zero_output_layer(&self) -> Result<()> {
        self.params.zero_prefix("rb.head.")?;
        Ok(())
    }

    fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let factor = 1usize << self.config.depth;
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::config(format!(
                "input {h}×{w} is not divisible by 2^{} = {factor}",
                self.config.depth
            )));
        }
        Ok(())
    }

    /// One step on tensors. `prev`, `curr`, `next` are `B × 5 × H × W` masked frames.
    pub fn step(
        &self,
        prev: &Tensor,
        curr: &Tensor,
        next: &Tensor,
        state: &RecurrentState,
        mut trace: Option<&mut Trace>,
    ) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = curr.dims4()?;
        self.check_spatial(h, w)?;
        record(&mut trace, "Input (Video)", &[w, h, NEIGHBORS, curr.dim(1)?]);
        let frames = Tensor::cat(&[prev, curr, next], 1)?;
        record(&mut trace, "Reshape", &whc(&frames)?);
        record(&mut trace, "Previous Hidden State", &whc(&state.hidden)?);
        record(&mut trace, "Previous Output", &whc(&state.prev_output)?);
        let x = Tensor::cat(&[&frames, &state.prev_output, &state.hidden], 1)?;
        record(&mut trace, "Concatenation", &whc(&x)?);
        if x.dim(1)? != self.config.input_channels() {
            return Err(Error::validation(format!(
                "block input has {} channels, expected {}",
                x.dim(1)?,
                self.config.input_channels()
            )));
        }
        self.block.forward(&x, trace)
    }

    /// One step on value types; returns the new hidden map and the delta.
    pub fn recurrent_block_forward(
        &self,
        prev: &MaskedFrame,
        curr: &MaskedFrame,
        next: &MaskedFrame,
        state: &RecurrentState,
    ) -> Result<(Tensor, DeltaImage)> {
        let (dt, dev) = (self.dtype(), self.device().clone());
        let (hidden, delta) = self.step(
            &prev.to_tensor(dt, &dev)?,
            &curr.to_tensor(dt, &dev)?,
            &next.to_tensor(dt, &dev)?,
            state,
            None,
        )?;
        Ok((hidden, DeltaImage::from_tensor(&delta)?))
    }

    /// Runs the recurrence over `frames` (each `B × 3 × H × W`). Ages are
    /// normalized to `[0, 1]`, one per batch item.
    pub fn unroll(
        &self,
        frames: &[Tensor],
        input_age: &[f64],
        target_age: &[f64],
        interval: usize,
    ) -> Result<Unrolled> {
        let first = frames
            .first()
            .ok_or_else(|| Error::validation("cannot unroll an empty sequence"))?;
        if interval == 0 {
            return Err(Error::validation("frame interval must be at least 1"));
        }
        let (b, _, h, w) = first.dims4()?;
        if input_age.len() != b || target_age.len() != b {
            return Err(Error::validation("one input and target age per batch item"));
        }
        let plane = |ages: &[f64]| -> Result<Tensor> {
            let data: Vec<f64> = ages.iter().flat_map(|a| std::iter::repeat_n(*a, h * w)).collect();
            Ok(Tensor::from_vec(data, (b, 1, h, w), first.device())?.to_dtype(first.dtype())?)
        };
        let (m_in, m_tar) = (plane(input_age)?, plane(target_age)?);
        let masked = frames
            .iter()
            .map(|f| Ok(Tensor::cat(&[f, &m_in, &m_tar], 1)?))
            .collect::<Result<Vec<_>>>()?;

        let mut state = RecurrentState::initial(&self.config, first)?;
        let mut outputs = Vec::with_capacity(frames.len());
        let mut deltas = Vec::with_capacity(frames.len());
        for (t, [p, c, n]) in neighbor_indices(frames.len(), interval).into_iter().enumerate() {
            let (hidden, delta) = self.step(&masked[p], &masked[c], &masked[n], &state, None)?;
            let out = (&frames[t] + &delta)?.clamp(-1.0, 1.0)?;
            state = RecurrentState {
                hidden,
                prev_output: out.clone(),
            };
            outputs.push(out);
            deltas.push(delta);
        }
        Ok(Unrolled { outputs, deltas })
    }

    /// Re-ages every frame of `clip`; the output keeps the clip's metadata
    /// with `apparent_age` set to the target.
    pub fn generate_video(
        &self,
        clip: &VideoClip,
        input_age: AgeValue,
        target_age: AgeValue,
        interval: usize,
    ) -> Result<VideoClip> {
        if interval == 0 {
            return Err(Error::validation("frame interval must be at least 1"));
        }
        if interval >= clip.frame_count() {
            log::warn!(
                "frame interval {interval} >= clip length {}; all neighbors clamp to the clip ends",
                clip.frame_count()
            );
        }
        let (dt, dev) = (self.dtype(), self.device().clone());
        let frames = clip
            .frames()
            .iter()
            .map(|f| f.to_tensor(dt, &dev))
            .collect::<Result<Vec<_>>>()?;
        let unrolled = self.unroll(&frames, &[input_age.normalized()], &[target_age.normalized()], interval)?;
        // Compose on the CPU-side frames so a zero delta reproduces the input exactly.
        let outputs = unrolled
            .deltas
            .iter()
            .zip(clip.frames())
            .map(|(d, f)| compose_output(&DeltaImage::from_tensor(d)?, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(clip.with_frames(outputs)?.with_age(target_age))
    }

    /// Masks each frame and runs [`generate_video`](Self::generate_video);
    /// convenience for callers holding plain frames.
    pub fn mask_sequence(frames: &[Frame], input_age: AgeValue, target_age: AgeValue) -> Result<Vec<MaskedFrame>> {
        frames.iter().map(|f| mask_frame(f, input_age, target_age)).collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        ck.metadata.insert("generator_config".into(), serde_json::to_string(&self.config)?);
        ck.tensors = self.params.to_tensors("generator.");
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        let cfg = ck
            .metadata
            .get("generator_config")
            .ok_or_else(|| Error::Checkpoint("no generator_config in checkpoint".into()))?;
        let config: GeneratorConfig = serde_json::from_str(cfg)?;
        let g = Generator::new(config, dtype)?;
        g.params.load_tensors(&ck.tensors, "generator.")?;
        Ok(g)
    }

    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        Generator::from_checkpoint(&Checkpoint::load(path)?, dtype)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn age(y: f64) -> AgeValue {
        AgeValue::new(y).unwrap()
    }

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            resolution: 16,
            base_channels: 4,
            hidden_channels: 4,
            depth: 2,
            ..Default::default()
        }
    }

    fn random_clip(n: usize, size: usize, seed: u64) -> VideoClip {
        let frames = (0..n)
            .map(|t| {
                Frame::from_fn(size, size, 3, |c, y, x| {
                    let v = ((seed as usize * 31 + t * 17 + c * 13 + y * 7 + x * 3) % 97) as f32;
                    v / 48.5 - 1.0
                })
                .unwrap()
            })
            .collect();
        VideoClip::new("s", frames).unwrap()
    }

    #[test]
    fn neighbor_table_n5_dt2() {
        // 1-based (1,1,3),(1,2,4),(1,3,5),(2,4,5),(3,5,5)
        let one_based: Vec<[usize; 3]> = neighbor_indices(5, 2)
            .into_iter()
            .map(|[a, b, c]| [a + 1, b + 1, c + 1])
            .collect();
        assert_eq!(one_based, vec![[1, 1, 3], [1, 2, 4], [1, 3, 5], [2, 4, 5], [3, 5, 5]]);
        assert_eq!(neighbor_indices(1, 3), vec![[0, 0, 0]]);
    }

    #[test]
    fn channel_arithmetic() {
        let full = GeneratorConfig::default();
        assert_eq!(full.input_channels(), 82);
        assert_eq!(full.output_channels(), 67);
        assert_eq!(full.encoder_channels(), vec![64, 128, 256, 512, 1024]);
        assert_eq!(full.decoder_channels(), vec![512, 256, 128, 64]);
    }

    #[test]
    fn config_rejects_indivisible_resolution() {
        let cfg = GeneratorConfig {
            resolution: 40,
            ..tiny()
        };
        assert!(cfg.clone().validate().is_ok()); // 40 divisible by 4
        let cfg = GeneratorConfig { depth: 4, ..cfg };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn compose_examples() {
        let input = Frame::filled(16, 16, 3, 0.9).unwrap();
        let zero = DeltaImage::zeros(16, 16);
        assert_eq!(compose_output(&zero, &input).unwrap(), input);
        let plus = DeltaImage {
            height: 16,
            width: 16,
            data: vec![0.3; 768],
        };
        assert!(compose_output(&plus, &input).unwrap().data().iter().all(|&v| v == 1.0));
        let neg = DeltaImage {
            height: 16,
            width: 16,
            data: input.data().iter().map(|v| -v).collect(),
        };
        assert!(compose_output(&neg, &input).unwrap().data().iter().all(|&v| v == 0.0));
        let wrong = DeltaImage::zeros(32, 32);
        assert!(compose_output(&wrong, &input).is_err());
    }

    #[test]
    fn traced_forward_matches_walker() {
        for skip in [true, false] {
            let cfg = GeneratorConfig {
                skip_connections: skip,
                ..tiny()
            };
            let g = Generator::new(cfg.clone(), DType::F32).unwrap();
            let dev = Device::Cpu;
            let m = Tensor::zeros((1, 5, 16, 16), DType::F32, &dev).unwrap();
            let f = Tensor::zeros((1, 3, 16, 16), DType::F32, &dev).unwrap();
            let state = RecurrentState::initial(&cfg, &f).unwrap();
            let mut trace = Trace::new();
            g.step(&m, &m, &m, &state, Some(&mut trace)).unwrap();
            assert_eq!(trace_to_rows(&trace), recurrent_block_shapes(&cfg));
        }
    }

    #[test]
    fn block_output_split() {
        let cfg = tiny();
        let g = Generator::new(cfg.clone(), DType::F32).unwrap();
        let clip = random_clip(3, 16, 1);
        let m: Vec<_> = Generator::mask_sequence(clip.frames(), age(20.0), age(70.0)).unwrap();
        let state = RecurrentState::initial(&cfg, &clip.frames()[0].to_tensor(DType::F32, &Device::Cpu).unwrap()).unwrap();
        let (hidden, delta) = g.recurrent_block_forward(&m[0], &m[1], &m[2], &state).unwrap();
        assert_eq!(hidden.dims(), &[1, 4, 16, 16]);
        assert_eq!((delta.height, delta.width, delta.data.len()), (16, 16, 768));
        // leaky activation on the hidden split only
        let min_hidden = hidden.flatten_all().unwrap().min(0).unwrap().to_scalar::<f32>().unwrap();
        let min_delta = delta.data.iter().cloned().fold(f32::MAX, f32::min);
        assert!(min_delta < 0.0);
        assert!(min_hidden > min_delta * 0.2 - 1e-3 || min_hidden >= -1.0);
    }

    #[test]
    fn zero_head_gives_zero_delta_and_identity_video() {
        let g = Generator::new(tiny(), DType::F32).unwrap();
        g.zero_output_layer().unwrap();
        let clip = random_clip(4, 16, 2);
        let out = g.generate_video(&clip, age(18.0), age(85.0), 1).unwrap();
        for (a, b) in out.frames().iter().zip(clip.frames()) {
            assert_eq!(a.max_abs_diff(b).unwrap(), 0.0);
        }
        assert_eq!(out.apparent_age, Some(age(85.0)));
    }

    #[test]
    fn single_frame_clip() {
        let g = Generator::new(tiny(), DType::F32).unwrap();
        let clip = random_clip(1, 16, 3);
        let out = g.generate_video(&clip, age(30.0), age(60.0), 3).unwrap();
        assert_eq!(out.frame_count(), 1);
    }

    #[test]
    fn deterministic_build_and_forward() {
        let a = Generator::new(tiny(), DType::F32).unwrap();
        let b = Generator::new(tiny(), DType::F32).unwrap();
        assert_eq!(a.params().parameter_count(), b.params().parameter_count());
        assert_eq!(a.params().snapshot().unwrap(), b.params().snapshot().unwrap());
        let clip = random_clip(3, 16, 4);
        let oa = a.generate_video(&clip, age(20.0), age(80.0), 1).unwrap();
        let ob = b.generate_video(&clip, age(20.0), age(80.0), 1).unwrap();
        assert_eq!(oa, ob);
    }

    #[test]
    fn wrong_spatial_size_is_config_error() {
        let g = Generator::new(GeneratorConfig { depth: 5, resolution: 32, ..tiny() }, DType::F32).unwrap();
        let clip = random_clip(2, 16, 5);
        match g.generate_video(&clip, age(20.0), age(30.0), 1) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.safetensors");
        let g = Generator::new(GeneratorConfig { seed: 11, ..tiny() }, DType::F32).unwrap();
        g.save(&path).unwrap();
        let back = Generator::load(&path, DType::F32).unwrap();
        assert_eq!(back.config(), g.config());
        assert_eq!(back.params().snapshot().unwrap(), g.params().snapshot().unwrap());
    }
}
