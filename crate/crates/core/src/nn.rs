//! Layer primitives on top of candle tensors: a named parameter store,
//! 2D/3D convolutions with asymmetric padding, anti-aliased pooling and
//! upsampling, and the on-disk parameter container.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Shapes recorded during a traced forward pass, `(layer, dims)`.
pub type Trace = Vec<(String, Vec<usize>)>;

pub(crate) fn record(trace: &mut Option<&mut Trace>, name: impl Into<String>, dims: &[usize]) {
    if let Some(t) = trace.as_deref_mut() {
        t.push((name.into(), dims.to_vec()));
    }
}

/// Named trainable tensors keyed by layer path (`enc.0.conv_a.weight`).
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    seed: u64,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        ParamStore {
            dtype,
            device: Device::Cpu,
            seed,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, path: String, t: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(&path) {
            return Err(Error::config(format!("duplicate parameter {path}")));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let tensor = var.as_tensor().clone();
        self.vars.insert(path, var);
        Ok(tensor)
    }

    /// Normal init scaled by fan-in: `std = gain / sqrt(fan_in)`. The stream is
    /// derived from the store seed and the path, so build order does not matter.
    pub fn fan_in_normal(&mut self, path: &str, shape: &[usize], fan_in: usize, gain: f64) -> Result<Tensor> {
        let std = gain / (fan_in as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(path.as_bytes()));
        let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(path.to_string(), t)
    }

    pub fn zeros(&mut self, path: &str, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        self.insert(path.to_string(), t)
    }

    pub fn get(&self, path: &str) -> Option<&Var> {
        self.vars.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter whose path starts with `prefix` with zeros.
    pub fn zero_prefix(&self, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (path, var) in &self.vars {
            if path.starts_with(prefix) {
                var.set(&var.zeros_like()?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn to_tensors(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.as_tensor().clone()))
            .collect()
    }

    /// Copies values for every parameter from `tensors[prefix + path]`.
    pub fn load_tensors(&self, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (path, var) in &self.vars {
            let key = format!("{prefix}{path}");
            let src = tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "{key}: stored shape {:?}, expected {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Flat copy of all parameter values, in path order.
    pub fn snapshot(&self) -> Result<Vec<Vec<f64>>> {
        self.vars
            .values()
            .map(|v| Ok(v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?))
            .collect()
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `max(x, slope·x)`, equal to leaky ReLU for `0 ≤ slope ≤ 1`.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// He-style gain for a leaky activation.
pub fn leaky_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}

/// Zero padding per side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pad2 {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad2 {
    pub fn uniform(p: usize) -> Self {
        Pad2 {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Keeps the size unchanged for a stride-1 kernel of size `k`; even
    /// kernels put the extra row/column at the bottom/right.
    pub fn same(k: usize) -> Self {
        let total = k - 1;
        let before = total / 2;
        Pad2 {
            top: before,
            bottom: total - before,
            left: before,
            right: total - before,
        }
    }

}

pub fn conv_out_len(len: usize, k: usize, stride: usize, pad_before: usize, pad_after: usize) -> usize {
    (len + pad_before + pad_after - k) / stride + 1
}

/// Convolution as one batched matrix product over unfolded patches.
///
/// Strided kernels read from the `stride × stride` polyphase components
/// of the padded input, so every tap is a plain window.
fn conv2d_padded(x: &Tensor, weight: &Tensor, pad: Pad2, stride: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, _, k, _) = weight.dims4()?;
    let ho = conv_out_len(h, k, stride, pad.top, pad.bottom);
    let wo = conv_out_len(w, k, stride, pad.left, pad.right);
    // Extra trailing zeros make every phase the same size; they are never read.
    let hp = (h + pad.top + pad.bottom).div_ceil(stride) * stride;
    let wp = (w + pad.left + pad.right).div_ceil(stride) * stride;
    let xp = x
        .pad_with_zeros(2, pad.top, hp - h - pad.top)?
        .pad_with_zeros(3, pad.left, wp - w - pad.left)?;
    let phases: Vec<Vec<Tensor>> = if stride == 1 {
        vec![vec![xp]]
    } else {
        let split = xp.reshape((b, c, hp / stride, stride, wp / stride, stride))?;
        (0..stride)
            .map(|a| {
                (0..stride)
                    .map(|bb| Ok(split.narrow(3, a, 1)?.narrow(5, bb, 1)?.squeeze(5)?.squeeze(3)?.contiguous()?))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
    };
    let mut taps = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let t = phases[i % stride][j % stride]
                .narrow(2, i / stride, ho)?
                .narrow(3, j / stride, wo)?;
            taps.push(t.reshape((b, c, ho * wo))?);
        }
    }
    let patches = Tensor::stack(&taps, 2)?.reshape((b, c * k * k, ho * wo))?;
    // Batched matmul needs a materialized (non-broadcast) left operand.
    let wm = weight.reshape((1, o, c * k * k))?.repeat((b, 1, 1))?;
    Ok(wm.matmul(&patches)?.reshape((b, o, ho, wo))?)
}

/// 2D convolution with bias over `B × C × H × W`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: Pad2,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamStore,
        path: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: Pad2,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = params.fan_in_normal(
            &format!("{path}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
            gain,
        )?;
        let bias = params.zeros(&format!("{path}.bias"), &[out_channels])?;
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        })
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_len(h, self.kernel, self.stride, self.pad.top, self.pad.bottom),
            conv_out_len(w, self.kernel, self.stride, self.pad.left, self.pad.right),
        )
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d_padded(x, &self.weight, self.pad, self.stride)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.out_channels, 1, 1))?)?)
    }
}

/// 3D convolution over `B × C × T × H × W` with temporal stride 1.
///
/// Evaluated as a sum of 2D convolutions, one per temporal kernel tap.
#[derive(Debug, Clone)]
pub struct Conv3d {
    weight: Tensor,
    bias: Tensor,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_t: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_t: (usize, usize),
    pub pad: Pad2,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamStore,
        path: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_t: usize,
        kernel: usize,
        stride: usize,
        pad_t: (usize, usize),
        pad: Pad2,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel_t * kernel * kernel;
        let weight = params.fan_in_normal(
            &format!("{path}.weight"),
            &[out_channels, in_channels, kernel_t, kernel, kernel],
            fan_in,
            gain,
        )?;
        let bias = params.zeros(&format!("{path}.bias"), &[out_channels])?;
        Ok(Conv3d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel_t,
            kernel,
            stride,
            pad_t,
            pad,
        })
    }

    pub fn out_thw(&self, t: usize, h: usize, w: usize) -> (usize, usize, usize) {
        (
            conv_out_len(t, self.kernel_t, 1, self.pad_t.0, self.pad_t.1),
            conv_out_len(h, self.kernel, self.stride, self.pad.top, self.pad.bottom),
            conv_out_len(w, self.kernel, self.stride, self.pad.left, self.pad.right),
        )
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, t, h, w) = x.dims5()?;
        let (t_out, h_out, w_out) = self.out_thw(t, h, w);
        let xp = x.pad_with_zeros(2, self.pad_t.0, self.pad_t.1)?;
        let mut acc: Option<Tensor> = None;
        for tap in 0..self.kernel_t {
            let slab = xp
                .narrow(2, tap, t_out)?
                .permute((0, 2, 1, 3, 4))?
                .contiguous()?
                .reshape((b * t_out, c, h, w))?;
            let w_tap = self.weight.narrow(2, tap, 1)?.squeeze(2)?.contiguous()?;
            let y = conv2d_padded(&slab, &w_tap, self.pad, self.stride)?;
            acc = Some(match acc {
                None => y,
                Some(a) => (a + y)?,
            });
        }
        let y = acc
            .expect("kernel_t >= 1")
            .reshape((b, t_out, self.out_channels, h_out, w_out))?
            .permute((0, 2, 1, 3, 4))?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.out_channels, 1, 1, 1))?)?)
    }
}

/// Binomial 3×3 kernel `[1,2,1]⊗[1,2,1] / 16`.
pub const BLUR_KERNEL: [f64; 9] = [
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    4.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
];

fn blur_axis(x: &Tensor, dim: usize, stride: usize) -> Result<Tensor> {
    let len = x.dim(dim)?;
    let xp = x.pad_with_same(dim, 1, 1)?;
    let y = ((xp.narrow(dim, 0, len)? + xp.narrow(dim, 1, len)?.affine(2.0, 0.0)?)? + xp.narrow(dim, 2, len)?)?
        .affine(0.25, 0.0)?;
    if stride == 1 {
        return Ok(y);
    }
    let idx: Vec<u32> = (0..len as u32).step_by(stride).collect();
    let idx = Tensor::from_vec(idx.clone(), idx.len(), x.device())?;
    Ok(y.index_select(&idx, dim)?)
}

/// Depthwise binomial blur with replicate padding, optionally strided.
/// Evaluated separably.
pub fn binomial_blur(x: &Tensor, stride: usize) -> Result<Tensor> {
    x.dims4()?;
    blur_axis(&blur_axis(x, 2, stride)?, 3, stride)
}

/// Anti-aliased max pooling: dense 2×2 max (stride 1), then blur and
/// subsample by 2. Halves even spatial sizes.
pub fn max_blur_pool(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let xp = x.pad_with_same(2, 0, 1)?.pad_with_same(3, 0, 1)?;
    let a = xp.narrow(2, 0, h)?.narrow(3, 0, w)?;
    let b = xp.narrow(2, 0, h)?.narrow(3, 1, w)?;
    let c = xp.narrow(2, 1, h)?.narrow(3, 0, w)?;
    let d = xp.narrow(2, 1, h)?.narrow(3, 1, w)?;
    let m = a.maximum(&b)?.maximum(&c.maximum(&d)?)?;
    binomial_blur(&m, 2)
}

/// Nearest 2× upsampling followed by the binomial blur.
pub fn blur_upsample(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    binomial_blur(&x.upsample_nearest2d(2 * h, 2 * w)?, 1)
}

/// Scalar value of a 0-d (or single element) tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

pub const CHECKPOINT_FORMAT: &str = "reage-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";

/// Versioned key→array container, stored as safetensors with string
/// metadata (`format`, `version`, plus caller entries such as the model
/// configuration JSON).
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Rewrites the JSON header with sorted keys; the serializer takes a hash
/// map and would otherwise emit metadata in a different order per process.
fn canonical_header(mut bytes: Vec<u8>) -> Result<Vec<u8>> {
    let bad = || Error::Checkpoint("malformed safetensors header".into());
    let len = u64::from_le_bytes(bytes.get(..8).ok_or_else(bad)?.try_into().map_err(|_| bad())?) as usize;
    let header = bytes.get(8..8 + len).ok_or_else(bad)?;
    let mut value: serde_json::Value = serde_json::from_slice(header)?;
    value.sort_all_objects();
    let mut sorted = serde_json::to_vec(&value)?;
    if sorted.len() > len {
        return Err(bad());
    }
    sorted.resize(len, b' ');
    bytes[8..8 + len].copy_from_slice(&sorted);
    Ok(bytes)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buffers: Vec<(String, Vec<usize>, safetensors::Dtype, Vec<u8>)> = Vec::new();
        for (name, t) in &self.tensors {
            let (dtype, bytes) = match t.dtype() {
                DType::F64 => (
                    safetensors::Dtype::F64,
                    t.flatten_all()?
                        .to_vec1::<f64>()?
                        .iter()
                        .flat_map(|v| v.to_le_bytes())
                        .collect(),
                ),
                _ => (
                    safetensors::Dtype::F32,
                    t.to_dtype(DType::F32)?
                        .flatten_all()?
                        .to_vec1::<f32>()?
                        .iter()
                        .flat_map(|v| v.to_le_bytes())
                        .collect(),
                ),
            };
            buffers.push((name.clone(), t.dims().to_vec(), dtype, bytes));
        }
        let views = buffers
            .iter()
            .map(|(name, shape, dtype, bytes)| {
                safetensors::tensor::TensorView::new(*dtype, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta: HashMap<String, String> = self
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        meta.insert("format".into(), CHECKPOINT_FORMAT.into());
        meta.insert("version".into(), CHECKPOINT_VERSION.into());
        let bytes = safetensors::tensor::serialize(views, Some(meta))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let bytes = canonical_header(bytes)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let metadata: BTreeMap<String, String> = header
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        if metadata.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Checkpoint(format!("{} is not a {CHECKPOINT_FORMAT} file", path.display())));
        }
        if metadata.get("version").map(String::as_str) != Some(CHECKPOINT_VERSION) {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {:?}",
                metadata.get("version")
            )));
        }
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let device = Device::Cpu;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let data = view.data();
            let shape = view.shape().to_vec();
            let t = match view.dtype() {
                safetensors::Dtype::F32 => {
                    let v: Vec<f32> = data
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Tensor::from_vec(v, shape, &device)?
                }
                safetensors::Dtype::F64 => {
                    let v: Vec<f64> = data
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Tensor::from_vec(v, shape, &device)?
                }
                other => {
                    return Err(Error::Checkpoint(format!("{name}: unsupported dtype {other:?}")))
                }
            };
            tensors.insert(name, t);
        }
        Ok(Checkpoint { metadata, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec((0..n).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(), shape, &Device::Cpu)
            .unwrap()
    }

    #[test]
    fn blur_preserves_constants() {
        let x = (Tensor::ones((1, 2, 8, 8), DType::F64, &Device::Cpu).unwrap() * 0.3).unwrap();
        let y = binomial_blur(&x, 1).unwrap();
        let max = (y - 0.3).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap();
        assert!(scalar(&max).unwrap() < 1e-12);
    }

    #[test]
    fn blur_matches_kernel_loops() {
        let x = ramp(&[1, 2, 7, 6]);
        let v = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for stride in [1, 2] {
            let y = binomial_blur(&x, stride).unwrap();
            let (_, _, ho, wo) = y.dims4().unwrap();
            assert_eq!((ho, wo), ((7 - 1) / stride + 1, (6 - 1) / stride + 1));
            let got = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for c in 0..2 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for i in 0..3 {
                            for j in 0..3 {
                                let yy = (oy * stride + i).saturating_sub(1).min(6);
                                let xx = (ox * stride + j).saturating_sub(1).min(5);
                                acc += BLUR_KERNEL[i * 3 + j] * v[c * 42 + yy * 6 + xx];
                            }
                        }
                        let g = got[c * ho * wo + oy * wo + ox];
                        assert!((g - acc).abs() < 1e-12, "{stride} {c} {oy} {ox}: {g} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn pooling_shapes() {
        let x = ramp(&[2, 3, 16, 16]);
        assert_eq!(max_blur_pool(&x).unwrap().dims(), &[2, 3, 8, 8]);
        assert_eq!(blur_upsample(&x).unwrap().dims(), &[2, 3, 32, 32]);
    }

    #[test]
    fn max_blur_pool_of_constant() {
        let x = Tensor::full(0.5f64, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let y = max_blur_pool(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(y.iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn conv2d_matches_native_convolution() {
        let x = ramp(&[2, 3, 9, 8]);
        for (k, stride, pad) in [(3, 1, Pad2::uniform(1)), (4, 2, Pad2::uniform(1)), (4, 1, Pad2::same(4)), (3, 2, Pad2::uniform(0))] {
            let mut ps = ParamStore::new(DType::F64, 3);
            let conv = Conv2d::new(&mut ps, "c", 3, 5, k, stride, pad, 1.0).unwrap();
            let got = conv2d_padded(&x, &conv.weight, pad, stride).unwrap();
            let xp = x
                .pad_with_zeros(2, pad.top, pad.bottom)
                .unwrap()
                .pad_with_zeros(3, pad.left, pad.right)
                .unwrap();
            let want = xp.conv2d(&conv.weight, 0, stride, 1, 1).unwrap();
            assert_eq!(got.dims(), want.dims());
            let diff = scalar(&(got - want).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap()).unwrap();
            assert!(diff < 1e-12, "k{k} s{stride}: {diff}");
        }
    }

    #[test]
    fn same_padding_keeps_size_for_even_kernel() {
        let mut ps = ParamStore::new(DType::F64, 1);
        let conv = Conv2d::new(&mut ps, "c", 3, 4, 4, 1, Pad2::same(4), 1.0).unwrap();
        let y = conv.forward(&ramp(&[1, 3, 8, 8])).unwrap();
        assert_eq!(y.dims(), &[1, 4, 8, 8]);
        assert_eq!(conv.out_hw(8, 8), (8, 8));
    }

    /// Direct six-loop evaluation of the 3D convolution.
    fn conv3d_reference(x: &[f64], xd: [usize; 5], w: &[f64], wd: [usize; 5], conv: &Conv3d) -> Vec<f64> {
        let [b, c, t, h, wi] = xd;
        let [o, _, kt, kh, kw] = wd;
        let (to, ho, wo) = conv.out_thw(t, h, wi);
        let mut out = vec![0.0; b * o * to * ho * wo];
        for bi in 0..b {
            for oi in 0..o {
                for ti in 0..to {
                    for yi in 0..ho {
                        for xi in 0..wo {
                            let mut acc = 0.0;
                            for ci in 0..c {
                                for a in 0..kt {
                                    for dy in 0..kh {
                                        for dx in 0..kw {
                                            let tt = (ti + a) as isize - conv.pad_t.0 as isize;
                                            let yy = (yi * conv.stride + dy) as isize - conv.pad.top as isize;
                                            let xx = (xi * conv.stride + dx) as isize - conv.pad.left as isize;
                                            if tt < 0 || yy < 0 || xx < 0 || tt >= t as isize || yy >= h as isize || xx >= wi as isize {
                                                continue;
                                            }
                                            let xv = x[(((bi * c + ci) * t + tt as usize) * h + yy as usize) * wi + xx as usize];
                                            let wv = w[(((oi * c + ci) * kt + a) * kh + dy) * kw + dx];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            out[(((bi * o + oi) * to + ti) * ho + yi) * wo + xi] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3d_matches_direct_loops() {
        let mut ps = ParamStore::new(DType::F64, 3);
        let conv = Conv3d::new(&mut ps, "v", 2, 3, 4, 4, 2, (2, 2), Pad2::uniform(1), 1.0).unwrap();
        let x = ramp(&[1, 2, 3, 8, 8]);
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 3, 4, 4, 4]);
        let w = ps.get("v.weight").unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let expected = conv3d_reference(
            &x.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            [1, 2, 3, 8, 8],
            &w,
            [3, 2, 4, 4, 4],
            &conv,
        );
        let got = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new(DType::F32, 9);
        a.fan_in_normal("x", &[4], 4, 1.0).unwrap();
        a.fan_in_normal("y", &[4], 4, 1.0).unwrap();
        let mut b = ParamStore::new(DType::F32, 9);
        b.fan_in_normal("y", &[4], 4, 1.0).unwrap();
        b.fan_in_normal("x", &[4], 4, 1.0).unwrap();
        assert_eq!(a.snapshot().unwrap(), b.snapshot().unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        let mut ck = Checkpoint::default();
        ck.metadata.insert("config".into(), "{\"a\":1}".into());
        ck.tensors.insert("w".into(), ramp(&[2, 3]));
        ck.tensors.insert("v".into(), ramp(&[4]).to_dtype(DType::F32).unwrap());
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.metadata["config"], "{\"a\":1}");
        assert_eq!(back.metadata["version"], CHECKPOINT_VERSION);
        assert_eq!(
            back.tensors["w"].to_vec2::<f64>().unwrap(),
            ck.tensors["w"].to_vec2::<f64>().unwrap()
        );
        assert_eq!(back.tensors["v"].dtype(), DType::F32);
    }

    #[test]
    fn checkpoint_bytes_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::default();
        for k in ["a", "b", "c", "d", "e", "f"] {
            ck.metadata.insert(k.into(), k.repeat(3));
        }
        ck.tensors.insert("w".into(), ramp(&[2, 3]));
        let first = dir.path().join("0");
        ck.save(&first).unwrap();
        for i in 1..8 {
            let p = dir.path().join(i.to_string());
            ck.save(&p).unwrap();
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&first).unwrap());
        }
        assert_eq!(Checkpoint::load(&first).unwrap().metadata["d"], "ddd");
    }

    #[test]
    fn foreign_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"garbage").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
