//! Value types shared by every stage: ages, frames, clips, age masks and the
//! dataset manifest.
//!
//! Pixel values live in `[-1, 1]` and are stored channel-major (`C × H × W`).
//! On disk a clip is a directory of 8-bit PNG frames plus a JSON sidecar, see
//! [`io`].

pub mod io;
pub mod manifest;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{AgeVideo, DatasetManifest, Erratum, SubjectRecord};

/// Spatial sizes must survive four halvings of the recurrent block.
pub const SPATIAL_MULTIPLE: usize = 16;

/// Apparent age in years, `0 ≤ years ≤ 100`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct AgeValue(f64);

impl AgeValue {
    pub const MAX: f64 = 100.0;

    pub fn new(years: f64) -> Result<Self> {
        if !years.is_finite() || !(0.0..=Self::MAX).contains(&years) {
            return Err(Error::validation(format!(
                "age {years} outside [0, {}]",
                Self::MAX
            )));
        }
        Ok(AgeValue(years))
    }

    pub fn years(self) -> f64 {
        self.0
    }

    /// Age mapped onto `[0, 1]`.
    pub fn normalized(self) -> f64 {
        self.0 / Self::MAX
    }
}

impl TryFrom<f64> for AgeValue {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        AgeValue::new(value)
    }
}

impl From<AgeValue> for f64 {
    fn from(value: AgeValue) -> f64 {
        value.0
    }
}

impl std::fmt::Display for AgeValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One image, values clamped into `[-1, 1]`, channel-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Frame {
    /// Builds a frame, clamping every value into `[-1, 1]`.
    ///
    /// Height and width must be positive multiples of [`SPATIAL_MULTIPLE`].
    pub fn new(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        check_frame_dims(height, width, channels)?;
        if data.len() != height * width * channels {
            return Err(Error::validation(format!(
                "frame buffer holds {} values, expected {}×{}×{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        for v in data.iter_mut() {
            if v.is_nan() {
                return Err(Error::validation("frame contains NaN"));
            }
            *v = v.clamp(-1.0, 1.0);
        }
        Ok(Frame {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Frame::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds a frame by evaluating `f(channel, y, x)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Frame::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Largest absolute per-sample difference.
    pub fn max_abs_diff(&self, other: &Frame) -> Result<f32> {
        if !self.same_shape(other) {
            return Err(Error::validation("frame shapes differ"));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Mean absolute per-sample difference.
    pub fn mean_abs_diff(&self, other: &Frame) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::validation("frame shapes differ"));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    /// `1 × C × H × W` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(
            &self.data,
            (1, self.channels, self.height, self.width),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `C × H × W` or `1 × C × H × W`; values are clamped.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::validation(format!("expected rank 3 or 4, got {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Frame::new(h, w, c, data)
    }
}

fn check_frame_dims(height: usize, width: usize, channels: usize) -> Result<()> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::validation("frame dimensions must be positive"));
    }
    if height % SPATIAL_MULTIPLE != 0 || width % SPATIAL_MULTIPLE != 0 {
        return Err(Error::validation(format!(
            "frame size {height}×{width} is not a multiple of {SPATIAL_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Pixel coordinates (x, y) of the facial points the region metrics use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceLandmarks {
    pub left_eye_center: [f64; 2],
    pub right_eye_center: [f64; 2],
    /// Lateral (outer) corner of the left eye.
    pub left_eye_outer: [f64; 2],
    pub right_eye_outer: [f64; 2],
    pub mouth_left: [f64; 2],
    pub mouth_right: [f64; 2],
}

impl FaceLandmarks {
    pub fn inter_ocular(&self) -> f64 {
        let dx = self.right_eye_center[0] - self.left_eye_center[0];
        let dy = self.right_eye_center[1] - self.left_eye_center[1];
        dx.hypot(dy)
    }

    pub fn mouth_center(&self) -> [f64; 2] {
        [
            0.5 * (self.mouth_left[0] + self.mouth_right[0]),
            0.5 * (self.mouth_left[1] + self.mouth_right[1]),
        ]
    }

    /// Point-wise average, used when interpolating between two frames.
    pub fn midpoint(&self, other: &FaceLandmarks) -> FaceLandmarks {
        let mid = |a: [f64; 2], b: [f64; 2]| [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
        FaceLandmarks {
            left_eye_center: mid(self.left_eye_center, other.left_eye_center),
            right_eye_center: mid(self.right_eye_center, other.right_eye_center),
            left_eye_outer: mid(self.left_eye_outer, other.left_eye_outer),
            right_eye_outer: mid(self.right_eye_outer, other.right_eye_outer),
            mouth_left: mid(self.mouth_left, other.mouth_left),
            mouth_right: mid(self.mouth_right, other.mouth_right),
        }
    }
}

/// Ordered frames of one subject, all the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Vec<Frame>,
    pub subject_id: String,
    pub apparent_age: Option<AgeValue>,
    pub motion_seed: Option<u64>,
    /// Per-frame landmarks, when the producer knows them.
    pub landmarks: Option<Vec<FaceLandmarks>>,
}

impl VideoClip {
    pub fn new(subject_id: impl Into<String>, frames: Vec<Frame>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::validation("a clip needs at least one frame"))?;
        if let Some((i, _)) = frames.iter().enumerate().find(|(_, f)| !f.same_shape(first)) {
            return Err(Error::validation(format!(
                "frame {i} is {}×{}×{}, frame 0 is {}×{}×{}",
                frames[i].channels,
                frames[i].height,
                frames[i].width,
                first.channels,
                first.height,
                first.width
            )));
        }
        Ok(VideoClip {
            frames,
            subject_id: subject_id.into(),
            apparent_age: None,
            motion_seed: None,
            landmarks: None,
        })
    }

    pub fn with_age(mut self, age: AgeValue) -> Self {
        self.apparent_age = Some(age);
        self
    }

    pub fn with_motion_seed(mut self, seed: u64) -> Self {
        self.motion_seed = Some(seed);
        self
    }

    pub fn with_landmarks(mut self, landmarks: Vec<FaceLandmarks>) -> Result<Self> {
        if landmarks.len() != self.frames.len() {
            return Err(Error::validation(format!(
                "{} landmark sets for {} frames",
                landmarks.len(),
                self.frames.len()
            )));
        }
        self.landmarks = Some(landmarks);
        Ok(self)
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    /// Same metadata, new frames. Landmarks are kept only when counts match.
    pub fn with_frames(&self, frames: Vec<Frame>) -> Result<Self> {
        let mut clip = VideoClip::new(self.subject_id.clone(), frames)?;
        clip.apparent_age = self.apparent_age;
        clip.motion_seed = self.motion_seed;
        clip.landmarks = self
            .landmarks
            .clone()
            .filter(|l| l.len() == clip.frame_count());
        Ok(clip)
    }
}

/// Spatially constant plane holding a normalized age.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgeMask {
    pub height: usize,
    pub width: usize,
    value: f32,
}

impl AgeMask {
    pub fn value(&self) -> f32 {
        self.value
    }

    pub fn plane(&self) -> Vec<f32> {
        vec![self.value; self.height * self.width]
    }
}

pub fn make_age_mask(age: AgeValue, height: usize, width: usize) -> Result<AgeMask> {
    if height == 0 || width == 0 {
        return Err(Error::validation("mask dimensions must be positive"));
    }
    Ok(AgeMask {
        height,
        width,
        value: age.normalized() as f32,
    })
}

/// RGB frame with its input-age and target-age planes: five channels.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedFrame {
    pub frame: Frame,
    pub input_mask: AgeMask,
    pub target_mask: AgeMask,
}

impl MaskedFrame {
    pub const CHANNELS: usize = 5;

    pub fn channel_count(&self) -> usize {
        self.frame.channels() + 2
    }

    /// One channel as a flat `H × W` plane.
    pub fn channel(&self, index: usize) -> Vec<f32> {
        let rgb = self.frame.channels();
        let hw = self.frame.height() * self.frame.width();
        match index {
            i if i < rgb => self.frame.data()[i * hw..(i + 1) * hw].to_vec(),
            i if i == rgb => self.input_mask.plane(),
            i if i == rgb + 1 => self.target_mask.plane(),
            _ => panic!("channel {index} out of range"),
        }
    }

    /// The source frame, recovered from channels 0–2.
    pub fn rgb(&self) -> Frame {
        self.frame.clone()
    }

    /// `1 × 5 × H × W` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let mut data = self.frame.data().to_vec();
        data.extend(self.input_mask.plane());
        data.extend(self.target_mask.plane());
        let t = Tensor::from_vec(
            data,
            (1, self.channel_count(), self.frame.height(), self.frame.width()),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }
}

pub fn mask_frame(frame: &Frame, input_age: AgeValue, target_age: AgeValue) -> Result<MaskedFrame> {
    Ok(MaskedFrame {
        input_mask: make_age_mask(input_age, frame.height(), frame.width())?,
        target_mask: make_age_mask(target_age, frame.height(), frame.width())?,
        frame: frame.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn age(y: f64) -> AgeValue {
        AgeValue::new(y).unwrap()
    }

    #[test]
    fn age_bounds() {
        assert!(AgeValue::new(-0.1).is_err());
        assert!(AgeValue::new(100.1).is_err());
        assert!(AgeValue::new(f64::NAN).is_err());
        assert_eq!(age(0.0).normalized(), 0.0);
        assert_eq!(age(100.0).normalized(), 1.0);
    }

    #[test]
    fn age_deserialization_validates() {
        assert!(serde_json::from_str::<AgeValue>("101").is_err());
        assert_eq!(serde_json::from_str::<AgeValue>("85").unwrap(), age(85.0));
    }

    #[test]
    fn age_masks() {
        let m = make_age_mask(age(0.0), 4, 4).unwrap();
        assert_eq!(m.plane(), vec![0.0; 16]);
        let m = make_age_mask(age(100.0), 4, 4).unwrap();
        assert_eq!(m.plane(), vec![1.0; 16]);
        let m = make_age_mask(age(85.0), 64, 64).unwrap();
        assert_eq!(m.plane().len(), 64 * 64);
        assert!(m.plane().iter().all(|&v| v == 0.85f32));
        assert!(make_age_mask(age(10.0), 0, 4).is_err());
    }

    #[test]
    fn masked_frame_channels() {
        let frame = Frame::from_fn(64, 64, 3, |c, y, x| ((c + y * 3 + x) % 7) as f32 / 7.0).unwrap();
        let m = mask_frame(&frame, age(18.0), age(85.0)).unwrap();
        assert_eq!(m.channel_count(), 5);
        assert!(m.channel(3).iter().all(|&v| v == 0.18f32));
        assert!(m.channel(4).iter().all(|&v| v == 0.85f32));
        assert_eq!(m.rgb(), frame);

        let t = m.to_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 5, 64, 64]);
        let rgb = Frame::from_tensor(&t.narrow(1, 0, 3).unwrap()).unwrap();
        assert_eq!(rgb, frame);

        let same = mask_frame(&frame, age(18.0), age(18.0)).unwrap();
        assert_eq!(same.channel(3), same.channel(4));
    }

    #[test]
    fn frame_construction() {
        let f = Frame::new(16, 16, 3, vec![2.0; 768]).unwrap();
        assert!(f.data().iter().all(|&v| v == 1.0));
        assert!(Frame::new(16, 16, 3, vec![0.0; 10]).is_err());
        assert!(Frame::new(20, 16, 3, vec![0.0; 960]).is_err());
        assert!(Frame::new(16, 16, 3, vec![f32::NAN; 768]).is_err());
    }

    #[test]
    fn clip_requires_uniform_frames() {
        assert!(VideoClip::new("s", vec![]).is_err());
        let a = Frame::filled(16, 16, 3, 0.0).unwrap();
        let b = Frame::filled(32, 16, 3, 0.0).unwrap();
        assert!(VideoClip::new("s", vec![a.clone(), b]).is_err());
        assert_eq!(VideoClip::new("s", vec![a.clone(), a]).unwrap().frame_count(), 2);
    }

    proptest::proptest! {
        #[test]
        fn normalization_is_monotone(a in 0.0f64..=100.0, b in 0.0f64..=100.0) {
            let (na, nb) = (age(a).normalized(), age(b).normalized());
            proptest::prop_assert!((0.0..=1.0).contains(&na));
            if a < b {
                proptest::prop_assert!(na < nb);
            }
        }

        #[test]
        fn mask_planes_are_constant(years in 0.0f64..=100.0, h in 1usize..20, w in 1usize..20) {
            let frame = Frame::filled(16, 16, 3, 0.25).unwrap();
            let m = mask_frame(&frame, age(years), age(100.0 - years)).unwrap();
            for ch in [3, 4] {
                let plane = m.channel(ch);
                let max = plane.iter().cloned().fold(f32::MIN, f32::max);
                let min = plane.iter().cloned().fold(f32::MAX, f32::min);
                proptest::prop_assert_eq!(max - min, 0.0);
            }
            let mask = make_age_mask(age(years), h, w).unwrap();
            proptest::prop_assert_eq!(mask.plane().len(), h * w);
        }
    }
}
