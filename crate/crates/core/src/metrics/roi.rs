use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::datamodel::{FaceLandmarks, Frame, VideoClip};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    LeftEye,
    RightEye,
    Mouth,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::LeftEye, Region::RightEye, Region::Mouth];

    pub fn name(self) -> &'static str {
        match self {
            Region::LeftEye => "left_eye",
            Region::RightEye => "right_eye",
            Region::Mouth => "mouth",
        }
    }
}

/// Square pixel box; `x`, `y` are the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

impl RoiBox {
    /// Box of `side` centered on `center`, shifted to lie inside `h × w`.
    pub fn centered(center: [f64; 2], side: usize, h: usize, w: usize) -> Result<Self> {
        if side == 0 || side > h || side > w {
            return Err(Error::validation(format!("ROI side {side} does not fit a {h}×{w} frame")));
        }
        let place = |c: f64, len: usize| {
            let start = (c - side as f64 / 2.0 + 0.5).floor();
            start.clamp(0.0, (len - side) as f64) as usize
        };
        Ok(RoiBox {
            x: place(center[0], w),
            y: place(center[1], h),
            side,
        })
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.side > 0 && self.x + self.side <= w && self.y + self.side <= h
    }
}

/// One region's box in every frame of a clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub region: Region,
    pub boxes: Vec<RoiBox>,
}

/// Box size rule: side = `side_fraction` × inter-ocular distance, at least
/// `min_side` pixels. The side is fixed per clip (mean inter-ocular
/// distance over its frames) so crops of one region are comparable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiGeometry {
    pub side_fraction: f64,
    pub min_side: usize,
}

impl Default for RoiGeometry {
    fn default() -> Self {
        RoiGeometry {
            side_fraction: 0.25,
            min_side: 8,
        }
    }
}

pub trait LandmarkBackend: Send + Sync {
    fn name(&self) -> &str;

    /// One set of landmarks per frame.
    fn landmarks(&self, clip: &VideoClip) -> Result<Vec<FaceLandmarks>>;
}

/// Landmarks stored with the clip (the procedural pipeline writes them).
#[derive(Debug, Clone, Copy, Default)]
pub struct ClipSidecar;

impl LandmarkBackend for ClipSidecar {
    fn name(&self) -> &str {
        "sidecar"
    }

    fn landmarks(&self, clip: &VideoClip) -> Result<Vec<FaceLandmarks>> {
        let lm = clip
            .landmarks
            .as_ref()
            .ok_or_else(|| Error::validation(format!("clip {} carries no landmarks", clip.subject_id)))?;
        if lm.len() != clip.frame_count() {
            return Err(Error::validation(format!(
                "clip {} has {} landmark sets for {} frames",
                clip.subject_id,
                lm.len(),
                clip.frame_count()
            )));
        }
        Ok(lm.clone())
    }
}

/// The same landmarks for every frame.
#[derive(Debug, Clone, Copy)]
pub struct FixedLandmarks(pub FaceLandmarks);

impl LandmarkBackend for FixedLandmarks {
    fn name(&self) -> &str {
        "fixed"
    }

    fn landmarks(&self, clip: &VideoClip) -> Result<Vec<FaceLandmarks>> {
        Ok(vec![self.0; clip.frame_count()])
    }
}

/// Eye boxes centered on the lateral eye corners, the mouth box on the
/// midpoint of the mouth corners.
pub fn extract_rois(landmarks: &[FaceLandmarks], geometry: &RoiGeometry, h: usize, w: usize) -> Result<[RoiSpec; 3]> {
    if landmarks.is_empty() {
        return Err(Error::validation("no landmarks"));
    }
    if !(geometry.side_fraction > 0.0) {
        return Err(Error::config("ROI side fraction must be positive"));
    }
    let iod = landmarks.iter().map(FaceLandmarks::inter_ocular).sum::<f64>() / landmarks.len() as f64;
    let side = ((geometry.side_fraction * iod).round() as usize).max(geometry.min_side).max(1);
    let spec = |region: Region| -> Result<RoiSpec> {
        let boxes = landmarks
            .iter()
            .map(|l| {
                let c = match region {
                    Region::LeftEye => l.left_eye_outer,
                    Region::RightEye => l.right_eye_outer,
                    Region::Mouth => l.mouth_center(),
                };
                RoiBox::centered(c, side, h, w)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RoiSpec { region, boxes })
    };
    Ok([spec(Region::LeftEye)?, spec(Region::RightEye)?, spec(Region::Mouth)?])
}

pub fn clip_rois(clip: &VideoClip, backend: &dyn LandmarkBackend, geometry: &RoiGeometry) -> Result<[RoiSpec; 3]> {
    let lm = backend.landmarks(clip)?;
    if lm.len() != clip.frame_count() {
        return Err(Error::Backend {
            backend: backend.name().into(),
            reason: format!("{} landmark sets for {} frames", lm.len(), clip.frame_count()),
        });
    }
    extract_rois(&lm, geometry, clip.height(), clip.width())
}

/// The box's pixels as a `1 × C × side × side` f64 tensor.
pub fn crop(frame: &Frame, b: RoiBox) -> Result<Tensor> {
    if !b.fits(frame.height(), frame.width()) {
        return Err(Error::validation(format!(
            "box {b:?} outside {}×{} frame",
            frame.height(),
            frame.width()
        )));
    }
    let ch = frame.channels();
    let mut data = Vec::with_capacity(ch * b.side * b.side);
    for c in 0..ch {
        for y in 0..b.side {
            for x in 0..b.side {
                data.push(frame.get(c, b.y + y, b.x + x) as f64);
            }
        }
    }
    Ok(Tensor::from_vec(data, (1, ch, b.side, b.side), &Device::Cpu)?)
}

/// Copy of `frame` with one-pixel outlines: red, green, blue for left eye,
/// right eye, mouth.
pub fn draw_rois(frame: &Frame, boxes: &[RoiBox]) -> Result<Frame> {
    const COLORS: [[f32; 3]; 3] = [[1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
    let (h, w, ch) = (frame.height(), frame.width(), frame.channels());
    let mut data = frame.data().to_vec();
    for (i, b) in boxes.iter().enumerate() {
        let color = COLORS[i % 3];
        let (x1, y1) = ((b.x + b.side - 1).min(w - 1), (b.y + b.side - 1).min(h - 1));
        for y in b.y..=y1 {
            for x in b.x..=x1 {
                if y == b.y || y == y1 || x == b.x || x == x1 {
                    for (c, v) in color.iter().enumerate().take(ch) {
                        data[c * h * w + y * w + x] = *v;
                    }
                }
            }
        }
    }
    Frame::new(h, w, ch, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(shift: f64) -> FaceLandmarks {
        FaceLandmarks {
            left_eye_center: [20.0 + shift, 24.0],
            right_eye_center: [44.0 + shift, 24.0],
            left_eye_outer: [14.0 + shift, 24.0],
            right_eye_outer: [50.0 + shift, 24.0],
            mouth_left: [26.0 + shift, 46.0],
            mouth_right: [38.0 + shift, 46.0],
        }
    }

    #[test]
    fn boxes_follow_landmarks_and_stay_inside() {
        let rois = extract_rois(&[lm(0.0), lm(30.0)], &RoiGeometry::default(), 64, 64).unwrap();
        // 0.25 × 24 = 6 < 8, so the floor applies.
        assert!(rois.iter().all(|r| r.boxes.iter().all(|b| b.side == 8 && b.fits(64, 64))));
        assert_eq!(rois[0].boxes[0], RoiBox { x: 10, y: 20, side: 8 });
        assert_eq!(rois[2].boxes[0], RoiBox { x: 28, y: 42, side: 8 });
        // right eye at x = 80 is pushed back inside.
        assert_eq!(rois[1].boxes[1].x, 56);
        let wide = RoiGeometry {
            side_fraction: 0.5,
            min_side: 1,
        };
        assert_eq!(extract_rois(&[lm(0.0)], &wide, 64, 64).unwrap()[0].boxes[0].side, 12);
    }

    #[test]
    fn oversized_box_is_rejected() {
        assert!(RoiBox::centered([4.0, 4.0], 9, 8, 8).is_err());
    }

    #[test]
    fn crop_reads_the_box() {
        let f = Frame::from_fn(16, 16, 3, |c, y, x| (c * 256 + y * 16 + x) as f32 / 1000.0).unwrap();
        let b = RoiBox { x: 3, y: 5, side: 4 };
        let c = crop(&f, b).unwrap();
        assert_eq!(c.dims(), &[1, 3, 4, 4]);
        let v = c.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v[16 + 2 * 4 + 3], f.get(1, 7, 6) as f64);
        assert!(crop(&f, RoiBox { x: 14, y: 0, side: 4 }).is_err());
    }
}
