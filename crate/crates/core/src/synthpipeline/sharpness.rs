//! No-reference sharpness: a cumulative probability of blur detection over
//! horizontal edge widths.

use crate::datamodel::{Frame, VideoClip};
use crate::error::{Error, Result};

pub trait SharpnessEstimator: Send + Sync {
    fn name(&self) -> &str;

    /// Score in `[0, 1]`; higher is sharper.
    fn score(&self, frame: &Frame) -> Result<f64>;
}

/// Edge-width statistic in the style of CPBD.
///
/// Edge pixels are horizontal Sobel maxima above `edge_fraction` of the
/// frame's strongest response. Each edge's width is the length of the
/// monotone intensity run through it along the row; the just-noticeable
/// width is 5 in low-contrast blocks and 3 otherwise. The score is the
/// fraction of edges whose blur probability `1 − exp(−(w / w_jnb)^β)` stays
/// at or below `P_JNB`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeWidthSharpness {
    pub edge_fraction: f64,
    pub block: usize,
    pub low_contrast: f64,
    pub beta: f64,
}

pub const P_JNB: f64 = 0.63;

impl Default for EdgeWidthSharpness {
    fn default() -> Self {
        EdgeWidthSharpness {
            edge_fraction: 0.1,
            block: 8,
            low_contrast: 50.0,
            beta: 3.6,
        }
    }
}

fn luminance_255(frame: &Frame) -> Vec<f64> {
    let (h, w) = (frame.height(), frame.width());
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = if frame.channels() >= 3 {
                0.299 * frame.get(0, y, x) as f64 + 0.587 * frame.get(1, y, x) as f64 + 0.114 * frame.get(2, y, x) as f64
            } else {
                frame.get(0, y, x) as f64
            };
            out[y * w + x] = (l + 1.0) * 127.5;
        }
    }
    out
}

impl SharpnessEstimator for EdgeWidthSharpness {
    fn name(&self) -> &str {
        "edge_width"
    }

    fn score(&self, frame: &Frame) -> Result<f64> {
        let (h, w) = (frame.height(), frame.width());
        let lum = luminance_255(frame);
        let at = |y: usize, x: usize| lum[y * w + x];
        let mut gx = vec![0.0f64; h * w];
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                gx[y * w + x] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                    - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            }
        }
        let peak = gx.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak == 0.0 {
            return Ok(0.0);
        }
        let threshold = self.edge_fraction * peak;
        let (mut edges, mut sharp) = (0usize, 0usize);
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let g = gx[y * w + x];
                let a = g.abs();
                if a < threshold || a < gx[y * w + x - 1].abs() || a < gx[y * w + x + 1].abs() {
                    continue;
                }
                let rising = g > 0.0;
                let step = |from: f64, to: f64| if rising { to > from } else { to < from };
                let mut left = x;
                while left > 0 && step(at(y, left - 1), at(y, left)) {
                    left -= 1;
                }
                let mut right = x;
                while right + 1 < w && step(at(y, right), at(y, right + 1)) {
                    right += 1;
                }
                let width = (right - left).max(1) as f64;
                let (by, bx) = (y / self.block * self.block, x / self.block * self.block);
                let (mut lo, mut hi) = (f64::MAX, f64::MIN);
                for yy in by..(by + self.block).min(h) {
                    for xx in bx..(bx + self.block).min(w) {
                        lo = lo.min(at(yy, xx));
                        hi = hi.max(at(yy, xx));
                    }
                }
                let jnb = if hi - lo <= self.low_contrast { 5.0 } else { 3.0 };
                let p_blur = 1.0 - (-(width / jnb).powf(self.beta)).exp();
                edges += 1;
                sharp += (p_blur <= P_JNB) as usize;
            }
        }
        if edges == 0 {
            return Ok(0.0);
        }
        Ok(sharp as f64 / edges as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharpnessVerdict {
    pub accepted: bool,
    /// Mean per-frame score.
    pub score: f64,
    pub per_frame: Vec<f64>,
}

/// Accepts `clip` iff its mean per-frame score is at least `threshold`.
pub fn sharpness_filter(clip: &VideoClip, estimator: &dyn SharpnessEstimator, threshold: f64) -> Result<SharpnessVerdict> {
    let per_frame = clip
        .frames()
        .iter()
        .map(|f| {
            let s = estimator.score(f)?;
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Backend {
                    backend: estimator.name().into(),
                    reason: format!("score {s} outside [0, 1]"),
                });
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let score = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok(SharpnessVerdict {
        accepted: score >= threshold,
        score,
        per_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(cell: usize) -> Frame {
        Frame::from_fn(64, 64, 3, |_, y, x| if (y / cell + x / cell) % 2 == 0 { 0.8 } else { -0.8 }).unwrap()
    }

    /// Separable Gaussian blur with replicate borders.
    fn gaussian_blur(f: &Frame, sigma: f64) -> Frame {
        let r = (3.0 * sigma).ceil() as isize;
        let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let norm: f64 = k.iter().sum();
        let (h, w) = (f.height() as isize, f.width() as isize);
        let pass = |src: &dyn Fn(usize, isize, isize) -> f64, horizontal: bool| {
            let mut out = vec![0f32; 3 * (h * w) as usize];
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for (j, kv) in k.iter().enumerate() {
                            let o = j as isize - r;
                            let (yy, xx) = if horizontal { (y, (x + o).clamp(0, w - 1)) } else { ((y + o).clamp(0, h - 1), x) };
                            acc += kv * src(c, yy, xx);
                        }
                        out[(c as isize * h * w + y * w + x) as usize] = (acc / norm) as f32;
                    }
                }
            }
            out
        };
        let first = pass(&|c, y, x| f.get(c, y as usize, x as usize) as f64, true);
        let tmp = Frame::new(f.height(), f.width(), 3, first).unwrap();
        let second = pass(&|c, y, x| tmp.get(c, y as usize, x as usize) as f64, false);
        Frame::new(f.height(), f.width(), 3, second).unwrap()
    }

    #[test]
    fn checkerboard_is_sharp_and_blur_is_not() {
        let est = EdgeWidthSharpness::default();
        let sharp = est.score(&checkerboard(8)).unwrap();
        let blurred = est.score(&gaussian_blur(&checkerboard(8), 3.0)).unwrap();
        assert_eq!(sharp, 1.0);
        assert!(blurred < 0.5, "{blurred}");
        let clip = |f: Frame| VideoClip::new("c", vec![f; 3]).unwrap();
        assert!(sharpness_filter(&clip(checkerboard(8)), &est, 0.5).unwrap().accepted);
        let verdict = sharpness_filter(&clip(gaussian_blur(&checkerboard(8), 3.0)), &est, 0.5).unwrap();
        assert!(!verdict.accepted);
        assert!(sharpness_filter(&clip(gaussian_blur(&checkerboard(8), 3.0)), &est, 0.0).unwrap().accepted);
    }

    #[test]
    fn flat_frame_scores_zero() {
        let est = EdgeWidthSharpness::default();
        assert_eq!(est.score(&Frame::filled(16, 16, 3, 0.2).unwrap()).unwrap(), 0.0);
    }
}
