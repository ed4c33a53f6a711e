use serde::{Deserialize, Serialize};

use crate::datamodel::{AgeValue, FaceLandmarks, Frame};
use crate::error::{Error, Result};
use crate::synthpipeline::{age_grid, render, FaceGeometry, IdentitySeed, PoseExpressionSample, EXPRESSION_DIMS};

/// Integer ages covered by an estimate's distribution.
pub const AGE_BINS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeEstimate {
    pub expected_age: f64,
    /// Weights over ages `0..=100`.
    pub distribution: Vec<f64>,
}

impl AgeEstimate {
    /// Normalizes `weights` and takes their mean as the expected age.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.len() != AGE_BINS {
            return Err(Error::validation(format!("age distribution needs {AGE_BINS} bins, got {}", weights.len())));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::validation("age weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::validation("age weights sum to zero"));
        }
        let distribution: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let expected_age = distribution.iter().enumerate().map(|(a, w)| a as f64 * w).sum();
        Ok(AgeEstimate {
            expected_age,
            distribution,
        })
    }

    /// All mass on the two integer ages around `age`, so the mean is exact.
    pub fn point(age: f64) -> Result<Self> {
        if !(0.0..=100.0).contains(&age) {
            return Err(Error::validation(format!("age {age} outside 0..=100")));
        }
        let lo = age.floor() as usize;
        let frac = age - lo as f64;
        let mut w = vec![0.0; AGE_BINS];
        w[lo] += 1.0 - frac;
        if frac > 0.0 {
            w[lo + 1] += frac;
        }
        let mut e = AgeEstimate::from_weights(w)?;
        e.expected_age = age;
        Ok(e)
    }

    /// Discretized normal centered on `mean`.
    pub fn gaussian(mean: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::validation("sigma must be positive"));
        }
        let w = (0..AGE_BINS)
            .map(|a| (-0.5 * ((a as f64 - mean) / sigma).powi(2)).exp())
            .collect();
        AgeEstimate::from_weights(w)
    }
}

pub trait AgeEstimator: Send + Sync {
    fn name(&self) -> &str;

    fn estimate(&self, frame: &Frame, landmarks: Option<&FaceLandmarks>) -> Result<AgeEstimate>;
}

fn luminance(frame: &Frame) -> Vec<f64> {
    let (h, w) = (frame.height(), frame.width());
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = if frame.channels() >= 3 {
                0.299 * frame.get(0, y, x) as f64 + 0.587 * frame.get(1, y, x) as f64 + 0.114 * frame.get(2, y, x) as f64
            } else {
                frame.get(0, y, x) as f64
            };
        }
    }
    out
}

/// Wrinkle zones in inter-ocular units: crow's feet beyond each lateral eye
/// corner and cheeks below each eye, matching the procedural renderer's
/// layout (its inter-ocular distance is about 0.56 normalized units).
const CROW_OFFSET: f64 = 0.214;
const CHEEK_DROP: f64 = 0.393;
const ZONE_RADIUS: f64 = 0.157;

/// Mean squared high-pass luminance (pixel minus 3×3 binomial blur) inside
/// the four wrinkle zones, averaged over zones.
pub fn wrinkle_band_energy(frame: &Frame, landmarks: &FaceLandmarks) -> Result<f64> {
    let (h, w) = (frame.height(), frame.width());
    if h < 3 || w < 3 {
        return Err(Error::validation("frame too small for wrinkle energy"));
    }
    let lum = luminance(frame);
    let at = |y: isize, x: isize| lum[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    const K: [f64; 3] = [0.25, 0.5, 0.25];
    let high = |y: usize, x: usize| {
        let mut blur = 0.0;
        for (i, ky) in K.iter().enumerate() {
            for (j, kx) in K.iter().enumerate() {
                blur += ky * kx * at(y as isize + i as isize - 1, x as isize + j as isize - 1);
            }
        }
        lum[y * w + x] - blur
    };
    let iod = landmarks.inter_ocular();
    if !(iod > 0.0) {
        return Err(Error::validation("degenerate landmarks"));
    }
    let (l, r) = (landmarks.left_eye_center, landmarks.right_eye_center);
    let across = [(r[0] - l[0]) / iod, (r[1] - l[1]) / iod];
    let down = [-across[1], across[0]];
    let shift = |p: [f64; 2], d: [f64; 2], k: f64| [p[0] + k * iod * d[0], p[1] + k * iod * d[1]];
    let radius = [ZONE_RADIUS * iod; 2];
    let zones = [
        (shift(landmarks.left_eye_outer, across, -CROW_OFFSET), radius),
        (shift(landmarks.right_eye_outer, across, CROW_OFFSET), radius),
        (shift(l, down, CHEEK_DROP), radius),
        (shift(r, down, CHEEK_DROP), radius),
    ];
    let mut total = 0.0;
    for (c, r) in zones {
        let (mut sum, mut n) = (0.0, 0usize);
        let y0 = (c[1] - r[1]).floor().max(0.0) as usize;
        let y1 = ((c[1] + r[1]).ceil().max(0.0) as usize).min(h - 1);
        let x0 = (c[0] - r[0]).floor().max(0.0) as usize;
        let x1 = ((c[0] + r[0]).ceil().max(0.0) as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = ((x as f64 - c[0]) / r[0], (y as f64 - c[1]) / r[1]);
                if dx * dx + dy * dy <= 1.0 {
                    sum += high(y, x).powi(2);
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Err(Error::validation("wrinkle zone lies outside the frame"));
        }
        total += sum / n as f64;
    }
    Ok(total / zones.len() as f64)
}

/// Age from wrinkle-band energy through a calibration table of
/// (age, mean energy) pairs measured on neutral procedural renders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WrinkleEnergyEstimator {
    /// Ascending ages with non-decreasing energies.
    pub table: Vec<(f64, f64)>,
    pub sigma: f64,
}

impl WrinkleEnergyEstimator {
    pub fn calibrate(resolution: usize, identities: &[IdentitySeed], ages: &[AgeValue], sigma: f64) -> Result<Self> {
        if identities.is_empty() || ages.len() < 2 {
            return Err(Error::config("calibration needs identities and at least two ages"));
        }
        let neutral = PoseExpressionSample::neutral(EXPRESSION_DIMS);
        let mut table = Vec::with_capacity(ages.len());
        let mut floor = f64::MIN;
        for &age in ages {
            let mut e = 0.0;
            for &id in identities {
                let (frame, lm) = render(&FaceGeometry::from_seed(id), age, &neutral, resolution)?;
                e += wrinkle_band_energy(&frame, &lm)?;
            }
            floor = floor.max(e / identities.len() as f64);
            table.push((age.years(), floor));
        }
        Ok(WrinkleEnergyEstimator { table, sigma })
    }

    /// Twelve ages over the renderer's ramp, eight identities not used by
    /// the default dataset seeds.
    pub fn procedural(resolution: usize) -> Result<Self> {
        let ids: Vec<IdentitySeed> = (0..8).map(|i| IdentitySeed(0x5eed_0000 + i)).collect();
        WrinkleEnergyEstimator::calibrate(resolution, &ids, &age_grid(12, 18.0, 85.0)?, 3.0)
    }

    /// Piecewise-linear inverse of the table, clamped to its age range.
    pub fn age_for_energy(&self, energy: f64) -> f64 {
        let (first, last) = (self.table[0], self.table[self.table.len() - 1]);
        if energy <= first.1 {
            return first.0;
        }
        if energy >= last.1 {
            return last.0;
        }
        for pair in self.table.windows(2) {
            let ((a0, e0), (a1, e1)) = (pair[0], pair[1]);
            if energy <= e1 && e1 > e0 {
                return a0 + (a1 - a0) * (energy - e0) / (e1 - e0);
            }
        }
        last.0
    }
}

impl AgeEstimator for WrinkleEnergyEstimator {
    fn name(&self) -> &str {
        "wrinkle_energy"
    }

    fn estimate(&self, frame: &Frame, landmarks: Option<&FaceLandmarks>) -> Result<AgeEstimate> {
        let lm = landmarks.ok_or_else(|| Error::Backend {
            backend: self.name().into(),
            reason: "needs landmarks to locate wrinkle zones".into(),
        })?;
        AgeEstimate::gaussian(self.age_for_energy(wrinkle_band_energy(frame, lm)?), self.sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthpipeline::PoseBounds;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn estimates_are_normalized() {
        for e in [AgeEstimate::point(37.25).unwrap(), AgeEstimate::gaussian(2.0, 5.0).unwrap()] {
            assert!((e.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(e.distribution.iter().all(|w| *w >= 0.0));
        }
        assert_eq!(AgeEstimate::point(37.25).unwrap().expected_age, 37.25);
        assert!(AgeEstimate::from_weights(vec![0.0; AGE_BINS]).is_err());
        assert!(AgeEstimate::point(101.0).is_err());
    }

    #[test]
    fn calibrated_estimator_tracks_rendered_age() {
        let est = WrinkleEnergyEstimator::procedural(64).unwrap();
        assert!(est.table.windows(2).all(|p| p[1].1 >= p[0].1));
        let bounds = PoseBounds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut err = 0.0;
        let mut n = 0.0;
        for id in 0..4u64 {
            let g = FaceGeometry::from_seed(IdentitySeed(id));
            for years in [18.0, 50.0, 85.0] {
                let pose = PoseExpressionSample::sample(&mut rng, &bounds);
                let (f, lm) = render(&g, AgeValue::new(years).unwrap(), &pose, 64).unwrap();
                err += (est.estimate(&f, Some(&lm)).unwrap().expected_age - years).abs();
                n += 1.0;
            }
        }
        assert!(err / n < 5.0, "mean error {}", err / n);
    }
}
