//! Deterministic face-like renderer.
//!
//! Geometry lives in normalized canonical coordinates (`[-1, 1]²`, y down).
//! A pixel is shaded by mapping it back through the pose (affine) and the
//! expression field into canonical space, so every frame is rendered
//! analytically without resampling.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{IdentitySeed, MotionFrame, PoseExpressionSample, Still};
use super::{InterpolationBackend, KeyframeBackend, StillBackend};
use crate::datamodel::{AgeValue, FaceLandmarks, Frame};
use crate::error::Result;

/// Youngest and oldest age of the wrinkle ramp.
pub const AGE_RAMP: (f64, f64) = (18.0, 85.0);
/// Wrinkle stripe period in normalized units.
pub const WRINKLE_PERIOD: f64 = 0.095;
const WRINKLE_AMPLITUDE: f64 = 0.6;
/// Wrinkle zone layout in normalized units.
pub const CROW_OFFSET: f64 = 0.12;
pub const CHEEK_DROP: f64 = 0.22;
pub const ZONE_RADIUS: f64 = 0.11;
/// Expression coefficients understood by the renderer.
pub const EXPRESSION_DIMS: usize = 4;

/// Low-frequency identity parameters; independent of age.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceGeometry {
    pub center: [f64; 2],
    pub radii: [f64; 2],
    pub eye_dx: f64,
    pub eye_y: f64,
    pub eye_size: [f64; 2],
    pub mouth_y: f64,
    pub mouth_size: [f64; 2],
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub iris: [f64; 3],
    pub lips: [f64; 3],
    pub background: [f64; 3],
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

impl FaceGeometry {
    pub fn from_seed(seed: IdentitySeed) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.0);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let cx = u(-0.04, 0.04);
        let cy = u(0.0, 0.08);
        let radii = [u(0.64, 0.72), u(0.78, 0.88)];
        let eye_dx = u(0.26, 0.30);
        let eye_y = cy + u(-0.16, -0.10);
        let eye_size = [u(0.09, 0.11), u(0.045, 0.06)];
        let mouth_y = cy + u(0.36, 0.44);
        let mouth_size = [u(0.17, 0.22), u(0.04, 0.06)];
        let tone = u(0.0, 1.0);
        let skin = lerp3([0.75, 0.35, 0.15], [0.05, -0.35, -0.55], tone);
        let hair = [u(-0.9, -0.2), u(-0.9, -0.5), u(-0.95, -0.6)];
        let iris = [u(-0.7, 0.0), u(-0.6, 0.1), u(-0.6, 0.2)];
        let lips = [u(0.2, 0.5), u(-0.6, -0.3), u(-0.5, -0.2)];
        let background = [u(-0.4, 0.4), u(-0.4, 0.4), u(-0.4, 0.4)];
        FaceGeometry {
            center: [cx, cy],
            radii,
            eye_dx,
            eye_y,
            eye_size,
            mouth_y,
            mouth_size,
            skin,
            hair,
            iris,
            lips,
            background,
        }
    }

    fn eye_center(&self, side: f64) -> [f64; 2] {
        [self.center[0] + side * self.eye_dx, self.eye_y]
    }

    fn eye_outer(&self, side: f64) -> [f64; 2] {
        [self.center[0] + side * (self.eye_dx + self.eye_size[0]), self.eye_y]
    }

    fn mouth_corner(&self, side: f64) -> [f64; 2] {
        [self.center[0] + side * self.mouth_size[0], self.mouth_y]
    }

    /// Centers and radii of the four wrinkle zones, all on plain skin:
    /// crow's feet beyond each outer eye corner, then one cheek zone below
    /// each eye.
    pub fn wrinkle_zones(&self) -> [([f64; 2], [f64; 2]); 4] {
        let crow = |side: f64| {
            let o = self.eye_outer(side);
            ([o[0] + side * CROW_OFFSET, o[1]], [ZONE_RADIUS; 2])
        };
        let cheek = |side: f64| {
            let e = self.eye_center(side);
            ([e[0], e[1] + CHEEK_DROP], [ZONE_RADIUS; 2])
        };
        [crow(-1.0), crow(1.0), cheek(-1.0), cheek(1.0)]
    }
}

/// `0` at 18 years or younger, `1` at 85 or older.
pub fn age_ramp(age: AgeValue) -> f64 {
    ((age.years() - AGE_RAMP.0) / (AGE_RAMP.1 - AGE_RAMP.0)).clamp(0.0, 1.0)
}

fn bump(q: [f64; 2], c: [f64; 2], r: [f64; 2]) -> f64 {
    let dx = (q[0] - c[0]) / r[0];
    let dy = (q[1] - c[1]) / r[1];
    let d = dx * dx + dy * dy;
    if d >= 1.0 {
        0.0
    } else {
        (1.0 - d) * (1.0 - d)
    }
}

fn inside(q: [f64; 2], c: [f64; 2], r: [f64; 2]) -> f64 {
    let dx = (q[0] - c[0]) / r[0];
    let dy = (q[1] - c[1]) / r[1];
    dx * dx + dy * dy
}

/// Expression displacement at canonical point `q`.
fn expression_field(g: &FaceGeometry, e: &[f64], q: [f64; 2]) -> [f64; 2] {
    let coef = |k: usize| e.get(k).copied().unwrap_or(0.0);
    let mouth = [g.center[0], g.mouth_y];
    let mut d = [0.0, 0.0];
    // open jaw
    d[1] += coef(0) * 0.05 * bump(q, mouth, [0.3, 0.3]) * ((q[1] - g.mouth_y) / 0.05).tanh();
    // smile
    for side in [-1.0, 1.0] {
        let b = coef(1) * bump(q, g.mouth_corner(side), [0.2, 0.2]);
        d[0] += b * 0.04 * side;
        d[1] -= b * 0.03;
    }
    // brow raise
    d[1] -= coef(2) * 0.04 * bump(q, [g.center[0], g.eye_y - 0.12], [0.45, 0.2]);
    // squint
    for side in [-1.0, 1.0] {
        let c = g.eye_center(side);
        d[1] += coef(3) * 0.3 * (c[1] - q[1]) * bump(q, c, [0.2, 0.15]);
    }
    d
}

/// Affine part of a pose: `p = M (q − c) + c + t` in normalized units.
struct PoseMap {
    m: [[f64; 2]; 2],
    inv: [[f64; 2]; 2],
    c: [f64; 2],
    t: [f64; 2],
}

impl PoseMap {
    fn new(g: &FaceGeometry, pose: &PoseExpressionSample) -> Self {
        let [yaw, pitch, roll] = pose.rotation;
        let (s, co) = roll.sin_cos();
        let (sx, sy) = (yaw.cos(), pitch.cos());
        let m = [[co * sx, -s * sy], [s * sx, co * sy]];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        let t = [
            2.0 * pose.translation[0] + 0.15 * yaw.sin(),
            2.0 * pose.translation[1] + 0.15 * pitch.sin(),
        ];
        PoseMap {
            m,
            inv,
            c: g.center,
            t,
        }
    }

    fn forward(&self, q: [f64; 2]) -> [f64; 2] {
        let v = [q[0] - self.c[0], q[1] - self.c[1]];
        [
            self.m[0][0] * v[0] + self.m[0][1] * v[1] + self.c[0] + self.t[0],
            self.m[1][0] * v[0] + self.m[1][1] * v[1] + self.c[1] + self.t[1],
        ]
    }

    fn inverse(&self, p: [f64; 2]) -> [f64; 2] {
        let v = [p[0] - self.c[0] - self.t[0], p[1] - self.c[1] - self.t[1]];
        [
            self.inv[0][0] * v[0] + self.inv[0][1] * v[1] + self.c[0],
            self.inv[1][0] * v[0] + self.inv[1][1] * v[1] + self.c[1],
        ]
    }
}

fn shade(g: &FaceGeometry, age_t: f64, u: [f64; 2]) -> [f64; 3] {
    let mut col = lerp3(g.background, [g.background[0] - 0.2; 3], (u[1] + 1.0) * 0.25);
    let hair = lerp3(g.hair, [0.55, 0.55, 0.55], 0.75 * age_t);
    let face_r = inside(u, g.center, g.radii);
    if u[1] < g.center[1] - 0.4 * g.radii[1] && inside(u, g.center, [g.radii[0] * 1.12, g.radii[1] * 1.12]) <= 1.0 {
        col = hair;
    }
    if face_r > 1.0 {
        return col;
    }
    col = g.skin;
    let nose = [g.center[0], 0.5 * (g.eye_y + g.mouth_y) + 0.05];
    if inside(u, nose, [0.05, 0.03]) <= 1.0 {
        col = col.map(|c| c - 0.25);
    }
    for side in [-1.0, 1.0] {
        let e = g.eye_center(side);
        if (u[0] - e[0]).abs() < g.eye_size[0] * 1.2 && (u[1] - (g.eye_y - 0.11)).abs() < 0.025 {
            col = hair.map(|c| c - 0.1);
        }
        if inside(u, e, g.eye_size) <= 1.0 {
            let r = g.eye_size[1] * 0.9;
            let d2 = inside(u, e, [r, r]);
            col = if d2 <= 0.16 {
                [-0.9; 3]
            } else if d2 <= 1.0 {
                g.iris
            } else {
                [0.85; 3]
            };
        }
    }
    if inside(u, [g.center[0], g.mouth_y], g.mouth_size) <= 1.0 {
        col = g.lips;
    }
    if age_t > 0.0 {
        let zones = g.wrinkle_zones();
        let mut w = 0.0;
        for (i, (c, r)) in zones.iter().enumerate() {
            let b = bump(u, *c, *r);
            if b == 0.0 {
                continue;
            }
            let phase = if i < 2 { u[1] - g.eye_y } else { u[0] - c[0] };
            w += b * (0.5 + 0.5 * (2.0 * PI * phase / WRINKLE_PERIOD).sin());
        }
        let dark = WRINKLE_AMPLITUDE * age_t * w;
        col = col.map(|c| c - dark);
    }
    col
}

fn to_pixel(q: [f64; 2], resolution: usize) -> [f64; 2] {
    let r = resolution as f64;
    [(q[0] + 1.0) * 0.5 * r - 0.5, (q[1] + 1.0) * 0.5 * r - 0.5]
}

/// Renders one frame and its analytic landmarks.
pub fn render(
    g: &FaceGeometry,
    age: AgeValue,
    pose: &PoseExpressionSample,
    resolution: usize,
) -> Result<(Frame, FaceLandmarks)> {
    let map = PoseMap::new(g, pose);
    let age_t = age_ramp(age);
    let r = resolution as f64;
    let mut data = vec![0f32; 3 * resolution * resolution];
    let plane = resolution * resolution;
    for py in 0..resolution {
        for px in 0..resolution {
            let p = [(px as f64 + 0.5) / r * 2.0 - 1.0, (py as f64 + 0.5) / r * 2.0 - 1.0];
            let q = map.inverse(p);
            let d = expression_field(g, &pose.expression, q);
            let col = shade(g, age_t, [q[0] - d[0], q[1] - d[1]]);
            for (c, v) in col.iter().enumerate() {
                data[c * plane + py * resolution + px] = *v as f32;
            }
        }
    }
    let land = |q: [f64; 2]| {
        let d = expression_field(g, &pose.expression, q);
        to_pixel(map.forward([q[0] + d[0], q[1] + d[1]]), resolution)
    };
    let landmarks = FaceLandmarks {
        left_eye_center: land(g.eye_center(-1.0)),
        right_eye_center: land(g.eye_center(1.0)),
        left_eye_outer: land(g.eye_outer(-1.0)),
        right_eye_outer: land(g.eye_outer(1.0)),
        mouth_left: land(g.mouth_corner(-1.0)),
        mouth_right: land(g.mouth_corner(1.0)),
    };
    Ok((Frame::new(resolution, resolution, 3, data)?, landmarks))
}

/// Procedural implementation of all three pipeline stages. Interpolation
/// re-renders at the mean pose, so intermediates are as sharp as keyframes.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProceduralBackend;

impl StillBackend for ProceduralBackend {
    fn name(&self) -> &str {
        "procedural"
    }

    fn synthesize(&self, identity: IdentitySeed, age: AgeValue, resolution: usize) -> Result<Still> {
        let neutral = PoseExpressionSample::neutral(EXPRESSION_DIMS);
        let (frame, landmarks) = render(&FaceGeometry::from_seed(identity), age, &neutral, resolution)?;
        Ok(Still {
            identity,
            age,
            frame,
            landmarks,
        })
    }
}

impl KeyframeBackend for ProceduralBackend {
    fn name(&self) -> &str {
        "procedural"
    }

    fn keyframe(&self, still: &Still, sample: &PoseExpressionSample) -> Result<MotionFrame> {
        let g = FaceGeometry::from_seed(still.identity);
        let (frame, landmarks) = render(&g, still.age, sample, still.frame.height())?;
        Ok(MotionFrame {
            frame,
            landmarks,
            pose: sample.clone(),
        })
    }
}

impl InterpolationBackend for ProceduralBackend {
    fn name(&self) -> &str {
        "procedural"
    }

    fn midpoint(&self, still: &Still, a: &MotionFrame, b: &MotionFrame) -> Result<MotionFrame> {
        self.keyframe(still, &a.pose.midpoint(&b.pose))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn age(y: f64) -> AgeValue {
        AgeValue::new(y).unwrap()
    }

    /// Mean squared 4-neighbour Laplacian of luminance over a box.
    fn band_energy(f: &Frame, c: [f64; 2], half: usize) -> f64 {
        let lum = |y: usize, x: usize| (0..3).map(|ch| f.get(ch, y, x) as f64).sum::<f64>() / 3.0;
        let (cx, cy) = (c[0].round() as usize, c[1].round() as usize);
        let mut sum = 0.0;
        let mut n = 0;
        for y in cy - half..=cy + half {
            for x in cx - half..=cx + half {
                let l = 4.0 * lum(y, x) - lum(y - 1, x) - lum(y + 1, x) - lum(y, x - 1) - lum(y, x + 1);
                sum += l * l;
                n += 1;
            }
        }
        sum / n as f64
    }

    #[test]
    fn identical_calls_are_bit_identical() {
        let b = ProceduralBackend;
        let a = b.synthesize(IdentitySeed(3), age(40.0), 64).unwrap();
        let c = b.synthesize(IdentitySeed(3), age(40.0), 64).unwrap();
        assert_eq!(a.frame, c.frame);
        assert_eq!(a.landmarks, c.landmarks);
    }

    #[test]
    fn wrinkle_energy_grows_with_age() {
        let b = ProceduralBackend;
        for seed in 0..5 {
            let young = b.synthesize(IdentitySeed(seed), age(18.0), 64).unwrap();
            let old = b.synthesize(IdentitySeed(seed), age(85.0), 64).unwrap();
            let g = FaceGeometry::from_seed(IdentitySeed(seed));
            for (c, _) in g.wrinkle_zones() {
                let p = to_pixel(c, 64);
                let (ey, eo) = (band_energy(&young.frame, p, 2), band_energy(&old.frame, p, 2));
                assert!(eo > ey + 0.05, "seed {seed}: {ey} vs {eo}");
            }
        }
    }

    #[test]
    fn geometry_is_age_independent() {
        let b = ProceduralBackend;
        let y = b.synthesize(IdentitySeed(9), age(18.0), 64).unwrap();
        let o = b.synthesize(IdentitySeed(9), age(85.0), 64).unwrap();
        assert_eq!(y.landmarks, o.landmarks);
        assert_ne!(y.frame, o.frame);
    }

    #[test]
    fn neutral_keyframe_equals_still() {
        let b = ProceduralBackend;
        let still = b.synthesize(IdentitySeed(1), age(30.0), 64).unwrap();
        let k = b.keyframe(&still, &PoseExpressionSample::neutral(EXPRESSION_DIMS)).unwrap();
        assert_eq!(k.frame, still.frame);
    }

    #[test]
    fn landmarks_follow_translation() {
        let b = ProceduralBackend;
        let still = b.synthesize(IdentitySeed(2), age(30.0), 64).unwrap();
        let mut pose = PoseExpressionSample::neutral(EXPRESSION_DIMS);
        pose.translation = [0.05, 0.0];
        let k = b.keyframe(&still, &pose).unwrap();
        let dx = k.landmarks.mouth_left[0] - still.landmarks.mouth_left[0];
        assert!((dx - 0.05 * 64.0).abs() < 1e-9, "{dx}");
    }
}
