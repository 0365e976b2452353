//! Procedural toy faces with exact landmark ground truth.
//!
//! Five landmarks: left eye, right eye, nose tip, left and right mouth
//! corner. Each is rendered as a dark Gaussian blob centred exactly on the
//! stored coordinate, inside an anti-aliased ellipse on a shaded background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedFace, FaceSource};
use crate::error::Result;
use crate::image::{BBox, ImageRole, ImageTensor, LandmarkSet};
use crate::nn::derive_seed;

pub const TOY_LANDMARKS: usize = 5;
pub const TOY_INTEROCULAR: [usize; 2] = [0, 1];

/// Face-local feature layout in units of the ellipse radii.
const LAYOUT: [[f64; 2]; TOY_LANDMARKS] = [[-0.38, -0.22], [0.38, -0.22], [0.0, 0.12], [-0.3, 0.45], [0.3, 0.45]];

/// Sampling ranges for [`generate_toy_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyRanges {
    pub size: usize,
    /// Horizontal radius as a fraction of the canvas.
    pub radius: (f64, f64),
    /// Vertical/horizontal radius ratio.
    pub aspect: (f64, f64),
    /// Maximum in-plane tilt, degrees.
    pub tilt_deg: f64,
    /// Centre offset as a fraction of the canvas.
    pub shift: f64,
    /// Per-feature jitter in radius units.
    pub jitter: f64,
    pub noise: f64,
}

impl Default for ToyRanges {
    fn default() -> Self {
        Self { size: 128, radius: (0.25, 0.31), aspect: (1.12, 1.3), tilt_deg: 20.0, shift: 0.06, jitter: 0.06, noise: 0.03 }
    }
}

/// One fully specified toy face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyFaceSpec {
    pub size: usize,
    pub center: [f64; 2],
    pub radii: [f64; 2],
    pub tilt: f64,
    pub features: Vec<[f64; 2]>,
    pub blob_sigma: f64,
    pub skin: [f32; 3],
    pub background: [f32; 3],
    pub noise: f64,
    pub seed: u64,
}

impl ToyFaceSpec {
    pub fn sample(ranges: &ToyRanges, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = ranges.size as f64;
        let rx = rng.random_range(ranges.radius.0..=ranges.radius.1) * s;
        let ry = rx * rng.random_range(ranges.aspect.0..=ranges.aspect.1);
        let center = [
            s / 2.0 - 0.5 + rng.random_range(-ranges.shift..=ranges.shift) * s,
            s / 2.0 - 0.5 + rng.random_range(-ranges.shift..=ranges.shift) * s,
        ];
        let tilt = rng.random_range(-ranges.tilt_deg..=ranges.tilt_deg).to_radians();
        let (sn, cs) = tilt.sin_cos();
        let features = LAYOUT
            .iter()
            .map(|[u, v]| {
                let u = (u + rng.random_range(-ranges.jitter..=ranges.jitter)) * rx;
                let v = (v + rng.random_range(-ranges.jitter..=ranges.jitter)) * ry;
                [center[0] + cs * u - sn * v, center[1] + sn * u + cs * v]
            })
            .collect();
        let tone: f32 = rng.random_range(0.62..0.8);
        let bg: f32 = rng.random_range(0.15..0.35);
        Self {
            size: ranges.size,
            center,
            radii: [rx, ry],
            tilt,
            features,
            blob_sigma: rx * 0.09,
            skin: [tone + 0.04, tone, tone - 0.04],
            background: [bg, bg + 0.02, bg + 0.05],
            noise: ranges.noise,
            seed,
        }
    }

    /// Axis-aligned box of the tilted ellipse.
    pub fn bbox(&self) -> BBox {
        let (sn, cs) = self.tilt.sin_cos();
        let [rx, ry] = self.radii;
        let hw = ((rx * cs).powi(2) + (ry * sn).powi(2)).sqrt();
        let hh = ((rx * sn).powi(2) + (ry * cs).powi(2)).sqrt();
        BBox { x0: self.center[0] - hw, y0: self.center[1] - hh, w: 2.0 * hw, h: 2.0 * hh }
    }

    pub fn landmarks(&self) -> LandmarkSet {
        LandmarkSet::new(self.features.clone())
            .expect("toy landmarks are finite")
            .with_bbox(self.bbox())
            .with_interocular(TOY_INTEROCULAR)
            .expect("toy eyes are distinct")
    }

    /// The same face rotated by `dtilt` about its centre and shifted, with
    /// fresh pixel noise from `seed`.
    pub fn moved(&self, dtilt: f64, shift: [f64; 2], seed: u64) -> Self {
        let (sn, cs) = dtilt.sin_cos();
        let c = self.center;
        let center = [c[0] + shift[0], c[1] + shift[1]];
        let features = self
            .features
            .iter()
            .map(|f| {
                let (dx, dy) = (f[0] - c[0], f[1] - c[1]);
                [center[0] + cs * dx - sn * dy, center[1] + sn * dx + cs * dy]
            })
            .collect();
        Self { center, tilt: self.tilt + dtilt, features, seed, ..self.clone() }
    }

    pub fn render(&self) -> Result<ImageTensor> {
        let n = self.size;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0x7e));
        let noise: Vec<f32> =
            (0..n * n).map(|_| rng.random_range(-self.noise..=self.noise) as f32).collect();
        let (sn, cs) = self.tilt.sin_cos();
        let [rx, ry] = self.radii;
        let two_s2 = 2.0 * self.blob_sigma * self.blob_sigma;
        let mut data = Vec::with_capacity(n * n * 3);
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 - self.center[0], y as f64 - self.center[1]);
                let u = (cs * dx + sn * dy) / rx;
                let v = (-sn * dx + cs * dy) / ry;
                // Signed distance to the outline in pixels (approximately), then a 1 px ramp.
                let r = (u * u + v * v).sqrt();
                let edge = (r - 1.0) * rx.min(ry);
                let cover = (0.5 - edge).clamp(0.0, 1.0) as f32;
                let shade = (1.0 - 0.15 * v.clamp(-1.0, 1.0)) as f32;
                let dark: f64 = self
                    .features
                    .iter()
                    .map(|f| (-((x as f64 - f[0]).powi(2) + (y as f64 - f[1]).powi(2)) / two_s2).exp())
                    .fold(0.0, f64::max);
                let gy = y as f32 / n as f32;
                for c in 0..3 {
                    let face = self.skin[c] * shade * (1.0 - 0.75 * dark as f32);
                    let bg = self.background[c] * (0.8 + 0.4 * gy);
                    data.push((cover * face + (1.0 - cover) * bg + noise[y * n + x]).clamp(0.0, 1.0));
                }
            }
        }
        ImageTensor::new(data, n, n, 3, ImageRole::Hr)
    }
}

/// `n` toy faces; item `i` depends only on `(seed, i)`.
pub fn generate_toy_dataset(n: usize, ranges: &ToyRanges, seed: u64) -> Result<Vec<AnnotatedFace>> {
    (0..n)
        .map(|i| {
            let spec = ToyFaceSpec::sample(ranges, derive_seed(seed, i as u64));
            Ok(AnnotatedFace {
                name: format!("toy_{i:05}.png"),
                source: FaceSource::Memory(spec.render()?),
                landmarks: spec.landmarks(),
                subject: None,
                frame: None,
            })
        })
        .collect()
}

/// Frames of one toy identity drifting slowly (tilt and position random walk).
pub fn generate_toy_video(frames: usize, ranges: &ToyRanges, seed: u64) -> Result<Vec<ImageTensor>> {
    let base = ToyFaceSpec::sample(ranges, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x71de0));
    let (mut tilt, mut shift) = (0.0f64, [0.0f64; 2]);
    let limit = ranges.shift * ranges.size as f64;
    (0..frames)
        .map(|f| {
            tilt = (tilt + rng.random_range(-3.0f64..=3.0).to_radians()).clamp(-0.3, 0.3);
            for s in &mut shift {
                *s = (*s + rng.random_range(-1.5..=1.5)).clamp(-limit, limit);
            }
            base.moved(tilt, shift, derive_seed(seed, f as u64 + 1)).render()
        })
        .collect()
}
