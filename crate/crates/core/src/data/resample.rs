//! Bicubic resizing, the LR degradation pipeline and rotated crops.

use crate::config::ShtConfig;
use crate::error::{Result, ShtError};
use crate::image::{ImageRole, ImageTensor, LandmarkSet};

/// Catmull-Rom cubic convolution kernel (`a = −0.5`).
pub fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Sparse resampling weights: for each output index, `(first source index, taps)`.
/// Downsampling stretches the kernel by the inverse scale (antialiasing);
/// border taps are folded onto the edge pixel and every row sums to 1.
fn weights(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = dst as f64 / src as f64;
    let stretch = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    let support = 2.0 * stretch;
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let first = lo.clamp(0, src as isize - 1) as usize;
            let last = hi.clamp(0, src as isize - 1) as usize;
            let mut taps = vec![0.0; last - first + 1];
            for j in lo..=hi {
                let w = cubic((j as f64 - center) / stretch);
                let k = j.clamp(0, src as isize - 1) as usize;
                taps[k - first] += w;
            }
            let s: f64 = taps.iter().sum();
            taps.iter_mut().for_each(|t| *t /= s);
            (first, taps)
        })
        .collect()
}

/// Separable Catmull-Rom resize, clamped to [0, 1].
pub fn resize_bicubic(img: &ImageTensor, out_h: usize, out_w: usize, role: ImageRole) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(ShtError::ShapeMismatch(format!("cannot resize to {out_h}×{out_w}")));
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let src = img.data();
    let wx = weights(w, out_w);
    let wy = weights(h, out_h);
    let mut rows = vec![0.0f64; h * out_w * c];
    for y in 0..h {
        for (ox, (first, taps)) in wx.iter().enumerate() {
            for ch in 0..c {
                rows[(y * out_w + ox) * c + ch] =
                    taps.iter().enumerate().map(|(k, t)| t * src[(y * w + first + k) * c + ch] as f64).sum();
            }
        }
    }
    let mut out = vec![0.0f32; out_h * out_w * c];
    for (oy, (first, taps)) in wy.iter().enumerate() {
        for ox in 0..out_w {
            for ch in 0..c {
                let v: f64 = taps.iter().enumerate().map(|(k, t)| t * rows[((first + k) * out_w + ox) * c + ch]).sum();
                out[(oy * out_w + ox) * c + ch] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    ImageTensor::new(out, out_h, out_w, c, role)
}

/// Size of the LR bottleneck: `sr/8` when the network upscales ×2 (the LR
/// image is re-enlarged to the input size), otherwise the input size itself.
pub fn bottleneck_size(cfg: &ShtConfig) -> usize {
    if cfg.sr_scale() == 2 {
        cfg.sr_output_size / 8
    } else {
        cfg.input_size
    }
}

/// Bicubic degradation of an HR face to the network input.
pub fn degrade(hr: &ImageTensor, cfg: &ShtConfig) -> Result<ImageTensor> {
    let s = cfg.sr_output_size;
    if (hr.height(), hr.width()) != (s, s) {
        return Err(ShtError::ShapeMismatch(format!(
            "degrade expects a {s}×{s} HR image, got {}×{}",
            hr.height(),
            hr.width()
        )));
    }
    let b = bottleneck_size(cfg);
    let low = resize_bicubic(hr, b, b, ImageRole::Lr)?;
    if b == cfg.input_size {
        Ok(low)
    } else {
        resize_bicubic(&low, cfg.input_size, cfg.input_size, ImageRole::Lr)
    }
}

/// Square crop of side `side` (source pixels) centred at `center`, rotated by
/// `angle` radians and resampled to `out × out`. Coordinates are pixel-index
/// based: integer values are pixel centres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropTransform {
    pub center: [f64; 2],
    pub angle: f64,
    pub side: f64,
    pub out: usize,
}

impl CropTransform {
    fn k(&self) -> f64 {
        self.side / self.out as f64
    }

    pub fn to_source(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        let half = self.out as f64 / 2.0;
        let u = (p[0] + 0.5 - half) * self.k();
        let v = (p[1] + 0.5 - half) * self.k();
        [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v]
    }

    pub fn to_output(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        let half = self.out as f64 / 2.0;
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let u = (c * dx + s * dy) / self.k();
        let v = (-s * dx + c * dy) / self.k();
        [u + half - 0.5, v + half - 0.5]
    }

    /// Bilinear resampling with clamp-to-edge borders.
    pub fn warp(&self, img: &ImageTensor, role: ImageRole) -> Result<ImageTensor> {
        let (h, w) = (img.height() as isize, img.width() as isize);
        let at = |y: isize, x: isize, ch: usize| img.get(y.clamp(0, h - 1) as usize, x.clamp(0, w - 1) as usize, ch) as f64;
        ImageTensor::from_fn(self.out, self.out, img.channels(), role, |y, x, ch| {
            let [sx, sy] = self.to_source([x as f64, y as f64]);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (tx, ty) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = (1.0 - ty) * ((1.0 - tx) * at(y0, x0, ch) + tx * at(y0, x0 + 1, ch))
                + ty * ((1.0 - tx) * at(y0 + 1, x0, ch) + tx * at(y0 + 1, x0 + 1, ch));
            v as f32
        })
    }

    pub fn landmarks(&self, lm: &LandmarkSet) -> LandmarkSet {
        lm.map_points(|p| self.to_output(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, 3, ImageRole::Hr, |y, x, c| ((x + 2 * y + c) % 17) as f32 / 16.0).unwrap()
    }

    #[test]
    fn kernel_values() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        assert!((cubic(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn constants_survive_every_stage() {
        let cfg = ShtConfig::default();
        let hr = ImageTensor::filled(128, 128, 3, 0.3, ImageRole::Hr).unwrap();
        let lr = degrade(&hr, &cfg).unwrap();
        assert_eq!((lr.height(), lr.width(), lr.channels()), (64, 64, 3));
        assert!(lr.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
        let cfg256 = ShtConfig { sr_output_size: 256, ..Default::default() };
        let hr = ImageTensor::filled(256, 256, 3, 0.7, ImageRole::Hr).unwrap();
        let lr = degrade(&hr, &cfg256).unwrap();
        assert_eq!(lr.height(), 64);
        assert!(lr.data().iter().all(|v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn degrade_is_deterministic_and_checks_size() {
        let cfg = ShtConfig::default();
        let hr = ramp(128, 128);
        assert_eq!(degrade(&hr, &cfg).unwrap(), degrade(&hr, &cfg).unwrap());
        assert!(degrade(&ramp(64, 64), &cfg).is_err());
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = ramp(9, 7);
        assert_eq!(resize_bicubic(&img, 9, 7, ImageRole::Hr).unwrap().data(), img.data());
    }

    #[test]
    fn crop_round_trip_and_identity_warp() {
        let t = CropTransform { center: [40.3, 51.7], angle: 0.4, side: 90.0, out: 64 };
        let p = [12.5, 70.25];
        let q = t.to_source(t.to_output(p));
        assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
        let img = ramp(16, 16);
        let id = CropTransform { center: [7.5, 7.5], angle: 0.0, side: 16.0, out: 16 };
        assert_eq!(id.warp(&img, ImageRole::Hr).unwrap().data(), img.data());
    }
}
