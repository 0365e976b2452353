//! Gaussian heatmap rendering and argmax decoding.

use candle_core::{DType, Device, Tensor};

use crate::error::{Result, ShtError};
use crate::image::LandmarkSet;

/// `L` per-landmark maps of size `h × w`, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    maps: Vec<f32>,
    num: usize,
    height: usize,
    width: usize,
    visible: Vec<bool>,
}

impl HeatmapStack {
    pub fn new(maps: Vec<f32>, num: usize, height: usize, width: usize) -> Result<Self> {
        if num == 0 || height == 0 || width == 0 || maps.len() != num * height * width {
            return Err(ShtError::ShapeMismatch(format!(
                "{} values do not form {num} maps of {height}x{width}",
                maps.len()
            )));
        }
        if let Some(v) = maps.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ShtError::ShapeMismatch(format!("heatmap value {v} outside [0, 1]")));
        }
        let visible = maps.chunks(height * width).map(|m| m.iter().any(|&v| v > 0.0)).collect();
        Ok(Self { maps, num, height, width, visible })
    }

    /// Reads an `(L, h, w)` or `(1, L, h, w)` tensor, clamping into [0, 1].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (num, height, width) = t.dims3()?;
        let maps: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        if maps.iter().any(|v| !v.is_finite()) {
            return Err(ShtError::NonFiniteActivation("heatmaps".into()));
        }
        Self::new(maps.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(), num, height, width)
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.maps, (self.num, self.height, self.width), device)?)
    }

    /// Stacks equally-shaped heatmap stacks into `(B, L, h, w)`.
    pub fn stack(stacks: &[&HeatmapStack], device: &Device) -> Result<Tensor> {
        let first = stacks.first().ok_or_else(|| ShtError::ShapeMismatch("empty heatmap batch".into()))?;
        let mut buf = Vec::with_capacity(stacks.len() * first.maps.len());
        for s in stacks {
            if (s.num, s.height, s.width) != (first.num, first.height, first.width) {
                return Err(ShtError::ShapeMismatch("heatmap stacks in a batch differ in shape".into()));
            }
            buf.extend_from_slice(&s.maps);
        }
        Ok(Tensor::from_vec(buf, (stacks.len(), first.num, first.height, first.width), device)?)
    }

    pub fn len(&self) -> usize {
        self.num
    }
    pub fn is_empty(&self) -> bool {
        self.num == 0
    }
    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    pub fn data(&self) -> &[f32] {
        &self.maps
    }
    pub fn map(&self, i: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.maps[i * n..(i + 1) * n]
    }
    /// Whether landmark `i` fell inside the map when rendered.
    pub fn visible(&self, i: usize) -> bool {
        self.visible[i]
    }
    pub fn peak(&self, i: usize) -> f32 {
        self.map(i).iter().copied().fold(0.0, f32::max)
    }
}

/// Renders one unnormalized Gaussian per landmark. Coordinates must already
/// be in heatmap pixels. Landmarks outside the map's pixel extent
/// `[-0.5, w - 0.5) × [-0.5, h - 0.5)` produce all-zero, invisible maps.
pub fn render_heatmaps(landmarks: &LandmarkSet, resolution: (usize, usize), sigma: f64) -> Result<HeatmapStack> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(ShtError::InvalidSigma(sigma));
    }
    let (h, w) = resolution;
    let num = landmarks.len();
    let mut maps = vec![0f32; num * h * w];
    let mut visible = vec![false; num];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (i, &[lx, ly]) in landmarks.points().iter().enumerate() {
        if !(lx >= -0.5 && lx < w as f64 - 0.5 && ly >= -0.5 && ly < h as f64 - 0.5) {
            continue;
        }
        visible[i] = true;
        let map = &mut maps[i * h * w..(i + 1) * h * w];
        for y in 0..h {
            let dy2 = (y as f64 - ly).powi(2);
            for x in 0..w {
                let d2 = (x as f64 - lx).powi(2) + dy2;
                map[y * w + x] = (-d2 * inv).exp() as f32;
            }
        }
    }
    Ok(HeatmapStack { maps, num, height: h, width: w, visible })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Decoded coordinates in heatmap pixels.
    pub landmarks: LandmarkSet,
    /// Map value at each integer argmax.
    pub peak_values: Vec<f32>,
}

/// Integer argmax (first in row-major order on ties) plus a quarter-pixel
/// shift per axis toward the larger neighbour, with the peak value. Border
/// pixels are not shifted. `None` for a constant map.
pub fn decode_map(map: &[f32], h: usize, w: usize) -> Option<([f64; 2], f32)> {
    let (mut best, mut arg) = (map[0], 0usize);
    let mut min = map[0];
    for (k, &v) in map.iter().enumerate() {
        if v > best {
            best = v;
            arg = k;
        }
        min = min.min(v);
    }
    if best == min {
        return None;
    }
    let (ay, ax) = (arg / w, arg % w);
    let shift = |lo: f32, hi: f32| -> f64 {
        if hi > lo {
            0.25
        } else if lo > hi {
            -0.25
        } else {
            0.0
        }
    };
    let mut x = ax as f64;
    let mut y = ay as f64;
    if ax > 0 && ax + 1 < w {
        x += shift(map[ay * w + ax - 1], map[ay * w + ax + 1]);
    }
    if ay > 0 && ay + 1 < h {
        y += shift(map[(ay - 1) * w + ax], map[(ay + 1) * w + ax]);
    }
    Some(([x, y], best))
}

/// [`decode_map`] over every map of the stack.
pub fn decode_heatmaps(stack: &HeatmapStack) -> Result<DecodeResult> {
    let (h, w) = stack.resolution();
    let mut points = Vec::with_capacity(stack.len());
    let mut peaks = Vec::with_capacity(stack.len());
    for i in 0..stack.len() {
        let (p, v) = decode_map(stack.map(i), h, w).ok_or(ShtError::DegenerateHeatmap(i))?;
        points.push(p);
        peaks.push(v);
    }
    Ok(DecodeResult { landmarks: LandmarkSet::new(points)?, peak_values: peaks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: f64, y: f64) -> LandmarkSet {
        LandmarkSet::new(vec![[x, y]]).unwrap()
    }

    #[test]
    fn on_grid_peak_and_neighbour() {
        let s = render_heatmaps(&single(32.0, 20.0), (64, 64), 1.5).unwrap();
        let m = s.map(0);
        assert_eq!(m[20 * 64 + 32], 1.0);
        let expected = (-1.0f64 / (2.0 * 1.5 * 1.5)).exp();
        assert!((m[20 * 64 + 33] as f64 - expected).abs() < 1e-7);
        assert!((expected - 0.8007).abs() < 1e-4);
        assert!(s.visible(0));
    }

    #[test]
    fn off_map_is_zero_and_invisible() {
        let s = render_heatmaps(&single(-5.0, -5.0), (64, 64), 1.5).unwrap();
        assert!(s.map(0).iter().all(|&v| v == 0.0));
        assert!(!s.visible(0));
    }

    #[test]
    fn deterministic() {
        let lm = LandmarkSet::new(vec![[10.3, 40.7], [50.0, 3.2]]).unwrap();
        let a = render_heatmaps(&lm, (64, 64), 2.0).unwrap();
        let b = render_heatmaps(&lm, (64, 64), 2.0).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn invalid_sigma() {
        assert!(matches!(render_heatmaps(&single(1.0, 1.0), (8, 8), 0.0), Err(ShtError::InvalidSigma(_))));
        assert!(render_heatmaps(&single(1.0, 1.0), (8, 8), -1.0).is_err());
    }

    #[test]
    fn round_trip_on_grid() {
        let s = render_heatmaps(&single(32.0, 20.0), (64, 64), 1.5).unwrap();
        let d = decode_heatmaps(&s).unwrap();
        assert_eq!(d.landmarks.points()[0], [32.0, 20.0]);
        assert_eq!(d.peak_values[0], 1.0);
    }

    #[test]
    fn corner_spike_is_not_shifted() {
        let mut maps = vec![0f32; 64];
        maps[0] = 1.0;
        let s = HeatmapStack::new(maps, 1, 8, 8).unwrap();
        assert_eq!(decode_heatmaps(&s).unwrap().landmarks.points()[0], [0.0, 0.0]);
    }

    #[test]
    fn quarter_pixel_toward_larger_neighbour() {
        let lm = single(10.3, 12.8);
        let s = render_heatmaps(&lm, (32, 32), 1.5).unwrap();
        let p = decode_heatmaps(&s).unwrap().landmarks.points()[0];
        assert_eq!(p, [10.25, 12.75]);
    }

    #[test]
    fn constant_map_is_degenerate() {
        let s = HeatmapStack::new(vec![0.0; 64], 1, 8, 8).unwrap();
        assert!(matches!(decode_heatmaps(&s), Err(ShtError::DegenerateHeatmap(0))));
        let s = HeatmapStack::new(vec![0.3; 64], 1, 8, 8).unwrap();
        assert!(decode_heatmaps(&s).is_err());
    }

    #[test]
    fn ties_resolve_to_first_index() {
        let mut maps = vec![0f32; 25];
        maps[6] = 1.0;
        maps[18] = 1.0;
        let s = HeatmapStack::new(maps, 1, 5, 5).unwrap();
        let d = decode_heatmaps(&s).unwrap();
        assert_eq!(d.landmarks.points()[0], [1.0, 1.0]);
    }
}
