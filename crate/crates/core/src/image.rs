//! Raster images and landmark annotations.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ShtError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageRole {
    Lr,
    Sr,
    Hr,
    Generated,
}

/// H×W×C raster with values in [0, 1], stored row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Vec<f32>,
    height: usize,
    width: usize,
    channels: usize,
    role: ImageRole,
    range: (f32, f32),
}

impl ImageTensor {
    /// Builds an image, rejecting non-finite or out-of-range values.
    pub fn new(data: Vec<f32>, height: usize, width: usize, channels: usize, role: ImageRole) -> Result<Self> {
        Self::with_range(data, height, width, channels, role, (0.0, 1.0))
    }

    /// Builds an image whose values live in a declared range other than [0, 1]
    /// (gradient maps, for instance).
    pub fn with_range(
        data: Vec<f32>,
        height: usize,
        width: usize,
        channels: usize,
        role: ImageRole,
        range: (f32, f32),
    ) -> Result<Self> {
        Self::check_dims(data.len(), height, width, channels)?;
        if let Some(v) = data.iter().find(|v| !(range.0..=range.1).contains(*v)) {
            return Err(ShtError::ShapeMismatch(format!("pixel value {v} outside [{}, {}]", range.0, range.1)));
        }
        Ok(Self { data, height, width, channels, role, range })
    }

    /// Builds an image, clamping into [0, 1]. Non-finite values are still rejected.
    pub fn from_unclamped(
        mut data: Vec<f32>,
        height: usize,
        width: usize,
        channels: usize,
        role: ImageRole,
    ) -> Result<Self> {
        Self::check_dims(data.len(), height, width, channels)?;
        for v in data.iter_mut() {
            if !v.is_finite() {
                return Err(ShtError::NonFiniteActivation("image".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { data, height, width, channels, role, range: (0.0, 1.0) })
    }

    fn check_dims(len: usize, height: usize, width: usize, channels: usize) -> Result<()> {
        if channels != 1 && channels != 3 {
            return Err(ShtError::ShapeMismatch(format!("{channels} channels; expected 1 or 3")));
        }
        if height == 0 || width == 0 || len != height * width * channels {
            return Err(ShtError::ShapeMismatch(format!(
                "buffer of {len} values does not match {height}x{width}x{channels}"
            )));
        }
        Ok(())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32, role: ImageRole) -> Result<Self> {
        Self::new(vec![value; height * width * channels], height, width, channels, role)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        role: ImageRole,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::from_unclamped(data, height, width, channels, role)
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
    pub fn role(&self) -> ImageRole {
        self.role
    }
    pub fn value_range(&self) -> (f32, f32) {
        self.range
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn with_role(mut self, role: ImageRole) -> Self {
        self.role = role;
        self
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Returns a `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, self.height, self.width, self.channels), device)?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }

    /// Stacks equally-shaped images into a `(B, C, H, W)` tensor.
    pub fn stack(images: &[&ImageTensor], device: &Device) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| ShtError::ShapeMismatch("empty image batch".into()))?;
        let mut buf = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if !img.same_shape(first) {
                return Err(ShtError::ShapeMismatch("images in a batch differ in shape".into()));
            }
            buf.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(buf, (images.len(), first.height, first.width, first.channels), device)?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }

    /// Reads a `(C, H, W)` or `(1, C, H, W)` tensor, clamping into [0, 1].
    pub fn from_tensor(t: &Tensor, role: ImageRole) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(ShtError::ShapeMismatch(format!("rank-{r} tensor is not an image"))),
        };
        let (c, h, w) = t.dims3()?;
        let data = t.permute((1, 2, 0))?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::from_unclamped(data, h, w, c, role)
    }

    pub fn load(path: &Path, role: ImageRole) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| ShtError::ImageDecode { path: path.to_path_buf(), source })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Self::new(data, h as usize, w as usize, 3, role)
    }

    /// Writes an 8-bit PNG; single-channel images are written as grayscale.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        let color = if self.channels == 3 { image::ExtendedColorType::Rgb8 } else { image::ExtendedColorType::L8 };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)
            .map_err(|source| ShtError::ImageDecode { path: path.to_path_buf(), source })
    }
}

/// Axis-aligned box `(x0, y0, w, h)` in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![x0, y0, w, h].iter().all(|v| v.is_finite()) {
            return Err(ShtError::InvalidBBox(format!("({x0}, {y0}, {w}, {h})")));
        }
        Ok(Self { x0, y0, w, h })
    }

    pub fn center(&self) -> [f64; 2] {
        [self.x0 + self.w / 2.0, self.y0 + self.h / 2.0]
    }

    pub fn intersects_frame(&self, width: usize, height: usize) -> bool {
        self.x0 < width as f64 && self.y0 < height as f64 && self.x0 + self.w > 0.0 && self.y0 + self.h > 0.0
    }
}

/// Ordered landmark coordinates `(x, y)` with optional normalization anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    interocular: Option<[usize; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.is_empty() {
            return Err(ShtError::ShapeMismatch("landmark set is empty".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ShtError::ShapeMismatch("non-finite landmark coordinate".into()));
        }
        Ok(Self { points, bbox: None, interocular: None })
    }

    pub fn with_bbox(mut self, bbox: BBox) -> Self {
        self.bbox = Some(bbox);
        self
    }

    pub fn with_interocular(mut self, pair: [usize; 2]) -> Result<Self> {
        let [i, j] = pair;
        if i >= self.len() || j >= self.len() {
            return Err(ShtError::InvalidConfig(format!("interocular index out of range for {} landmarks", self.len())));
        }
        let d = dist(self.points[i], self.points[j]);
        if !(d > 0.0) {
            return Err(ShtError::DegenerateNormalizer(d));
        }
        self.interocular = Some(pair);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn bbox(&self) -> Option<&BBox> {
        self.bbox.as_ref()
    }

    pub fn interocular(&self) -> Option<[usize; 2]> {
        self.interocular
    }

    pub fn interocular_distance(&self) -> Option<f64> {
        self.interocular.map(|[i, j]| dist(self.points[i], self.points[j]))
    }

    /// Applies an affine-style point map to the landmarks and the bbox corners.
    /// The bbox becomes the axis-aligned hull of its mapped corners.
    pub fn map_points(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        let points = self.points.iter().map(|&p| f(p)).collect();
        let bbox = self.bbox.map(|b| {
            let corners = [[b.x0, b.y0], [b.x0 + b.w, b.y0], [b.x0, b.y0 + b.h], [b.x0 + b.w, b.y0 + b.h]]
                .map(&f);
            let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for c in corners {
                for k in 0..2 {
                    lo[k] = lo[k].min(c[k]);
                    hi[k] = hi[k].max(c[k]);
                }
            }
            BBox { x0: lo[0], y0: lo[1], w: hi[0] - lo[0], h: hi[1] - lo[1] }
        });
        Self { points, bbox, interocular: self.interocular }
    }

    /// Maps coordinates between two raster sizes of the same field of view,
    /// treating integer coordinates as pixel centers.
    pub fn rescaled(&self, from: (usize, usize), to: (usize, usize)) -> Self {
        let (sx, sy) = (to.0 as f64 / from.0 as f64, to.1 as f64 / from.1 as f64);
        self.map_points(|[x, y]| [(x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5])
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_images() {
        assert!(ImageTensor::new(vec![0.5; 12], 2, 2, 3, ImageRole::Hr).is_ok());
        assert!(ImageTensor::new(vec![0.5; 8], 2, 2, 2, ImageRole::Hr).is_err());
        assert!(ImageTensor::new(vec![1.5; 12], 2, 2, 3, ImageRole::Hr).is_err());
        assert!(ImageTensor::from_unclamped(vec![f32::NAN; 12], 2, 2, 3, ImageRole::Hr).is_err());
        let clamped = ImageTensor::from_unclamped(vec![-1.0, 2.0, 0.5], 1, 1, 3, ImageRole::Sr).unwrap();
        assert_eq!(clamped.data(), &[0.0, 1.0, 0.5]);
    }

    #[test]
    fn tensor_round_trip_keeps_layout() {
        let img = ImageTensor::from_fn(3, 4, 3, ImageRole::Hr, |y, x, c| (y * 12 + x * 3 + c) as f32 / 36.0).unwrap();
        let t = img.to_tensor(&Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 3, 4]);
        let v: f32 = t.get(0).unwrap().get(2).unwrap().get(1).unwrap().get(3).unwrap().to_scalar().unwrap();
        assert_eq!(v, img.get(1, 3, 2));
        assert_eq!(ImageTensor::from_tensor(&t, ImageRole::Hr).unwrap(), img);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::from_fn(5, 7, 3, ImageRole::Hr, |y, x, c| ((y + x + c) % 4) as f32 / 3.0).unwrap();
        let path = dir.path().join("a.png");
        img.save(&path).unwrap();
        let back = ImageTensor::load(&path, ImageRole::Hr).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn landmark_anchors() {
        assert!(LandmarkSet::new(vec![]).is_err());
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        let lm = LandmarkSet::new(vec![[0.0, 0.0], [3.0, 4.0]]).unwrap();
        assert_eq!(lm.clone().with_interocular([0, 1]).unwrap().interocular_distance(), Some(5.0));
        let same = LandmarkSet::new(vec![[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert!(same.with_interocular([0, 1]).is_err());
    }

    #[test]
    fn rescale_uses_pixel_centers() {
        let lm = LandmarkSet::new(vec![[-0.5, 127.5], [63.5, 63.5]]).unwrap();
        let r = lm.rescaled((128, 128), (64, 64));
        assert_eq!(r.points(), &[[-0.5, 63.5], [31.5, 31.5]]);
    }
}
