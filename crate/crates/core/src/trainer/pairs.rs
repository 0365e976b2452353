//! Training pair construction: augmented views of one annotated face, or two
//! frames of an unlabeled video.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{AugmentConfig, ShtConfig};
use crate::data::{degrade, resize_bicubic, AnnotatedFace, CropTransform, VideoSequence};
use crate::error::{Result, ShtError};
use crate::heatmap::{render_heatmaps, HeatmapStack};
use crate::image::{ImageRole, ImageTensor, LandmarkSet};

pub const MAX_ATTEMPTS: usize = 10;
/// Largest tolerated fraction of landmarks outside the crop.
pub const MAX_OUT_OF_FRAME: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ImageAugmented,
    VideoFrames,
}

/// One network input with its targets.
#[derive(Debug, Clone)]
pub struct View {
    pub lr: ImageTensor,
    pub hr: ImageTensor,
    /// Ground-truth heatmaps at heatmap resolution (labeled views only).
    pub heatmaps: Option<HeatmapStack>,
    /// Landmarks in HR pixel coordinates (labeled views only).
    pub landmarks: Option<LandmarkSet>,
}

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub j: View,
    pub k: View,
    pub labeled: bool,
    pub provenance: Provenance,
}

impl TrainingPair {
    /// The same pair with `j` and `k` exchanged.
    pub fn swapped(&self) -> Self {
        Self { j: self.k.clone(), k: self.j.clone(), labeled: self.labeled, provenance: self.provenance }
    }

    /// The pair with its annotations dropped.
    pub fn unlabeled(mut self) -> Self {
        for v in [&mut self.j, &mut self.k] {
            v.heatmaps = None;
            v.landmarks = None;
        }
        self.labeled = false;
        self
    }
}

/// Clamped Gaussian draw of `(angle in degrees, scale)`.
pub fn draw_augmentation(aug: &AugmentConfig, rng: &mut impl Rng) -> (f64, f64) {
    let z: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    let angle = (aug.rotation_std_deg * z).clamp(-aug.rotation_max_deg, aug.rotation_max_deg);
    let scale = (1.0 + aug.scale_std * z2).clamp(aug.scale_min, aug.scale_max);
    (angle, scale)
}

/// Crop centred on the face box, rotated by `angle_deg` and scaled by `scale`.
pub fn crop_for(face: &AnnotatedFace, angle_deg: f64, scale: f64, cfg: &ShtConfig) -> Result<CropTransform> {
    let b = face.bbox().ok_or_else(|| ShtError::MissingAnnotation(format!("{} has no bbox", face.name)))?;
    Ok(CropTransform {
        center: b.center(),
        angle: angle_deg.to_radians(),
        side: b.w.max(b.h) * cfg.augment.crop_margin * scale,
        out: cfg.sr_output_size,
    })
}

fn out_of_frame(lm: &LandmarkSet, size: usize) -> f64 {
    let s = size as f64;
    let outside = lm.points().iter().filter(|p| !(p[0] >= -0.5 && p[0] < s - 0.5 && p[1] >= -0.5 && p[1] < s - 0.5)).count();
    outside as f64 / lm.len() as f64
}

/// Builds a labeled view of `face` through `crop`.
pub fn labeled_view(face: &AnnotatedFace, image: &ImageTensor, crop: &CropTransform, cfg: &ShtConfig) -> Result<View> {
    let hr = crop.warp(image, ImageRole::Hr)?;
    let landmarks = crop.landmarks(&face.landmarks);
    let (s, hm) = (cfg.sr_output_size, cfg.heatmap_size);
    let heat_lm = landmarks.rescaled((s, s), (hm, hm));
    let heatmaps = render_heatmaps(&heat_lm, (hm, hm), cfg.heatmap_sigma)?;
    Ok(View { lr: degrade(&hr, cfg)?, hr, heatmaps: Some(heatmaps), landmarks: Some(landmarks) })
}

fn augmented_view(face: &AnnotatedFace, image: &ImageTensor, cfg: &ShtConfig, rng: &mut impl Rng) -> Result<View> {
    for _ in 0..MAX_ATTEMPTS {
        let (angle, scale) = draw_augmentation(&cfg.augment, rng);
        let crop = crop_for(face, angle, scale, cfg)?;
        if out_of_frame(&crop.landmarks(&face.landmarks), cfg.sr_output_size) <= MAX_OUT_OF_FRAME {
            return labeled_view(face, image, &crop, cfg);
        }
    }
    Err(ShtError::LandmarkOutOfFrame(MAX_ATTEMPTS))
}

/// Two independently augmented views of one annotated face.
pub fn sample_image_pair(face: &AnnotatedFace, cfg: &ShtConfig, rng: &mut impl Rng) -> Result<TrainingPair> {
    let image = face.image()?;
    if face.landmarks.len() != cfg.num_landmarks {
        return Err(ShtError::LandmarkCountMismatch { expected: cfg.num_landmarks, got: face.landmarks.len() });
    }
    let j = augmented_view(face, &image, cfg, rng)?;
    let k = augmented_view(face, &image, cfg, rng)?;
    Ok(TrainingPair { j, k, labeled: true, provenance: Provenance::ImageAugmented })
}

/// A labeled pair whose two views share one augmentation (`H_con = H_tar`).
pub fn sample_identity_pair(face: &AnnotatedFace, cfg: &ShtConfig, rng: &mut impl Rng) -> Result<TrainingPair> {
    let image = face.image()?;
    let j = augmented_view(face, &image, cfg, rng)?;
    Ok(TrainingPair { k: j.clone(), j, labeled: true, provenance: Provenance::ImageAugmented })
}

fn frame_view(path: &std::path::Path, cfg: &ShtConfig) -> Result<View> {
    let img = ImageTensor::load(path, ImageRole::Hr)?;
    let s = cfg.sr_output_size;
    let hr = if (img.height(), img.width()) == (s, s) { img } else { resize_bicubic(&img, s, s, ImageRole::Hr)? };
    Ok(View { lr: degrade(&hr, cfg)?, hr, heatmaps: None, landmarks: None })
}

/// Two distinct, uniformly drawn frames; always unlabeled.
pub fn sample_video_pair(video: &VideoSequence, cfg: &ShtConfig, rng: &mut impl Rng) -> Result<TrainingPair> {
    let (j, k) = draw_frame_indices(video, rng)?;
    Ok(TrainingPair {
        j: frame_view(&video.frames[j], cfg)?,
        k: frame_view(&video.frames[k], cfg)?,
        labeled: false,
        provenance: Provenance::VideoFrames,
    })
}

pub fn draw_frame_indices(video: &VideoSequence, rng: &mut impl Rng) -> Result<(usize, usize)> {
    let n = video.frames.len();
    if n < 2 {
        return Err(ShtError::TooFewFrames { video: video.id.clone(), frames: n });
    }
    let j = rng.random_range(0..n);
    let mut k = rng.random_range(0..n - 1);
    if k >= j {
        k += 1;
    }
    Ok((j, k))
}
