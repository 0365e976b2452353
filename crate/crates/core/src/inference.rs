//! Landmark detection and hallucination with a trained DHLN, plus dataset
//! evaluation.

use candle_core::Device;

use crate::config::ShtConfig;
use crate::data::{resize_bicubic, AnnotatedFace, CropTransform};
use crate::dhln::Dhln;
use crate::error::{Result, ShtError};
use crate::heatmap::{decode_map, HeatmapStack};
use crate::image::{ImageRole, ImageTensor, LandmarkSet};
use crate::metrics::{nme, psnr_y, ssim_y, EvalReport, ImageRecord, NormalizationKind};
use crate::trainer::{crop_for, labeled_view};

/// Faces per forward pass.
pub const INFERENCE_BATCH: usize = 8;

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Landmarks in the input image's pixel frame.
    pub landmarks: LandmarkSet,
    pub peak_values: Vec<f32>,
    pub sr: ImageTensor,
}

/// Runs DHLN on face crops of any size; crops not at the configured input
/// size are resized first and coordinates are mapped back. A flat heatmap
/// puts its landmark at the map centre.
pub fn predict(dhln: &Dhln, cfg: &ShtConfig, images: &[&ImageTensor], device: &Device) -> Result<Vec<Prediction>> {
    let n = cfg.input_size;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFERENCE_BATCH) {
        let inputs = chunk
            .iter()
            .map(|img| {
                if img.channels() != 3 {
                    return Err(ShtError::ShapeMismatch(format!("expected RGB input, got {} channels", img.channels())));
                }
                if (img.height(), img.width()) == (n, n) {
                    Ok((*img).clone().with_role(ImageRole::Lr))
                } else {
                    resize_bicubic(img, n, n, ImageRole::Lr)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = ImageTensor::stack(&inputs.iter().collect::<Vec<_>>(), device)?;
        let res = dhln.forward(&batch)?;
        let heat = res.last_heatmaps();
        for (i, img) in chunk.iter().enumerate() {
            let stack = HeatmapStack::from_tensor(&heat.get(i)?)?;
            let (hh, hw) = stack.resolution();
            let (points, peaks): (Vec<_>, Vec<_>) = (0..stack.len())
                .map(|j| {
                    decode_map(stack.map(j), hh, hw).unwrap_or_else(|| {
                        log::warn!("landmark {j}: flat heatmap, placing it at the map centre");
                        ([(hw - 1) as f64 / 2.0, (hh - 1) as f64 / 2.0], stack.map(j)[0])
                    })
                })
                .unzip();
            out.push(Prediction {
                landmarks: LandmarkSet::new(points)?.rescaled((hw, hh), (img.width(), img.height())),
                peak_values: peaks,
                sr: ImageTensor::from_tensor(&res.sr.get(i)?, ImageRole::Generated)?,
            });
        }
    }
    Ok(out)
}

/// The unaugmented evaluation crop of `face`: its LR input, HR reference
/// and the crop that produced them.
pub fn eval_crop(face: &AnnotatedFace, cfg: &ShtConfig) -> Result<(ImageTensor, ImageTensor, CropTransform)> {
    let crop = crop_for(face, 0.0, 1.0, cfg)?;
    let view = labeled_view(face, &face.image()?, &crop, cfg)?;
    Ok((view.lr, view.hr, crop))
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub normalization: NormalizationKind,
    pub auc_threshold: f64,
    pub fr_threshold: f64,
    /// Also score the hallucinated faces against the HR crops.
    pub image_quality: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { normalization: NormalizationKind::Io, auc_threshold: 0.10, fr_threshold: 0.10, image_quality: true }
    }
}

/// One evaluated face: prediction in original image coordinates plus
/// optional image quality of the hallucinated crop. Normalizers come from
/// the ground truth only.
#[derive(Debug, Clone)]
pub struct FaceResult {
    pub name: String,
    pub predicted: LandmarkSet,
    pub ground_truth: LandmarkSet,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

/// Runs DHLN over `faces`; landmarks are mapped back to the source images.
pub fn predict_faces(dhln: &Dhln, cfg: &ShtConfig, faces: &[AnnotatedFace], image_quality: bool, device: &Device) -> Result<Vec<FaceResult>> {
    if faces.is_empty() {
        return Err(ShtError::MissingAnnotation("no faces to evaluate".into()));
    }
    let mut out = Vec::with_capacity(faces.len());
    for chunk in faces.chunks(INFERENCE_BATCH) {
        let crops = chunk.iter().map(|f| eval_crop(f, cfg)).collect::<Result<Vec<_>>>()?;
        let lrs: Vec<&ImageTensor> = crops.iter().map(|c| &c.0).collect();
        let preds = predict(dhln, cfg, &lrs, device)?;
        for ((face, (_, hr, crop)), pred) in chunk.iter().zip(&crops).zip(preds) {
            let s = cfg.sr_output_size;
            let in_hr = pred.landmarks.rescaled((cfg.input_size, cfg.input_size), (s, s));
            let predicted = in_hr.map_points(|p| crop.to_source(p));
            let (psnr, ssim) =
                if image_quality { (Some(psnr_y(&pred.sr, hr)?), Some(ssim_y(&pred.sr, hr)?)) } else { (None, None) };
            out.push(FaceResult { name: face.name.clone(), predicted, ground_truth: face.landmarks.clone(), psnr, ssim });
        }
    }
    Ok(out)
}

/// Aggregates per-face results under one normalization.
pub fn report(results: &[FaceResult], opts: &EvalOptions) -> Result<EvalReport> {
    let records = results
        .iter()
        .map(|r| {
            Ok(ImageRecord {
                name: r.name.clone(),
                nme: nme(&r.predicted, &r.ground_truth, opts.normalization)?,
                psnr: r.psnr,
                ssim: r.ssim,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_records(records, opts.normalization, opts.auc_threshold, opts.fr_threshold)
}

/// Evaluates `faces` with NME computed in original image coordinates.
pub fn evaluate(dhln: &Dhln, cfg: &ShtConfig, faces: &[AnnotatedFace], opts: &EvalOptions, device: &Device) -> Result<EvalReport> {
    report(&predict_faces(dhln, cfg, faces, opts.image_quality, device)?, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_heatmaps_fall_back_to_the_centre() {
        let cfg = ShtConfig { num_stacks: 1, pose_channels: 16, sr_channels: 8, hourglass_blocks: 1, ..ShtConfig::toy() };
        let dhln = Dhln::new(&cfg, 0, &Device::Cpu).unwrap();
        dhln.params().zero_where(|n| n.contains(".head.")).unwrap();
        let img = ImageTensor::new(vec![0.5; 32 * 32 * 3], 32, 32, 3, ImageRole::Hr).unwrap();
        let p = predict(&dhln, &cfg, &[&img], &Device::Cpu).unwrap().remove(0);
        let c = 15.5;
        assert!(p.landmarks.points().iter().all(|q| *q == [c, c]), "{:?}", p.landmarks.points());
        assert!(p.peak_values.iter().all(|v| *v == 0.0));
    }
}
