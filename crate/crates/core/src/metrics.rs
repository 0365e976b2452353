//! Landmark and image-quality metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ShtError};
use crate::image::{ImageTensor, LandmarkSet};

/// NME normalizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationKind {
    /// Interocular (outer eye corner) distance.
    Io,
    /// `√(w·h)` of the bbox.
    Box,
    /// Bbox diagonal.
    Diag,
    /// Bbox width.
    Wid,
}

impl NormalizationKind {
    pub const ALL: [NormalizationKind; 4] = [Self::Io, Self::Box, Self::Diag, Self::Wid];

    pub fn name(self) -> &'static str {
        match self {
            Self::Io => "io",
            Self::Box => "box",
            Self::Diag => "diag",
            Self::Wid => "wid",
        }
    }

    /// The normalizer `d` taken from the ground-truth anchors.
    pub fn normalizer(self, gt: &LandmarkSet) -> Result<f64> {
        let d = match self {
            Self::Io => gt.interocular_distance().ok_or(ShtError::MissingAnchor("interocular indices"))?,
            _ => {
                let b = gt.bbox().ok_or(ShtError::MissingAnchor("bbox"))?;
                match self {
                    Self::Box => (b.w * b.h).sqrt(),
                    Self::Diag => b.w.hypot(b.h),
                    _ => b.w,
                }
            }
        };
        if d > 0.0 && d.is_finite() {
            Ok(d)
        } else {
            Err(ShtError::DegenerateNormalizer(d))
        }
    }
}

impl fmt::Display for NormalizationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormalizationKind {
    type Err = ShtError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ShtError::InvalidConfig(format!("unknown NME normalization `{s}` (io, box, diag, wid)")))
    }
}

/// Mean point-to-point error divided by the normalizer of `gt`.
pub fn nme(pred: &LandmarkSet, gt: &LandmarkSet, kind: NormalizationKind) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(ShtError::LandmarkCountMismatch { expected: gt.len(), got: pred.len() });
    }
    let d = kind.normalizer(gt)?;
    let sum: f64 = pred.points().iter().zip(gt.points()).map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1])).sum();
    Ok(sum / (gt.len() as f64 * d))
}

fn check_errors(errors: &[f64], threshold: f64) -> Result<()> {
    if errors.is_empty() {
        return Err(ShtError::EmptyErrorList);
    }
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(ShtError::InvalidThreshold(threshold));
    }
    match errors.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        Some(&e) => Err(ShtError::InvalidErrorValue(e)),
        None => Ok(()),
    }
}

/// Normalized area under the CED curve on `[0, threshold]`.
///
/// CED is a right-continuous step function, so the integral is exact:
/// each error `e` contributes `max(0, threshold − e) / n`.
pub fn ced_auc(errors: &[f64], threshold: f64) -> Result<f64> {
    check_errors(errors, threshold)?;
    let area: f64 = errors.iter().map(|e| (threshold - e).max(0.0)).sum();
    Ok(area / (errors.len() as f64 * threshold))
}

/// Fraction of errors strictly above `threshold`.
pub fn failure_rate(errors: &[f64], threshold: f64) -> Result<f64> {
    check_errors(errors, threshold)?;
    Ok(errors.iter().filter(|&&e| e > threshold).count() as f64 / errors.len() as f64)
}

/// Step points `(e, CED(e))` at every distinct error value, ascending.
pub fn ced_curve(errors: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<f64> = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, e) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *e => last.1 = frac,
            _ => out.push((*e, frac)),
        }
    }
    out
}

/// BT.601 luma in [16/255, 235/255] from RGB in [0, 1].
pub fn rgb_to_y(r: f64, g: f64, b: f64) -> f64 {
    16.0 / 255.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0
}

fn luma_pair(a: &ImageTensor, b: &ImageTensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if !a.same_shape(b) || a.channels() != 3 {
        return Err(ShtError::ShapeMismatch(format!(
            "quality metrics need equally shaped RGB images, got {}×{}×{} and {}×{}×{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    let y = |img: &ImageTensor| -> Vec<f64> {
        img.data().chunks_exact(3).map(|p| rgb_to_y(p[0] as f64, p[1] as f64, p[2] as f64)).collect()
    };
    Ok((y(a), y(b)))
}

/// PSNR of the Y channel in dB; identical images give `+∞`.
pub fn psnr_y(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let (ya, yb) = luma_pair(a, b)?;
    let mse = ya.iter().zip(&yb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / ya.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// "Valid" separable filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &x[y * w..(y + 1) * w];
        for (ox, out) in rows[y * ow..(y + 1) * ow].iter_mut().enumerate() {
            *out = taps.iter().zip(&src[ox..ox + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = taps.iter().enumerate().map(|(i, t)| t * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean SSIM of the Y channel over every fully contained 11×11 Gaussian window.
pub fn ssim_y(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let (h, w) = (a.height(), a.width());
    let (ya, yb) = luma_pair(a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(ShtError::ImageTooSmall { height: h, width: w, window: SSIM_WINDOW });
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(&ya, h, w, &taps);
    let mu_b = filter_valid(&yb, h, w, &taps);
    let aa = filter_valid(&prod(&ya, &ya), h, w, &taps);
    let bb = filter_valid(&prod(&yb, &yb), h, w, &taps);
    let ab = filter_valid(&prod(&ya, &yb), h, w, &taps);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Per-image evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub name: String,
    pub nme: f64,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_db")]
    pub psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
}

/// Aggregated evaluation results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub normalization: NormalizationKind,
    pub images: Vec<ImageRecord>,
    pub nme: f64,
    pub auc: f64,
    pub auc_threshold: f64,
    pub fr: f64,
    pub fr_threshold: f64,
    /// Mean Y-channel PSNR; `"inf"` in JSON when every pair is identical.
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_db")]
    pub psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    pub ced: Vec<(f64, f64)>,
}

impl EvalReport {
    /// Aggregates per-image records; image quality is averaged only when
    /// every record carries it.
    pub fn from_records(
        images: Vec<ImageRecord>,
        normalization: NormalizationKind,
        auc_threshold: f64,
        fr_threshold: f64,
    ) -> Result<Self> {
        let errors: Vec<f64> = images.iter().map(|r| r.nme).collect();
        let auc = ced_auc(&errors, auc_threshold)?;
        let fr = failure_rate(&errors, fr_threshold)?;
        let n = images.len() as f64;
        let mean_of = |f: fn(&ImageRecord) -> Option<f64>| -> Option<f64> {
            images.iter().map(f).sum::<Option<f64>>().map(|s| s / n)
        };
        Ok(Self {
            normalization,
            nme: errors.iter().sum::<f64>() / n,
            auc,
            auc_threshold,
            fr,
            fr_threshold,
            psnr: mean_of(|r| r.psnr),
            ssim: mean_of(|r| r.ssim),
            ced: ced_curve(&errors),
            images,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| ShtError::InvalidConfig(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| ShtError::InvalidConfig(e.to_string()))
    }

    /// CED as `e ced` lines for plotting.
    pub fn ced_text(&self) -> String {
        self.ced.iter().map(|(e, c)| format!("{e:.6} {c:.6}\n")).collect()
    }
}

/// PSNR values with `+∞` written as the string `"inf"`.
mod opt_db {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_infinite() => s.serialize_str("inf"),
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(match Option::<Db>::deserialize(d)? {
            Some(Db::Num(x)) => Some(x),
            Some(Db::Text(t)) if t == "inf" => Some(f64::INFINITY),
            Some(Db::Text(t)) => return Err(serde::de::Error::custom(format!("bad PSNR value `{t}`"))),
            None => None,
        })
    }
}
