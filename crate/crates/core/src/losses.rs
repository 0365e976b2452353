//! Training objectives.
//!
//! Every L1/L2 norm is mean-reduced over elements, and batch losses are means
//! over samples. Per-sample helpers return `(B,)` tensors so the trainer can
//! gate terms per sample without multiplying by zero.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{PerceptualConfig, PerceptualSource};
use crate::error::{Result, ShtError};
use crate::heatmap::HeatmapStack;
use crate::image::{ImageRole, ImageTensor};
use crate::nn::{mean_per_sample, relu, Conv2d};

type CResult<T> = candle_core::Result<T>;

/// Smoothing inside the gradient magnitude; keeps it differentiable at 0.
pub const GRADIENT_DELTA: f64 = 1e-14;

/// Clamp margin for discriminator scores inside every log.
pub const SCORE_EPS: f64 = 1e-7;

/// Central-difference gradient magnitude per channel with replicate padding,
/// `√(Ix² + Iy² + δ) − √δ`, on a `(B, C, H, W)` tensor.
pub fn gradient_map_tensor(x: &Tensor) -> CResult<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let xp = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    let ix = (xp.narrow(2, 1, h)?.narrow(3, 2, w)? - xp.narrow(2, 1, h)?.narrow(3, 0, w)?)?;
    let iy = (xp.narrow(2, 2, h)?.narrow(3, 1, w)? - xp.narrow(2, 0, h)?.narrow(3, 1, w)?)?;
    let mag = ((ix.sqr()? + iy.sqr()?)? + GRADIENT_DELTA)?.sqrt()?;
    mag - GRADIENT_DELTA.sqrt()
}

/// Gradient map of a single image, computed in double precision.
pub fn gradient_map(img: &ImageTensor) -> Result<ImageTensor> {
    let t = img.to_tensor(&Device::Cpu)?.to_dtype(DType::F64)?;
    let g = gradient_map_tensor(&t)?.to_dtype(DType::F32)?.squeeze(0)?;
    let data = g.permute((1, 2, 0))?.flatten_all()?.to_vec1::<f32>()?;
    let r = img.value_range();
    let max = std::f32::consts::SQRT_2 * (r.1 - r.0);
    ImageTensor::with_range(data, img.height(), img.width(), img.channels(), ImageRole::Generated, (0.0, max))
}

pub fn l1_per_sample(a: &Tensor, b: &Tensor) -> CResult<Tensor> {
    mean_per_sample(&(a - b)?.abs()?)
}

pub fn mse_per_sample(a: &Tensor, b: &Tensor) -> CResult<Tensor> {
    mean_per_sample(&(a - b)?.sqr()?)
}

/// `Σ_t mean((H_t − H*)²)` per sample.
pub fn heatmap_mse_per_sample(stacks: &[Tensor], target: &Tensor) -> CResult<Tensor> {
    let mut acc: Option<Tensor> = None;
    for h in stacks {
        let m = mse_per_sample(h, target)?;
        acc = Some(match acc {
            Some(a) => (a + m)?,
            None => m,
        });
    }
    acc.ok_or_else(|| candle_core::Error::Msg("no heatmap stacks".into()))
}

pub fn gradient_l1_per_sample(sr: &Tensor, hr: &Tensor) -> CResult<Tensor> {
    l1_per_sample(&gradient_map_tensor(sr)?, &gradient_map_tensor(hr)?)
}

/// Named components plus the weights that combine them into `total`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
}

impl LossBreakdown {
    pub fn add(&mut self, name: &str, weight: f64, value: f64) {
        *self.components.entry(name.to_string()).or_insert(0.0) += value;
        self.weights.insert(name.to_string(), weight);
        self.total += weight * value;
    }

    /// `Σ wᵢ·cᵢ` recomputed from the parts.
    pub fn weighted_sum(&self) -> f64 {
        self.components.iter().map(|(k, v)| self.weights.get(k).copied().unwrap_or(1.0) * v).sum()
    }

    pub fn get(&self, name: &str) -> f64 {
        self.components.get(name).copied().unwrap_or(0.0)
    }

    /// Sums two breakdowns component-wise. Shared components must carry equal weights.
    pub fn merge(mut self, other: &LossBreakdown) -> Self {
        for (k, v) in &other.components {
            let w = other.weights[k];
            debug_assert!(self.weights.get(k).is_none_or(|&x| x == w), "weight mismatch for {k}");
            *self.components.entry(k.clone()).or_insert(0.0) += v;
            self.weights.insert(k.clone(), w);
        }
        self.total += other.total;
        self
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.total *= s;
        for v in self.components.values_mut() {
            *v *= s;
        }
        self
    }

    /// First non-finite component, if any.
    pub fn non_finite(&self) -> Option<&str> {
        if !self.total.is_finite() {
            return Some(self.components.iter().find(|(_, v)| !v.is_finite()).map_or("total", |(k, _)| k));
        }
        None
    }
}

/// A loss graph node together with its breakdown.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

fn scalar(t: &Tensor) -> CResult<f64> {
    t.to_dtype(DType::F64)?.to_scalar::<f64>()
}

/// Batched L_DH. The heatmap term only enters for samples with `labeled[i]`;
/// unlabeled samples contribute no heatmap node to the graph at all.
pub fn loss_dh_batch(
    stacks: &[Tensor],
    h_star: Option<&Tensor>,
    labeled: &[bool],
    sr: &Tensor,
    hr: &Tensor,
    gamma: [f64; 3],
) -> Result<LossTerms> {
    let b = sr.dim(0)?;
    if hr.dims() != sr.dims() || labeled.len() != b {
        return Err(ShtError::ShapeMismatch(format!(
            "loss_dh: SR {:?}, HR {:?}, {} label flags",
            sr.dims(),
            hr.dims(),
            labeled.len()
        )));
    }
    let inv_b = 1.0 / b as f64;
    let image = l1_per_sample(sr, hr)?.sum_all()?;
    let grad = gradient_l1_per_sample(sr, hr)?.sum_all()?;
    let mut total = ((image.affine(gamma[1], 0.0)? + grad.affine(gamma[2], 0.0)?)? * inv_b)?;
    let mut breakdown = LossBreakdown::default();
    let idx: Vec<u32> = labeled.iter().enumerate().filter(|(_, &l)| l).map(|(i, _)| i as u32).collect();
    let mut heat_value = 0.0;
    if gamma[0] != 0.0 && !idx.is_empty() {
        let target = h_star.ok_or_else(|| ShtError::ShapeMismatch("labeled samples need target heatmaps".into()))?;
        for s in stacks {
            if s.dims() != target.dims() {
                return Err(ShtError::ShapeMismatch(format!("heatmaps {:?} vs target {:?}", s.dims(), target.dims())));
            }
        }
        let ids = Tensor::new(idx.as_slice(), sr.device())?;
        let picked: Vec<Tensor> = stacks.iter().map(|s| s.index_select(&ids, 0)).collect::<CResult<_>>()?;
        let heat = heatmap_mse_per_sample(&picked, &target.index_select(&ids, 0)?)?.sum_all()?;
        heat_value = scalar(&heat)? * inv_b;
        total = (total + (heat * (gamma[0] * inv_b))?)?;
    }
    breakdown.add("heatmap_mse", gamma[0], heat_value);
    breakdown.add("image_l1", gamma[1], scalar(&image)? * inv_b);
    breakdown.add("gradient_l1", gamma[2], scalar(&grad)? * inv_b);
    breakdown.total = scalar(&total)?;
    Ok(LossTerms { total, breakdown })
}

/// L_DH for one sample in domain types (double precision).
pub fn loss_dh(
    stacks: &[HeatmapStack],
    h_star: &HeatmapStack,
    i_sr: &ImageTensor,
    i_hr: &ImageTensor,
    gamma: [f64; 3],
) -> Result<LossBreakdown> {
    if gamma[0] != 0.0 && gamma[0] != 1.0 {
        return Err(ShtError::InvalidConfig(format!("gamma1 = {} must be 0 or 1", gamma[0])));
    }
    if !i_sr.same_shape(i_hr) {
        return Err(ShtError::ShapeMismatch("SR and HR images differ in shape".into()));
    }
    let dev = Device::Cpu;
    let f64t = |t: Tensor| t.to_dtype(DType::F64);
    let stacks_t = stacks.iter().map(|s| Ok(f64t(s.to_tensor(&dev)?.unsqueeze(0)?)?)).collect::<Result<Vec<_>>>()?;
    let target = f64t(h_star.to_tensor(&dev)?.unsqueeze(0)?)?;
    let sr = f64t(i_sr.to_tensor(&dev)?)?;
    let hr = f64t(i_hr.to_tensor(&dev)?)?;
    Ok(loss_dh_batch(&stacks_t, Some(&target), &[gamma[0] == 1.0], &sr, &hr, gamma)?.breakdown)
}

pub fn loss_l1_transfer(i_tar: &ImageTensor, i_ger: &ImageTensor) -> Result<f64> {
    if !i_tar.same_shape(i_ger) {
        return Err(ShtError::ShapeMismatch("transfer L1 on differently shaped images".into()));
    }
    let n = i_tar.data().len() as f64;
    Ok(i_tar.data().iter().zip(i_ger.data()).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>() / n)
}

/// Frozen first-block feature extractor φ: `conv1_1 → ReLU → conv1_2` on
/// ImageNet-normalized input, returning the `conv1_2` response.
#[derive(Debug, Clone)]
pub struct PerceptualExtractor {
    conv1: Conv2d,
    conv2: Conv2d,
    identity: String,
}

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

impl PerceptualExtractor {
    /// Resolves the configured source. `Disabled` yields `None`.
    pub fn from_config(cfg: &PerceptualConfig, device: &Device) -> Result<Option<Self>> {
        match &cfg.source {
            PerceptualSource::File { path } => Self::load(path, device).map(Some),
            PerceptualSource::Seeded { seed } => Self::seeded(*seed, cfg.channels, device).map(Some),
            PerceptualSource::Disabled => {
                log::warn!("perceptual loss disabled by configuration; the term is dropped");
                Ok(None)
            }
        }
    }

    /// Loads `conv1_1.{weight,bias}` and `conv1_2.{weight,bias}` from a safetensors file.
    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let unavailable = |why: String| ShtError::ExtractorUnavailable(format!("{}: {why}", path.display()));
        let tensors = candle_core::safetensors::load(path, device).map_err(|e| unavailable(e.to_string()))?;
        let get = |name: &str| -> Result<Tensor> {
            Ok(tensors
                .get(name)
                .ok_or_else(|| unavailable(format!("tensor `{name}` missing")))?
                .to_dtype(DType::F32)?)
        };
        let (w1, b1, w2, b2) = (get("conv1_1.weight")?, get("conv1_1.bias")?, get("conv1_2.weight")?, get("conv1_2.bias")?);
        let c = w1.dim(0)?;
        if w1.dims() != [c, 3, 3, 3] || w2.dims() != [c, c, 3, 3] || b1.dims() != [c] || b2.dims() != [c] {
            return Err(unavailable("unexpected conv1 tensor shapes".into()));
        }
        Ok(Self {
            conv1: Conv2d::from_tensors(w1, Some(b1), 1, 1),
            conv2: Conv2d::from_tensors(w2, Some(b2), 1, 1),
            identity: format!("vgg19/conv1_2 from {}", path.display()),
        })
    }

    /// He-normal weights from a fixed seed; a stand-in when no pretrained
    /// weights are available.
    pub fn seeded(seed: u64, channels: usize, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, fan_in: usize| -> Vec<f32> {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
        };
        let w1 = Tensor::from_vec(draw(channels * 27, 27), (channels, 3, 3, 3), device)?;
        let w2 = Tensor::from_vec(draw(channels * channels * 9, channels * 9), (channels, channels, 3, 3), device)?;
        let zeros = Tensor::zeros(channels, DType::F32, device)?;
        Ok(Self {
            conv1: Conv2d::from_tensors(w1, Some(zeros.clone()), 1, 1),
            conv2: Conv2d::from_tensors(w2, Some(zeros), 1, 1),
            identity: format!("seeded/conv1_2 seed={seed} width={channels}"),
        })
    }

    /// Architecture and weight provenance, recorded in checkpoints.
    pub fn identity(&self) -> &str {
        &self.identity
    }

    /// φ(x) for `(B, 3, H, W)` input in [0, 1]; spatial size is preserved.
    pub fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let dev = x.device();
        let mean = Tensor::new(&IMAGENET_MEAN, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
        let x = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        self.conv2.forward(&relu(&self.conv1.forward(&x)?)?)
    }

    pub fn per_sample(&self, a: &Tensor, b: &Tensor) -> CResult<Tensor> {
        l1_per_sample(&self.forward(a)?, &self.forward(b)?)
    }
}

/// `mean |φ(I_ger) − φ(I_tar)|`.
pub fn loss_perceptual(i_tar: &ImageTensor, i_ger: &ImageTensor, phi: Option<&PerceptualExtractor>) -> Result<f64> {
    let phi = phi.ok_or_else(|| ShtError::ExtractorUnavailable("no perceptual extractor loaded".into()))?;
    if !i_tar.same_shape(i_ger) || i_tar.channels() != 3 {
        return Err(ShtError::ShapeMismatch("perceptual loss needs equally shaped RGB images".into()));
    }
    let dev = Device::Cpu;
    let a = i_tar.to_tensor(&dev)?.to_dtype(DType::F64)?;
    let b = i_ger.to_tensor(&dev)?.to_dtype(DType::F64)?;
    Ok(scalar(&phi.per_sample(&b, &a)?.sum_all()?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanRole {
    Generator,
    Discriminator,
}

/// Appearance and shape discriminator scores in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorScores {
    pub appearance: f64,
    pub shape: f64,
}

impl DiscriminatorScores {
    fn check(&self) -> Result<()> {
        for s in [self.appearance, self.shape] {
            if !(s > 0.0 && s < 1.0) {
                return Err(ShtError::ScoreOutOfRange(s));
            }
        }
        Ok(())
    }
}

/// The adversarial objective as written (the quantity the discriminator
/// maximizes): `log(D_A·D_S)` on real plus `log((1−D_A)(1−D_S))` on fake.
/// For the generator role only the fake term is included.
pub fn gan_objective(real: &DiscriminatorScores, fake: &DiscriminatorScores, role: GanRole) -> Result<f64> {
    real.check()?;
    fake.check()?;
    let fake_term = (1.0 - fake.appearance).ln() + (1.0 - fake.shape).ln();
    Ok(match role {
        GanRole::Discriminator => real.appearance.ln() + real.shape.ln() + fake_term,
        GanRole::Generator => fake_term,
    })
}

/// The value each role minimizes: the negated objective for the
/// discriminator; `log((1−D_A)(1−D_S))` (or `−log(D_A·D_S)` when
/// non-saturating) for the generator.
pub fn loss_gan(
    real: &DiscriminatorScores,
    fake: &DiscriminatorScores,
    role: GanRole,
    non_saturating: bool,
) -> Result<f64> {
    match role {
        GanRole::Discriminator => Ok(-gan_objective(real, fake, role)?),
        GanRole::Generator if non_saturating => {
            fake.check()?;
            Ok(-(fake.appearance.ln() + fake.shape.ln()))
        }
        GanRole::Generator => gan_objective(real, fake, role),
    }
}

/// Per-sample tensor form of [`loss_gan`]; scores are `(B,)` and already clamped.
pub fn gan_loss_per_sample(
    real: Option<(&Tensor, &Tensor)>,
    fake: (&Tensor, &Tensor),
    role: GanRole,
    non_saturating: bool,
) -> CResult<Tensor> {
    let log1m = |t: &Tensor| -> CResult<Tensor> { t.affine(-1.0, 1.0)?.log() };
    match role {
        GanRole::Discriminator => {
            let (ra, rs) = real.ok_or_else(|| candle_core::Error::Msg("discriminator loss needs real scores".into()))?;
            let obj = (((ra.log()? + rs.log()?)? + log1m(fake.0)?)? + log1m(fake.1)?)?;
            obj.neg()
        }
        GanRole::Generator if non_saturating => (fake.0.log()? + fake.1.log()?)?.neg(),
        GanRole::Generator => log1m(fake.0)? + log1m(fake.1)?,
    }
}

/// Generator-side L_PT for one transfer: `λ₁·GAN + λ₂·L1 + λ₃·perceptual`.
pub fn loss_pt(
    i_tar: &ImageTensor,
    i_ger: &ImageTensor,
    real: &DiscriminatorScores,
    fake: &DiscriminatorScores,
    phi: Option<&PerceptualExtractor>,
    lambda: [f64; 3],
    non_saturating: bool,
) -> Result<LossBreakdown> {
    let mut b = LossBreakdown::default();
    b.add("gan", lambda[0], loss_gan(real, fake, GanRole::Generator, non_saturating)?);
    b.add("l1_transfer", lambda[1], loss_l1_transfer(i_tar, i_ger)?);
    if phi.is_some() {
        b.add("perceptual", lambda[2], loss_perceptual(i_tar, i_ger, phi)?);
    }
    Ok(b)
}

/// Loss terms of one training pair under the joint objective.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLosses {
    pub labeled: bool,
    pub dh_j: LossBreakdown,
    pub dh_k: LossBreakdown,
    /// Transfer `j → k`.
    pub pt_jk: LossBreakdown,
    /// Transfer `k → j`.
    pub pt_kj: LossBreakdown,
}

/// Sum over labeled and unlabeled pairs of `L_DH (or L'_DH) + L_PT(j→k) + L_PT(k→j)`.
/// Unlabeled pairs must not carry a heatmap term.
pub fn loss_sht(pairs: &[PairLosses]) -> Result<LossBreakdown> {
    let mut total = LossBreakdown::default();
    for p in pairs {
        if !p.labeled && (p.dh_j.get("heatmap_mse") != 0.0 || p.dh_k.get("heatmap_mse") != 0.0) {
            return Err(ShtError::ShapeMismatch("unlabeled pair carries a heatmap loss".into()));
        }
        for part in [&p.dh_j, &p.dh_k, &p.pt_jk, &p.pt_kj] {
            total = total.merge(part);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl FnMut(usize, usize, usize) -> f32) -> ImageTensor {
        ImageTensor::from_fn(h, w, 3, ImageRole::Hr, f).unwrap()
    }

    #[test]
    fn gradient_map_constant_is_zero() {
        let g = gradient_map(&img(8, 8, |_, _, _| 0.37)).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn gradient_map_ramp() {
        let w = 16;
        let g = gradient_map(&img(6, w, |_, x, _| x as f32 / w as f32)).unwrap();
        for y in 0..6 {
            for x in 1..w - 1 {
                let v = g.get(y, x, 0) as f64;
                assert!((v - 2.0 / w as f64).abs() <= GRADIENT_DELTA.sqrt() + 1e-7, "{v}");
            }
        }
    }

    #[test]
    fn gradient_map_impulse() {
        let g = gradient_map(&img(5, 5, |y, x, _| if (y, x) == (2, 2) { 1.0 } else { 0.0 })).unwrap();
        for (y, x) in [(1, 2), (3, 2), (2, 1), (2, 3)] {
            assert!((g.get(y, x, 1) - 1.0).abs() < 1e-5);
        }
        assert!(g.get(2, 2, 1).abs() < 1e-9);
    }

    #[test]
    fn gan_closed_forms() {
        let half = DiscriminatorScores { appearance: 0.5, shape: 0.5 };
        let d = gan_objective(&half, &half, GanRole::Discriminator).unwrap();
        assert!((d - 2.0 * 0.25f64.ln()).abs() < 1e-12);
        assert!((d + 2.77259).abs() < 1e-5);
        assert!((loss_gan(&half, &half, GanRole::Discriminator, false).unwrap() - 2.77259).abs() < 1e-5);
        let g = loss_gan(&half, &half, GanRole::Generator, false).unwrap();
        assert!((g + 1.38629).abs() < 1e-5);
        let bad = DiscriminatorScores { appearance: 1.0, shape: 0.5 };
        assert!(matches!(loss_gan(&half, &bad, GanRole::Generator, false), Err(ShtError::ScoreOutOfRange(_))));
    }

    #[test]
    fn clamped_scores_keep_logs_finite() {
        let real = DiscriminatorScores { appearance: 1.0 - SCORE_EPS, shape: 1.0 - SCORE_EPS };
        let fake = DiscriminatorScores { appearance: SCORE_EPS, shape: SCORE_EPS };
        let v = gan_objective(&real, &fake, GanRole::Discriminator).unwrap();
        assert!(v.is_finite() && v < 0.0 && v > -1e-6);
    }

    #[test]
    fn gan_tensor_matches_scalar() {
        let dev = Device::Cpu;
        let ra = Tensor::new(&[0.7f64, 0.2], &dev).unwrap();
        let rs = Tensor::new(&[0.6f64, 0.9], &dev).unwrap();
        let fa = Tensor::new(&[0.3f64, 0.4], &dev).unwrap();
        let fs = Tensor::new(&[0.1f64, 0.5], &dev).unwrap();
        for role in [GanRole::Discriminator, GanRole::Generator] {
            for ns in [false, true] {
                let t: Vec<f64> = gan_loss_per_sample(Some((&ra, &rs)), (&fa, &fs), role, ns).unwrap().to_vec1().unwrap();
                let r0 = DiscriminatorScores { appearance: 0.7, shape: 0.6 };
                let f0 = DiscriminatorScores { appearance: 0.3, shape: 0.1 };
                assert!((t[0] - loss_gan(&r0, &f0, role, ns).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l1_transfer_examples() {
        let a = img(4, 4, |y, x, c| ((y + x + c) % 5) as f32 / 10.0);
        let b = img(4, 4, |y, x, c| ((y + x + c) % 5) as f32 / 10.0 + 0.1);
        assert_eq!(loss_l1_transfer(&a, &a).unwrap(), 0.0);
        assert!((loss_l1_transfer(&a, &b).unwrap() - 0.1).abs() < 1e-6);
        assert_eq!(loss_l1_transfer(&a, &b).unwrap(), loss_l1_transfer(&b, &a).unwrap());
    }

    #[test]
    fn perceptual_zero_on_identical_and_nonnegative() {
        let phi = PerceptualExtractor::seeded(0, 8, &Device::Cpu).unwrap();
        let a = img(8, 8, |y, x, c| ((y * 3 + x + c) % 7) as f32 / 7.0);
        let b = img(8, 8, |y, x, _| ((y + x) % 3) as f32 / 3.0);
        assert_eq!(loss_perceptual(&a, &a, Some(&phi)).unwrap(), 0.0);
        assert!(loss_perceptual(&a, &b, Some(&phi)).unwrap() > 0.0);
        assert!(matches!(loss_perceptual(&a, &b, None), Err(ShtError::ExtractorUnavailable(_))));
        let missing = PerceptualExtractor::load(Path::new("/nonexistent/vgg.safetensors"), &Device::Cpu);
        assert!(matches!(missing, Err(ShtError::ExtractorUnavailable(_))));
    }

    #[test]
    fn perceptual_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let dev = Device::Cpu;
        let phi = PerceptualExtractor::seeded(4, 4, &dev).unwrap();
        let mut map = std::collections::HashMap::new();
        map.insert("conv1_1.weight".to_string(), Tensor::randn(0f32, 0.1, (4, 3, 3, 3), &dev).unwrap());
        map.insert("conv1_1.bias".to_string(), Tensor::zeros(4, DType::F32, &dev).unwrap());
        map.insert("conv1_2.weight".to_string(), Tensor::randn(0f32, 0.1, (4, 4, 3, 3), &dev).unwrap());
        map.insert("conv1_2.bias".to_string(), Tensor::zeros(4, DType::F32, &dev).unwrap());
        let path = dir.path().join("vgg.safetensors");
        candle_core::safetensors::save(&map, &path).unwrap();
        let loaded = PerceptualExtractor::load(&path, &dev).unwrap();
        assert!(loaded.identity().starts_with("vgg19/conv1_2"));
        let x = Tensor::rand(0f32, 1.0, (1, 3, 6, 6), &dev).unwrap();
        assert_eq!(loaded.forward(&x).unwrap().dims(), &[1, 4, 6, 6]);
        assert_eq!(phi.forward(&x).unwrap().dims(), &[1, 4, 6, 6]);
    }

    #[test]
    fn loss_dh_perfect_and_gated() {
        let hm = HeatmapStack::new(vec![0.0, 0.5, 1.0, 0.25], 1, 2, 2).unwrap();
        let other = HeatmapStack::new(vec![0.3, 0.5, 0.1, 0.0], 1, 2, 2).unwrap();
        let a = img(4, 4, |y, x, _| (y * 4 + x) as f32 / 16.0);
        let perfect = loss_dh(&[hm.clone(), hm.clone()], &hm, &a, &a, [1.0, 0.01, 0.01]).unwrap();
        assert_eq!(perfect.total, 0.0);
        let gated = loss_dh(&[other.clone()], &hm, &a, &a, [0.0, 0.01, 0.01]).unwrap();
        assert_eq!(gated.get("heatmap_mse"), 0.0);
        assert_eq!(gated.total, 0.0);
        let labeled = loss_dh(&[other], &hm, &a, &a, [1.0, 0.01, 0.01]).unwrap();
        assert!(labeled.get("heatmap_mse") > 0.0);
        assert!((labeled.total - labeled.weighted_sum()).abs() < 1e-15);
        assert!(loss_dh(&[hm.clone()], &hm, &a, &a, [0.5, 0.01, 0.01]).is_err());
    }

    #[test]
    fn loss_dh_single_pixel_difference() {
        // Flat images: a one-pixel 0.2 difference at a corner-free location
        // still changes gradient maps, so use a single-pixel image instead.
        let hm = HeatmapStack::new(vec![0.5], 1, 1, 1).unwrap();
        let a = ImageTensor::new(vec![0.5, 0.5, 0.5], 1, 1, 3, ImageRole::Sr).unwrap();
        let b = ImageTensor::new(vec![0.7, 0.5, 0.5], 1, 1, 3, ImageRole::Hr).unwrap();
        let l = loss_dh(&[hm.clone()], &hm, &a, &b, [1.0, 0.01, 0.01]).unwrap();
        assert_eq!(l.get("gradient_l1"), 0.0);
        assert!((l.total - 0.01 * 0.2 / 3.0).abs() < 1e-9, "{}", l.total);
    }
}
