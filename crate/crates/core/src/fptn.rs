//! Pose transfer network: a generator that re-renders a condition face under
//! target-pose heatmaps, and two patch discriminators judging appearance and
//! shape consistency.
//!
//! The generator encodes the condition image and the heatmap pair
//! (`H_con ‖ H_tar`) into an image and a pose pathway, runs a cascade of
//! transfer blocks at 1/4 (1/8 for 256 output) resolution and decodes back to
//! the condition image size:
//!
//! ```text
//! pose_c = conv(pose)
//! img'   = img + conv(img) ⊙ σ(pose_c)
//! pose'  = conv1×1(img' ‖ pose_c)
//! ```

use candle_core::{DType, Device, Tensor};

use crate::config::ShtConfig;
use crate::error::{Result, ShtError};
use crate::heatmap::HeatmapStack;
use crate::image::{ImageRole, ImageTensor};
use crate::losses::{DiscriminatorScores, SCORE_EPS};
use crate::nn::{check_finite, derive_seed, leaky_relu, relu, resize_bilinear, sigmoid, upsample2, Conv2d, ParamStore};

type CResult<T> = candle_core::Result<T>;

/// Clamps a squashed discriminator output into `[ε, 1 − ε]`.
pub fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

/// Generator input: condition face plus condition and target heatmaps.
#[derive(Debug, Clone)]
pub struct TransferInput {
    pub i_con: ImageTensor,
    pub h_con: HeatmapStack,
    pub h_tar: HeatmapStack,
}

impl TransferInput {
    pub fn new(i_con: ImageTensor, h_con: HeatmapStack, h_tar: HeatmapStack, sr_size: usize) -> Result<Self> {
        if h_con.len() != h_tar.len() || h_con.resolution() != h_tar.resolution() {
            return Err(ShtError::ShapeMismatch(format!(
                "condition heatmaps {}×{:?} vs target {}×{:?}",
                h_con.len(),
                h_con.resolution(),
                h_tar.len(),
                h_tar.resolution()
            )));
        }
        if (i_con.height(), i_con.width()) != (sr_size, sr_size) || i_con.channels() != 3 {
            return Err(ShtError::ShapeMismatch(format!(
                "condition image {}×{}×{} must be {sr_size}×{sr_size}×3",
                i_con.height(),
                i_con.width(),
                i_con.channels()
            )));
        }
        Ok(Self { i_con, h_con, h_tar })
    }
}

#[derive(Debug, Clone)]
struct ConvPair {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ConvPair {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, c: usize) -> Result<Self> {
        Ok(Self {
            conv1: ps.conv(&format!("{name}.conv1"), c_in, c, 3, 1, 1)?,
            conv2: ps.conv(&format!("{name}.conv2"), c, c, 3, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        self.conv2.forward(&relu(&self.conv1.forward(x)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct TransferBlock {
    img: ConvPair,
    pose: ConvPair,
    merge: Conv2d,
}

impl TransferBlock {
    fn new(ps: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            img: ConvPair::new(ps, &format!("{name}.img"), c, c)?,
            pose: ConvPair::new(ps, &format!("{name}.pose"), c, c)?,
            merge: ps.conv(&format!("{name}.merge"), 2 * c, c, 1, 1, 0)?,
        })
    }

    /// Returns the updated `(image, pose)` pathways.
    pub fn forward(&self, img: &Tensor, pose: &Tensor) -> CResult<(Tensor, Tensor)> {
        let pose_c = self.pose.forward(pose)?;
        let img_out = (img + (self.img.forward(img)? * sigmoid(&pose_c)?)?)?;
        let pose_out = relu(&self.merge.forward(&Tensor::cat(&[&img_out, &pose_c], 1)?)?)?;
        Ok((img_out, pose_out))
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    head: Conv2d,
    down: Vec<Conv2d>,
}

impl Encoder {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, widths: &[usize]) -> Result<Self> {
        let head = ps.conv(&format!("{name}.head"), c_in, widths[0], 3, 1, 1)?;
        let down = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| ps.conv(&format!("{name}.down{i}"), w[0], w[1], 4, 2, 1))
            .collect::<Result<_>>()?;
        Ok(Self { head, down })
    }

    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let x = relu(&self.head.forward(x)?)?;
        self.down.iter().try_fold(x, |acc, d| relu(&d.forward(&acc)?))
    }
}

#[derive(Debug)]
pub struct Generator {
    img_enc: Encoder,
    pose_enc: Encoder,
    blocks: Vec<TransferBlock>,
    up: Vec<Conv2d>,
    to_rgb: Conv2d,
    params: ParamStore,
    size: usize,
    landmarks: usize,
}

impl Generator {
    pub fn new(cfg: &ShtConfig, seed: u64, device: &Device) -> Result<Self> {
        let mut ps = ParamStore::new(seed, device);
        let c = cfg.fptn.channels;
        // ×4 downsampling at 128, one extra level at 256.
        let levels = if cfg.sr_output_size >= 256 { 3 } else { 2 };
        let widths: Vec<usize> = (0..=levels).map(|i| c << i.min(2)).collect();
        let inner = *widths.last().expect("non-empty");
        let img_enc = Encoder::new(&mut ps, "img_enc", 3, &widths)?;
        let pose_enc = Encoder::new(&mut ps, "pose_enc", 2 * cfg.num_landmarks, &widths)?;
        let blocks = (0..cfg.fptn.transfer_blocks)
            .map(|i| TransferBlock::new(&mut ps, &format!("block{i}"), inner))
            .collect::<Result<_>>()?;
        let up = (0..levels)
            .map(|i| ps.conv(&format!("up{i}"), widths[levels - i], widths[levels - i - 1], 3, 1, 1))
            .collect::<Result<_>>()?;
        let to_rgb = ps.conv("to_rgb", c, 3, 3, 1, 1)?;
        Ok(Self {
            img_enc,
            pose_enc,
            blocks,
            up,
            to_rgb,
            params: ps,
            size: cfg.sr_output_size,
            landmarks: cfg.num_landmarks,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Zeroes the last image-pathway convolution of every transfer block.
    pub fn zero_transfer_branches(&self) -> Result<usize> {
        self.params.zero_where(|n| n.starts_with("block") && n.contains(".img.conv2."))
    }

    fn check(&self, i_con: &Tensor, h_con: &Tensor, h_tar: &Tensor) -> Result<()> {
        let (b, c, h, w) = i_con.dims4()?;
        if (c, h, w) != (3, self.size, self.size) {
            return Err(ShtError::ShapeMismatch(format!(
                "generator expects (B, 3, {s}, {s}) images, got {:?}",
                i_con.dims(),
                s = self.size
            )));
        }
        if h_con.dims() != h_tar.dims() || h_con.dims4()?.0 != b || h_con.dims4()?.1 != self.landmarks {
            return Err(ShtError::ShapeMismatch(format!(
                "heatmaps {:?} / {:?} do not match batch {b} with {} landmarks",
                h_con.dims(),
                h_tar.dims(),
                self.landmarks
            )));
        }
        Ok(())
    }

    /// Encoded image pathway before and after the transfer cascade.
    pub fn transfer_features(&self, i_con: &Tensor, h_con: &Tensor, h_tar: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(i_con, h_con, h_tar)?;
        let h_con = resize_bilinear(h_con, self.size, self.size)?;
        let h_tar = resize_bilinear(h_tar, self.size, self.size)?;
        let img0 = self.img_enc.forward(i_con)?;
        let mut pose = self.pose_enc.forward(&Tensor::cat(&[&h_con, &h_tar], 1)?.to_dtype(i_con.dtype())?)?;
        let mut img = img0.clone();
        for b in &self.blocks {
            (img, pose) = b.forward(&img, &pose)?;
        }
        Ok((img0, img))
    }

    /// `(B, 3, S, S)` generated faces in [0, 1]; heatmaps are `(B, L, h, w)`
    /// at any resolution and are bilinearly resized to `S`.
    pub fn forward(&self, i_con: &Tensor, h_con: &Tensor, h_tar: &Tensor) -> Result<Tensor> {
        let (_, feats) = self.transfer_features(i_con, h_con, h_tar)?;
        let mut x = feats;
        for up in &self.up {
            x = relu(&up.forward(&upsample2(&x)?)?)?;
        }
        let out = (self.to_rgb.forward(&x)? + 0.5)?.clamp(0f32, 1f32)?;
        check_finite(&out, "generated image")?;
        Ok(out)
    }

    pub fn generate(&self, inp: &TransferInput) -> Result<ImageTensor> {
        let dev = self.params.device();
        let out = self.forward(
            &inp.i_con.to_tensor(dev)?,
            &inp.h_con.to_tensor(dev)?.unsqueeze(0)?,
            &inp.h_tar.to_tensor(dev)?.unsqueeze(0)?,
        )?;
        ImageTensor::from_tensor(&out, ImageRole::Generated)
    }
}

/// Strided patch classifier; the score is the logistic of the mean patch logit.
#[derive(Debug)]
pub struct Discriminator {
    layers: Vec<Conv2d>,
    head: Conv2d,
    params: ParamStore,
    in_channels: usize,
}

impl Discriminator {
    pub fn new(in_channels: usize, width: usize, seed: u64, device: &Device) -> Result<Self> {
        let mut ps = ParamStore::new(seed, device);
        let widths = [in_channels, width, 2 * width, 4 * width];
        let layers = (0..3)
            .map(|i| ps.conv(&format!("conv{i}"), widths[i], widths[i + 1], 4, 2, 1))
            .collect::<Result<_>>()?;
        let head = ps.conv("head", 4 * width, 1, 4, 1, 1)?;
        Ok(Self { layers, head, params: ps, in_channels })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `(B,)` clamped scores in double precision.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels {
            return Err(ShtError::ShapeMismatch(format!(
                "discriminator expects {} channels, got {:?}",
                self.in_channels,
                x.dims()
            )));
        }
        let y = self.layers.iter().try_fold(x.clone(), |acc, l| leaky_relu(&l.forward(&acc)?, 0.2))?;
        let logits = self.head.forward(&y)?;
        let b = logits.dim(0)?;
        let mean = logits.reshape((b, ()))?.mean(1)?.to_dtype(DType::F64)?;
        Ok(sigmoid(&mean)?.clamp(SCORE_EPS, 1.0 - SCORE_EPS)?)
    }
}

/// Generator plus appearance (`D_A`) and shape (`D_S`) discriminators.
#[derive(Debug)]
pub struct Fptn {
    pub generator: Generator,
    pub d_appearance: Discriminator,
    pub d_shape: Discriminator,
}

impl Fptn {
    pub fn new(cfg: &ShtConfig, seed: u64, device: &Device) -> Result<Self> {
        let w = cfg.fptn.disc_channels;
        Ok(Self {
            generator: Generator::new(cfg, derive_seed(seed, 1), device)?,
            d_appearance: Discriminator::new(6, w, derive_seed(seed, 2), device)?,
            d_shape: Discriminator::new(cfg.num_landmarks + 3, w, derive_seed(seed, 3), device)?,
        })
    }

    /// `D_A(I_con ‖ I_query)` on batches.
    pub fn appearance(&self, i_con: &Tensor, i_query: &Tensor) -> Result<Tensor> {
        if i_con.dims() != i_query.dims() {
            return Err(ShtError::ShapeMismatch(format!(
                "appearance pair {:?} vs {:?}",
                i_con.dims(),
                i_query.dims()
            )));
        }
        self.d_appearance.forward(&Tensor::cat(&[i_con, i_query], 1)?)
    }

    /// `D_S(H_tar ‖ I_query)` on batches; heatmaps are resized to the image size first.
    pub fn shape(&self, h_tar: &Tensor, i_query: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = i_query.dims4()?;
        if h_tar.dims4()?.0 != b {
            return Err(ShtError::ShapeMismatch(format!("heatmaps {:?} vs image {:?}", h_tar.dims(), i_query.dims())));
        }
        let h_tar = resize_bilinear(h_tar, h, w)?.to_dtype(i_query.dtype())?;
        self.d_shape.forward(&Tensor::cat(&[&h_tar, i_query], 1)?)
    }

    pub fn scores(&self, i_con: &Tensor, h_tar: &Tensor, i_query: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.appearance(i_con, i_query)?, self.shape(h_tar, i_query)?))
    }

    pub fn discriminator_appearance(&self, i_con: &ImageTensor, i_query: &ImageTensor) -> Result<f64> {
        if !i_con.same_shape(i_query) {
            return Err(ShtError::ShapeMismatch("appearance inputs differ in shape".into()));
        }
        let dev = self.generator.params().device();
        first(&self.appearance(&i_con.to_tensor(dev)?, &i_query.to_tensor(dev)?)?)
    }

    pub fn discriminator_shape(&self, h_tar: &HeatmapStack, i_query: &ImageTensor) -> Result<f64> {
        let dev = self.generator.params().device();
        first(&self.shape(&h_tar.to_tensor(dev)?.unsqueeze(0)?, &i_query.to_tensor(dev)?)?)
    }

    pub fn score_pair(&self, inp: &TransferInput, i_query: &ImageTensor) -> Result<DiscriminatorScores> {
        Ok(DiscriminatorScores {
            appearance: self.discriminator_appearance(&inp.i_con, i_query)?,
            shape: self.discriminator_shape(&inp.h_tar, i_query)?,
        })
    }
}

fn first(t: &Tensor) -> Result<f64> {
    Ok(t.to_vec1::<f64>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FptnConfig;

    fn cfg() -> ShtConfig {
        ShtConfig {
            num_landmarks: 3,
            input_size: 16,
            heatmap_size: 16,
            sr_output_size: 128,
            hourglass_depth: 2,
            fptn: FptnConfig { channels: 4, transfer_blocks: 2, disc_channels: 4, identity_fraction: 0.0 },
            ..Default::default()
        }
    }

    fn rand(shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::rand(0f32, 1.0, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn generator_shape_and_range() {
        let net = Fptn::new(&cfg(), 0, &Device::Cpu).unwrap();
        let out = net.generator.forward(&rand((2, 3, 128, 128)), &rand((2, 3, 16, 16)), &rand((2, 3, 16, 16))).unwrap();
        assert_eq!(out.dims(), &[2, 3, 128, 128]);
        let v: Vec<f32> = out.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(net.generator.forward(&rand((2, 3, 64, 64)), &rand((2, 3, 16, 16)), &rand((2, 3, 16, 16))).is_err());
    }

    #[test]
    fn zeroed_blocks_pass_image_pathway_through() {
        let net = Fptn::new(&cfg(), 3, &Device::Cpu).unwrap();
        assert_eq!(net.generator.zero_transfer_branches().unwrap(), 4);
        let (before, after) = net
            .generator
            .transfer_features(&rand((1, 3, 128, 128)), &rand((1, 3, 16, 16)), &rand((1, 3, 16, 16)))
            .unwrap();
        let d: f32 = (before - after).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn scores_in_open_interval_and_order_matters() {
        let net = Fptn::new(&cfg(), 1, &Device::Cpu).unwrap();
        let a = rand((1, 3, 128, 128));
        let b = rand((1, 3, 128, 128));
        let (s1, s2) = (net.appearance(&a, &b).unwrap(), net.appearance(&b, &a).unwrap());
        let (s1, s2) = (first(&s1).unwrap(), first(&s2).unwrap());
        assert!(s1 > 0.0 && s1 < 1.0);
        assert_ne!(s1, s2);
        let s = first(&net.shape(&rand((1, 3, 16, 16)), &a).unwrap()).unwrap();
        assert!(s > 0.0 && s < 1.0);
        assert_eq!(clamp_score(1.0), 1.0 - 1e-7);
        assert_eq!(clamp_score(0.0), 1e-7);
    }

    #[test]
    fn discriminators_have_input_gradient() {
        let net = Fptn::new(&cfg(), 2, &Device::Cpu).unwrap();
        let x = candle_core::Var::from_tensor(&rand((1, 3, 128, 128))).unwrap();
        let con = rand((1, 3, 128, 128));
        let h = rand((1, 3, 16, 16));
        for score in [net.appearance(&con, x.as_tensor()).unwrap(), net.shape(&h, x.as_tensor()).unwrap()] {
            let grads = score.sum_all().unwrap().backward().unwrap();
            let g: f32 = grads.get(x.as_tensor()).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar().unwrap();
            assert!(g > 0.0);
        }
    }

    #[test]
    fn deterministic() {
        let c = cfg();
        let a = Fptn::new(&c, 5, &Device::Cpu).unwrap();
        let b = Fptn::new(&c, 5, &Device::Cpu).unwrap();
        let (i, h) = (rand((1, 3, 128, 128)), rand((1, 3, 16, 16)));
        let oa: Vec<f32> = a.generator.forward(&i, &h, &h).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let ob: Vec<f32> = b.generator.forward(&i, &h, &h).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(oa, ob);
    }

    #[test]
    fn transfer_input_validation() {
        let img = ImageTensor::filled(128, 128, 3, 0.5, ImageRole::Sr).unwrap();
        let h3 = HeatmapStack::new(vec![0.0; 3 * 16 * 16], 3, 16, 16).unwrap();
        let h2 = HeatmapStack::new(vec![0.0; 2 * 16 * 16], 2, 16, 16).unwrap();
        assert!(TransferInput::new(img.clone(), h3.clone(), h3.clone(), 128).is_ok());
        assert!(TransferInput::new(img.clone(), h3.clone(), h2, 128).is_err());
        assert!(TransferInput::new(img, h3.clone(), h3, 256).is_err());
    }
}
