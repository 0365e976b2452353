//! Dual hallucination network: a stacked-hourglass landmark stream and a
//! super-resolution stream, coupled after every stack by two fusion blocks.
//!
//! Per stack `t`:
//!
//! ```text
//! P_t  = Hourglass_t(P'_{t-1})            (pose features, C_p channels)
//! Q_t  = SrModule_t(Q'_{t-1})             (hallucination features, C_q channels)
//! Q'_t = Q_t + Q_t ⊙ σ(RB(P_t))           (pose attention)
//! P'_t = P_t + conv(P_t ‖ Q'_t)           (channel-concatenated enrichment)
//! H_t  = head_t(P'_t)
//! ```
//!
//! After the last stack a sub-pixel upsampling head turns `Q'_T` into the
//! hallucinated face, centred on mid-grey before the [0, 1] clamp.

use candle_core::{Device, Tensor};

use crate::config::ShtConfig;
use crate::error::{Result, ShtError};
use crate::heatmap::HeatmapStack;
use crate::image::{ImageRole, ImageTensor};
use crate::nn::{check_finite, maxpool2, pixel_shuffle, relu, upsample2, Conv2d, ParamStore};

type CResult<T> = candle_core::Result<T>;

/// Pre-activation bottleneck residual block (1×1 → 3×3 → 1×1), with a 1×1
/// projection on the skip path when the widths differ.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    skip: Option<Conv2d>,
}

impl Bottleneck {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let mid = (c_out / 2).max(1);
        Ok(Self {
            conv1: ps.conv(&format!("{name}.conv1"), c_in, mid, 1, 1, 0)?,
            conv2: ps.conv(&format!("{name}.conv2"), mid, mid, 3, 1, 1)?,
            conv3: ps.conv(&format!("{name}.conv3"), mid, c_out, 1, 1, 0)?,
            skip: if c_in != c_out { Some(ps.conv(&format!("{name}.skip"), c_in, c_out, 1, 1, 0)?) } else { None },
        })
    }

    pub fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let y = self.conv1.forward(&relu(x)?)?;
        let y = self.conv2.forward(&relu(&y)?)?;
        let y = self.conv3.forward(&relu(&y)?)?;
        match &self.skip {
            Some(s) => y + s.forward(x)?,
            None => y + x,
        }
    }
}

fn run_blocks(blocks: &[Bottleneck], x: &Tensor) -> CResult<Tensor> {
    blocks.iter().try_fold(x.clone(), |acc, b| b.forward(&acc))
}

#[derive(Debug, Clone)]
struct Hourglass {
    up: Vec<Bottleneck>,
    down: Vec<Bottleneck>,
    inner: Box<Inner>,
    after: Vec<Bottleneck>,
}

#[derive(Debug, Clone)]
enum Inner {
    Nested(Hourglass),
    Bottom(Vec<Bottleneck>),
}

impl Hourglass {
    fn new(ps: &mut ParamStore, name: &str, depth: usize, blocks: usize, c: usize) -> Result<Self> {
        let make = |ps: &mut ParamStore, tag: &str| -> Result<Vec<Bottleneck>> {
            (0..blocks).map(|i| Bottleneck::new(ps, &format!("{name}.{tag}{i}"), c, c)).collect()
        };
        let up = make(ps, "up")?;
        let down = make(ps, "down")?;
        let inner = if depth > 1 {
            Inner::Nested(Hourglass::new(ps, &format!("{name}.inner"), depth - 1, blocks, c)?)
        } else {
            Inner::Bottom(make(ps, "bottom")?)
        };
        let after = make(ps, "after")?;
        Ok(Self { up, down, inner: Box::new(inner), after })
    }

    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let up = run_blocks(&self.up, x)?;
        let low = run_blocks(&self.down, &maxpool2(x)?)?;
        let low = match self.inner.as_ref() {
            Inner::Nested(h) => h.forward(&low)?,
            Inner::Bottom(b) => run_blocks(b, &low)?,
        };
        let low = run_blocks(&self.after, &low)?;
        up + upsample2(&low)?
    }
}

/// One hourglass plus its residual/1×1 output layers; shape preserving.
#[derive(Debug, Clone)]
pub struct HourglassUnit {
    hourglass: Hourglass,
    post: Bottleneck,
    lin: Conv2d,
    channels: usize,
}

impl HourglassUnit {
    pub fn new(ps: &mut ParamStore, name: &str, depth: usize, blocks: usize, c: usize) -> Result<Self> {
        Ok(Self {
            hourglass: Hourglass::new(ps, &format!("{name}.hg"), depth, blocks, c)?,
            post: Bottleneck::new(ps, &format!("{name}.post"), c, c)?,
            lin: ps.conv(&format!("{name}.lin"), c, c, 1, 1, 0)?,
            channels: c,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        expect_channels(x, self.channels, "hourglass input")?;
        let y = self.hourglass.forward(x)?;
        let y = self.post.forward(&y)?;
        Ok(relu(&self.lin.forward(&y)?)?)
    }
}

/// `conv → ReLU → conv` with identity skip.
#[derive(Debug, Clone)]
pub struct SrBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl SrBlock {
    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let y = relu(&self.conv1.forward(x)?)?;
        self.conv2.forward(&y)? + x
    }
}

#[derive(Debug, Clone)]
pub struct SrModule {
    blocks: Vec<SrBlock>,
    channels: usize,
}

impl SrModule {
    pub fn new(ps: &mut ParamStore, name: &str, blocks: usize, c: usize) -> Result<Self> {
        let blocks = (0..blocks)
            .map(|i| {
                Ok(SrBlock {
                    conv1: ps.conv(&format!("{name}.block{i}.conv1"), c, c, 3, 1, 1)?,
                    conv2: ps.conv(&format!("{name}.block{i}.conv2"), c, c, 3, 1, 1)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks, channels: c })
    }

    pub fn forward(&self, q: &Tensor) -> Result<Tensor> {
        expect_channels(q, self.channels, "sr module input")?;
        Ok(self.blocks.iter().try_fold(q.clone(), |acc, b| b.forward(&acc))?)
    }
}

/// Pose-attention gating of the hallucination features.
#[derive(Debug, Clone)]
pub struct FuBlock1 {
    rb: Bottleneck,
}

impl FuBlock1 {
    pub fn new(ps: &mut ParamStore, name: &str, c_pose: usize, c_sr: usize) -> Result<Self> {
        Ok(Self { rb: Bottleneck::new(ps, &format!("{name}.rb"), c_pose, c_sr)? })
    }

    /// The gate `σ(RB(P))`.
    pub fn attention(&self, p: &Tensor) -> Result<Tensor> {
        Ok(crate::nn::sigmoid(&self.rb.forward(p)?)?)
    }

    /// `Q' = Q + Q ⊙ σ(RB(P))`.
    pub fn forward(&self, p: &Tensor, q: &Tensor) -> Result<Tensor> {
        Self::fuse(q, &self.attention(p)?)
    }

    pub fn fuse(q: &Tensor, gate: &Tensor) -> Result<Tensor> {
        if q.dims() != gate.dims() {
            return Err(ShtError::ShapeMismatch(format!(
                "fublock1: Q {:?} vs attention {:?}",
                q.dims(),
                gate.dims()
            )));
        }
        Ok((q + (q * gate)?)?)
    }
}

/// Enrichment of the pose features with the gated hallucination features.
#[derive(Debug, Clone)]
pub struct FuBlock2 {
    conv: Conv2d,
}

impl FuBlock2 {
    pub fn new(ps: &mut ParamStore, name: &str, c_pose: usize, c_sr: usize) -> Result<Self> {
        Ok(Self { conv: ps.conv(&format!("{name}.conv"), c_pose + c_sr, c_pose, 3, 1, 1)? })
    }

    /// `P' = P + conv(P ‖ Q')`.
    pub fn forward(&self, p: &Tensor, q_prime: &Tensor) -> Result<Tensor> {
        let (pb, _, ph, pw) = p.dims4()?;
        let (qb, _, qh, qw) = q_prime.dims4()?;
        if (pb, ph, pw) != (qb, qh, qw) {
            return Err(ShtError::ShapeMismatch(format!(
                "fublock2: P {:?} vs Q' {:?}",
                p.dims(),
                q_prime.dims()
            )));
        }
        let cat = Tensor::cat(&[p, q_prime], 1)?;
        Ok((p + self.conv.forward(&cat)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct DhlnStack {
    pub hourglass: HourglassUnit,
    pub sr: SrModule,
    pub fu1: FuBlock1,
    pub fu2: FuBlock2,
    pub head: Conv2d,
}

/// Which couplings are active in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub fusion: bool,
    pub keep_states: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { fusion: true, keep_states: false }
    }
}

/// Per-stack intermediate features, kept on request.
#[derive(Debug, Clone)]
pub struct StackStates {
    pub p: Tensor,
    pub q: Tensor,
    pub p_prime: Tensor,
    pub q_prime: Tensor,
}

/// Batched network output.
#[derive(Debug, Clone)]
pub struct DhlnTensors {
    /// One `(B, L, h, w)` tensor per stack.
    pub heatmaps: Vec<Tensor>,
    /// `(B, 3, S, S)` hallucinated faces in [0, 1].
    pub sr: Tensor,
    pub states: Vec<StackStates>,
}

impl DhlnTensors {
    pub fn last_heatmaps(&self) -> &Tensor {
        self.heatmaps.last().expect("at least one stack")
    }
}

/// Single-image output in domain types.
#[derive(Debug, Clone)]
pub struct DhlnOutput {
    pub heatmaps_per_stack: Vec<HeatmapStack>,
    pub sr_image: ImageTensor,
}

#[derive(Debug)]
pub struct Dhln {
    stem_conv: Conv2d,
    stem_blocks: [Bottleneck; 2],
    stacks: Vec<DhlnStack>,
    upsample: Vec<Conv2d>,
    to_rgb: Conv2d,
    params: ParamStore,
    input_size: usize,
    sr_size: usize,
    pose_channels: usize,
    sr_channels: usize,
}

impl Dhln {
    pub fn new(cfg: &ShtConfig, seed: u64, device: &Device) -> Result<Self> {
        let mut ps = ParamStore::new(seed, device);
        let (cp, cq) = (cfg.pose_channels, cfg.sr_channels);
        let stem_conv = ps.conv("stem.conv", 3, cq, 3, 1, 1)?;
        let stem_blocks = [
            Bottleneck::new(&mut ps, "stem.block0", cq, cp / 2)?,
            Bottleneck::new(&mut ps, "stem.block1", cp / 2, cp)?,
        ];
        let stacks = (0..cfg.num_stacks)
            .map(|t| {
                let n = format!("stack{t}");
                Ok(DhlnStack {
                    hourglass: HourglassUnit::new(&mut ps, &format!("{n}.hourglass"), cfg.hourglass_depth, cfg.hourglass_blocks, cp)?,
                    sr: SrModule::new(&mut ps, &format!("{n}.sr"), cfg.sr_blocks_per_module, cq)?,
                    fu1: FuBlock1::new(&mut ps, &format!("{n}.fu1"), cp, cq)?,
                    fu2: FuBlock2::new(&mut ps, &format!("{n}.fu2"), cp, cq)?,
                    head: ps.conv(&format!("{n}.head"), cp, cfg.num_landmarks, 1, 1, 0)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let stages = cfg.sr_scale().trailing_zeros() as usize;
        let upsample = (0..stages)
            .map(|i| ps.conv(&format!("upsample{i}"), cq, 4 * cq, 3, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        let to_rgb = ps.conv("to_rgb", cq, 3, 3, 1, 1)?;
        Ok(Self {
            stem_conv,
            stem_blocks,
            stacks,
            upsample,
            to_rgb,
            params: ps,
            input_size: cfg.input_size,
            sr_size: cfg.sr_output_size,
            pose_channels: cp,
            sr_channels: cq,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn stacks(&self) -> &[DhlnStack] {
        &self.stacks
    }

    pub fn pose_channels(&self) -> usize {
        self.pose_channels
    }

    pub fn sr_channels(&self) -> usize {
        self.sr_channels
    }

    /// Zeroes the FUBlock2 convolutions and the last convolution of every
    /// SR block, making both residual paths identities.
    pub fn zero_residual_branches(&self) -> Result<()> {
        self.params.zero_where(|n| n.contains(".fu2.") || (n.contains(".sr.") && n.contains(".conv2.")))?;
        Ok(())
    }

    /// Runs the network on a `(B, 3, input, input)` batch.
    pub fn forward(&self, lr: &Tensor) -> Result<DhlnTensors> {
        self.forward_with(lr, ForwardOptions::default())
    }

    pub fn forward_with(&self, lr: &Tensor, opts: ForwardOptions) -> Result<DhlnTensors> {
        let (_, c, h, w) = lr.dims4()?;
        if (c, h, w) != (3, self.input_size, self.input_size) {
            return Err(ShtError::ShapeMismatch(format!(
                "DHLN expects (B, 3, {s}, {s}) input, got {:?}",
                lr.dims(),
                s = self.input_size
            )));
        }
        let stem = relu(&self.stem_conv.forward(lr)?)?;
        let mut q = stem.clone();
        let mut p = self.stem_blocks[1].forward(&self.stem_blocks[0].forward(&stem)?)?;
        let mut heatmaps = Vec::with_capacity(self.stacks.len());
        let mut states = Vec::new();
        for stack in &self.stacks {
            let p_t = stack.hourglass.forward(&p)?;
            let q_t = stack.sr.forward(&q)?;
            let (p_prime, q_prime) = if opts.fusion {
                let q_prime = stack.fu1.forward(&p_t, &q_t)?;
                (stack.fu2.forward(&p_t, &q_prime)?, q_prime)
            } else {
                (p_t.clone(), q_t.clone())
            };
            heatmaps.push(stack.head.forward(&p_prime)?);
            if opts.keep_states {
                states.push(StackStates { p: p_t, q: q_t, p_prime: p_prime.clone(), q_prime: q_prime.clone() });
            }
            p = p_prime;
            q = q_prime;
        }
        let mut x = q;
        for up in &self.upsample {
            x = relu(&pixel_shuffle(&up.forward(&x)?, 2)?)?;
        }
        let sr = (self.to_rgb.forward(&x)? + 0.5)?.clamp(0f32, 1f32)?;
        check_finite(&sr, "hallucinated image")?;
        check_finite(heatmaps.last().expect("num_stacks >= 1"), "heatmaps")?;
        Ok(DhlnTensors { heatmaps, sr, states })
    }

    /// Single-image inference returning domain types (heatmaps clamped to [0, 1]).
    pub fn forward_image(&self, lr_image: &ImageTensor) -> Result<DhlnOutput> {
        if lr_image.channels() != 3 {
            return Err(ShtError::ShapeMismatch("DHLN input must have 3 channels".into()));
        }
        let out = self.forward(&lr_image.to_tensor(self.params.device())?)?;
        let heatmaps_per_stack =
            out.heatmaps.iter().map(|h| HeatmapStack::from_tensor(h)).collect::<Result<Vec<_>>>()?;
        let sr_image = ImageTensor::from_tensor(&out.sr, ImageRole::Sr)?;
        debug_assert_eq!(sr_image.height(), self.sr_size);
        Ok(DhlnOutput { heatmaps_per_stack, sr_image })
    }
}

fn expect_channels(x: &Tensor, c: usize, what: &str) -> Result<()> {
    match x.dims4() {
        Ok((_, xc, _, _)) if xc == c => Ok(()),
        _ => Err(ShtError::ShapeMismatch(format!("{what}: expected {c} channels, got {:?}", x.dims()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ShtConfig {
        ShtConfig {
            num_landmarks: 3,
            num_stacks: 2,
            sr_blocks_per_module: 2,
            input_size: 16,
            heatmap_size: 16,
            sr_output_size: 128,
            pose_channels: 8,
            sr_channels: 4,
            hourglass_depth: 2,
            hourglass_blocks: 1,
            ..Default::default()
        }
    }

    fn max_abs(t: &Tensor) -> f32 {
        t.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn shapes() {
        let cfg = tiny_cfg();
        let net = Dhln::new(&cfg, 0, &Device::Cpu).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let out = net.forward(&x).unwrap();
        assert_eq!(out.heatmaps.len(), 2);
        assert_eq!(out.heatmaps[0].dims(), &[2, 3, 16, 16]);
        assert_eq!(out.sr.dims(), &[2, 3, 128, 128]);
        let bad = Tensor::rand(0f32, 1.0, (1, 3, 8, 8), &Device::Cpu).unwrap();
        assert!(matches!(net.forward(&bad), Err(ShtError::ShapeMismatch(_))));
    }

    #[test]
    fn sr_module_identity_when_branches_zeroed() {
        let mut ps = ParamStore::new(0, &Device::Cpu);
        let m = SrModule::new(&mut ps, "sr", 4, 4).unwrap();
        ps.zero_where(|n| n.contains("conv2")).unwrap();
        let q = Tensor::randn(0f32, 1.0, (1, 4, 8, 8), &Device::Cpu).unwrap();
        let out = m.forward(&q).unwrap();
        assert_eq!(max_abs(&(out - &q).unwrap()), 0.0);
        assert!(m.forward(&Tensor::zeros((1, 3, 8, 8), candle_core::DType::F32, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn fublock1_zero_q_and_half_gate() {
        let q = Tensor::randn(0f32, 1.0, (1, 4, 4, 4), &Device::Cpu).unwrap();
        let half = Tensor::full(0.5f32, (1, 4, 4, 4), &Device::Cpu).unwrap();
        let out = FuBlock1::fuse(&q, &half).unwrap();
        assert_eq!(max_abs(&(out - (&q * 1.5).unwrap()).unwrap()), 0.0);
        let mut ps = ParamStore::new(0, &Device::Cpu);
        let fu = FuBlock1::new(&mut ps, "fu1", 8, 4).unwrap();
        let p = Tensor::randn(0f32, 1.0, (1, 8, 4, 4), &Device::Cpu).unwrap();
        let zero = Tensor::zeros((1, 4, 4, 4), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert_eq!(max_abs(&fu.forward(&p, &zero).unwrap()), 0.0);
    }

    #[test]
    fn fublock2_identity_when_conv_zeroed() {
        let mut ps = ParamStore::new(0, &Device::Cpu);
        let fu = FuBlock2::new(&mut ps, "fu2", 8, 4).unwrap();
        ps.zero_where(|_| true).unwrap();
        let p = Tensor::randn(0f32, 1.0, (2, 8, 4, 4), &Device::Cpu).unwrap();
        let q = Tensor::randn(0f32, 1.0, (2, 4, 4, 4), &Device::Cpu).unwrap();
        let out = fu.forward(&p, &q).unwrap();
        assert_eq!(out.dims(), &[2, 8, 4, 4]);
        assert_eq!(max_abs(&(out - &p).unwrap()), 0.0);
        let q_bad = Tensor::randn(0f32, 1.0, (2, 4, 2, 2), &Device::Cpu).unwrap();
        assert!(fu.forward(&p, &q_bad).is_err());
    }

    #[test]
    fn hourglass_zero_in_zero_out() {
        let mut ps = ParamStore::new(0, &Device::Cpu);
        let hg = HourglassUnit::new(&mut ps, "hg", 2, 1, 8).unwrap();
        let z = Tensor::zeros((1, 8, 8, 8), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert_eq!(max_abs(&hg.forward(&z).unwrap()), 0.0);
        let r = Tensor::randn(0f32, 1.0, (1, 8, 8, 8), &Device::Cpu).unwrap();
        let y = hg.forward(&r).unwrap();
        assert_eq!(y.dims(), &[1, 8, 8, 8]);
        check_finite(&y, "hg").unwrap();
    }
}
