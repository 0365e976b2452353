//! Parameter storage, layers and tensor helpers shared by the networks.

mod act;
mod conv;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, ShtError};

pub use act::{leaky_relu, relu};
pub use conv::{add_channel_bias, conv2d};

type CResult<T> = candle_core::Result<T>;

/// Named, seeded trainable parameters of one network section.
///
/// Names are dotted paths; iteration order is lexicographic so checkpoints
/// and optimizer state line up deterministically.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device) -> Self {
        Self { vars: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed), device: device.clone() }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(ShtError::ShapeMismatch(format!("parameter `{name}` registered twice")));
        }
        let var = Var::from_vec(values, shape, &self.device)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(t)
    }

    /// Uniform(-1/√fan_in, 1/√fan_in) weights and zero bias.
    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Result<Conv2d> {
        let fan_in = c_in * k * k;
        let bound = 1.0 / (fan_in as f32).sqrt();
        let n = c_out * fan_in;
        let values: Vec<f32> = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        let weight = self.insert(format!("{name}.weight"), values, &[c_out, c_in, k, k])?;
        let bias = self.insert(format!("{name}.bias"), vec![0.0; c_out], &[c_out])?;
        Ok(Conv2d { weight, bias: Some(bias), stride, pad })
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter whose name satisfies `pred` with zeros.
    pub fn zero_where(&self, pred: impl Fn(&str) -> bool) -> Result<usize> {
        let mut n = 0;
        for (name, var) in &self.vars {
            if pred(name) {
                var.set(&var.zeros_like()?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Deep copy of the current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars.iter().map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?))).collect()
    }

    /// Loads values by name; every parameter must be present with its exact shape.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = values
                .get(name)
                .ok_or_else(|| ShtError::Checkpoint(format!("missing parameter `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(ShtError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(DType::F32)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    /// Builds a layer from explicit (frozen) tensors.
    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>, stride: usize, pad: usize) -> Self {
        Self { weight, bias, stride, pad }
    }

    pub fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let dt = x.dtype();
        let w = if self.weight.dtype() == dt { self.weight.clone() } else { self.weight.to_dtype(dt)? };
        let y = conv2d(x, &w, self.stride, self.pad)?;
        match &self.bias {
            Some(b) => {
                let b = if b.dtype() == dt { b.clone() } else { b.to_dtype(dt)? };
                add_channel_bias(&y, &b)
            }
            None => Ok(y),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Logistic function through `tanh`, finite for any finite input.
pub fn sigmoid(x: &Tensor) -> CResult<Tensor> {
    ((x * 0.5)?.tanh()? + 1.0)? * 0.5
}

/// Nearest-neighbour ×2 upsampling of `(B, C, H, W)`.
pub fn upsample2(x: &Tensor) -> CResult<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h, 1, w, 1))?.broadcast_as((b, c, h, 2, w, 2))?.reshape((b, c, 2 * h, 2 * w))
}

/// 2×2 max pooling with stride 2.
pub fn maxpool2(x: &Tensor) -> CResult<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h / 2, 2, w / 2, 2))?.max(5)?.max(3)
}

/// Sub-pixel rearrangement `(B, C·r², H, W)` → `(B, C, H·r, W·r)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> CResult<Tensor> {
    let (b, crr, h, w) = x.dims4()?;
    let c = crr / (r * r);
    x.reshape((b, c, r, r, h, w))?.permute((0, 1, 4, 2, 5, 3))?.reshape((b, c, h * r, w * r))
}

/// Half-pixel bilinear interpolation matrix `(dst, src)` with edge clamping.
pub fn bilinear_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let t = pos - lo as f64;
        m[i * src + lo] += 1.0 - t;
        m[i * src + hi] += t;
    }
    m
}

/// Differentiable bilinear resize of `(B, C, H, W)` to `(B, C, out_h, out_w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> CResult<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ry = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let rx = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?.to_dtype(x.dtype())?;
    let t = x.broadcast_matmul(&rx.t()?)?;
    ry.broadcast_matmul(&t)
}

/// Mean over every dimension except the batch dimension, giving `(B,)`.
pub fn mean_per_sample(x: &Tensor) -> CResult<Tensor> {
    let b = x.dim(0)?;
    x.reshape((b, ()))?.mean(D::Minus1)
}

/// SplitMix64 finalizer over `(seed, stream)`; gives independent,
/// order-free seeds for sub-networks and per-item sampling.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fails with `NonFiniteActivation` if `t` holds NaN or ±∞.
pub fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let s: f32 = t.to_dtype(DType::F32)?.abs()?.sum_all()?.to_scalar()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(ShtError::NonFiniteActivation(what.to_string()))
    }
}
