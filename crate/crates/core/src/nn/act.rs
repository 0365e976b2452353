//! Piecewise-linear activations with a single-pass backward.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

type CResult<T> = candle_core::Result<T>;

fn slice<'a, T>(data: &'a [T], l: &Layout) -> CResult<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("activation: input must be contiguous"),
    }
}

/// `x` for `x > 0`, `slope·x` otherwise.
struct Leaky {
    slope: f64,
}

impl CustomOp1 for Leaky {
    fn name(&self) -> &'static str {
        "sht-leaky"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(x) => {
                let a = self.slope as f32;
                CpuStorage::F32(slice(x, l)?.iter().map(|&v| if v > 0.0 { v } else { a * v }).collect())
            }
            CpuStorage::F64(x) => {
                CpuStorage::F64(slice(x, l)?.iter().map(|&v| if v > 0.0 { v } else { self.slope * v }).collect())
            }
            _ => candle_core::bail!("activation: unsupported dtype"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &LeakyGrad { slope: self.slope })?))
    }
}

/// `(x, g)` → `g` where `x > 0`, `slope·g` elsewhere.
struct LeakyGrad {
    slope: f64,
}

impl CustomOp2 for LeakyGrad {
    fn name(&self) -> &'static str {
        "sht-leaky-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                let a = self.slope as f32;
                let it = slice(x, l1)?.iter().zip(slice(g, l2)?);
                CpuStorage::F32(it.map(|(&v, &d)| if v > 0.0 { d } else { a * d }).collect())
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                let it = slice(x, l1)?.iter().zip(slice(g, l2)?);
                CpuStorage::F64(it.map(|(&v, &d)| if v > 0.0 { d } else { self.slope * d }).collect())
            }
            _ => candle_core::bail!("activation: unsupported or mixed dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }
}

pub fn relu(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Leaky { slope: 0.0 })
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Leaky { slope })
}
