//! 2-D convolution as a custom op. Stride-1 layers run as implicit GEMM
//! (one GEMM per kernel tap over the padded input); strided ones use
//! im2col + GEMM, with col2im for the input gradient.
//!
//! Single-threaded and fully deterministic; supports f32 and f64.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};
use gemm::Parallelism;

type CResult<T> = candle_core::Result<T>;

trait Scalar: Copy + Default + 'static + std::ops::AddAssign + Send + Sync {
    const ZERO: Self;
    const ONE: Self;
}
impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
}
impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> CResult<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            candle_core::bail!("conv2d: kernel {k} larger than padded input {h}x{w} (pad {pad})")
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(Self { c_in, h, w, k, stride, pad, oh, ow })
    }
    fn ckk(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn ohw(&self) -> usize {
        self.oh * self.ow
    }
    fn hw(&self) -> usize {
        self.h * self.w
    }
    /// Stride-1 kernels larger than 1×1 skip im2col entirely.
    fn implicit(&self) -> bool {
        self.stride == 1 && !self.pointwise()
    }
    fn padded(&self) -> Padded {
        let wp = self.w + 2 * self.pad;
        Padded { wp, plane: (self.h + 2 * self.pad + 1) * wp, n: self.oh * wp }
    }
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
    /// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s) };
        let hi = if self.w + self.pad > kx { ((self.w + self.pad - kx - 1) / s + 1).min(self.ow) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// Implicit-GEMM layout for stride 1. The input is zero-padded into planes
/// of `plane` elements (one spare row), and each kernel tap `(ky, kx)` is a
/// GEMM against the planes shifted by `ky·wp + kx`. Results come out `wp`
/// columns wide; the last `k − 1` columns of every row are junk.
struct Padded {
    wp: usize,
    plane: usize,
    n: usize,
}

fn pad_into<T: Scalar>(x: &[T], g: &Geom, p: &Padded, buf: &mut [T]) {
    for ci in 0..g.c_in {
        for y in 0..g.h {
            let dst = ci * p.plane + (y + g.pad) * p.wp + g.pad;
            buf[dst..dst + g.w].copy_from_slice(&x[ci * g.hw() + y * g.w..][..g.w]);
        }
    }
}

/// `(C, oh, ow)` → `(C, oh, wp)` with zeroed junk columns.
fn widen<T: Scalar>(dy: &[T], g: &Geom, p: &Padded, c: usize, buf: &mut [T]) {
    for ci in 0..c {
        for oy in 0..g.oh {
            buf[ci * p.n + oy * p.wp..][..g.ow].copy_from_slice(&dy[(ci * g.oh + oy) * g.ow..][..g.ow]);
        }
    }
}

fn forward_implicit<T: Scalar>(x: &[T], w: &[T], b: usize, c_out: usize, g: &Geom) -> Vec<T> {
    let (p, kk, ckk) = (g.padded(), g.k * g.k, g.ckk());
    let mut out = vec![T::ZERO; b * c_out * g.ohw()];
    let mut xpad = vec![T::ZERO; g.c_in * p.plane];
    let mut acc = vec![T::ZERO; c_out * p.n];
    for bi in 0..b {
        pad_into(&x[bi * g.c_in * g.hw()..], g, &p, &mut xpad);
        for tap in 0..kk {
            let off = (tap / g.k) * p.wp + tap % g.k;
            matmul(c_out, p.n, g.c_in, &mut acc, p.n, 1, tap > 0, &w[tap..], ckk, kk, &xpad[off..], p.plane, 1);
        }
        let ob = &mut out[bi * c_out * g.ohw()..];
        for o in 0..c_out {
            for oy in 0..g.oh {
                ob[(o * g.oh + oy) * g.ow..][..g.ow].copy_from_slice(&acc[o * p.n + oy * p.wp..][..g.ow]);
            }
        }
    }
    out
}

fn backward_input_implicit<T: Scalar>(dy: &[T], w: &[T], b: usize, c_out: usize, g: &Geom) -> Vec<T> {
    let (p, kk, ckk) = (g.padded(), g.k * g.k, g.ckk());
    let mut dx = vec![T::ZERO; b * g.c_in * g.hw()];
    let mut dy_wide = vec![T::ZERO; c_out * p.n];
    let mut dxpad = vec![T::ZERO; g.c_in * p.plane];
    for bi in 0..b {
        widen(&dy[bi * c_out * g.ohw()..], g, &p, c_out, &mut dy_wide);
        dxpad.fill(T::ZERO);
        for tap in 0..kk {
            let off = (tap / g.k) * p.wp + tap % g.k;
            matmul(g.c_in, p.n, c_out, &mut dxpad[off..], p.plane, 1, true, &w[tap..], kk, ckk, &dy_wide, p.n, 1);
        }
        let xb = &mut dx[bi * g.c_in * g.hw()..];
        for ci in 0..g.c_in {
            for y in 0..g.h {
                xb[ci * g.hw() + y * g.w..][..g.w].copy_from_slice(&dxpad[ci * p.plane + (y + g.pad) * p.wp + g.pad..][..g.w]);
            }
        }
    }
    dx
}

fn backward_weight_implicit<T: Scalar>(x: &[T], dy: &[T], b: usize, c_out: usize, g: &Geom) -> Vec<T> {
    let (p, kk, ckk) = (g.padded(), g.k * g.k, g.ckk());
    let mut dw = vec![T::ZERO; c_out * ckk];
    let mut xpad = vec![T::ZERO; g.c_in * p.plane];
    let mut dy_wide = vec![T::ZERO; c_out * p.n];
    for bi in 0..b {
        pad_into(&x[bi * g.c_in * g.hw()..], g, &p, &mut xpad);
        widen(&dy[bi * c_out * g.ohw()..], g, &p, c_out, &mut dy_wide);
        for tap in 0..kk {
            let off = (tap / g.k) * p.wp + tap % g.k;
            matmul(c_out, g.c_in, p.n, &mut dw[tap..], ckk, kk, bi > 0, &dy_wide, p.n, 1, &xpad[off..], 1, p.plane);
        }
    }
    dw
}

fn im2col<T: Scalar>(x: &[T], g: &Geom, cols: &mut [T]) {
    let ohw = g.ohw();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.hw()..(ci + 1) * g.hw()];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * ohw;
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.oh {
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(T::ZERO);
                    dst[hi..].fill(T::ZERO);
                    if g.stride == 1 {
                        let off = lo + kx - g.pad;
                        dst[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                            *d = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &Geom, x: &mut [T]) {
    let ohw = g.ohw();
    for ci in 0..g.c_in {
        let plane = &mut x[ci * g.hw()..(ci + 1) * g.hw()];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * ohw;
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in lo..hi {
                        dst[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// `dst (m×n) [+]= lhs (m×k) · rhs (k×n)` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    dst_rs: usize,
    dst_cs: usize,
    accumulate: bool,
    lhs: &[T],
    lhs_rs: usize,
    lhs_cs: usize,
    rhs: &[T],
    rhs_rs: usize,
    rhs_cs: usize,
) {
    debug_assert!(m == 0 || n == 0 || dst.len() > (m - 1) * dst_rs + (n - 1) * dst_cs);
    debug_assert!(m == 0 || k == 0 || lhs.len() > (m - 1) * lhs_rs + (k - 1) * lhs_cs);
    debug_assert!(k == 0 || n == 0 || rhs.len() > (k - 1) * rhs_rs + (n - 1) * rhs_cs);
    // SAFETY: the debug assertions above describe the extent of every access;
    // callers size buffers from the same geometry.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            dst_cs as isize,
            dst_rs as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs as isize,
            lhs_rs as isize,
            rhs.as_ptr(),
            rhs_cs as isize,
            rhs_rs as isize,
            T::ONE,
            T::ONE,
            false,
            false,
            false,
            Parallelism::None,
        )
    }
}

fn forward<T: Scalar>(x: &[T], w: &[T], b: usize, c_out: usize, g: &Geom) -> Vec<T> {
    if g.implicit() {
        return forward_implicit(x, w, b, c_out, g);
    }
    let (ckk, ohw) = (g.ckk(), g.ohw());
    let mut out = vec![T::ZERO; b * c_out * ohw];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::ZERO; ckk * ohw] };
    for bi in 0..b {
        let xb = &x[bi * g.c_in * g.hw()..(bi + 1) * g.c_in * g.hw()];
        let rhs: &[T] = if g.pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        matmul(c_out, ohw, ckk, &mut out[bi * c_out * ohw..(bi + 1) * c_out * ohw], ohw, 1, false, w, ckk, 1, rhs, ohw, 1);
    }
    out
}

fn backward_input<T: Scalar>(dy: &[T], w: &[T], b: usize, c_out: usize, g: &Geom) -> Vec<T> {
    if g.implicit() {
        return backward_input_implicit(dy, w, b, c_out, g);
    }
    let (ckk, ohw) = (g.ckk(), g.ohw());
    let mut dx = vec![T::ZERO; b * g.c_in * g.hw()];
    let mut dcols = if g.pointwise() { Vec::new() } else { vec![T::ZERO; ckk * ohw] };
    for bi in 0..b {
        let dyb = &dy[bi * c_out * ohw..(bi + 1) * c_out * ohw];
        let dxb = &mut dx[bi * g.c_in * g.hw()..(bi + 1) * g.c_in * g.hw()];
        if g.pointwise() {
            matmul(ckk, ohw, c_out, dxb, ohw, 1, false, w, 1, ckk, dyb, ohw, 1);
        } else {
            matmul(ckk, ohw, c_out, &mut dcols, ohw, 1, false, w, 1, ckk, dyb, ohw, 1);
            col2im_add(&dcols, g, dxb);
        }
    }
    dx
}

fn backward_weight<T: Scalar>(x: &[T], dy: &[T], b: usize, c_out: usize, g: &Geom) -> Vec<T> {
    if g.implicit() {
        return backward_weight_implicit(x, dy, b, c_out, g);
    }
    let (ckk, ohw) = (g.ckk(), g.ohw());
    let mut dw = vec![T::ZERO; c_out * ckk];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::ZERO; ckk * ohw] };
    for bi in 0..b {
        let xb = &x[bi * g.c_in * g.hw()..(bi + 1) * g.c_in * g.hw()];
        let dyb = &dy[bi * c_out * ohw..(bi + 1) * c_out * ohw];
        let rhs: &[T] = if g.pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        matmul(c_out, ckk, ohw, &mut dw, ckk, 1, bi > 0, dyb, ohw, 1, rhs, 1, ohw);
    }
    dw
}

fn contiguous<'a, T>(data: &'a [T], l: &Layout, what: &str) -> CResult<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d: {what} must be contiguous"),
    }
}

/// `(B, C, H, W)` ⊛ `(O, C, K, K)` → `(B, O, OH, OW)`.
struct Conv2dOp {
    stride: usize,
    pad: usize,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "sht-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let (o, c2, k, k2) = l2.shape().dims4()?;
        if c != c2 || k != k2 {
            candle_core::bail!("conv2d: input {:?} incompatible with kernel {:?}", l1.shape(), l2.shape())
        }
        let g = Geom::new(c, h, w, k, self.stride, self.pad)?;
        let shape = Shape::from((b, o, g.oh, g.ow));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(wt)) => {
                CpuStorage::F32(forward(contiguous(x, l1, "input")?, contiguous(wt, l2, "kernel")?, b, o, &g))
            }
            (CpuStorage::F64(x), CpuStorage::F64(wt)) => {
                CpuStorage::F64(forward(contiguous(x, l1, "input")?, contiguous(wt, l2, "kernel")?, b, o, &g))
            }
            _ => candle_core::bail!("conv2d: unsupported or mixed dtypes"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, wd) = x.dims4()?;
        let gx = if x.track_op() {
            Some(grad.apply_op2_no_bwd(w, &Conv2dBackwardInput { stride: self.stride, pad: self.pad, h, w: wd })?)
        } else {
            None
        };
        let gw = if w.track_op() {
            let k = w.dim(2)?;
            Some(x.apply_op2_no_bwd(&grad, &Conv2dBackwardWeight { stride: self.stride, pad: self.pad, k })?)
        } else {
            None
        };
        Ok((gx, gw))
    }
}

struct Conv2dBackwardInput {
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
}

impl CustomOp2 for Conv2dBackwardInput {
    fn name(&self) -> &'static str {
        "sht-conv2d-bwd-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, o, _, _) = l1.shape().dims4()?;
        let (_, c, k, _) = l2.shape().dims4()?;
        let g = Geom::new(c, self.h, self.w, k, self.stride, self.pad)?;
        let shape = Shape::from((b, c, self.h, self.w));
        let out = match (s1, s2) {
            (CpuStorage::F32(dy), CpuStorage::F32(wt)) => {
                CpuStorage::F32(backward_input(contiguous(dy, l1, "grad")?, contiguous(wt, l2, "kernel")?, b, o, &g))
            }
            (CpuStorage::F64(dy), CpuStorage::F64(wt)) => {
                CpuStorage::F64(backward_input(contiguous(dy, l1, "grad")?, contiguous(wt, l2, "kernel")?, b, o, &g))
            }
            _ => candle_core::bail!("conv2d backward: unsupported or mixed dtypes"),
        };
        Ok((out, shape))
    }
}

struct Conv2dBackwardWeight {
    stride: usize,
    pad: usize,
    k: usize,
}

impl CustomOp2 for Conv2dBackwardWeight {
    fn name(&self) -> &'static str {
        "sht-conv2d-bwd-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let (_, o, _, _) = l2.shape().dims4()?;
        let g = Geom::new(c, h, w, self.k, self.stride, self.pad)?;
        let shape = Shape::from((o, c, self.k, self.k));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(dy)) => {
                CpuStorage::F32(backward_weight(contiguous(x, l1, "input")?, contiguous(dy, l2, "grad")?, b, o, &g))
            }
            (CpuStorage::F64(x), CpuStorage::F64(dy)) => {
                CpuStorage::F64(backward_weight(contiguous(x, l1, "input")?, contiguous(dy, l2, "grad")?, b, o, &g))
            }
            _ => candle_core::bail!("conv2d backward: unsupported or mixed dtypes"),
        };
        Ok((out, shape))
    }
}

/// Zero-padded, unbiased, ungrouped 2-D convolution with square kernels.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> CResult<Tensor> {
    if stride == 0 {
        candle_core::bail!("conv2d: stride must be >= 1")
    }
    x.contiguous()?.apply_op2(&kernel.contiguous()?, Conv2dOp { stride, pad })
}

/// `(B, C, H, W) + (C,)`, broadcast over batch and space.
struct BiasAdd;

fn bias_add<T: Scalar>(x: &[T], b: &[T], c: usize, hw: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for (i, chunk) in out.chunks_exact_mut(hw).enumerate() {
        let v = b[i % c];
        chunk.iter_mut().for_each(|e| *e += v);
    }
    out
}

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "sht-bias-add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (_, c, h, w) = l1.shape().dims4()?;
        if l2.shape().dims() != [c] {
            candle_core::bail!("bias_add: bias {:?} does not match input {:?}", l2.shape(), l1.shape())
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(b)) => {
                CpuStorage::F32(bias_add(contiguous(x, l1, "input")?, contiguous(b, l2, "bias")?, c, h * w))
            }
            (CpuStorage::F64(x), CpuStorage::F64(b)) => {
                CpuStorage::F64(bias_add(contiguous(x, l1, "input")?, contiguous(b, l2, "bias")?, c, h * w))
            }
            _ => candle_core::bail!("bias_add: unsupported or mixed dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let gb = if b.track_op() { Some(grad.contiguous()?.apply_op1_no_bwd(&ChannelSum)?) } else { None };
        Ok((Some(grad.clone()), gb))
    }
}

/// `(B, C, H, W)` → `(C,)`.
struct ChannelSum;

fn channel_sum<T: Scalar>(x: &[T], c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; c];
    for (i, chunk) in x.chunks_exact(hw).enumerate() {
        let mut acc = T::ZERO;
        chunk.iter().for_each(|&e| acc += e);
        out[i % c] += acc;
    }
    out
}

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "sht-channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (_, c, h, w) = l.shape().dims4()?;
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(channel_sum(contiguous(x, l, "input")?, c, h * w)),
            CpuStorage::F64(x) => CpuStorage::F64(channel_sum(contiguous(x, l, "input")?, c, h * w)),
            _ => candle_core::bail!("channel_sum: unsupported dtype"),
        };
        Ok((out, Shape::from(c)))
    }
}

/// Adds a per-channel bias to `(B, C, H, W)`.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op2(&bias.contiguous()?, BiasAdd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    /// Direct seven-loop convolution.
    fn naive(x: &[f64], w: &[f64], (b, c, h, wd): (usize, usize, usize, usize), o: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut out = vec![0.0; b * o * oh * ow];
        for bi in 0..b {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w[((oc * c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn check(b: usize, c: usize, h: usize, w: usize, o: usize, k: usize, s: usize, p: usize) {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (b, c, h, w), &dev).unwrap()).unwrap();
        let kern = Var::from_tensor(&Tensor::randn(0f64, 1.0, (o, c, k, k), &dev).unwrap()).unwrap();
        let y = conv2d(x.as_tensor(), kern.as_tensor(), s, p).unwrap();
        let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let kv: Vec<f64> = kern.flatten_all().unwrap().to_vec1().unwrap();
        let expect = naive(&xv, &kv, (b, c, h, w), o, k, s, p);
        let got: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(got.len(), expect.len());
        for (a, e) in got.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-10, "{a} vs {e}");
        }
        // Gradients of sum(y * r) are checked against the adjoint identity
        // <conv(x), r> = <x, dL/dx> for linear maps.
        let r = Tensor::randn(0f64, 1.0, y.shape(), &dev).unwrap();
        let loss = (&y * &r).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let gx = grads.get(x.as_tensor()).unwrap();
        let gk = grads.get(kern.as_tensor()).unwrap();
        let lv: f64 = loss.to_scalar().unwrap();
        let via_x: f64 = (gx * x.as_tensor()).unwrap().sum_all().unwrap().to_scalar().unwrap();
        let via_k: f64 = (gk * kern.as_tensor()).unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert!((lv - via_x).abs() < 1e-9 * (1.0 + lv.abs()), "{lv} vs {via_x}");
        assert!((lv - via_k).abs() < 1e-9 * (1.0 + lv.abs()), "{lv} vs {via_k}");
        // Cross-check against candle's reference convolution.
        let reference = x.as_tensor().conv2d(kern.as_tensor(), p, s, 1, 1).unwrap();
        let diff: f64 = (reference - &y).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(diff < 1e-10);
    }

    #[test]
    fn matches_direct_convolution() {
        check(2, 3, 7, 6, 4, 3, 1, 1);
        check(1, 2, 8, 8, 3, 1, 1, 0);
        check(2, 3, 9, 8, 2, 4, 2, 1);
        check(1, 4, 8, 8, 2, 3, 2, 1);
        check(1, 2, 5, 5, 3, 4, 1, 1);
        check(2, 1, 6, 7, 1, 3, 1, 0);
        check(3, 5, 4, 9, 6, 5, 1, 2);
        check(1, 3, 3, 3, 2, 3, 1, 1);
        check(2, 2, 6, 5, 3, 2, 1, 0);
    }

    #[test]
    fn bias_add_matches_broadcast() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 4, 5), &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f64, 1.0, 3, &dev).unwrap()).unwrap();
        let r = Tensor::randn(0f64, 1.0, (2, 3, 4, 5), &dev).unwrap();
        let ours = add_channel_bias(x.as_tensor(), b.as_tensor()).unwrap();
        let theirs = x.as_tensor().broadcast_add(&b.as_tensor().reshape((1, 3, 1, 1)).unwrap()).unwrap();
        let d: f64 = (&ours - &theirs).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(d < 1e-12);
        let g1 = (ours * &r).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (theirs * &r).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &b] {
            let d: f64 = (g1.get(v.as_tensor()).unwrap() - g2.get(v.as_tensor()).unwrap())
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar()
                .unwrap();
            assert!(d < 1e-12);
        }
    }

    #[test]
    fn f32_path() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1.0, (2, 3, 8, 8), &dev).unwrap();
        let k = Tensor::randn(0f32, 1.0, (5, 3, 3, 3), &dev).unwrap();
        let a = conv2d(&x, &k, 1, 1).unwrap();
        let b = x.conv2d(&k, 1, 1, 1, 1).unwrap();
        let diff: f32 = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(diff < 1e-4);
        assert!(conv2d(&x, &k.to_dtype(DType::F64).unwrap(), 1, 1).is_err());
    }
}
