//! Stateless layer functions over named parameters.

use candle_core::{CpuStorage, CustomOp2, Device, Layout, Shape, Storage, Tensor, D};

use crate::error::Result;
use crate::params::Scope;

pub fn conv2d(p: &Scope, x: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let w = p.get("weight")?;
    let b = p.get("bias")?;
    let y = conv2d_raw(x, w, stride, padding)?;
    Ok(y.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?)?)
}

/// Convolution without bias. The forward pass is the backend's; the input
/// gradient of stride-1 convolutions is computed as a convolution with the
/// flipped, transposed kernel, which is several times faster on CPU than the
/// backend's transposed convolution.
pub fn conv2d_raw(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    Ok(x.contiguous()?
        .apply_op2(&w.contiguous()?, Conv2dOp { stride, padding })?)
}

#[derive(Clone, Copy)]
struct Conv2dOp {
    stride: usize,
    padding: usize,
}

fn to_tensor(s: &CpuStorage, l: &Layout) -> candle_core::Result<Tensor> {
    let Some((a, b)) = l.contiguous_offsets() else {
        candle_core::bail!("conv2d: operands must be contiguous")
    };
    match s {
        CpuStorage::F32(v) => Tensor::from_vec(v[a..b].to_vec(), l.shape(), &Device::Cpu),
        CpuStorage::F64(v) => Tensor::from_vec(v[a..b].to_vec(), l.shape(), &Device::Cpu),
        _ => candle_core::bail!("conv2d: unsupported dtype"),
    }
}

fn into_storage(t: &Tensor) -> candle_core::Result<CpuStorage> {
    let t = t.contiguous()?;
    let (s, l) = t.storage_and_layout();
    let (a, b) = l.contiguous_offsets().expect("contiguous");
    match &*s {
        Storage::Cpu(CpuStorage::F32(v)) => Ok(CpuStorage::F32(v[a..b].to_vec())),
        Storage::Cpu(CpuStorage::F64(v)) => Ok(CpuStorage::F64(v[a..b].to_vec())),
        _ => candle_core::bail!("conv2d: unsupported storage"),
    }
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d-fast-bwd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = to_tensor(s1, l1)?;
        let w = to_tensor(s2, l2)?;
        let y = x.conv2d(&w, self.padding, self.stride, 1, 1)?;
        Ok((into_storage(&y)?, y.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (x, w) = (x.detach(), w.detach());
        let (_, _, kh, kw) = w.dims4()?;
        let grad_x = if self.stride == 1 && kh == kw && self.padding < kh {
            let flipped = w.transpose(0, 1)?.contiguous()?.flip(&[2, 3])?.contiguous()?;
            grad.conv2d(&flipped, kh - 1 - self.padding, 1, 1, 1)?
        } else {
            let out = (grad.dim(2)? - 1) * self.stride + kh - 2 * self.padding;
            let out_padding = x.dim(2)? - out;
            grad.conv_transpose2d(&w, self.padding, out_padding, self.stride, 1)?
        };
        let grad_w = x
            .transpose(0, 1)?
            .conv2d(&grad.transpose(0, 1)?, self.padding, 1, self.stride, 1)?
            .transpose(0, 1)?;
        let grad_w = if grad_w.dim(2)? != kh || grad_w.dim(3)? != kw {
            grad_w.narrow(2, 0, kh)?.narrow(3, 0, kw)?
        } else {
            grad_w
        };
        Ok((Some(grad_x), Some(grad_w.contiguous()?)))
    }
}

/// Affine map over the last dimension; works for `(N, D)` and `(N, L, D)`.
pub fn linear(p: &Scope, x: &Tensor) -> Result<Tensor> {
    let w = p.get("weight")?;
    let y = x.broadcast_matmul(&w.t()?)?;
    if p.has("bias") {
        Ok(y.broadcast_add(p.get("bias")?)?)
    } else {
        Ok(y)
    }
}

pub fn group_norm(p: &Scope, x: &Tensor, groups: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let g = norm_groups(c, groups);
    let xs = x.reshape((n, g, (c / g) * h * w))?;
    let mean = xs.mean_keepdim(D::Minus1)?;
    let centered = xs.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((n, c, h, w))?;
    let weight = p.get("weight")?.reshape((1, c, 1, 1))?;
    let bias = p.get("bias")?.reshape((1, c, 1, 1))?;
    Ok(normed.broadcast_mul(&weight)?.broadcast_add(&bias)?)
}

/// Largest divisor of `channels` not above `groups`.
pub fn norm_groups(channels: usize, groups: usize) -> usize {
    (1..=groups.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

pub fn layer_norm(p: &Scope, x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(normed.broadcast_mul(p.get("weight")?)?.broadcast_add(p.get("bias")?)?)
}

/// Multi-head dot-product attention. `q_in` is `(N, Lq, Dq)`, `kv_in` is `(N, Lk, Dk)`.
pub fn attention(p: &Scope, q_in: &Tensor, kv_in: &Tensor, heads: usize) -> Result<Tensor> {
    let q = linear(&p.sub("q"), q_in)?;
    let k = linear(&p.sub("k"), kv_in)?;
    let v = linear(&p.sub("v"), kv_in)?;
    let (n, lq, c) = q.dims3()?;
    let lk = k.dim(1)?;
    let hd = c / heads;
    let split =
        |t: &Tensor, l: usize| -> Result<Tensor> { Ok(t.reshape((n, l, heads, hd))?.transpose(1, 2)?.contiguous()?) };
    let (q, k, v) = (split(&q, lq)?, split(&k, lk)?, split(&v, lk)?);
    let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
    let probs = softmax_last(&scores)?;
    let out = probs.matmul(&v)?.transpose(1, 2)?.reshape((n, lq, c))?;
    linear(&p.sub("o"), &out)
}

/// Softmax over the last dimension. The shift is detached; softmax is
/// shift-invariant so gradients are unchanged.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let num = x.broadcast_sub(&max)?.exp()?;
    let den = num.sum_keepdim(D::Minus1)?;
    Ok(num.broadcast_div(&den)?)
}
