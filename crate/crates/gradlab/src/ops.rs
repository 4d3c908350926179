//! Raw numeric kernels on [`Tensor`]s.
//!
//! The graph evaluator dispatches here. Convolutions and reductions are the
//! hot paths of the attack loop, so their inner loops run over contiguous
//! slices with hoisted bounds.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x * y)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x / y)
}

pub fn neg(a: &Tensor) -> Tensor {
    a.map(|x| -x)
}

pub fn sqrt(a: &Tensor) -> Tensor {
    a.map(f64::sqrt)
}

pub fn square(a: &Tensor) -> Tensor {
    a.map(|x| x * x)
}

pub fn log(a: &Tensor) -> Tensor {
    a.map(f64::ln)
}

pub fn exp(a: &Tensor) -> Tensor {
    a.map(f64::exp)
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// 1.0 where the input is strictly positive, 0.0 elsewhere.
/// This is the ReLU derivative with the subgradient at 0 defined as 0.
pub fn pos_mask(a: &Tensor) -> Tensor {
    a.map(|x| if x > 0.0 { 1.0 } else { 0.0 })
}

/// 1.0 where the two inputs are exactly equal.
pub fn eq_mask(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| if x == y { 1.0 } else { 0.0 })
}

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

/// Whether `from` can broadcast to `to` under right-aligned rules
/// (each trailing dimension equal or 1).
pub fn broadcast_compatible(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let offset = to.len() - from.len();
    from.iter()
        .zip(&to[offset..])
        .all(|(&f, &t)| f == t || f == 1)
}

/// Materializes `a` broadcast to `shape`.
pub fn broadcast(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if a.shape() == shape {
        return Ok(a.clone());
    }
    if !broadcast_compatible(a.shape(), shape) {
        return Err(shape_err("broadcast", format!("{:?} -> {:?}", a.shape(), shape)));
    }
    if a.numel() == 1 {
        return Ok(Tensor::full(shape, a.data()[0]));
    }
    // Per-channel vector into an image batch: the dominant case in BN layers.
    if shape.len() == 4 && a.shape() == [1, shape[1], 1, 1] {
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let mut out = Tensor::zeros(shape);
        let src = a.data();
        let dst = out.data_mut();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                dst[base..base + plane].fill(src[ci]);
            }
        }
        return Ok(out);
    }
    // General odometer walk.
    let rank = shape.len();
    let offset = rank - a.rank();
    let mut src_strides = vec![0usize; rank];
    let mut acc = 1usize;
    for d in (0..a.rank()).rev() {
        src_strides[offset + d] = if a.shape()[d] == 1 { 0 } else { acc };
        acc *= a.shape()[d];
    }
    let numel: usize = shape.iter().product();
    let mut out = Tensor::zeros(shape);
    let mut coords = vec![0usize; rank];
    let src = a.data();
    let dst = out.data_mut();
    let mut src_idx = 0usize;
    for slot in dst.iter_mut().take(numel) {
        *slot = src[src_idx];
        for d in (0..rank).rev() {
            coords[d] += 1;
            src_idx += src_strides[d];
            if coords[d] < shape[d] {
                break;
            }
            src_idx -= src_strides[d] * shape[d];
            coords[d] = 0;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reductions (keepdims: reduced axes become size 1)
// ---------------------------------------------------------------------------

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut out = shape.to_vec();
    for &ax in axes {
        out[ax] = 1;
    }
    out
}

pub fn sum_axes(a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    for &ax in axes {
        if ax >= a.rank() {
            return Err(shape_err("sum_axes", format!("axis {} of rank {}", ax, a.rank())));
        }
    }
    let out_shape = reduced_shape(a.shape(), axes);
    let out_numel: usize = out_shape.iter().product();

    // Full reduction.
    if out_numel == 1 {
        return Ok(Tensor::new(out_shape, vec![a.data().iter().sum()])?);
    }
    // Per-channel reduction of an image batch.
    if a.rank() == 4 && axes_eq(axes, &[0, 2, 3]) {
        let (b, c, h, w) = shape4(a);
        let plane = h * w;
        let mut out = vec![0.0; c];
        for bi in 0..b {
            for (ci, slot) in out.iter_mut().enumerate() {
                let base = (bi * c + ci) * plane;
                *slot += a.data()[base..base + plane].iter().sum::<f64>();
            }
        }
        return Tensor::new(out_shape, out);
    }
    // Row-wise reduction of a matrix (contiguous inner axis).
    if a.rank() == 2 && axes_eq(axes, &[1]) {
        let rows = a.shape()[0];
        let cols = a.shape()[1];
        let out = (0..rows)
            .map(|r| a.data()[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        return Tensor::new(out_shape, out);
    }
    // General odometer walk.
    let rank = a.rank();
    let mut out_strides = vec![0usize; rank];
    let mut acc = 1usize;
    for d in (0..rank).rev() {
        out_strides[d] = if out_shape[d] == 1 { 0 } else { acc };
        acc *= out_shape[d];
    }
    let mut out = Tensor::zeros(&out_shape);
    let dst = out.data_mut();
    let mut coords = vec![0usize; rank];
    let mut out_idx = 0usize;
    for &v in a.data() {
        dst[out_idx] += v;
        for d in (0..rank).rev() {
            coords[d] += 1;
            out_idx += out_strides[d];
            if coords[d] < a.shape()[d] {
                break;
            }
            out_idx -= out_strides[d] * a.shape()[d];
            coords[d] = 0;
        }
    }
    Ok(out)
}

pub fn max_axes(a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    for &ax in axes {
        if ax >= a.rank() {
            return Err(shape_err("max_axes", format!("axis {} of rank {}", ax, a.rank())));
        }
    }
    let out_shape = reduced_shape(a.shape(), axes);
    let out_numel: usize = out_shape.iter().product();
    if out_numel == 1 {
        let m = a.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        return Tensor::new(out_shape, vec![m]);
    }
    if a.rank() == 2 && axes_eq(axes, &[1]) {
        let rows = a.shape()[0];
        let cols = a.shape()[1];
        let out = (0..rows)
            .map(|r| {
                a.data()[r * cols..(r + 1) * cols]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        return Tensor::new(out_shape, out);
    }
    let rank = a.rank();
    let mut out_strides = vec![0usize; rank];
    let mut acc = 1usize;
    for d in (0..rank).rev() {
        out_strides[d] = if out_shape[d] == 1 { 0 } else { acc };
        acc *= out_shape[d];
    }
    let mut out = Tensor::full(&out_shape, f64::NEG_INFINITY);
    let dst = out.data_mut();
    let mut coords = vec![0usize; rank];
    let mut out_idx = 0usize;
    for &v in a.data() {
        if v > dst[out_idx] {
            dst[out_idx] = v;
        }
        for d in (0..rank).rev() {
            coords[d] += 1;
            out_idx += out_strides[d];
            if coords[d] < a.shape()[d] {
                break;
            }
            out_idx -= out_strides[d] * a.shape()[d];
            coords[d] = 0;
        }
    }
    Ok(out)
}

fn axes_eq(axes: &[usize], want: &[usize]) -> bool {
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    sorted == want
}

fn shape4(a: &Tensor) -> (usize, usize, usize, usize) {
    (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3])
}

// ---------------------------------------------------------------------------
// Pad / slice
// ---------------------------------------------------------------------------

/// Zero padding; `pads[d] = (before, after)` per axis.
pub fn pad(a: &Tensor, pads: &[(usize, usize)]) -> Result<Tensor> {
    if pads.len() != a.rank() {
        return Err(shape_err("pad", format!("{} pads for rank {}", pads.len(), a.rank())));
    }
    let out_shape: Vec<usize> = a
        .shape()
        .iter()
        .zip(pads)
        .map(|(&s, &(lo, hi))| s + lo + hi)
        .collect();
    let mut out = Tensor::zeros(&out_shape);
    copy_block(a.data(), a.shape(), out.data_mut(), &out_shape, pads, true);
    Ok(out)
}

/// Slices `ranges[d] = (start, end)` per axis (end exclusive).
pub fn slice(a: &Tensor, ranges: &[(usize, usize)]) -> Result<Tensor> {
    if ranges.len() != a.rank() {
        return Err(shape_err("slice", format!("{} ranges for rank {}", ranges.len(), a.rank())));
    }
    for (d, &(lo, hi)) in ranges.iter().enumerate() {
        if lo > hi || hi > a.shape()[d] {
            return Err(shape_err("slice", format!("range {:?} on axis {} of size {}", (lo, hi), d, a.shape()[d])));
        }
    }
    let out_shape: Vec<usize> = ranges.iter().map(|&(lo, hi)| hi - lo).collect();
    let offsets: Vec<(usize, usize)> = ranges.iter().map(|&(lo, _)| (lo, 0)).collect();
    let mut out = Tensor::zeros(&out_shape);
    copy_block(a.data(), a.shape(), out.data_mut(), &out_shape, &offsets, false);
    Ok(out)
}

/// Copies the smaller block into/out of the larger one at the given offsets.
/// `into_padded`: small source into large destination (pad); otherwise the
/// offsets select the source window (slice).
fn copy_block(
    src: &[f64],
    src_shape: &[usize],
    dst: &mut [f64],
    dst_shape: &[usize],
    offsets: &[(usize, usize)],
    into_padded: bool,
) {
    let rank = src_shape.len();
    if rank == 0 {
        dst[0] = src[0];
        return;
    }
    let small_shape: Vec<usize> = if into_padded { src_shape.to_vec() } else { dst_shape.to_vec() };
    let big_shape: Vec<usize> = if into_padded { dst_shape.to_vec() } else { src_shape.to_vec() };
    let mut big_strides = vec![1usize; rank];
    for d in (0..rank - 1).rev() {
        big_strides[d] = big_strides[d + 1] * big_shape[d + 1];
    }
    // Iterate rows of the small block; the last axis is contiguous in both.
    let row = small_shape[rank - 1];
    let rows: usize = small_shape[..rank - 1].iter().product();
    let mut coords = vec![0usize; rank - 1];
    for r in 0..rows {
        let mut big_base = offsets[rank - 1].0;
        for d in 0..rank - 1 {
            big_base += (coords[d] + offsets[d].0) * big_strides[d];
        }
        let small_base = r * row;
        if into_padded {
            dst[big_base..big_base + row].copy_from_slice(&src[small_base..small_base + row]);
        } else {
            dst[small_base..small_base + row].copy_from_slice(&src[big_base..big_base + row]);
        }
        for d in (0..rank - 1).rev() {
            coords[d] += 1;
            if coords[d] < small_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
}

// ---------------------------------------------------------------------------
// Matmul / transpose
// ---------------------------------------------------------------------------

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros(&[m, n]);
    let dst = out.data_mut();
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        let orow = &mut dst[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b.data()[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

pub fn transpose2(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(shape_err("transpose", format!("rank {}", a.rank())));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = Tensor::zeros(&[n, m]);
    let dst = out.data_mut();
    for i in 0..m {
        for j in 0..n {
            dst[j * m + i] = a.data()[i * n + j];
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Convolution family
// ---------------------------------------------------------------------------
//
// Direct algorithm with zero padding. The three kernels are mutually adjoint:
// `conv2d_input_grad` and `conv2d_kernel_grad` are the VJPs of `conv2d`, and
// each of the three differentiates again in terms of the other two, which is
// what makes second-order attack objectives possible.

pub fn conv2d_out_hw(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(shape_err("conv2d", "stride 0".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(shape_err("conv2d", format!("kernel {}x{} exceeds padded input {}x{}", kh, kw, h + 2 * pad, w + 2 * pad)));
    }
    Ok(((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1))
}

/// Output index range `[lo, hi)` such that `0 <= out*stride + k_off - pad < limit_in`.
#[inline]
fn out_bounds(limit_in: usize, limit_out: usize, k_off: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if pad > k_off { (pad - k_off + stride - 1) / stride } else { 0 };
    let max_in = limit_in + pad;
    if max_in <= k_off {
        return (0, 0);
    }
    let hi = ((max_in - 1 - k_off) / stride + 1).min(limit_out);
    (lo.min(hi), hi)
}

fn check_conv_shapes(x: &Tensor, k: &Tensor) -> Result<()> {
    if x.rank() != 4 || k.rank() != 4 {
        return Err(shape_err("conv2d", format!("input {:?}, kernel {:?}", x.shape(), k.shape())));
    }
    if x.shape()[1] != k.shape()[1] {
        return Err(shape_err("conv2d", format!("input channels {} vs kernel channels {}", x.shape()[1], k.shape()[1])));
    }
    Ok(())
}

pub fn conv2d(x: &Tensor, k: &Tensor, stride: usize, padv: usize) -> Result<Tensor> {
    check_conv_shapes(x, k)?;
    let (b, ci, h, w) = shape4(x);
    let (co, _, kh, kw) = shape4(k);
    let (oh, ow) = conv2d_out_hw(h, w, kh, kw, stride, padv)?;
    let mut out = Tensor::zeros(&[b, co, oh, ow]);
    let xd = x.data();
    let kd = k.data();
    let od = out.data_mut();
    for bi in 0..b {
        for coi in 0..co {
            let obase = (bi * co + coi) * oh * ow;
            for cii in 0..ci {
                let xbase = (bi * ci + cii) * h * w;
                for khi in 0..kh {
                    let (ohlo, ohhi) = out_bounds(h, oh, khi, padv, stride);
                    for kwi in 0..kw {
                        let kv = kd[((coi * ci + cii) * kh + khi) * kw + kwi];
                        if kv == 0.0 {
                            continue;
                        }
                        let (owlo, owhi) = out_bounds(w, ow, kwi, padv, stride);
                        for ohi in ohlo..ohhi {
                            let ih = ohi * stride + khi - padv;
                            let xrow = xbase + ih * w;
                            let orow = obase + ohi * ow;
                            if stride == 1 {
                                let iw0 = owlo + kwi - padv;
                                let len = owhi - owlo;
                                let xs = &xd[xrow + iw0..xrow + iw0 + len];
                                let os = &mut od[orow + owlo..orow + owlo + len];
                                for (o, &xv) in os.iter_mut().zip(xs) {
                                    *o += kv * xv;
                                }
                            } else {
                                for owi in owlo..owhi {
                                    let iw = owi * stride + kwi - padv;
                                    od[orow + owi] += kv * xd[xrow + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `conv2d(x, k)` with respect to `x`, given the upstream
/// gradient `g` (shaped like the conv output) and the original input size.
pub fn conv2d_input_grad(g: &Tensor, k: &Tensor, stride: usize, padv: usize, h: usize, w: usize) -> Result<Tensor> {
    if g.rank() != 4 || k.rank() != 4 {
        return Err(shape_err("conv2d_input_grad", format!("grad {:?}, kernel {:?}", g.shape(), k.shape())));
    }
    let (b, co, oh, ow) = shape4(g);
    let (kco, ci, kh, kw) = shape4(k);
    if co != kco {
        return Err(shape_err("conv2d_input_grad", format!("grad channels {} vs kernel {}", co, kco)));
    }
    let (eh, ew) = conv2d_out_hw(h, w, kh, kw, stride, padv)?;
    if (eh, ew) != (oh, ow) {
        return Err(shape_err("conv2d_input_grad", format!("grad spatial {:?} vs expected {:?}", (oh, ow), (eh, ew))));
    }
    let mut out = Tensor::zeros(&[b, ci, h, w]);
    let gd = g.data();
    let kd = k.data();
    let od = out.data_mut();
    for bi in 0..b {
        for coi in 0..co {
            let gbase = (bi * co + coi) * oh * ow;
            for cii in 0..ci {
                let obase = (bi * ci + cii) * h * w;
                for khi in 0..kh {
                    let (ohlo, ohhi) = out_bounds(h, oh, khi, padv, stride);
                    for kwi in 0..kw {
                        let kv = kd[((coi * ci + cii) * kh + khi) * kw + kwi];
                        if kv == 0.0 {
                            continue;
                        }
                        let (owlo, owhi) = out_bounds(w, ow, kwi, padv, stride);
                        for ohi in ohlo..ohhi {
                            let ih = ohi * stride + khi - padv;
                            let orow = obase + ih * w;
                            let grow = gbase + ohi * ow;
                            if stride == 1 {
                                let iw0 = owlo + kwi - padv;
                                let len = owhi - owlo;
                                let gs = &gd[grow + owlo..grow + owlo + len];
                                let os = &mut od[orow + iw0..orow + iw0 + len];
                                for (o, &gv) in os.iter_mut().zip(gs) {
                                    *o += kv * gv;
                                }
                            } else {
                                for owi in owlo..owhi {
                                    let iw = owi * stride + kwi - padv;
                                    od[orow + iw] += kv * gd[grow + owi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `conv2d(x, k)` with respect to `k`.
pub fn conv2d_kernel_grad(g: &Tensor, x: &Tensor, stride: usize, padv: usize, kh: usize, kw: usize) -> Result<Tensor> {
    if g.rank() != 4 || x.rank() != 4 {
        return Err(shape_err("conv2d_kernel_grad", format!("grad {:?}, input {:?}", g.shape(), x.shape())));
    }
    let (b, co, oh, ow) = shape4(g);
    let (xb, ci, h, w) = shape4(x);
    if b != xb {
        return Err(shape_err("conv2d_kernel_grad", format!("batch {} vs {}", b, xb)));
    }
    let (eh, ew) = conv2d_out_hw(h, w, kh, kw, stride, padv)?;
    if (eh, ew) != (oh, ow) {
        return Err(shape_err("conv2d_kernel_grad", format!("grad spatial {:?} vs expected {:?}", (oh, ow), (eh, ew))));
    }
    let mut out = Tensor::zeros(&[co, ci, kh, kw]);
    let gd = g.data();
    let xd = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for coi in 0..co {
            let gbase = (bi * co + coi) * oh * ow;
            for cii in 0..ci {
                let xbase = (bi * ci + cii) * h * w;
                for khi in 0..kh {
                    let (ohlo, ohhi) = out_bounds(h, oh, khi, padv, stride);
                    for kwi in 0..kw {
                        let (owlo, owhi) = out_bounds(w, ow, kwi, padv, stride);
                        let mut acc = 0.0;
                        for ohi in ohlo..ohhi {
                            let ih = ohi * stride + khi - padv;
                            let xrow = xbase + ih * w;
                            let grow = gbase + ohi * ow;
                            if stride == 1 {
                                let iw0 = owlo + kwi - padv;
                                let len = owhi - owlo;
                                let gs = &gd[grow + owlo..grow + owlo + len];
                                let xs = &xd[xrow + iw0..xrow + iw0 + len];
                                acc += gs.iter().zip(xs).map(|(&gv, &xv)| gv * xv).sum::<f64>();
                            } else {
                                for owi in owlo..owhi {
                                    let iw = owi * stride + kwi - padv;
                                    acc += gd[grow + owi] * xd[xrow + iw];
                                }
                            }
                        }
                        od[((coi * ci + cii) * kh + khi) * kw + kwi] += acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn broadcast_channel_vector() {
        let v = t(&[1, 2, 1, 1], &[5.0, 7.0]);
        let out = broadcast(&v, &[2, 2, 2, 2]).unwrap();
        assert_eq!(out.at4(0, 0, 1, 1), 5.0);
        assert_eq!(out.at4(1, 1, 0, 1), 7.0);
    }

    #[test]
    fn broadcast_general_row() {
        let v = t(&[3], &[1.0, 2.0, 3.0]);
        let out = broadcast(&v, &[2, 3]).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(broadcast(&t(&[2], &[0.0, 0.0]), &[2, 3]).is_err());
    }

    #[test]
    fn sum_axes_per_channel() {
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let s = sum_axes(&x, &[0, 2, 3]).unwrap();
        assert_eq!(s.shape(), &[1, 3, 1, 1]);
        // Channel 0: elements 0..4 and 12..16.
        assert_eq!(s.data()[0], (0 + 1 + 2 + 3 + 12 + 13 + 14 + 15) as f64);
    }

    #[test]
    fn sum_axes_general_matches_fast_path() {
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64).sin());
        let fast = sum_axes(&x, &[0, 2, 3]).unwrap();
        // Route through the odometer path by reducing axes one at a time.
        let slow = sum_axes(&sum_axes(&sum_axes(&x, &[0]).unwrap(), &[2]).unwrap(), &[3]).unwrap();
        assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn max_axes_rows() {
        let x = t(&[2, 3], &[1.0, 5.0, 2.0, -1.0, -7.0, -2.0]);
        let m = max_axes(&x, &[1]).unwrap();
        assert_eq!(m.data(), &[5.0, -1.0]);
    }

    #[test]
    fn pad_slice_roundtrip() {
        let x = Tensor::from_fn(&[1, 1, 2, 3], |i| i as f64);
        let p = pad(&x, &[(0, 0), (0, 0), (1, 1), (2, 0)]).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4, 5]);
        assert_eq!(p.at4(0, 0, 1, 2), 0.0);
        assert_eq!(p.at4(0, 0, 1, 3), 1.0);
        let s = slice(&p, &[(0, 1), (0, 1), (1, 3), (2, 5)]).unwrap();
        assert_eq!(s.data(), x.data());
    }

    #[test]
    fn matmul_small() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn identity_conv_is_identity() {
        let x = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64 + 1.0);
        let k = t(&[1, 1, 1, 1], &[1.0]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_matches_brute_force() {
        // Brute-force definition over explicit zero-padded input.
        let x = Tensor::from_fn(&[2, 3, 5, 4], |i| ((i * 37 % 17) as f64) - 8.0);
        let k = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 11 % 13) as f64) / 6.5 - 1.0);
        for &(stride, padv) in &[(1usize, 1usize), (2, 1), (1, 0), (2, 0)] {
            let y = conv2d(&x, &k, stride, padv).unwrap();
            let (oh, ow) = conv2d_out_hw(5, 4, 3, 3, stride, padv).unwrap();
            for b in 0..2 {
                for co in 0..4 {
                    for ohi in 0..oh {
                        for owi in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..3 {
                                for khi in 0..3 {
                                    for kwi in 0..3 {
                                        let ih = ohi * stride + khi;
                                        let iw = owi * stride + kwi;
                                        if ih >= padv && iw >= padv && ih - padv < 5 && iw - padv < 4 {
                                            acc += x.at4(b, ci, ih - padv, iw - padv) * k.at4(co, ci, khi, kwi);
                                        }
                                    }
                                }
                            }
                            assert!((y.at4(b, co, ohi, owi) - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_grads_are_adjoint() {
        // <conv(x,k), g> == <x, input_grad(g,k)> == <k, kernel_grad(g,x)>
        let x = Tensor::from_fn(&[2, 2, 6, 5], |i| ((i * 29 % 23) as f64) / 11.0 - 1.0);
        let k = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 7 % 19) as f64) / 9.0 - 1.0);
        for &(stride, padv) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let y = conv2d(&x, &k, stride, padv).unwrap();
            let g = Tensor::from_fn(y.shape(), |i| ((i * 13 % 31) as f64) / 15.0 - 1.0);
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let dx = conv2d_input_grad(&g, &k, stride, padv, 6, 5).unwrap();
            let via_x: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            let dk = conv2d_kernel_grad(&g, &x, stride, padv, 3, 3).unwrap();
            let via_k: f64 = k.data().iter().zip(dk.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-9 * lhs.abs().max(1.0));
            assert!((lhs - via_k).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }
}
