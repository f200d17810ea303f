//! Dense `f64` tensors and the numerical kernels everything else builds on:
//! cross-correlation style convolution, its exact linear transpose, max
//! pooling with argmax switches, unpooling, rectification, and dense affine
//! maps.
//!
//! All kernels are pure functions over immutable inputs and run a fixed
//! sequential reduction order, so identical inputs always produce bitwise
//! identical outputs.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape {shape:?} has a zero extent")]
    ZeroExtent { shape: Vec<usize> },
    #[error("{op}: expected rank-{expected} input, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: expected {expected} channels, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected length {expected}, got {got}")]
    LengthMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(
        "conv: extent {extent} with kernel {kernel}, pad {pad}, stride {stride} \
         has no integral output extent"
    )]
    NonIntegralConvOutput {
        extent: usize,
        kernel: usize,
        pad: usize,
        stride: usize,
    },
    #[error("pool: window {k} with stride {stride} does not tile extent {extent}")]
    PoolTiling {
        k: usize,
        stride: usize,
        extent: usize,
    },
    #[error("unpool: switch index {index} outside input of {len} elements")]
    SwitchRange { index: usize, len: usize },
    #[error("reshape: cannot view {len} elements as {shape:?}")]
    Reshape { len: usize, shape: Vec<usize> },
}

/// Dense n-dimensional array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent { shape });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data viewed under a different shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::Reshape {
                len: self.data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel plane `c` of a rank-3 tensor.
    pub fn plane(&self, c: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 3);
        let hw = self.shape[1] * self.shape[2];
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, f: f64) {
        for v in &mut self.data {
            *v *= f;
        }
    }

    /// Exact bit equality, distinguishing -0.0 from 0.0.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Convolution parameters: kernel of shape `fn x cn x kh x kw`, one bias per
/// filter, symmetric zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvWeights {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, pad: usize) -> Result<Self, TensorError> {
        if kernel.shape().len() != 4 {
            return Err(TensorError::Rank {
                op: "conv weights",
                expected: 4,
                shape: kernel.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::ZeroExtent { shape: vec![0] });
        }
        let filters = kernel.shape()[0];
        if bias.len() != filters {
            return Err(TensorError::LengthMismatch {
                op: "conv bias",
                expected: filters,
                got: bias.len(),
            });
        }
        Ok(ConvWeights {
            kernel,
            bias,
            stride,
            pad,
        })
    }

    pub fn filters(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kh(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn kw(&self) -> usize {
        self.kernel.shape()[3]
    }
}

/// Argmax switches recorded by a pooling pass; indices address the flat
/// input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolSwitches {
    pub k: usize,
    pub stride: usize,
    pub in_shape: Vec<usize>,
    pub indices: Vec<usize>,
}

fn conv_out_extent(
    extent: usize,
    kernel: usize,
    pad: usize,
    stride: usize,
) -> Result<usize, TensorError> {
    let padded = extent + 2 * pad;
    if padded < kernel || (padded - kernel) % stride != 0 {
        return Err(TensorError::NonIntegralConvOutput {
            extent,
            kernel,
            pad,
            stride,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output positions `o` for which `o*stride + k_off - pad` lands inside
/// `[0, in_len)`. Returns an inclusive range, possibly empty (`lo > hi`).
fn valid_out_range(
    out_len: usize,
    k_off: usize,
    pad: usize,
    stride: usize,
    in_len: usize,
) -> (usize, usize) {
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    let hi_num = in_len - 1 + pad;
    if hi_num < k_off {
        return (1, 0);
    }
    let hi = ((hi_num - k_off) / stride).min(out_len.saturating_sub(1));
    (lo, hi)
}

/// Cross-correlation (no kernel flip) with bias added per output channel.
pub fn conv2d_forward(x: &Tensor, w: &ConvWeights) -> Result<Tensor, TensorError> {
    if x.shape().len() != 3 {
        return Err(TensorError::Rank {
            op: "conv2d_forward",
            expected: 3,
            shape: x.shape().to_vec(),
        });
    }
    let (cn, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if cn != w.channels() {
        return Err(TensorError::ChannelMismatch {
            op: "conv2d_forward",
            expected: w.channels(),
            got: cn,
        });
    }
    let oh = conv_out_extent(h, w.kh(), w.pad, w.stride)?;
    let ow = conv_out_extent(wd, w.kw(), w.pad, w.stride)?;
    let (filters, kh, kw, stride, pad) = (w.filters(), w.kh(), w.kw(), w.stride, w.pad);

    let mut out = Tensor::zeros(&[filters, oh, ow]);
    for oc in 0..filters {
        let b = w.bias.data()[oc];
        let out_plane = &mut out.data[oc * oh * ow..(oc + 1) * oh * ow];
        out_plane.fill(b);
        for ic in 0..cn {
            let x_plane = x.plane(ic);
            let k_base = (oc * cn + ic) * kh * kw;
            for ky in 0..kh {
                let (oy0, oy1) = valid_out_range(oh, ky, pad, stride, h);
                for kx in 0..kw {
                    let wv = w.kernel.data()[k_base + ky * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_out_range(ow, kx, pad, stride, wd);
                    if oy0 > oy1 || ox0 > ox1 {
                        continue;
                    }
                    for oy in oy0..=oy1 {
                        let iy = oy * stride + ky - pad;
                        let in_row = iy * wd;
                        let out_row = oy * ow;
                        for ox in ox0..=ox1 {
                            let ix = ox * stride + kx - pad;
                            out_plane[out_row + ox] += wv * x_plane[in_row + ix];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact linear adjoint of [`conv2d_forward`] with the bias omitted:
/// `<conv(x) - bias, y> == <x, conv_transpose(y)>` for all x, y.
pub fn conv2d_transpose(y: &Tensor, w: &ConvWeights) -> Result<Tensor, TensorError> {
    conv2d_transpose_into_shape(y, w, None)
}

/// As [`conv2d_transpose`], but lets the caller pin the input-space spatial
/// extents (the stride/kernel arithmetic alone cannot always recover them).
pub fn conv2d_transpose_into_shape(
    y: &Tensor,
    w: &ConvWeights,
    in_hw: Option<(usize, usize)>,
) -> Result<Tensor, TensorError> {
    if y.shape().len() != 3 {
        return Err(TensorError::Rank {
            op: "conv2d_transpose",
            expected: 3,
            shape: y.shape().to_vec(),
        });
    }
    let (fc, oh, ow) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    if fc != w.filters() {
        return Err(TensorError::ChannelMismatch {
            op: "conv2d_transpose",
            expected: w.filters(),
            got: fc,
        });
    }
    let (cn, kh, kw, stride, pad) = (w.channels(), w.kh(), w.kw(), w.stride, w.pad);
    let (h, wd) = match in_hw {
        Some(hw) => hw,
        None => (
            (oh - 1) * stride + kh - 2 * pad,
            (ow - 1) * stride + kw - 2 * pad,
        ),
    };
    // The pinned extents must be consistent with a forward pass.
    if conv_out_extent(h, kh, pad, stride)? != oh {
        return Err(TensorError::NonIntegralConvOutput {
            extent: h,
            kernel: kh,
            pad,
            stride,
        });
    }
    if conv_out_extent(wd, kw, pad, stride)? != ow {
        return Err(TensorError::NonIntegralConvOutput {
            extent: wd,
            kernel: kw,
            pad,
            stride,
        });
    }

    let mut out = Tensor::zeros(&[cn, h, wd]);
    for oc in 0..fc {
        let y_plane = y.plane(oc);
        for ic in 0..cn {
            let hw = h * wd;
            let x_plane = &mut out.data[ic * hw..(ic + 1) * hw];
            let k_base = (oc * cn + ic) * kh * kw;
            for ky in 0..kh {
                let (oy0, oy1) = valid_out_range(oh, ky, pad, stride, h);
                for kx in 0..kw {
                    let wv = w.kernel.data()[k_base + ky * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_out_range(ow, kx, pad, stride, wd);
                    if oy0 > oy1 || ox0 > ox1 {
                        continue;
                    }
                    for oy in oy0..=oy1 {
                        let iy = oy * stride + ky - pad;
                        let in_row = iy * wd;
                        let out_row = oy * ow;
                        for ox in ox0..=ox1 {
                            let ix = ox * stride + kx - pad;
                            x_plane[in_row + ix] += wv * y_plane[out_row + ox];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Kernel and bias gradients of a convolution given the upstream delta.
pub fn conv2d_grad_weights(
    x: &Tensor,
    delta: &Tensor,
    w: &ConvWeights,
) -> Result<(Tensor, Tensor), TensorError> {
    let (cn, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (fc, oh, ow) = (delta.shape()[0], delta.shape()[1], delta.shape()[2]);
    if cn != w.channels() || fc != w.filters() {
        return Err(TensorError::ChannelMismatch {
            op: "conv2d_grad_weights",
            expected: w.channels(),
            got: cn,
        });
    }
    let (kh, kw, stride, pad) = (w.kh(), w.kw(), w.stride, w.pad);
    let mut gk = Tensor::zeros(w.kernel.shape());
    let mut gb = Tensor::zeros(&[fc]);
    for oc in 0..fc {
        let d_plane = delta.plane(oc);
        gb.data[oc] = d_plane.iter().sum();
        for ic in 0..cn {
            let x_plane = x.plane(ic);
            let k_base = (oc * cn + ic) * kh * kw;
            for ky in 0..kh {
                let (oy0, oy1) = valid_out_range(oh, ky, pad, stride, h);
                for kx in 0..kw {
                    let (ox0, ox1) = valid_out_range(ow, kx, pad, stride, wd);
                    if oy0 > oy1 || ox0 > ox1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in oy0..=oy1 {
                        let iy = oy * stride + ky - pad;
                        let in_row = iy * wd;
                        let out_row = oy * ow;
                        for ox in ox0..=ox1 {
                            let ix = ox * stride + kx - pad;
                            acc += d_plane[out_row + ox] * x_plane[in_row + ix];
                        }
                    }
                    gk.data[k_base + ky * kw + kx] = acc;
                }
            }
        }
    }
    Ok((gk, gb))
}

/// Per-window max with the winning flat input index recorded; ties go to the
/// lowest linear index. Window and stride must tile the extents exactly.
pub fn maxpool_forward(
    x: &Tensor,
    k: usize,
    stride: usize,
) -> Result<(Tensor, PoolSwitches), TensorError> {
    if x.shape().len() != 3 {
        return Err(TensorError::Rank {
            op: "maxpool_forward",
            expected: 3,
            shape: x.shape().to_vec(),
        });
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    for extent in [h, w] {
        if extent < k || (extent - k) % stride != 0 {
            return Err(TensorError::PoolTiling { k, stride, extent });
        }
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut indices = vec![0usize; c * oh * ow];
    for ch in 0..c {
        let plane_base = ch * h * w;
        let x_plane = x.plane(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..k {
                    let iy = oy * stride + dy;
                    for dx in 0..k {
                        let ix = ox * stride + dx;
                        let v = x_plane[iy * w + ix];
                        if v > best {
                            best = v;
                            best_idx = iy * w + ix;
                        }
                    }
                }
                let oi = (ch * oh + oy) * ow + ox;
                out.data[oi] = best;
                indices[oi] = plane_base + best_idx;
            }
        }
    }
    Ok((
        out,
        PoolSwitches {
            k,
            stride,
            in_shape: x.shape().to_vec(),
            indices,
        },
    ))
}

/// Scatter `y` back to the recorded winner locations; everywhere else zero.
pub fn unpool(y: &Tensor, s: &PoolSwitches, in_shape: &[usize]) -> Result<Tensor, TensorError> {
    if in_shape != s.in_shape.as_slice() {
        return Err(TensorError::Rank {
            op: "unpool",
            expected: s.in_shape.len(),
            shape: in_shape.to_vec(),
        });
    }
    if y.len() != s.indices.len() {
        return Err(TensorError::LengthMismatch {
            op: "unpool",
            expected: s.indices.len(),
            got: y.len(),
        });
    }
    let mut out = Tensor::zeros(in_shape);
    let len = out.len();
    for (&idx, &v) in s.indices.iter().zip(y.data()) {
        if idx >= len {
            return Err(TensorError::SwitchRange { index: idx, len });
        }
        out.data[idx] += v;
    }
    Ok(out)
}

/// Elementwise `max(0, x)`.
pub fn rectify(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

/// Affine map `W x + b` with `W` of shape `dout x din`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if w.shape().len() != 2 {
        return Err(TensorError::Rank {
            op: "dense_forward",
            expected: 2,
            shape: w.shape().to_vec(),
        });
    }
    let (dout, din) = (w.shape()[0], w.shape()[1]);
    if x.len() != din {
        return Err(TensorError::LengthMismatch {
            op: "dense_forward",
            expected: din,
            got: x.len(),
        });
    }
    if b.len() != dout {
        return Err(TensorError::LengthMismatch {
            op: "dense_forward bias",
            expected: dout,
            got: b.len(),
        });
    }
    let mut out = vec![0.0; dout];
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w.data()[j * din..(j + 1) * din];
        let mut acc = b.data()[j];
        for (wv, xv) in row.iter().zip(x.data()) {
            if *wv != 0.0 {
                acc += wv * xv;
            }
        }
        *o = acc;
    }
    Ok(Tensor::from_vec(out))
}

/// Adjoint of the linear part of [`dense_forward`]: `W^T y`.
pub fn dense_transpose(y: &Tensor, w: &Tensor) -> Result<Tensor, TensorError> {
    let (dout, din) = (w.shape()[0], w.shape()[1]);
    if y.len() != dout {
        return Err(TensorError::LengthMismatch {
            op: "dense_transpose",
            expected: dout,
            got: y.len(),
        });
    }
    let mut out = vec![0.0; din];
    for j in 0..dout {
        let yv = y.data()[j];
        if yv == 0.0 {
            continue;
        }
        let row = &w.data()[j * din..(j + 1) * din];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += wv * yv;
        }
    }
    Ok(Tensor::from_vec(out))
}

pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn rand_conv(rng: &mut ChaCha8Rng, f: usize, c: usize, k: usize, stride: usize, pad: usize) -> ConvWeights {
        ConvWeights::new(
            rand_tensor(rng, &[f, c, k, k]),
            rand_tensor(rng, &[f]),
            stride,
            pad,
        )
        .unwrap()
    }

    /// Direct per-output-pixel reference convolution, deliberately written
    /// with a different loop structure than the production kernel.
    fn conv_reference(x: &Tensor, w: &ConvWeights) -> Tensor {
        let (cn, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kh, kw, s, p) = (w.kh(), w.kw(), w.stride, w.pad);
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (wd + 2 * p - kw) / s + 1;
        let mut out = Tensor::zeros(&[w.filters(), oh, ow]);
        for oc in 0..w.filters() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = w.bias.data()[oc];
                    for ic in 0..cn {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < wd {
                                    let xv = x.data()[(ic * h + iy as usize) * wd + ix as usize];
                                    let wv = w.kernel.data()[((oc * cn + ic) * kh + ky) * kw + kx];
                                    acc += wv * xv;
                                }
                            }
                        }
                    }
                    out.data_mut()[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_scalar_multiply_add() {
        let x = Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap();
        let w = ConvWeights::new(
            Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap(),
            Tensor::from_vec(vec![1.0]),
            1,
            0,
        )
        .unwrap();
        let y = conv2d_forward(&x, &w).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::new(vec![1, 3, 3], vec![1.0; 9]).unwrap();
        let w = ConvWeights::new(
            Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap(),
            Tensor::from_vec(vec![0.0]),
            1,
            0,
        )
        .unwrap();
        let y = conv2d_forward(&x, &w).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_matches_reference_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[2, 5, 5]);
        let w = rand_conv(&mut rng, 3, 2, 3, 1, 1);
        let got = conv2d_forward(&x, &w).unwrap();
        let want = conv_reference(&x, &w);
        assert_eq!(got.shape(), want.shape());
        for (g, e) in got.data().iter().zip(want.data()) {
            assert!((g - e).abs() < 1e-12, "got {g}, want {e}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[3, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_conv(&mut rng, 2, 2, 3, 1, 1);
        match conv2d_forward(&x, &w) {
            Err(TensorError::ChannelMismatch { expected: 2, got: 3, .. }) => {}
            other => panic!("expected channel mismatch, got {other:?}"),
        }
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let x = Tensor::zeros(&[1, 5, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_conv(&mut rng, 1, 1, 2, 2, 0);
        assert!(matches!(
            conv2d_forward(&x, &w),
            Err(TensorError::NonIntegralConvOutput { .. })
        ));
    }

    #[test]
    fn transpose_scalar_adjoint() {
        let w = ConvWeights::new(
            Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap(),
            Tensor::from_vec(vec![5.0]),
            1,
            0,
        )
        .unwrap();
        let y = Tensor::new(vec![1, 1, 1], vec![6.0]).unwrap();
        let x = conv2d_transpose(&y, &w).unwrap();
        assert_eq!(x.data(), &[18.0]);
    }

    #[test]
    fn transpose_broadcasts_kernel() {
        let w = ConvWeights::new(
            Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap(),
            Tensor::from_vec(vec![0.0]),
            1,
            0,
        )
        .unwrap();
        let y = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let x = conv2d_transpose(&y, &w).unwrap();
        assert_eq!(x.shape(), &[1, 3, 3]);
        assert_eq!(x.data(), &[1.0; 9]);
    }

    fn adjoint_rel_err(rng: &mut ChaCha8Rng, cn: usize, hw: usize, f: usize, k: usize, stride: usize, pad: usize) -> f64 {
        let x = rand_tensor(rng, &[cn, hw, hw]);
        let mut w = rand_conv(rng, f, cn, k, stride, pad);
        w.bias = Tensor::zeros(&[f]);
        let y_shape = conv2d_forward(&x, &w).unwrap();
        let y = rand_tensor(rng, y_shape.shape());
        let lhs = dot(&y_shape, &y);
        let xt = conv2d_transpose_into_shape(&y, &w, Some((hw, hw))).unwrap();
        let rhs = dot(&x, &xt);
        (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-30)
    }

    #[test]
    fn adjoint_identity_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let cn = rng.random_range(1..4usize);
            let f = rng.random_range(1..4usize);
            let k = rng.random_range(1..4usize);
            let pad = rng.random_range(0..k);
            let stride = rng.random_range(1..3usize);
            // choose an input extent that yields an integral output
            let mut hw = rng.random_range(3..9usize);
            while (hw + 2 * pad) < k || (hw + 2 * pad - k) % stride != 0 {
                hw += 1;
            }
            let err = adjoint_rel_err(&mut rng, cn, hw, f, k, stride, pad);
            assert!(err < 1e-10, "adjoint relative error {err}");
        }
    }

    #[test]
    fn pool_simple_and_tie_rule() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, s) = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(s.indices, vec![3]);

        let c = Tensor::new(vec![1, 2, 2], vec![5.0; 4]).unwrap();
        let (y, s) = maxpool_forward(&c, 2, 2).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(s.indices, vec![0], "ties break to the lowest linear index");
    }

    #[test]
    fn pool_rejects_non_tiling() {
        let x = Tensor::zeros(&[1, 5, 5]);
        assert!(matches!(
            maxpool_forward(&x, 2, 2),
            Err(TensorError::PoolTiling { .. })
        ));
    }

    #[test]
    fn pool_unpool_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[1, 8, 8]);
        let (y, s) = maxpool_forward(&x, 2, 2).unwrap();
        let back = unpool(&y, &s, x.shape()).unwrap();
        let winners: std::collections::HashSet<usize> = s.indices.iter().copied().collect();
        for (i, (&b, &orig)) in back.data().iter().zip(x.data()).enumerate() {
            if winners.contains(&i) {
                assert_eq!(b, orig, "winner location {i} must carry the max back");
            } else {
                assert_eq!(b, 0.0, "non-winner location {i} must be zero");
            }
        }
    }

    #[test]
    fn unpool_zero_and_indicator() {
        let s = PoolSwitches {
            k: 2,
            stride: 2,
            in_shape: vec![1, 2, 2],
            indices: vec![2],
        };
        let zero = unpool(&Tensor::from_vec(vec![0.0]).reshape(&[1, 1, 1]).unwrap(), &s, &[1, 2, 2]).unwrap();
        assert_eq!(zero.data(), &[0.0; 4]);
        let ones = unpool(&Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(), &s, &[1, 2, 2]).unwrap();
        assert_eq!(ones.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn unpool_rejects_bad_switch() {
        let s = PoolSwitches {
            k: 2,
            stride: 2,
            in_shape: vec![1, 2, 2],
            indices: vec![9],
        };
        let y = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        assert!(matches!(
            unpool(&y, &s, &[1, 2, 2]),
            Err(TensorError::SwitchRange { index: 9, len: 4 })
        ));
    }

    #[test]
    fn rectify_examples() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0]);
        assert_eq!(rectify(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::from_vec(vec![-3.0, -0.5]);
        assert_eq!(rectify(&neg).data(), &[0.0, 0.0]);
        let once = rectify(&x);
        assert!(rectify(&once).bits_eq(&once), "rectify is idempotent");
    }

    #[test]
    fn dense_identity_zero_and_reference() {
        let x = Tensor::from_vec(vec![1.5, -2.0, 0.25]);
        let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let zb = Tensor::zeros(&[3]);
        assert_eq!(dense_forward(&x, &eye, &zb).unwrap().data(), x.data());

        let zw = Tensor::zeros(&[2, 3]);
        let b = Tensor::from_vec(vec![0.5, -0.5]);
        assert_eq!(dense_forward(&x, &zw, &b).unwrap().data(), b.data());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = rand_tensor(&mut rng, &[4, 6]);
        let xv = rand_tensor(&mut rng, &[6]);
        let bv = rand_tensor(&mut rng, &[4]);
        let got = dense_forward(&xv, &w, &bv).unwrap();
        for j in 0..4 {
            let mut acc = bv.data()[j];
            for i in 0..6 {
                acc += w.data()[j * 6 + i] * xv.data()[i];
            }
            assert!((got.data()[j] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_rejects_mismatch() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let w = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2]);
        assert!(matches!(
            dense_forward(&x, &w, &b),
            Err(TensorError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn dense_transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = rand_tensor(&mut rng, &[5, 7]);
        let x = rand_tensor(&mut rng, &[7]);
        let y = rand_tensor(&mut rng, &[5]);
        let b = Tensor::zeros(&[5]);
        let wx = dense_forward(&x, &w, &b).unwrap();
        let wty = dense_transpose(&y, &w).unwrap();
        let lhs = dot(&wx, &y);
        let rhs = dot(&x, &wty);
        assert!((lhs - rhs).abs() / lhs.abs().max(1e-30) < 1e-12);
    }

    #[test]
    fn kernels_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rand_tensor(&mut rng, &[3, 6, 6]);
        let w = rand_conv(&mut rng, 4, 3, 3, 1, 1);
        let a = conv2d_forward(&x, &w).unwrap();
        let b = conv2d_forward(&x, &w).unwrap();
        assert!(a.bits_eq(&b));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn conv_linear_in_input(seed in 0u64..1000, alpha in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x1 = rand_tensor(&mut rng, &[2, 5, 5]);
            let x2 = rand_tensor(&mut rng, &[2, 5, 5]);
            let mut w = rand_conv(&mut rng, 2, 2, 3, 1, 1);
            w.bias = Tensor::zeros(&[2]);
            let y1 = conv2d_forward(&x1, &w).unwrap();
            let y2 = conv2d_forward(&x2, &w).unwrap();
            let mut xs = x1.clone();
            for (a, b) in xs.data_mut().iter_mut().zip(x2.data()) {
                *a = *a * alpha + b;
            }
            let ys = conv2d_forward(&xs, &w).unwrap();
            for i in 0..ys.len() {
                let expect = alpha * y1.data()[i] + y2.data()[i];
                prop_assert!((ys.data()[i] - expect).abs() < 1e-12);
            }
        }

        #[test]
        fn conv_linear_in_kernel(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[2, 4, 4]);
            let mut wa = rand_conv(&mut rng, 2, 2, 3, 1, 1);
            let mut wb = rand_conv(&mut rng, 2, 2, 3, 1, 1);
            wa.bias = Tensor::zeros(&[2]);
            wb.bias = Tensor::zeros(&[2]);
            let ya = conv2d_forward(&x, &wa).unwrap();
            let yb = conv2d_forward(&x, &wb).unwrap();
            let mut wsum = wa.clone();
            wsum.kernel.add_assign(&wb.kernel);
            let ys = conv2d_forward(&x, &wsum).unwrap();
            for i in 0..ys.len() {
                prop_assert!((ys.data()[i] - (ya.data()[i] + yb.data()[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn pool_round_trip_property(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[2, 6, 6]);
            let (y, s) = maxpool_forward(&x, 2, 2).unwrap();
            let back = unpool(&y, &s, x.shape()).unwrap();
            for (i, &b) in back.data().iter().enumerate() {
                if s.indices.contains(&i) {
                    prop_assert_eq!(b, x.data()[i]);
                } else {
                    prop_assert_eq!(b, 0.0);
                }
            }
        }
    }
}
