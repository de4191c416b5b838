//! Dense `C×H×W` tensors and the convolution/pooling kernels shared by the
//! backbones.
//!
//! Everything here is generic over [`Real`] so the same code runs in `f32`
//! for throughput and in `f64` when gradients are checked against finite
//! differences.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar with a matrix-multiply kernel attached.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + AddAssign + MulAssign + Sum + 'static
{
    /// `c = op(a) · op(b)` (or `c += …` when `accumulate`), all row-major.
    ///
    /// `a` is `m×k` (stored `k×m` when `trans_a`), `b` is `k×n` (stored `n×k`
    /// when `trans_b`), `c` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn gemm_strides(m: usize, k: usize, n: usize, trans_a: bool, trans_b: bool) -> (isize, isize, isize, isize) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    (rsa, csa, rsb, csb)
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa, rsb, csb) = gemm_strides(m, k, n, trans_a, trans_b);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above guarantee every index touched by
                // the kernel for these shapes and strides is in bounds.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// A `channels × height × width` tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![T::zero(); channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor data length does not match shape");
        Self { channels, height, width, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn cast<U: Real>(&self) -> Tensor3<U> {
        Tensor3 {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn relu_in_place(&mut self) {
        for v in &mut self.data {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
    }
}

/// Output side length of a convolution or pooling window (floor mode).
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let padded = input + 2 * pad;
    if padded < kernel {
        0
    } else {
        (padded - kernel) / stride + 1
    }
}

/// 2-D convolution with square kernels, stride and zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `(out, in, k, k)` row-major.
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: Some(vec![T::zero(); out_channels]),
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn output_hw(&self, height: usize, width: usize) -> (usize, usize) {
        (
            conv_out_len(height, self.kernel, self.stride, self.pad),
            conv_out_len(width, self.kernel, self.stride, self.pad),
        )
    }

    pub fn forward(&self, x: &Tensor3<T>) -> Tensor3<T> {
        assert_eq!(x.channels, self.in_channels, "conv input channel mismatch");
        let (oh, ow) = self.output_hw(x.height, x.width);
        let mut out = Tensor3::zeros(self.out_channels, oh, ow);
        let cols;
        let rhs: &[T] = if self.is_pointwise() {
            &x.data
        } else {
            cols = im2col(x, self.kernel, self.stride, self.pad, oh, ow);
            &cols
        };
        T::gemm(self.out_channels, self.patch_len(), oh * ow, &self.weight, false, rhs, false, &mut out.data, false);
        if let Some(bias) = &self.bias {
            for (c, &b) in bias.iter().enumerate() {
                for v in out.plane_mut(c) {
                    *v += b;
                }
            }
        }
        out
    }

    /// Gradient with respect to the input, given the gradient of the output.
    pub fn backward_input(&self, grad_out: &Tensor3<T>, in_height: usize, in_width: usize) -> Tensor3<T> {
        let (oh, ow) = (grad_out.height, grad_out.width);
        assert_eq!(grad_out.channels, self.out_channels, "conv gradient channel mismatch");
        if self.is_pointwise() {
            let mut grad_in = Tensor3::zeros(self.in_channels, in_height, in_width);
            T::gemm(self.in_channels, self.out_channels, oh * ow, &self.weight, true, &grad_out.data, false, &mut grad_in.data, false);
            return grad_in;
        }
        let mut dcols = vec![T::zero(); self.patch_len() * oh * ow];
        T::gemm(self.patch_len(), self.out_channels, oh * ow, &self.weight, true, &grad_out.data, false, &mut dcols, false);
        col2im(&dcols, self.in_channels, in_height, in_width, self.kernel, self.stride, self.pad, oh, ow)
    }
}

fn valid_range(out_len: usize, in_len: usize, offset: isize, stride: usize) -> (usize, usize) {
    // output indices o with 0 <= o*stride + offset < in_len
    let lo = if offset >= 0 { 0 } else { ((-offset) as usize).div_ceil(stride) };
    let hi_excl = if (in_len as isize) - offset <= 0 {
        0
    } else {
        ((in_len as isize - offset) as usize).div_ceil(stride)
    };
    (lo.min(out_len), hi_excl.min(out_len))
}

fn im2col<T: Real>(x: &Tensor3<T>, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<T> {
    let (h, w) = (x.height, x.width);
    let n = oh * ow;
    let mut cols = vec![T::zero(); x.channels * k * k * n];
    for ci in 0..x.channels {
        let src = x.plane(ci);
        for ky in 0..k {
            let y_off = ky as isize - pad as isize;
            let (oy0, oy1) = valid_range(oh, h, y_off, stride);
            for kx in 0..k {
                let x_off = kx as isize - pad as isize;
                let (ox0, ox1) = valid_range(ow, w, x_off, stride);
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in oy0..oy1 {
                    let iy = (oy * stride) as isize + y_off;
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        let ix0 = (ox0 as isize + x_off) as usize;
                        dst_row[ox0..ox1].copy_from_slice(&src_row[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            dst_row[ox] = src_row[((ox * stride) as isize + x_off) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor3<T> {
    let n = oh * ow;
    let mut out = Tensor3::zeros(channels, h, w);
    for ci in 0..channels {
        let dst = out.plane_mut(ci);
        for ky in 0..k {
            let y_off = ky as isize - pad as isize;
            let (oy0, oy1) = valid_range(oh, h, y_off, stride);
            for kx in 0..k {
                let x_off = kx as isize - pad as isize;
                let (ox0, ox1) = valid_range(ow, w, x_off, stride);
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in oy0..oy1 {
                    let iy = ((oy * stride) as isize + y_off) as usize;
                    let dst_row = &mut dst[iy * w..(iy + 1) * w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in src_row.iter().enumerate().take(ox1).skip(ox0) {
                        let ix = ((ox * stride) as isize + x_off) as usize;
                        dst_row[ix] += v;
                    }
                }
            }
        }
    }
    out
}

/// Max pooling result with the flat input index that won each window.
#[derive(Debug, Clone)]
pub struct Pooled<T> {
    pub output: Tensor3<T>,
    pub argmax: Vec<u32>,
}

/// Max pooling with square windows; padded cells never win.
pub fn max_pool<T>(x: &Tensor3<T>, kernel: usize, stride: usize, pad: usize) -> Pooled<T>
where
    T: Real,
{
    let oh = conv_out_len(x.height, kernel, stride, pad);
    let ow = conv_out_len(x.width, kernel, stride, pad);
    let mut output = Tensor3::zeros(x.channels, oh, ow);
    let mut argmax = vec![0u32; x.channels * oh * ow];
    for c in 0..x.channels {
        let src = x.plane(c);
        let base = c * x.plane_len();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= x.height as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= x.width as isize {
                            continue;
                        }
                        let idx = iy as usize * x.width + ix as usize;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                output.data[o] = best;
                argmax[o] = (base + best_idx) as u32;
            }
        }
    }
    Pooled { output, argmax }
}

/// Routes pooled gradients back to the winning input cells.
pub fn max_pool_backward<T: Real>(grad_out: &Tensor3<T>, argmax: &[u32], in_shape: (usize, usize, usize)) -> Tensor3<T> {
    let mut grad_in = Tensor3::zeros(in_shape.0, in_shape.1, in_shape.2);
    for (g, &idx) in grad_out.data.iter().zip(argmax) {
        grad_in.data[idx as usize] += *g;
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor3<f64> {
        Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn naive_conv(conv: &Conv2d<f64>, x: &Tensor3<f64>) -> Tensor3<f64> {
        let (oh, ow) = conv.output_hw(x.height, x.width);
        let mut out = Tensor3::zeros(conv.out_channels, oh, ow);
        let k = conv.kernel;
        for o in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias.as_ref().map_or(0.0, |b| b[o]);
                    for i in 0..conv.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                    continue;
                                }
                                let wv = conv.weight[((o * conv.in_channels + i) * k + ky) * k + kx];
                                acc += wv * x.data[(i * x.height + iy as usize) * x.width + ix as usize];
                            }
                        }
                    }
                    out.data[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn random_conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Conv2d<f64> {
        let mut conv = Conv2d::new(cin, cout, k, stride, pad);
        for w in &mut conv.weight {
            *w = rng.random_range(-1.0..1.0);
        }
        conv.bias = Some((0..cout).map(|_| rng.random_range(-1.0..1.0)).collect());
        conv
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(k, stride, pad) in &[(3, 1, 1), (1, 1, 0), (3, 2, 1), (7, 2, 3), (1, 2, 0)] {
            let conv = random_conv(&mut rng, 3, 5, k, stride, pad);
            let x = random_tensor(&mut rng, 3, 11, 9);
            let fast = conv.forward(&x);
            let slow = naive_conv(&conv, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint() {
        // <conv(x) - bias, g> == <x, conv^T(g)>
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, stride, pad) in &[(3, 1, 1), (1, 1, 0), (3, 2, 1), (7, 2, 3)] {
            let mut conv = random_conv(&mut rng, 4, 6, k, stride, pad);
            conv.bias = None;
            let x = random_tensor(&mut rng, 4, 10, 13);
            let y = conv.forward(&x);
            let g = random_tensor(&mut rng, y.channels, y.height, y.width);
            let gx = conv.backward_input(&g, x.height, x.width);
            let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data.iter().zip(&gx.data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn pooling_picks_window_maximum() {
        let x = Tensor3::from_vec(1, 4, 4, (0..16).map(|v| v as f64).collect());
        let p = max_pool(&x, 2, 2, 0);
        assert_eq!(p.output.data, vec![5.0, 7.0, 13.0, 15.0]);
        let g = Tensor3::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let back = max_pool_backward(&g, &p.argmax, (1, 4, 4));
        assert_eq!(back.data[5], 1.0);
        assert_eq!(back.data[15], 4.0);
        assert_eq!(back.data.iter().sum::<f64>(), 10.0);
    }

    #[test]
    fn pooling_floor_mode_and_padding() {
        let x = Tensor3::from_vec(1, 5, 5, vec![-1.0; 25]);
        assert_eq!(max_pool(&x, 2, 2, 0).output.shape(), (1, 2, 2));
        let p = max_pool(&x, 3, 2, 1);
        assert_eq!(p.output.shape(), (1, 3, 3));
        assert!(p.output.data.iter().all(|&v| v == -1.0));
    }

    #[test]
    fn gemm_transposes_agree() {
        let a: Vec<f32> = (0..6).map(|v| v as f32).collect(); // 2x3
        let b: Vec<f32> = (0..12).map(|v| v as f32 * 0.5).collect(); // 3x4
        let mut c = vec![0.0f32; 8];
        f32::gemm(2, 3, 4, &a, false, &b, false, &mut c, false);
        let at: Vec<f32> = vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0];
        let mut c2 = vec![0.0f32; 8];
        f32::gemm(2, 3, 4, &at, true, &b, false, &mut c2, false);
        assert_eq!(c, c2);
        let bt: Vec<f32> = (0..4).flat_map(|j| (0..3).map(move |i| (i * 4 + j) as f32 * 0.5)).collect();
        let mut c3 = vec![0.0f32; 8];
        f32::gemm(2, 3, 4, &a, false, &bt, true, &mut c3, false);
        assert_eq!(c, c3);
    }
}
