//! Differentiable building blocks with hand-written backward passes.
//!
//! Each layer owns its parameters; the gradient accumulator for a layer is
//! another instance of the same type (see [`Conv2d::zeros_like`]).
//! Forward passes return a cache that the matching backward pass consumes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::{gemm, lit, MatRef, Scalar};
use crate::tensor::Tensor;

fn fan_in_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize, gain: f64) -> Vec<T> {
    let std = (gain / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| lit(dist.sample(rng))).collect()
}

/// Gain for layers followed by a rectifier.
pub const RELU_GAIN: f64 = 2.0;
/// Gain for output layers.
pub const LINEAR_GAIN: f64 = 1.0;

/// Square-kernel convolution with "same" padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `out_channels × (in_channels · kernel²)`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: fan_in_normal(rng, out_channels * fan_in, fan_in, gain),
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
            ..*self
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = 2 * self.pad();
        ((h + p - self.kernel) / self.stride + 1, (w + p - self.kernel) / self.stride + 1)
    }

    fn im2col(&self, x: &Tensor<T>, oh: usize, ow: usize) -> Vec<T> {
        let k = self.kernel;
        let (s, p) = (self.stride, self.pad() as isize);
        let n = oh * ow;
        let mut cols = vec![T::zero(); self.in_channels * k * k * n];
        for c in 0..self.in_channels {
            let plane = x.plane(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * n;
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.width..(iy as usize + 1) * x.width];
                        let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < x.width as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], shape: (usize, usize, usize), oh: usize, ow: usize) -> Tensor<T> {
        let (c_in, h, w) = shape;
        let k = self.kernel;
        let (s, p) = (self.stride, self.pad() as isize);
        let n = oh * ow;
        let mut dx = Tensor::zeros(c_in, h, w);
        for c in 0..c_in {
            let plane = dx.plane_mut(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * n;
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (oh, ow) = self.out_hw(x.height, x.width);
        let cols = if self.kernel == 1 && self.stride == 1 { x.data.clone() } else { self.im2col(x, oh, ow) };
        let n = oh * ow;
        let mut out = Tensor::zeros(self.out_channels, oh, ow);
        for (co, &b) in self.bias.iter().enumerate() {
            out.plane_mut(co).iter_mut().for_each(|v| *v = b);
        }
        let ckk = self.in_channels * self.kernel * self.kernel;
        gemm(
            T::one(),
            MatRef::new(&self.weight, self.out_channels, ckk),
            MatRef::new(&cols, ckk, n),
            T::one(),
            &mut out.data,
        );
        (out, ConvCache { cols, in_shape: x.shape(), out_hw: (oh, ow) })
    }

    /// Accumulates parameter gradients into `grad`; returns the input
    /// gradient when `need_input_grad`.
    pub fn backward(
        &self,
        cache: &ConvCache<T>,
        dy: &Tensor<T>,
        grad: &mut Self,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let (oh, ow) = cache.out_hw;
        let n = oh * ow;
        let ckk = self.in_channels * self.kernel * self.kernel;
        gemm(
            T::one(),
            MatRef::new(&dy.data, self.out_channels, n),
            MatRef::new(&cache.cols, ckk, n).t(),
            T::one(),
            &mut grad.weight,
        );
        for (co, gb) in grad.bias.iter_mut().enumerate() {
            *gb += dy.plane(co).iter().copied().sum::<T>();
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![T::zero(); ckk * n];
        gemm(
            T::one(),
            MatRef::new(&self.weight, self.out_channels, ckk).t(),
            MatRef::new(&dy.data, self.out_channels, n),
            T::zero(),
            &mut dcols,
        );
        if self.kernel == 1 && self.stride == 1 {
            let (c, h, w) = cache.in_shape;
            return Some(Tensor::from_vec(c, h, w, dcols).expect("1x1 conv input shape"));
        }
        Some(self.col2im(&dcols, cache.in_shape, oh, ow))
    }

    pub fn params(&self) -> [&[T]; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut [T]; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// 2×2 stride-2 transposed convolution ("up-convolution").
#[derive(Clone, Debug, PartialEq)]
pub struct UpConv2<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(out_channels · 4) × in_channels`; row `co*4 + dy*2 + dx`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub struct UpCache<T> {
    input: Tensor<T>,
}

impl<T: Scalar> UpConv2<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: fan_in_normal(rng, out_channels * 4 * in_channels, in_channels, RELU_GAIN),
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
            ..*self
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, UpCache<T>) {
        assert_eq!(x.channels, self.in_channels, "up-conv input channels");
        let (h, w) = (x.height, x.width);
        let n = h * w;
        let mut y = vec![T::zero(); self.out_channels * 4 * n];
        gemm(
            T::one(),
            MatRef::new(&self.weight, self.out_channels * 4, self.in_channels),
            MatRef::new(&x.data, self.in_channels, n),
            T::zero(),
            &mut y,
        );
        let mut out = Tensor::zeros(self.out_channels, 2 * h, 2 * w);
        for co in 0..self.out_channels {
            let b = self.bias[co];
            for q in 0..4 {
                let (dy, dx) = (q / 2, q % 2);
                let src = &y[(co * 4 + q) * n..(co * 4 + q + 1) * n];
                for iy in 0..h {
                    for ix in 0..w {
                        *out.at_mut(co, 2 * iy + dy, 2 * ix + dx) = src[iy * w + ix] + b;
                    }
                }
            }
        }
        (out, UpCache { input: x.clone() })
    }

    pub fn backward(&self, cache: &UpCache<T>, dout: &Tensor<T>, grad: &mut Self) -> Tensor<T> {
        let x = &cache.input;
        let (h, w) = (x.height, x.width);
        let n = h * w;
        let mut dy = vec![T::zero(); self.out_channels * 4 * n];
        for co in 0..self.out_channels {
            grad.bias[co] += dout.plane(co).iter().copied().sum::<T>();
            for q in 0..4 {
                let (oy, ox) = (q / 2, q % 2);
                let dst = &mut dy[(co * 4 + q) * n..(co * 4 + q + 1) * n];
                for iy in 0..h {
                    for ix in 0..w {
                        dst[iy * w + ix] = dout.at(co, 2 * iy + oy, 2 * ix + ox);
                    }
                }
            }
        }
        gemm(
            T::one(),
            MatRef::new(&dy, self.out_channels * 4, n),
            MatRef::new(&x.data, self.in_channels, n).t(),
            T::one(),
            &mut grad.weight,
        );
        let mut dx = Tensor::zeros(self.in_channels, h, w);
        gemm(
            T::one(),
            MatRef::new(&self.weight, self.out_channels * 4, self.in_channels).t(),
            MatRef::new(&dy, self.out_channels * 4, n),
            T::zero(),
            &mut dx.data,
        );
        dx
    }

    pub fn params(&self) -> [&[T]; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut [T]; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Fully connected layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            inputs,
            outputs,
            weight: fan_in_normal(rng, inputs * outputs, inputs, gain),
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
            ..*self
        }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.inputs, "linear input width");
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, &b)| row.iter().zip(x).fold(b, |acc, (&w, &v)| acc + w * v))
            .collect()
    }

    pub fn backward(&self, x: &[T], dy: &[T], grad: &mut Self) -> Vec<T> {
        let mut dx = vec![T::zero(); self.inputs];
        for (o, &g) in dy.iter().enumerate() {
            grad.bias[o] += g;
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }

    pub fn params(&self) -> [&[T]; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut [T]; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub fn relu_inplace<T: Scalar>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Zeroes `grad` where the rectifier output was not positive.
pub fn relu_backward_inplace<T: Scalar>(grad: &mut [T], output: &[T]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Valid (unpadded) cross-correlation of a `C×th×tw` template over a
/// `C×sh×sw` search region, summed over channels. Output is
/// `(sh-th+1) × (sw-tw+1)`, row-major; entry `(u, v)` places the template's
/// top-left corner at search row `u`, column `v`.
pub fn cross_correlate<T: Scalar>(template: &Tensor<T>, search: &Tensor<T>) -> Vec<T> {
    assert_eq!(template.channels, search.channels, "xcorr channel count");
    let (oh, ow) = (search.height - template.height + 1, search.width - template.width + 1);
    let mut out = vec![T::zero(); oh * ow];
    for c in 0..template.channels {
        let tp = template.plane(c);
        let sp = search.plane(c);
        for u in 0..oh {
            for v in 0..ow {
                let mut acc = T::zero();
                for i in 0..template.height {
                    let trow = &tp[i * template.width..(i + 1) * template.width];
                    let srow = &sp[(i + u) * search.width + v..(i + u) * search.width + v + template.width];
                    acc += trow.iter().zip(srow).fold(T::zero(), |a, (&p, &q)| a + p * q);
                }
                out[u * ow + v] += acc;
            }
        }
    }
    out
}

/// Gradients of [`cross_correlate`] with respect to template and search.
pub fn cross_correlate_backward<T: Scalar>(
    template: &Tensor<T>,
    search: &Tensor<T>,
    dout: &[T],
) -> (Tensor<T>, Tensor<T>) {
    let (oh, ow) = (search.height - template.height + 1, search.width - template.width + 1);
    let mut dt = Tensor::zeros(template.channels, template.height, template.width);
    let mut ds = Tensor::zeros(search.channels, search.height, search.width);
    let tw = template.width;
    for c in 0..template.channels {
        let tp = template.plane(c);
        let sp = search.plane(c);
        let dtp = dt.plane_mut(c);
        for u in 0..oh {
            for v in 0..ow {
                let g = dout[u * ow + v];
                if g == T::zero() {
                    continue;
                }
                for i in 0..template.height {
                    let off = (i + u) * search.width + v;
                    let srow = &sp[off..off + tw];
                    for (d, &s) in dtp[i * tw..(i + 1) * tw].iter_mut().zip(srow) {
                        *d += g * s;
                    }
                }
            }
        }
        let dsp = ds.plane_mut(c);
        for u in 0..oh {
            for v in 0..ow {
                let g = dout[u * ow + v];
                if g == T::zero() {
                    continue;
                }
                for i in 0..template.height {
                    let off = (i + u) * search.width + v;
                    for (d, &t) in dsp[off..off + tw].iter_mut().zip(&tp[i * tw..(i + 1) * tw]) {
                        *d += g * t;
                    }
                }
            }
        }
    }
    (dt, ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct-loop convolution, independent of im2col.
    fn naive_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (oh, ow) = conv.out_hw(x.height, x.width);
        let p = conv.kernel as isize / 2;
        let k = conv.kernel;
        let mut out = Tensor::zeros(conv.out_channels, oh, ow);
        for co in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias[co];
                    for ci in 0..conv.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - p;
                                let ix = (ox * conv.stride + kx) as isize - p;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.height && (ix as usize) < x.width {
                                    acc += conv.weight[co * conv.in_channels * k * k + (ci * k + ky) * k + kx]
                                        * x.at(ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    *out.at_mut(co, oy, ox) = acc;
                }
            }
        }
        out
    }

    /// Scalar objective sum(out * r) for a fixed random r, used for finite differences.
    fn probe(out: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
        out.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn conv_matches_naive_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s) in &[(3usize, 1usize), (3, 2), (1, 1)] {
            let conv = Conv2d::<f64>::new(3, 4, k, s, RELU_GAIN, &mut rng);
            let x = rand_tensor(&mut rng, 3, 8, 6);
            let (y, _) = conv.forward(&x);
            let want = naive_conv(&conv, &x);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let conv = Conv2d::<f64>::new(1, 1, 3, 2, RELU_GAIN, &mut rng);
        assert_eq!(conv.out_hw(64, 64), (32, 32));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, s) in &[(3usize, 1usize), (3, 2), (1, 1)] {
            let mut conv = Conv2d::<f64>::new(2, 3, k, s, RELU_GAIN, &mut rng);
            let x = rand_tensor(&mut rng, 2, 6, 6);
            let (y, cache) = conv.forward(&x);
            let r = rand_tensor(&mut rng, y.channels, y.height, y.width);
            let mut g = conv.zeros_like();
            let dx = conv.backward(&cache, &r, &mut g, true).unwrap();
            let h = 1e-6;
            for i in (0..conv.weight.len()).step_by(5) {
                let w0 = conv.weight[i];
                conv.weight[i] = w0 + h;
                let up = probe(&conv.forward(&x).0, &r);
                conv.weight[i] = w0 - h;
                let dn = probe(&conv.forward(&x).0, &r);
                conv.weight[i] = w0;
                assert!(((up - dn) / (2.0 * h) - g.weight[i]).abs() < 1e-7);
            }
            for i in 0..x.data.len() {
                let mut xp = x.clone();
                xp.data[i] += h;
                let mut xm = x.clone();
                xm.data[i] -= h;
                let fd = (probe(&conv.forward(&xp).0, &r) - probe(&conv.forward(&xm).0, &r)) / (2.0 * h);
                assert!((fd - dx.data[i]).abs() < 1e-7);
            }
            let bsum: f64 = (0..y.channels).map(|c| r.plane(c).iter().sum::<f64>()).sum();
            assert!((g.bias.iter().sum::<f64>() - bsum).abs() < 1e-9);
        }
    }

    #[test]
    fn upconv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut up = UpConv2::<f64>::new(3, 2, &mut rng);
        let x = rand_tensor(&mut rng, 3, 3, 4);
        let (y, cache) = up.forward(&x);
        assert_eq!(y.shape(), (2, 6, 8));
        let r = rand_tensor(&mut rng, 2, 6, 8);
        let mut g = up.zeros_like();
        let dx = up.backward(&cache, &r, &mut g);
        let h = 1e-6;
        for i in 0..up.weight.len() {
            let w0 = up.weight[i];
            up.weight[i] = w0 + h;
            let a = probe(&up.forward(&x).0, &r);
            up.weight[i] = w0 - h;
            let b = probe(&up.forward(&x).0, &r);
            up.weight[i] = w0;
            assert!(((a - b) / (2.0 * h) - g.weight[i]).abs() < 1e-7);
        }
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (probe(&up.forward(&xp).0, &r) - probe(&up.forward(&xm).0, &r)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lin = Linear::<f64>::new(5, 3, LINEAR_GAIN, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = [0.3, -1.2, 0.7];
        let mut g = lin.zeros_like();
        let dx = lin.backward(&x, &r, &mut g);
        let f = |x: &[f64]| lin.forward(x).iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..5 {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            assert!(((f(&xp) - f(&xm)) / 2e-6 - dx[i]).abs() < 1e-8);
        }
        assert_eq!(g.bias, r.to_vec());
    }

    #[test]
    fn xcorr_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = rand_tensor(&mut rng, 2, 3, 3);
        let s = rand_tensor(&mut rng, 2, 5, 6);
        let out = cross_correlate(&t, &s);
        assert_eq!(out.len(), 3 * 4);
        let r: Vec<f64> = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (dt, ds) = cross_correlate_backward(&t, &s, &r);
        let f = |t: &Tensor<f64>, s: &Tensor<f64>| cross_correlate(t, s).iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..t.data.len() {
            let (mut tp, mut tm) = (t.clone(), t.clone());
            tp.data[i] += 1e-6;
            tm.data[i] -= 1e-6;
            assert!(((f(&tp, &s) - f(&tm, &s)) / 2e-6 - dt.data[i]).abs() < 1e-8);
        }
        for i in 0..s.data.len() {
            let (mut sp, mut sm) = (s.clone(), s.clone());
            sp.data[i] += 1e-6;
            sm.data[i] -= 1e-6;
            assert!(((f(&t, &sp) - f(&t, &sm)) / 2e-6 - ds.data[i]).abs() < 1e-8);
        }
    }
}
