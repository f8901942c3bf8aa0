//! Layer primitives with hand-written backward passes.
//!
//! Convolutions run as im2col + GEMM per sample. Parameters live in a
//! [`ParamSet`] and layers refer to them by index, so the optimizer and the
//! checkpoint code can treat every network uniformly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Scalar, Tensor};

/// Forward-pass behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Batch statistics for normalization, dropout on.
    Train,
    /// Running statistics, dropout on.
    EvalStochastic,
    /// Running statistics, dropout off.
    EvalDeterministic,
}

impl Mode {
    fn batch_stats(self) -> bool {
        self == Mode::Train
    }

    fn dropout(self) -> bool {
        self != Mode::EvalDeterministic
    }
}

/// One named array of network state.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// Running statistics are state but not optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    pub params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    fn add(&mut self, name: String, shape: Vec<usize>, value: Vec<T>, trainable: bool) -> usize {
        let len = value.len();
        debug_assert_eq!(len, shape.iter().product::<usize>());
        self.params.push(Param {
            name,
            shape,
            value,
            grad: vec![T::zero(); len],
            trainable,
        });
        self.params.len() - 1
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter().filter(|p| p.trainable)
    }

    pub fn len_trainable(&self) -> usize {
        self.trainable().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Draws initial values: conv weights `N(0, 0.02)`, norm scales `N(1, 0.02)`.
pub(crate) struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    pub(crate) fn new(rng: ChaCha8Rng) -> Self {
        Self {
            rng,
            normal: Normal::new(0.0, 0.02).expect("valid std"),
        }
    }

    fn gaussian<T: Scalar>(&mut self, n: usize, mean: f64) -> Vec<T> {
        (0..n)
            .map(|_| T::of(mean + self.normal.sample(&mut self.rng)))
            .collect()
    }
}

/// Kernel size, stride and (possibly asymmetric) zero padding of a
/// convolution, seen from the larger of its two images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad_lo: usize,
    pub pad_hi: usize,
}

impl ConvGeom {
    pub fn symmetric(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad_lo: pad,
            pad_hi: pad,
        }
    }

    /// Output extent of a convolution over `size`, if the kernel fits.
    pub fn conv_out(&self, size: usize) -> Option<usize> {
        (size + self.pad_lo + self.pad_hi)
            .checked_sub(self.kernel)
            .map(|v| v / self.stride + 1)
    }

    /// Output extent of the transposed convolution over `size`.
    pub fn deconv_out(&self, size: usize) -> Option<usize> {
        if size == 0 {
            return None;
        }
        ((size - 1) * self.stride + self.kernel).checked_sub(self.pad_lo + self.pad_hi)
    }
}

/// Unfolds `x` (`c x h x w`) into columns (`c*k*k x oh*ow`).
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, g: ConvGeom, oh: usize, ow: usize, cols: &mut [T]) {
    let k = g.kernel;
    let plane = oh * ow;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_lo as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad_lo as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, g: ConvGeom, oh: usize, ow: usize, x: &mut [T]) {
    let k = g.kernel;
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_lo as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad_lo as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution (`transposed == false`) or transposed convolution.
///
/// Weight layout is `[out, in, k, k]` for convolutions and `[in, out, k, k]`
/// for transposed convolutions.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvLayer {
    pub weight: usize,
    pub bias: Option<usize>,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
    pub transposed: bool,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        transposed: bool,
        bias: bool,
    ) -> Self {
        let k = geom.kernel;
        let shape = if transposed {
            vec![cin, cout, k, k]
        } else {
            vec![cout, cin, k, k]
        };
        let n = cin * cout * k * k;
        let weight = ps.add(format!("{name}.weight"), shape, init.gaussian(n, 0.0), true);
        let bias = bias.then(|| ps.add(format!("{name}.bias"), vec![cout], vec![T::zero(); cout], true));
        Self {
            weight,
            bias,
            cin,
            cout,
            geom,
            transposed,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.transposed {
            Some((self.geom.deconv_out(h)?, self.geom.deconv_out(w)?))
        } else {
            Some((self.geom.conv_out(h)?, self.geom.conv_out(w)?))
        }
    }

    fn forward<T: Scalar>(&self, ps: &ParamSet<T>, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (oh, ow) = self.out_hw(x.h, x.w).expect("kernel fits input");
        let k = self.geom.kernel;
        let wgt = &ps.params[self.weight].value;
        let mut y = Tensor::zeros(x.n, self.cout, oh, ow);
        if self.transposed {
            // columns live on the small (input) grid, scattered onto the output
            let mut cols = vec![T::zero(); self.cout * k * k * x.h * x.w];
            for i in 0..x.n {
                gemm(self.cout * k * k, self.cin, x.h * x.w, wgt, true, x.sample(i), false, T::zero(), &mut cols);
                col2im(&cols, self.cout, oh, ow, self.geom, x.h, x.w, y.sample_mut(i));
            }
        } else {
            let mut cols = vec![T::zero(); self.cin * k * k * oh * ow];
            for i in 0..x.n {
                im2col(x.sample(i), self.cin, x.h, x.w, self.geom, oh, ow, &mut cols);
                gemm(self.cout, self.cin * k * k, oh * ow, wgt, false, &cols, false, T::zero(), y.sample_mut(i));
            }
        }
        if let Some(b) = self.bias {
            let bias = &ps.params[b].value;
            let plane = oh * ow;
            for i in 0..y.n {
                let s = y.sample_mut(i);
                for (c, &bv) in bias.iter().enumerate() {
                    s[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        y
    }

    fn backward<T: Scalar>(&self, ps: &mut ParamSet<T>, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let k = self.geom.kernel;
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        if let Some(b) = self.bias {
            let plane = dy.h * dy.w;
            let g = &mut ps.params[b].grad;
            for i in 0..dy.n {
                let s = dy.sample(i);
                for (c, gv) in g.iter_mut().enumerate() {
                    *gv += s[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
                }
            }
        }
        let mut dw = std::mem::take(&mut ps.params[self.weight].grad);
        let wgt = &ps.params[self.weight].value;
        if self.transposed {
            let mut cols = vec![T::zero(); self.cout * k * k * x.h * x.w];
            for i in 0..x.n {
                im2col(dy.sample(i), self.cout, dy.h, dy.w, self.geom, x.h, x.w, &mut cols);
                gemm(self.cin, self.cout * k * k, x.h * x.w, wgt, false, &cols, false, T::zero(), dx.sample_mut(i));
                gemm(self.cin, x.h * x.w, self.cout * k * k, x.sample(i), false, &cols, true, T::one(), &mut dw);
            }
        } else {
            let (oh, ow) = (dy.h, dy.w);
            let mut cols = vec![T::zero(); self.cin * k * k * oh * ow];
            let mut dcols = vec![T::zero(); self.cin * k * k * oh * ow];
            for i in 0..x.n {
                im2col(x.sample(i), self.cin, x.h, x.w, self.geom, oh, ow, &mut cols);
                gemm(self.cout, oh * ow, self.cin * k * k, dy.sample(i), false, &cols, true, T::one(), &mut dw);
                gemm(self.cin * k * k, self.cout, oh * ow, wgt, true, dy.sample(i), false, T::zero(), &mut dcols);
                col2im(&dcols, self.cin, x.h, x.w, self.geom, oh, ow, dx.sample_mut(i));
            }
        }
        ps.params[self.weight].grad = dw;
        dx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub(crate) fn new<T: Scalar>(ps: &mut ParamSet<T>, init: &mut Init, name: &str, channels: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), vec![channels], init.gaussian(channels, 1.0), true);
        let beta = ps.add(format!("{name}.beta"), vec![channels], vec![T::zero(); channels], true);
        let running_mean = ps.add(format!("{name}.running_mean"), vec![channels], vec![T::zero(); channels], false);
        let running_var = ps.add(format!("{name}.running_var"), vec![channels], vec![T::one(); channels], false);
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// A single step of a block.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Conv(ConvLayer),
    Norm(BatchNorm),
    LeakyRelu(f64),
    Relu,
    Tanh,
    Dropout(f64),
    /// Zero padding on every side.
    Pad(usize),
}

pub(crate) enum Cache<T> {
    Input(Tensor<T>),
    Norm { xhat: Tensor<T>, inv_std: Vec<T>, batch_stats: bool },
    Output(Tensor<T>),
    Mask(Vec<T>),
    Shape(usize),
    Empty,
}

/// Forward-pass context: mode, dropout randomness, whether to keep caches.
pub(crate) struct Ctx<'a> {
    pub mode: Mode,
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub keep: bool,
}

impl Op {
    pub(crate) fn forward<T: Scalar>(&self, ps: &mut ParamSet<T>, x: Tensor<T>, ctx: &mut Ctx<'_>) -> (Tensor<T>, Cache<T>) {
        match self {
            Op::Conv(l) => {
                let y = l.forward(ps, &x);
                (y, if ctx.keep { Cache::Input(x) } else { Cache::Empty })
            }
            Op::Norm(bn) => norm_forward(bn, ps, x, ctx),
            Op::LeakyRelu(slope) => {
                let s = T::of(*slope);
                let y = x.clone().map(|v| if v > T::zero() { v } else { v * s });
                (y, if ctx.keep { Cache::Input(x) } else { Cache::Empty })
            }
            Op::Relu => {
                let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
                let c = if ctx.keep { Cache::Output(y.clone()) } else { Cache::Empty };
                (y, c)
            }
            Op::Tanh => {
                let y = x.map(|v| v.tanh());
                let c = if ctx.keep { Cache::Output(y.clone()) } else { Cache::Empty };
                (y, c)
            }
            Op::Dropout(p) => {
                if !ctx.mode.dropout() || *p <= 0.0 {
                    return (x, Cache::Empty);
                }
                let rng = ctx.rng.as_deref_mut().expect("dropout needs a random source");
                let keep_scale = T::of(1.0 / (1.0 - p));
                let mask: Vec<T> = (0..x.data.len())
                    .map(|_| if rng.random::<f64>() < *p { T::zero() } else { keep_scale })
                    .collect();
                let mut y = x;
                for (v, &m) in y.data.iter_mut().zip(&mask) {
                    *v *= m;
                }
                (y, if ctx.keep { Cache::Mask(mask) } else { Cache::Empty })
            }
            Op::Pad(p) => {
                let p = *p;
                let (h, w) = (x.h + 2 * p, x.w + 2 * p);
                let mut y = Tensor::zeros(x.n, x.c, h, w);
                for i in 0..x.n {
                    let src = x.sample(i);
                    let dst = y.sample_mut(i);
                    for c in 0..x.c {
                        for r in 0..x.h {
                            let s = &src[(c * x.h + r) * x.w..(c * x.h + r + 1) * x.w];
                            let d0 = (c * h + r + p) * w + p;
                            dst[d0..d0 + x.w].copy_from_slice(s);
                        }
                    }
                }
                (y, Cache::Shape(p))
            }
        }
    }

    pub(crate) fn backward<T: Scalar>(&self, ps: &mut ParamSet<T>, cache: Cache<T>, dy: Tensor<T>) -> Tensor<T> {
        match (self, cache) {
            (Op::Conv(l), Cache::Input(x)) => l.backward(ps, &x, &dy),
            (Op::Norm(bn), Cache::Norm { xhat, inv_std, batch_stats }) => {
                norm_backward(bn, ps, &xhat, &inv_std, batch_stats, dy)
            }
            (Op::LeakyRelu(slope), Cache::Input(x)) => {
                let s = T::of(*slope);
                let mut dx = dy;
                for (g, &v) in dx.data.iter_mut().zip(&x.data) {
                    if v <= T::zero() {
                        *g *= s;
                    }
                }
                dx
            }
            (Op::Relu, Cache::Output(y)) => {
                let mut dx = dy;
                for (g, &v) in dx.data.iter_mut().zip(&y.data) {
                    if v <= T::zero() {
                        *g = T::zero();
                    }
                }
                dx
            }
            (Op::Tanh, Cache::Output(y)) => {
                let mut dx = dy;
                for (g, &v) in dx.data.iter_mut().zip(&y.data) {
                    *g *= T::one() - v * v;
                }
                dx
            }
            (Op::Dropout(_), Cache::Mask(mask)) => {
                let mut dx = dy;
                for (g, &m) in dx.data.iter_mut().zip(&mask) {
                    *g *= m;
                }
                dx
            }
            (Op::Dropout(_), Cache::Empty) => dy,
            (Op::Pad(_), Cache::Shape(p)) => {
                let (h, w) = (dy.h - 2 * p, dy.w - 2 * p);
                let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
                for i in 0..dy.n {
                    let src = dy.sample(i);
                    let dst = dx.sample_mut(i);
                    for c in 0..dy.c {
                        for r in 0..h {
                            let s0 = (c * dy.h + r + p) * dy.w + p;
                            dst[(c * h + r) * w..(c * h + r + 1) * w].copy_from_slice(&src[s0..s0 + w]);
                        }
                    }
                }
                dx
            }
            _ => panic!("backward called without a matching forward cache"),
        }
    }
}

fn norm_forward<T: Scalar>(bn: &BatchNorm, ps: &mut ParamSet<T>, x: Tensor<T>, ctx: &Ctx<'_>) -> (Tensor<T>, Cache<T>) {
    let plane = x.h * x.w;
    let count = x.n * plane;
    let eps = T::of(bn.eps);
    let batch_stats = ctx.mode.batch_stats();

    let mut means = vec![T::zero(); bn.channels];
    let mut vars = vec![T::zero(); bn.channels];
    if batch_stats {
        for c in 0..bn.channels {
            let mut s = 0f64;
            for i in 0..x.n {
                s += x.sample(i)[c * plane..(c + 1) * plane].iter().map(|v| v.f64()).sum::<f64>();
            }
            let mean = s / count as f64;
            let mut q = 0f64;
            for i in 0..x.n {
                q += x.sample(i)[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|v| (v.f64() - mean).powi(2))
                    .sum::<f64>();
            }
            means[c] = T::of(mean);
            vars[c] = T::of(q / count as f64);
            let unbiased = if count > 1 { q / (count - 1) as f64 } else { q };
            let m = bn.momentum;
            let rm = &mut ps.params[bn.running_mean].value[c];
            *rm = T::of((1.0 - m) * rm.f64() + m * mean);
            let rv = &mut ps.params[bn.running_var].value[c];
            *rv = T::of((1.0 - m) * rv.f64() + m * unbiased);
        }
    } else {
        means.copy_from_slice(&ps.params[bn.running_mean].value);
        vars.copy_from_slice(&ps.params[bn.running_var].value);
    }
    let inv_std: Vec<T> = vars.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let gamma = &ps.params[bn.gamma].value;
    let beta = &ps.params[bn.beta].value;

    let mut xhat = x;
    let mut y = Tensor::zeros(xhat.n, xhat.c, xhat.h, xhat.w);
    for i in 0..xhat.n {
        let xs = xhat.sample_mut(i);
        let ys = y.sample_mut(i);
        for c in 0..bn.channels {
            for k in c * plane..(c + 1) * plane {
                let nv = (xs[k] - means[c]) * inv_std[c];
                xs[k] = nv;
                ys[k] = gamma[c] * nv + beta[c];
            }
        }
    }
    let cache = if ctx.keep {
        Cache::Norm {
            xhat,
            inv_std,
            batch_stats,
        }
    } else {
        Cache::Empty
    };
    (y, cache)
}

fn norm_backward<T: Scalar>(
    bn: &BatchNorm,
    ps: &mut ParamSet<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    batch_stats: bool,
    dy: Tensor<T>,
) -> Tensor<T> {
    let plane = dy.h * dy.w;
    let count = T::of((dy.n * plane) as f64);
    let gamma = ps.params[bn.gamma].value.clone();
    let mut dx = dy;
    for c in 0..bn.channels {
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for i in 0..dx.n {
            let ds = &dx.sample(i)[c * plane..(c + 1) * plane];
            let xs = &xhat.sample(i)[c * plane..(c + 1) * plane];
            for (&d, &xh) in ds.iter().zip(xs) {
                sum_dy += d;
                sum_dy_xhat += d * xh;
            }
        }
        ps.params[bn.gamma].grad[c] += sum_dy_xhat;
        ps.params[bn.beta].grad[c] += sum_dy;
        let scale = gamma[c] * inv_std[c];
        for i in 0..dx.n {
            let xs = &xhat.sample(i)[c * plane..(c + 1) * plane];
            let ds = &mut dx.sample_mut(i)[c * plane..(c + 1) * plane];
            for (d, &xh) in ds.iter_mut().zip(xs) {
                *d = if batch_stats {
                    scale * (*d - sum_dy / count - xh * sum_dy_xhat / count)
                } else {
                    scale * *d
                };
            }
        }
    }
    dx
}

/// A table row: a short sequence of ops.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Block {
    pub ops: Vec<Op>,
}

pub(crate) struct BlockCache<T> {
    caches: Vec<Cache<T>>,
}

impl Block {
    pub(crate) fn forward<T: Scalar>(&self, ps: &mut ParamSet<T>, mut x: Tensor<T>, ctx: &mut Ctx<'_>) -> (Tensor<T>, BlockCache<T>) {
        let mut caches = Vec::with_capacity(self.ops.len());
        for op in &self.ops {
            let (y, c) = op.forward(ps, x, ctx);
            caches.push(c);
            x = y;
        }
        (x, BlockCache { caches })
    }

    pub(crate) fn backward<T: Scalar>(&self, ps: &mut ParamSet<T>, cache: BlockCache<T>, mut dy: Tensor<T>) -> Tensor<T> {
        for (op, c) in self.ops.iter().zip(cache.caches).rev() {
            dy = op.backward(ps, c, dy);
        }
        dy
    }
}
