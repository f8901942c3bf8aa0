use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};
use crate::imagecore::{ImagePlane, ImageRgb, ImageStack4};

/// Floating-point element type for network tensors. Training runs in `f32`;
/// gradient checks run the same code in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + 'static
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
{
    /// Raw strided GEMM: `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing `m x k`,
    /// `k x n` and `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `C (m x n) = op(A) * op(B) + beta * C` over contiguous row-major buffers.
/// `a_t` means `a` is stored `k x m`; `b_t` means `b` is stored `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin each buffer to its matrix extent, and
    // `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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
        )
    }
}

/// Dense `N x C x H x W` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "tensor {n}x{c}x{h}x{w} needs {} values, got {}",
                n * c * h * w,
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    /// `(n, c, h, w)`
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    /// Per-sample shape as `(h, w, c)`, the order architecture tables use.
    pub fn hwc(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let l = self.sample_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn map(mut self, f: impl Fn(T) -> T) -> Self {
        for v in &mut self.data {
            *v = f(*v);
        }
        self
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "tensor add shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Channel-wise concatenation of two tensors with equal `n, h, w`.
    pub fn concat_channels(a: &Self, b: &Self) -> Self {
        assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat shape");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for i in 0..a.n {
            data.extend_from_slice(a.sample(i));
            data.extend_from_slice(b.sample(i));
        }
        Self {
            n: a.n,
            c: a.c + b.c,
            h: a.h,
            w: a.w,
            data,
        }
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `at` channels and the rest.
    pub fn split_channels(&self, at: usize) -> (Self, Self) {
        assert!(at <= self.c, "split beyond channel count");
        let plane = self.h * self.w;
        let mut a = Vec::with_capacity(self.n * at * plane);
        let mut b = Vec::with_capacity(self.n * (self.c - at) * plane);
        for i in 0..self.n {
            let s = self.sample(i);
            a.extend_from_slice(&s[..at * plane]);
            b.extend_from_slice(&s[at * plane..]);
        }
        (
            Self {
                n: self.n,
                c: at,
                h: self.h,
                w: self.w,
                data: a,
            },
            Self {
                n: self.n,
                c: self.c - at,
                h: self.h,
                w: self.w,
                data: b,
            },
        )
    }

    /// Picks samples by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        Self {
            n: idx.len(),
            c: self.c,
            h: self.h,
            w: self.w,
            data,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Stacks 4-channel inputs into an `N x 4 x H x W` tensor in `[0, 1]`.
    pub fn from_stacks(stacks: &[ImageStack4]) -> Result<Self> {
        let first = stacks
            .first()
            .ok_or_else(|| Error::InvalidParameter("empty batch".into()))?;
        let (h, w) = first.shape();
        let mut data = Vec::with_capacity(stacks.len() * 4 * h * w);
        for s in stacks {
            if s.shape() != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "batch mixes {:?} and {:?}",
                    (h, w),
                    s.shape()
                )));
            }
            for p in s.rgb().planes() {
                data.extend(p.data().iter().map(|&v| T::of(v as f64)));
            }
            data.extend(s.guide().data().iter().map(|&v| T::of(v as f64)));
        }
        Self::from_vec(stacks.len(), 4, h, w, data)
    }

    /// Stacks RGB images into an `N x 3 x H x W` tensor in `[0, 1]`.
    pub fn from_rgbs(imgs: &[ImageRgb]) -> Result<Self> {
        let first = imgs
            .first()
            .ok_or_else(|| Error::InvalidParameter("empty batch".into()))?;
        let (h, w) = first.shape();
        let mut data = Vec::with_capacity(imgs.len() * 3 * h * w);
        for img in imgs {
            if img.shape() != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "batch mixes {:?} and {:?}",
                    (h, w),
                    img.shape()
                )));
            }
            for p in img.planes() {
                data.extend(p.data().iter().map(|&v| T::of(v as f64)));
            }
        }
        Self::from_vec(imgs.len(), 3, h, w, data)
    }

    /// Splits an `N x 3 x H x W` tensor in `[0, 1]` into images (clamped).
    pub fn to_rgbs(&self) -> Result<Vec<ImageRgb>> {
        if self.c < 3 {
            return Err(Error::ShapeMismatch(format!(
                "need at least 3 channels, have {}",
                self.c
            )));
        }
        let plane = self.h * self.w;
        (0..self.n)
            .map(|i| {
                let s = self.sample(i);
                let mk = |c: usize| {
                    ImagePlane::from_clamped(
                        self.h,
                        self.w,
                        s[c * plane..(c + 1) * plane].iter().map(|v| v.f64() as f32).collect(),
                    )
                };
                ImageRgb::from_planes(mk(0)?, mk(1)?, mk(2)?)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, false, &b, true, 1.0, &mut c);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn concat_split_inverse() {
        let a = Tensor::<f32>::from_vec(2, 1, 1, 2, vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f32>::from_vec(2, 2, 1, 2, (0..8).map(|v| v as f32).collect()).unwrap();
        let c = Tensor::concat_channels(&a, &b);
        assert_eq!(c.data, vec![1., 2., 0., 1., 2., 3., 3., 4., 4., 5., 6., 7.]);
        let (x, y) = c.split_channels(1);
        assert_eq!((x, y), (a, b));
    }
}
