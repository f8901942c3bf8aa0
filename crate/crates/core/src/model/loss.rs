//! Adversarial and reconstruction objectives, with their gradients.

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::imagecore::ImageRgb;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the L1 term.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 100.0 }
    }
}

impl LossConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mean_of<T: Scalar>(t: &Tensor<T>, f: impl Fn(f64) -> f64) -> f64 {
    if t.data.is_empty() {
        return 0.0;
    }
    t.data.iter().map(|v| f(v.f64())).sum::<f64>() / t.data.len() as f64
}

/// `(d_loss, g_adv_loss)` from raw discriminator scores.
pub fn adversarial_loss<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> (f64, f64) {
    let d = mean_of(real, |x| softplus(-x)) + mean_of(fake, softplus);
    let g = mean_of(fake, |x| softplus(-x));
    (d, g)
}

/// Gradients of `d_loss` with respect to the real and fake scores.
pub(crate) fn d_loss_grad<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let nr = real.data.len() as f64;
    let nf = fake.data.len() as f64;
    (
        real.clone().map(|x| T::of(-sigmoid(-x.f64()) / nr)),
        fake.clone().map(|x| T::of(sigmoid(x.f64()) / nf)),
    )
}

/// Gradient of `g_adv_loss` with respect to the fake scores.
pub(crate) fn g_adv_grad<T: Scalar>(fake: &Tensor<T>) -> Tensor<T> {
    let n = fake.data.len() as f64;
    fake.clone().map(|x| T::of(-sigmoid(-x.f64()) / n))
}

fn check_rgb_pair<T: Scalar>(output: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if output.c < 3 || target.c < 3 || (output.n, output.h, output.w) != (target.n, target.h, target.w) {
        return Err(Error::ShapeMismatch(format!(
            "l1 needs matching batches with >= 3 channels, got {:?} and {:?}",
            output.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Mean absolute difference over batch, pixels and the first three channels.
/// Any further channels are ignored.
pub fn l1_rgb_tensor<T: Scalar>(output: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_rgb_pair(output, target)?;
    let plane = output.h * output.w;
    let mut sum = 0.0;
    for i in 0..output.n {
        let a = &output.sample(i)[..3 * plane];
        let b = &target.sample(i)[..3 * plane];
        sum += a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).abs()).sum::<f64>();
    }
    Ok(sum / (output.n * 3 * plane) as f64)
}

/// Gradient of [`l1_rgb_tensor`] with respect to a 3-channel `output`.
pub(crate) fn l1_rgb_grad<T: Scalar>(output: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_rgb_pair(output, target)?;
    let plane = output.h * output.w;
    let scale = 1.0 / (output.n * 3 * plane) as f64;
    let mut g = Tensor::zeros(output.n, output.c, output.h, output.w);
    for i in 0..output.n {
        let t = &target.sample(i)[..3 * plane];
        let o = output.sample(i)[..3 * plane].to_vec();
        for ((d, x), y) in g.sample_mut(i)[..3 * plane].iter_mut().zip(o).zip(t) {
            let diff = x.f64() - y.f64();
            *d = T::of(if diff > 0.0 {
                scale
            } else if diff < 0.0 {
                -scale
            } else {
                0.0
            });
        }
    }
    Ok(g)
}

/// Mean absolute RGB difference over a batch of images.
pub fn l1_rgb(output: &[ImageRgb], target: &[ImageRgb]) -> Result<f64> {
    if output.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "l1 batches differ in length: {} vs {}",
            output.len(),
            target.len()
        )));
    }
    l1_rgb_tensor(&Tensor::<f64>::from_rgbs(output)?, &Tensor::<f64>::from_rgbs(target)?)
}

pub fn total_generator_loss(g_adv: f64, l1: f64, cfg: &LossConfig) -> f64 {
    g_adv + cfg.lambda * l1
}
