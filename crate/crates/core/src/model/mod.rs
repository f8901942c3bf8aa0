//! Generator, discriminator and training objectives.

pub mod checkpoint;
mod discriminator;
mod generator;
mod layers;
mod loss;
mod spec;
mod tensor;

pub use discriminator::Discriminator;
pub use generator::Generator;
pub use layers::{Mode, Param, ParamSet};
pub use loss::{adversarial_loss, l1_rgb, l1_rgb_tensor, total_generator_loss, LossConfig};
pub use spec::{BlockKind, DiscriminatorSpec, GeneratorSpec, LayerTrace, WidthScale};
pub use tensor::{Scalar, Tensor};

pub(crate) use generator::GeneratorCache;
pub(crate) use loss::{d_loss_grad, g_adv_grad, l1_rgb_grad};

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::imagecore::{ImageRgb, ImageStack4};

pub fn build_generator(spec: GeneratorSpec, init_seed: u64) -> Result<Generator> {
    Generator::new(spec, init_seed)
}

pub fn build_discriminator(spec: DiscriminatorSpec, init_seed: u64) -> Result<Discriminator> {
    Discriminator::new(spec, init_seed)
}

/// Restores a batch of stacked inputs to RGB images.
pub fn generator_forward(
    g: &mut Generator,
    input: &[ImageStack4],
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ImageRgb>> {
    let x = Tensor::from_stacks(input)?;
    g.forward(&x, mode, rng)?.to_rgbs()
}

/// Raw score maps for candidates conditioned on stacked inputs.
pub fn discriminator_forward(
    d: &mut Discriminator,
    conditioned: &[ImageStack4],
    candidate: &[ImageRgb],
    mode: Mode,
) -> Result<Tensor<f32>> {
    let c = Tensor::from_stacks(conditioned)?;
    let x = Tensor::from_rgbs(candidate)?;
    d.forward(&c, &x, mode)
}
