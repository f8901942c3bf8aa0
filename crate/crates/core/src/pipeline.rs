//! Frame-level inference: prepare the 4-channel input, run the generator
//! deterministically, return an RGB frame at the input's size.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dcprior::{prepare_input, PrepareConfig};
use crate::error::Result;
use crate::imagecore::{resize_to, ImageRgb, ImageStack4};
use crate::model::checkpoint::Checkpoint;
use crate::model::{Generator, Mode, Tensor};

/// Preprocessing the checkpoint was trained with, or the defaults when it
/// carries no training config.
pub fn trained_prepare(ck: &Checkpoint) -> PrepareConfig {
    ck.train_config
        .as_ref()
        .and_then(|c| c.get("prepare"))
        .and_then(|p| serde_json::from_value(p.clone()).ok())
        .unwrap_or_default()
}

/// Builds the generator input for `smoked`, resized to the generator's
/// resolution first when needed.
pub fn prepare_for(g: &Generator, smoked: &ImageRgb, prep: &PrepareConfig) -> Result<ImageStack4> {
    let r = g.spec().input_resolution;
    prepare_input(&resize_to(smoked, r, r)?, prep)
}

/// Runs prepared stacks through the generator in eval-deterministic mode.
pub fn restore_stacks(g: &mut Generator, stacks: &[ImageStack4]) -> Result<Vec<ImageRgb>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    g.forward(&Tensor::from_stacks(stacks)?, Mode::EvalDeterministic, &mut rng)?
        .to_rgbs()
}

/// Desmokes a batch of frames; outputs match each input's size.
pub fn restore(g: &mut Generator, smoked: &[ImageRgb], prep: &PrepareConfig) -> Result<Vec<ImageRgb>> {
    let stacks = smoked
        .iter()
        .map(|s| prepare_for(g, s, prep))
        .collect::<Result<Vec<_>>>()?;
    let out = restore_stacks(g, &stacks)?;
    out.iter()
        .zip(smoked)
        .map(|(o, s)| {
            let (h, w) = s.shape();
            resize_to(o, h, w)
        })
        .collect()
}
