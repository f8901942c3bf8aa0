//! PatchGAN discriminator conditioned on the 4-channel input stack.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm, Block, BlockCache, ConvGeom, ConvLayer, Ctx, Init, Mode, Op, ParamSet};
use super::spec::{BlockKind, DiscriminatorSpec, LayerTrace};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub struct Discriminator<T: Scalar = f32> {
    spec: DiscriminatorSpec,
    pub params: ParamSet<T>,
    rows: Vec<Block>,
}

pub(crate) struct DiscriminatorCache<T> {
    rows: Vec<BlockCache<T>>,
    cond_channels: usize,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(spec: DiscriminatorSpec, init_seed: u64) -> Result<Self> {
        let trace = spec.trace()?;
        let mut ps = ParamSet::default();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(init_seed));
        let slope = spec.leaky_slope;
        let mut cin = spec.input_channels;
        let mut rows = Vec::with_capacity(trace.len());
        let last = trace.len();
        for row in &trace {
            let name = format!("d.row{}", row.row);
            let ops = match row.block {
                BlockKind::C => vec![
                    Op::Conv(ConvLayer::new(
                        &mut ps,
                        &mut init,
                        &format!("{name}.conv"),
                        cin,
                        row.filters,
                        ConvGeom::symmetric(4, 2, 1),
                        false,
                        false,
                    )),
                    Op::Norm(BatchNorm::new(&mut ps, &mut init, &format!("{name}.norm"), row.filters)),
                    Op::LeakyRelu(slope),
                ],
                BlockKind::ZeroPad => vec![Op::Pad(1)],
                BlockKind::Conv => vec![Op::Conv(ConvLayer::new(
                    &mut ps,
                    &mut init,
                    &format!("{name}.conv"),
                    cin,
                    row.filters,
                    ConvGeom::symmetric(4, 1, 0),
                    false,
                    row.row == last,
                ))],
                BlockKind::NormPad => vec![
                    Op::Norm(BatchNorm::new(&mut ps, &mut init, &format!("{name}.norm"), cin)),
                    Op::LeakyRelu(slope),
                    Op::Pad(1),
                ],
                other => unreachable!("discriminator trace has no {other:?} rows"),
            };
            rows.push(Block { ops });
            cin = row.shape.2;
        }
        Ok(Self { spec, params: ps, rows })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn trace(&self) -> Result<Vec<LayerTrace>> {
        self.spec.trace()
    }

    fn joined(&self, cond: &Tensor<T>, candidate: &Tensor<T>) -> Result<Tensor<T>> {
        let r = self.spec.input_resolution;
        if cond.shape().0 != candidate.n
            || (cond.h, cond.w) != (r, r)
            || (candidate.h, candidate.w) != (r, r)
            || cond.c + candidate.c != self.spec.input_channels
            || cond.n == 0
        {
            return Err(Error::ShapeMismatch(format!(
                "discriminator expects {} channels at {r}x{r}, got condition {:?} and candidate {:?}",
                self.spec.input_channels,
                cond.shape(),
                candidate.shape()
            )));
        }
        let two = T::of(2.0);
        Ok(Tensor::concat_channels(cond, candidate).map(|v| v * two - T::one()))
    }

    /// Raw (pre-sigmoid) score maps, `N x 1 x S x S`.
    pub fn forward(&mut self, cond: &Tensor<T>, candidate: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let rows = self.trace_forward(cond, candidate, mode)?;
        Ok(rows.into_iter().last().expect("at least one row"))
    }

    /// Every row's output in order.
    pub fn trace_forward(&mut self, cond: &Tensor<T>, candidate: &Tensor<T>, mode: Mode) -> Result<Vec<Tensor<T>>> {
        let mut h = self.joined(cond, candidate)?;
        let mut ctx = Ctx {
            mode,
            rng: None,
            keep: false,
        };
        let mut out = Vec::with_capacity(self.rows.len());
        for block in &self.rows {
            let (y, _) = block.forward(&mut self.params, h, &mut ctx);
            out.push(y.clone());
            h = y;
        }
        Ok(out)
    }

    pub(crate) fn forward_cached(
        &mut self,
        cond: &Tensor<T>,
        candidate: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, DiscriminatorCache<T>)> {
        let mut h = self.joined(cond, candidate)?;
        let mut ctx = Ctx {
            mode,
            rng: None,
            keep: true,
        };
        let mut caches = Vec::with_capacity(self.rows.len());
        for block in &self.rows {
            let (y, c) = block.forward(&mut self.params, h, &mut ctx);
            caches.push(c);
            h = y;
        }
        Ok((
            h,
            DiscriminatorCache {
                rows: caches,
                cond_channels: cond.c,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the candidate image (in its `[0, 1]` range).
    pub(crate) fn backward(&mut self, cache: DiscriminatorCache<T>, dscore: &Tensor<T>) -> Tensor<T> {
        let mut d = dscore.clone();
        for (block, c) in self.rows.iter().zip(cache.rows).rev() {
            d = block.backward(&mut self.params, c, d);
        }
        let two = T::of(2.0);
        d.split_channels(cache.cond_channels).1.map(|v| v * two)
    }
}
