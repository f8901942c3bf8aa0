//! U-Net generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm, Block, BlockCache, ConvGeom, ConvLayer, Ctx, Init, Mode, Op, ParamSet};
use super::spec::{BlockKind, GeneratorSpec, LayerTrace};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub struct Generator<T: Scalar = f32> {
    spec: GeneratorSpec,
    pub params: ParamSet<T>,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    output: Block,
}

pub(crate) struct GeneratorCache<T> {
    encoder: Vec<BlockCache<T>>,
    decoder: Vec<BlockCache<T>>,
    output: BlockCache<T>,
    /// Channels produced by each decoder block before its concatenation.
    decoder_channels: Vec<usize>,
}

impl<T: Scalar> Generator<T> {
    /// Allocates and initializes a generator for `spec`.
    pub fn new(spec: GeneratorSpec, init_seed: u64) -> Result<Self> {
        let trace = spec.trace()?;
        let n = spec.encoder_depth()?;
        let mut ps = ParamSet::default();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(init_seed));
        let slope = spec.leaky_slope;
        let down = ConvGeom::symmetric(4, 2, 1);

        let mut encoder = Vec::with_capacity(n);
        let mut cin = spec.input_channels;
        for row in &trace[..n] {
            let name = format!("g.row{}", row.row);
            encoder.push(Block {
                ops: vec![
                    Op::Conv(ConvLayer::new(&mut ps, &mut init, &format!("{name}.conv"), cin, row.filters, down, false, false)),
                    Op::Norm(BatchNorm::new(&mut ps, &mut init, &format!("{name}.norm"), row.filters)),
                    Op::LeakyRelu(slope),
                ],
            });
            cin = row.filters;
        }

        let mut decoder = Vec::with_capacity(n);
        for (j, row) in trace[n..2 * n].iter().enumerate() {
            let name = format!("g.row{}", row.row);
            // the first decoder row works on the 1x1 bottleneck: stride 1,
            // with the 4x4 kernel padded asymmetrically so 1x1 stays 1x1
            let (geom, transposed) = if j == 0 {
                (ConvGeom { kernel: 4, stride: 1, pad_lo: 1, pad_hi: 2 }, false)
            } else {
                (down, true)
            };
            let mut ops = vec![
                Op::Conv(ConvLayer::new(&mut ps, &mut init, &format!("{name}.deconv"), cin, row.filters, geom, transposed, false)),
                Op::Norm(BatchNorm::new(&mut ps, &mut init, &format!("{name}.norm"), row.filters)),
                Op::Relu,
            ];
            if row.block == BlockKind::CTD {
                ops.push(Op::Dropout(spec.dropout_rate));
            }
            decoder.push(Block { ops });
            cin = row.shape.2;
        }

        let last = &trace[2 * n];
        let output = Block {
            ops: vec![
                Op::Conv(ConvLayer::new(
                    &mut ps,
                    &mut init,
                    &format!("g.row{}.deconv", last.row),
                    cin,
                    last.filters,
                    down,
                    true,
                    true,
                )),
                Op::Tanh,
            ],
        };
        Ok(Self {
            spec,
            params: ps,
            encoder,
            decoder,
            output,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn trace(&self) -> Result<Vec<LayerTrace>> {
        self.spec.trace()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let r = self.spec.input_resolution;
        if (x.c, x.h, x.w) != (self.spec.input_channels, r, r) || x.n == 0 {
            return Err(Error::ShapeMismatch(format!(
                "generator expects Nx{}x{r}x{r} input, got {:?}",
                self.spec.input_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Runs the network on an `N x 4 x H x W` batch in `[0, 1]`; the result is
    /// `N x 3 x H x W` in `[0, 1]`. Dropout draws from `rng`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let (y, _, _) = self.run(x, mode, rng, false, None, false);
        Ok(y)
    }

    pub(crate) fn forward_cached(
        &mut self,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<T>, GeneratorCache<T>)> {
        self.check_input(x)?;
        let (y, cache, _) = self.run(x, mode, rng, true, None, false);
        Ok((y, cache))
    }

    /// Deterministic forward pass returning every row's output (row 1 first,
    /// final row in `[0, 1]`). `zero_skip = Some(k)` replaces the copy of
    /// encoder row `k` carried across the skip connection with zeros, leaving
    /// the encoder path itself untouched.
    pub fn trace_forward(&mut self, x: &Tensor<T>, zero_skip: Option<usize>) -> Result<Vec<Tensor<T>>> {
        self.check_input(x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, _, rows) = self.run(x, Mode::EvalDeterministic, &mut rng, false, zero_skip, true);
        Ok(rows)
    }

    /// Every row's output under `mode`, as [`Self::trace_forward`] but with
    /// the given normalization and dropout behavior.
    pub fn trace_forward_mode(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<T>>> {
        self.check_input(x)?;
        let (_, _, rows) = self.run(x, mode, rng, false, None, true);
        Ok(rows)
    }

    fn run(
        &mut self,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        keep: bool,
        zero_skip: Option<usize>,
        record: bool,
    ) -> (Tensor<T>, GeneratorCache<T>, Vec<Tensor<T>>) {
        let mut ctx = Ctx {
            mode,
            rng: Some(rng),
            keep,
        };
        let n = self.encoder.len();
        let two = T::of(2.0);
        let mut h = x.clone().map(|v| v * two - T::one());
        let mut rows = Vec::new();
        let mut skips = Vec::with_capacity(n);
        let mut enc_caches = Vec::with_capacity(n);
        for block in &self.encoder {
            let (y, c) = block.forward(&mut self.params, h, &mut ctx);
            enc_caches.push(c);
            if record {
                rows.push(y.clone());
            }
            skips.push(y.clone());
            h = y;
        }
        let mut dec_caches = Vec::with_capacity(n);
        let mut decoder_channels = Vec::with_capacity(n);
        for (j, block) in self.decoder.iter().enumerate() {
            let (y, c) = block.forward(&mut self.params, h, &mut ctx);
            dec_caches.push(c);
            decoder_channels.push(y.c);
            let enc_row = n - j;
            let skip = &skips[enc_row - 1];
            h = if zero_skip == Some(enc_row) {
                Tensor::concat_channels(&y, &Tensor::zeros(skip.n, skip.c, skip.h, skip.w))
            } else {
                Tensor::concat_channels(&y, skip)
            };
            if record {
                rows.push(h.clone());
            }
        }
        let (y, out_cache) = self.output.forward(&mut self.params, h, &mut ctx);
        let half = T::of(0.5);
        let y = y.map(|v| (v + T::one()) * half);
        if record {
            rows.push(y.clone());
        }
        let cache = GeneratorCache {
            encoder: enc_caches,
            decoder: dec_caches,
            output: out_cache,
            decoder_channels,
        };
        (y, cache, rows)
    }

    /// Accumulates parameter gradients given `dy`, the gradient of the loss
    /// with respect to the `[0, 1]` output.
    pub(crate) fn backward(&mut self, cache: GeneratorCache<T>, dy: &Tensor<T>) {
        let n = self.encoder.len();
        let half = T::of(0.5);
        let d_tanh = dy.clone().map(|v| v * half);
        let mut dh = self.output.backward(&mut self.params, cache.output, d_tanh);

        let mut d_enc: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let accumulate = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| match slot {
            Some(acc) => acc.add_assign(&g),
            None => *slot = Some(g),
        };
        for (j, (block, c)) in self.decoder.iter().zip(cache.decoder).enumerate().rev() {
            let (d_own, d_skip) = dh.split_channels(cache.decoder_channels[j]);
            accumulate(&mut d_enc[n - j - 1], d_skip);
            dh = block.backward(&mut self.params, c, d_own);
        }
        accumulate(&mut d_enc[n - 1], dh);
        for (i, (block, c)) in self.encoder.iter().zip(cache.encoder).enumerate().rev() {
            let g = d_enc[i].take().expect("every encoder row receives a gradient");
            let dx = block.backward(&mut self.params, c, g);
            if i > 0 {
                accumulate(&mut d_enc[i - 1], dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec::WidthScale;

    fn table_ii() -> Vec<(usize, usize, usize)> {
        vec![
            (128, 128, 64),
            (64, 64, 128),
            (32, 32, 256),
            (16, 16, 512),
            (8, 8, 512),
            (4, 4, 512),
            (2, 2, 512),
            (1, 1, 512),
            (1, 1, 1024),
            (2, 2, 1024),
            (4, 4, 1024),
            (8, 8, 1024),
            (16, 16, 1024),
            (32, 32, 512),
            (64, 64, 256),
            (128, 128, 128),
            (256, 256, 3),
        ]
    }

    #[test]
    fn full_scale_trace_matches_table() {
        let trace = GeneratorSpec::default().trace().unwrap();
        let shapes: Vec<_> = trace.iter().map(|r| r.shape).collect();
        assert_eq!(shapes, table_ii());
        for r in &trace[..7] {
            assert_eq!(r.skip_to, Some(17 - r.row));
        }
        for r in &trace[9..16] {
            assert_eq!(r.skip_from, Some(17 - r.row));
        }
        use BlockKind::*;
        let kinds: Vec<_> = trace.iter().map(|r| r.block).collect();
        assert_eq!(&kinds[8..], &[CTD, CTD, CTD, CT, CT, CT, CT, CT, Tanh]);
    }

    #[test]
    fn executed_shapes_follow_trace() {
        let spec = GeneratorSpec::scaled(32, WidthScale::new(1, 8).unwrap());
        let expected: Vec<_> = spec.trace().unwrap().iter().map(|r| r.shape).collect();
        let mut g = Generator::<f32>::new(spec, 1).unwrap();
        let x = Tensor::from_vec(2, 4, 32, 32, (0..2 * 4 * 32 * 32).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let rows = g.trace_forward(&x, None).unwrap();
        let got: Vec<_> = rows.iter().map(|t| t.hwc()).collect();
        assert_eq!(got, expected);
        let y = rows.last().unwrap();
        assert!(y.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn deterministic_mode_is_repeatable_and_stochastic_is_not() {
        let spec = GeneratorSpec::scaled(16, WidthScale::new(1, 16).unwrap());
        let mut g = Generator::<f32>::new(spec, 3).unwrap();
        let x = Tensor::from_vec(1, 4, 16, 16, (0..4 * 256).map(|i| (i % 11) as f32 / 11.0).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = g.forward(&x, Mode::EvalDeterministic, &mut rng).unwrap();
        let b = g.forward(&x, Mode::EvalDeterministic, &mut rng).unwrap();
        assert_eq!(a, b);
        let c = g.forward(&x, Mode::EvalStochastic, &mut rng).unwrap();
        let d = g.forward(&x, Mode::EvalStochastic, &mut rng).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let spec = GeneratorSpec::scaled(16, WidthScale::new(1, 16).unwrap());
        let mut g = Generator::<f32>::new(spec, 3).unwrap();
        let x = Tensor::zeros(1, 3, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(g.forward(&x, Mode::Train, &mut rng), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn skip_zeroing_changes_only_later_decoder_rows() {
        let spec = GeneratorSpec::scaled(32, WidthScale::new(1, 8).unwrap());
        let mut g = Generator::<f64>::new(spec, 9).unwrap();
        let x = Tensor::from_vec(1, 4, 32, 32, (0..4 * 1024).map(|i| ((i * 37) % 101) as f64 / 101.0).collect()).unwrap();
        let base = g.trace_forward(&x, None).unwrap();
        let rows = base.len();
        for k in 1..5 {
            let probed = g.trace_forward(&x, Some(k)).unwrap();
            for (r, (a, b)) in base.iter().zip(&probed).enumerate() {
                let row = r + 1;
                if row < rows - k {
                    assert_eq!(a, b, "k={k}: row {row} should be untouched");
                } else {
                    assert_ne!(a, b, "k={k}: row {row} should change");
                }
            }
        }
    }
}
