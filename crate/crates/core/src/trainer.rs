//! Alternating discriminator/generator optimization.
//!
//! Every source of randomness is derived from `(seed, epoch)` for the batch
//! order and `(seed, step)` for dropout, so a run resumed from a checkpoint
//! follows the same trajectory as one that never stopped.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{epoch_order, load_sample, DatasetManifest, PairRecord, Split};
use crate::dcprior::{prepare_input, PrepareConfig};
use crate::error::{Error, Result};
use crate::imagecore::{load_image, resize_to};
use crate::model::checkpoint::{AdamState, Checkpoint, OptimizerState};
use crate::model::{
    adversarial_loss, d_loss_grad, g_adv_grad, l1_rgb_grad, l1_rgb_tensor, total_generator_loss, Discriminator,
    DiscriminatorSpec, Generator, GeneratorCache, GeneratorSpec, LossConfig, Mode, ParamSet, Scalar, Tensor,
    WidthScale,
};

pub const LOG_FILE: &str = "train.log";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub epochs: u64,
    /// Stop after this many optimizer steps in total, even mid-epoch.
    pub max_steps: Option<u64>,
    /// Write `epoch_NNN.ckpt` every this many epochs (0 disables).
    pub checkpoint_every: u64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Network resolution; defaults to the manifest's.
    pub resolution: Option<usize>,
    pub width_scale: WidthScale,
    /// Stride-2 rows of the discriminator.
    pub discriminator_downsample: usize,
    pub prepare: PrepareConfig,
    /// Print a progress line every this many steps (0 for silence).
    pub progress_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            optimizer: AdamConfig::default(),
            epochs: 50,
            max_steps: None,
            checkpoint_every: 5,
            seed: 0,
            loss: LossConfig::default(),
            resolution: None,
            width_scale: WidthScale::ONE,
            discriminator_downsample: 3,
            prepare: PrepareConfig::default(),
            progress_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be >= 1".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be > 0, got {}",
                o.learning_rate
            )));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::InvalidParameter("Adam betas must be in [0, 1) and eps > 0".into()));
        }
        LossConfig::new(self.loss.lambda)?;
        Ok(())
    }

    pub fn generator_spec(&self, manifest_resolution: usize) -> GeneratorSpec {
        GeneratorSpec::scaled(self.resolution.unwrap_or(manifest_resolution), self.width_scale)
    }

    pub fn discriminator_spec(&self, manifest_resolution: usize) -> DiscriminatorSpec {
        DiscriminatorSpec {
            downsample_rows: self.discriminator_downsample,
            ..DiscriminatorSpec::scaled(self.resolution.unwrap_or(manifest_resolution), self.width_scale)
        }
    }
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub epoch: u64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub l1: f64,
    pub total_g_loss: f64,
    /// Seconds since this invocation started.
    pub wall_time: f64,
}

pub fn read_log(path: &Path) -> Result<Vec<TrainRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: Vec<TrainRecord>,
}

/// Decorrelates stream seeds; SplitMix64 finalizer over `seed ^ salt·k`.
pub(crate) fn derive_seed(seed: u64, salt: u64, k: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ k.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SALT_ORDER: u64 = 1;
const SALT_DROPOUT: u64 = 2;
const SALT_INIT_G: u64 = 3;
const SALT_INIT_D: u64 = 4;

fn adam_step(ps: &mut ParamSet<f32>, st: &mut AdamState, cfg: &AdamConfig) {
    st.t += 1;
    let t = st.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in ps.params.iter_mut().filter(|p| p.trainable).zip(&mut st.m).zip(&mut st.v) {
        for (((w, &g), mi), vi) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g as f64;
            let m1 = cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * g;
            let v1 = cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * g * g;
            *mi = m1 as f32;
            *vi = v1 as f32;
            let update = cfg.learning_rate * (m1 / bc1) / ((v1 / bc2).sqrt() + cfg.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
}

/// A generator forward pass kept for backpropagation.
pub struct GeneratorPass<T: Scalar> {
    pub fake: Tensor<T>,
    cache: GeneratorCache<T>,
}

pub fn generator_pass<T: Scalar>(
    g: &mut Generator<T>,
    input: &Tensor<T>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratorPass<T>> {
    let (fake, cache) = g.forward_cached(input, mode, rng)?;
    Ok(GeneratorPass { fake, cache })
}

/// Resets the discriminator's gradients to those of `d_loss` on
/// `(input, target)` vs `(input, fake)`. Returns `d_loss`.
pub fn discriminator_gradients<T: Scalar>(
    d: &mut Discriminator<T>,
    input: &Tensor<T>,
    target: &Tensor<T>,
    fake: &Tensor<T>,
) -> Result<f64> {
    d.params.zero_grad();
    let (real_s, real_c) = d.forward_cached(input, target, Mode::Train)?;
    let (fake_s, fake_c) = d.forward_cached(input, fake, Mode::Train)?;
    let (d_loss, _) = adversarial_loss(&real_s, &fake_s);
    let (dr, df) = d_loss_grad(&real_s, &fake_s);
    d.backward(real_c, &dr);
    d.backward(fake_c, &df);
    Ok(d_loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorLosses {
    pub g_adv: f64,
    pub l1: f64,
    pub total: f64,
}

/// Resets the generator's gradients to those of the total generator loss
/// for a stored pass. The discriminator's gradients are clobbered.
pub fn generator_gradients<T: Scalar>(
    g: &mut Generator<T>,
    d: &mut Discriminator<T>,
    pass: GeneratorPass<T>,
    input: &Tensor<T>,
    target: &Tensor<T>,
    loss: &LossConfig,
) -> Result<GeneratorLosses> {
    g.params.zero_grad();
    let (scores, d_cache) = d.forward_cached(input, &pass.fake, Mode::Train)?;
    let (_, g_adv) = adversarial_loss(&scores, &scores);
    let l1 = l1_rgb_tensor(&pass.fake, target)?;
    let mut dfake = d.backward(d_cache, &g_adv_grad(&scores));
    if loss.lambda != 0.0 {
        let lam = T::of(loss.lambda);
        for (a, b) in dfake.data.iter_mut().zip(l1_rgb_grad(&pass.fake, target)?.data) {
            *a += lam * b;
        }
    }
    g.backward(pass.cache, &dfake);
    Ok(GeneratorLosses {
        g_adv,
        l1,
        total: total_generator_loss(g_adv, l1, loss),
    })
}

/// Training pairs as batch tensors, preloaded when they fit comfortably.
struct TrainData<'a> {
    manifest: &'a DatasetManifest,
    records: Vec<&'a PairRecord>,
    resolution: usize,
    prep: PrepareConfig,
    preloaded: Option<(Tensor<f32>, Tensor<f32>)>,
}

const PRELOAD_BYTES: usize = 1 << 30;

impl<'a> TrainData<'a> {
    fn new(manifest: &'a DatasetManifest, resolution: usize, prep: PrepareConfig) -> Result<Self> {
        let records: Vec<&PairRecord> = manifest.records_in(Split::Train).collect();
        if records.is_empty() {
            return Err(Error::EmptySplit(Split::Train.name().into()));
        }
        let mut data = Self {
            manifest,
            records,
            resolution,
            prep,
            preloaded: None,
        };
        if data.records.len() * 7 * resolution * resolution * 4 <= PRELOAD_BYTES {
            let all: Vec<usize> = (0..data.records.len()).collect();
            data.preloaded = Some(data.load(&all)?);
        }
        Ok(data)
    }

    fn load(&self, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut inputs = Vec::with_capacity(idx.len());
        let mut targets = Vec::with_capacity(idx.len());
        for &i in idx {
            let rec = self.records[i];
            if self.manifest.resolution == self.resolution {
                let s = load_sample(self.manifest, rec, &self.prep)?;
                inputs.push(s.input);
                targets.push(s.target);
            } else {
                let r = self.resolution;
                let smoked = resize_to(&load_image(self.manifest.smoked_file(rec))?, r, r)?;
                inputs.push(prepare_input(&smoked, &self.prep)?);
                targets.push(resize_to(&load_image(self.manifest.clear_file(rec))?, r, r)?);
            }
        }
        Ok((Tensor::from_stacks(&inputs)?, Tensor::from_rgbs(&targets)?))
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        match &self.preloaded {
            Some((x, y)) => Ok((x.select(idx), y.select(idx))),
            None => self.load(idx),
        }
    }
}

struct State {
    g: Generator,
    d: Discriminator,
    opt: OptimizerState,
    step: u64,
}

/// Trains from scratch. Writes `train.log` (replacing any previous one),
/// scheduled epoch checkpoints and `final.ckpt` into `out_dir`.
pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let g = Generator::new(
        cfg.generator_spec(manifest.resolution),
        derive_seed(cfg.seed, SALT_INIT_G, 0),
    )?;
    let d = Discriminator::new(
        cfg.discriminator_spec(manifest.resolution),
        derive_seed(cfg.seed, SALT_INIT_D, 0),
    )?;
    let opt = OptimizerState {
        g: AdamState::zeros_for(&g.params),
        d: AdamState::zeros_for(&d.params),
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    fs::write(&log_path, "").map_err(|e| Error::io(&log_path, e))?;
    run(manifest, cfg, out_dir, State { g, d, opt, step: 0 })
}

/// Continues training from `checkpoint`, appending to `train.log`.
pub fn resume(checkpoint: &Path, manifest: &DatasetManifest, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    if manifest.count(Split::Train) == 0 {
        return Err(Error::EmptySplit(Split::Train.name().into()));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let want_g = cfg.generator_spec(manifest.resolution);
    let want_d = cfg.discriminator_spec(manifest.resolution);
    if ck.generator.spec() != &want_g {
        return Err(Error::SpecMismatch(format!(
            "checkpoint generator is {} at {}px, configuration asks for {} at {}px",
            ck.generator.spec().width_scale,
            ck.generator.spec().input_resolution,
            want_g.width_scale,
            want_g.input_resolution
        )));
    }
    if ck.discriminator.spec() != &want_d {
        return Err(Error::SpecMismatch(
            "checkpoint discriminator differs from the configured one".into(),
        ));
    }
    let opt = ck.optimizer.ok_or_else(|| Error::CorruptCheckpoint {
        path: checkpoint.to_path_buf(),
        reason: "no optimizer state to resume from".into(),
    })?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    run(
        manifest,
        cfg,
        out_dir,
        State {
            g: ck.generator,
            d: ck.discriminator,
            opt,
            step: ck.step,
        },
    )
}

fn run(manifest: &DatasetManifest, cfg: &TrainConfig, out_dir: &Path, mut st: State) -> Result<TrainOutcome> {
    let resolution = st.g.spec().input_resolution;
    let data = TrainData::new(manifest, resolution, cfg.prepare)?;
    let n = data.records.len();
    let per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let mut total = cfg.epochs * per_epoch;
    if let Some(m) = cfg.max_steps {
        total = total.min(m);
    }
    let log_path = out_dir.join(LOG_FILE);
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let cfg_json = serde_json::to_value(cfg)?;
    let started = Instant::now();
    let mut log = Vec::new();
    let mut order_epoch = u64::MAX;
    let mut order = Vec::new();

    while st.step < total {
        let step = st.step;
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(n, derive_seed(cfg.seed, SALT_ORDER, epoch));
            order_epoch = epoch;
        }
        let b = (step % per_epoch) as usize * cfg.batch_size;
        let idx = &order[b..(b + cfg.batch_size).min(n)];
        let (x, y) = data.batch(idx)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SALT_DROPOUT, step));

        let pass = generator_pass(&mut st.g, &x, Mode::Train, &mut rng)?;
        let d_loss = discriminator_gradients(&mut st.d, &x, &y, &pass.fake)?;
        if !d_loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, what: "d_loss" });
        }
        adam_step(&mut st.d.params, &mut st.opt.d, &cfg.optimizer);
        let gl = generator_gradients(&mut st.g, &mut st.d, pass, &x, &y, &cfg.loss)?;
        for (v, what) in [(gl.g_adv, "g_adv"), (gl.l1, "l1"), (gl.total, "total_g_loss")] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { step, what });
            }
        }
        adam_step(&mut st.g.params, &mut st.opt.g, &cfg.optimizer);
        st.step += 1;

        let rec = TrainRecord {
            step,
            epoch,
            d_loss,
            g_adv: gl.g_adv,
            l1: gl.l1,
            total_g_loss: gl.total,
            wall_time: started.elapsed().as_secs_f64(),
        };
        let mut line = serde_json::to_string(&rec)?;
        line.push('\n');
        log_file.write_all(line.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
        if cfg.progress_every > 0 && (step + 1) % cfg.progress_every == 0 {
            eprintln!(
                "step {:>6}/{total} epoch {epoch:>3}  d {:.4}  g_adv {:.4}  l1 {:.4}  total {:.4}",
                step + 1,
                d_loss,
                gl.g_adv,
                gl.l1,
                gl.total
            );
        }
        log.push(rec);

        let epoch_done = st.step % per_epoch == 0;
        let done_epochs = st.step / per_epoch;
        if epoch_done && cfg.checkpoint_every > 0 && done_epochs % cfg.checkpoint_every == 0 {
            save(&st, done_epochs, &cfg_json, &out_dir.join(format!("epoch_{done_epochs:03}.ckpt")))?;
        }
    }
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    save(&st, st.step / per_epoch, &cfg_json, &final_path)?;
    Ok(TrainOutcome {
        checkpoint: final_path,
        log,
    })
}

fn save(st: &State, epoch: u64, cfg: &serde_json::Value, path: &Path) -> Result<()> {
    // the checkpoint owns its networks; cloning the parameter sets is cheap
    // next to a training epoch
    let mut g = Generator::new(st.g.spec().clone(), 0)?;
    g.params = st.g.params.clone();
    let mut d = Discriminator::new(st.d.spec().clone(), 0)?;
    d.params = st.d.params.clone();
    Checkpoint {
        generator: g,
        discriminator: d,
        optimizer: Some(st.opt.clone()),
        epoch,
        step: st.step,
        tool_version: crate::TOOL_VERSION.into(),
        train_config: Some(cfg.clone()),
    }
    .save(path)
}
