//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS / FAIL (or WARN) line.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use desmoke::bench::{run_bench, BenchConfig, BenchReport};
use desmoke::dataset::{generate, load_manifest, DatasetManifest, GenerateConfig, Split, MANIFEST_FILE};
use desmoke::dcprior::{dark_channel, guided_filter, DarkChannelParams, GuidedFilterParams, PrepareConfig};
use desmoke::imagecore::{load_image, save_image, ImagePlane, ImageRgb};
use desmoke::metrics::{evaluate, mse, psnr, ssim, EvalOptions, MetricConfig, SsimMode};
use desmoke::model::checkpoint::Checkpoint;
use desmoke::model::{
    adversarial_loss, l1_rgb, l1_rgb_tensor, total_generator_loss, BlockKind, Discriminator, DiscriminatorSpec,
    Generator, GeneratorSpec, LossConfig, Mode, Tensor, WidthScale,
};
use desmoke::pipeline::restore;
use desmoke::probe::mask_probe;
use desmoke::scenes::synthetic_frame;
use desmoke::smokesim::{apply_smoke, draw_params, IntensityTier, SmokeConfig};
use desmoke::trainer::{
    discriminator_gradients, generator_gradients, generator_pass, read_log, resume, train, TrainConfig,
    TrainOutcome, TrainRecord, FINAL_CHECKPOINT, LOG_FILE,
};

enum Verdict {
    Pass(String),
    Warn(String),
}

type Outcome = Result<Verdict, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_rgb(h: usize, w: usize, r: &mut ChaCha8Rng) -> ImageRgb {
    ImageRgb::from_fn(h, w, |_, _| [r.random(), r.random(), r.random()])
}

fn random_plane(h: usize, w: usize, r: &mut ChaCha8Rng) -> ImagePlane {
    ImagePlane::from_fn(h, w, |_, _| r.random())
}

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

// ---------------------------------------------------------------- desk run

const DESK_RES: usize = 64;
const DESK_TRAIN: usize = 50;
const DESK_TEST: usize = 16;
const DESK_STEPS: u64 = 200;

struct Desk {
    _dir: TempDir,
    manifest: DatasetManifest,
    outcome: TrainOutcome,
    train_secs: f64,
}

fn desk_config() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs: 1000,
        max_steps: Some(DESK_STEPS),
        checkpoint_every: 0,
        seed: 1,
        width_scale: WidthScale::new(1, 4).unwrap(),
        ..TrainConfig::default()
    }
}

fn write_sources(dir: &Path, n: usize, size: usize, seed0: u64) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        save_image(&synthetic_frame(size, size, seed0 + i as u64), dir.join(format!("f{i:03}.png"))).unwrap();
    }
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let src = dir.path().join("src");
        write_sources(&src, DESK_TRAIN + DESK_TEST, 96, 1000);
        let manifest = generate(
            &src,
            dir.path().join("data"),
            &GenerateConfig {
                n_train: DESK_TRAIN,
                n_test: DESK_TEST,
                seed: 7,
                resolution: DESK_RES,
                ..GenerateConfig::default()
            },
        )
        .unwrap();
        let t = Instant::now();
        let outcome = train(&manifest, &desk_config(), &dir.path().join("run")).unwrap();
        let train_secs = t.elapsed().as_secs_f64();
        Desk {
            _dir: dir,
            manifest,
            outcome,
            train_secs,
        }
    })
}

fn desk_generator() -> Generator {
    Checkpoint::load(&desk().outcome.checkpoint).unwrap().generator
}

// ------------------------------------------------------------- criterion 1

fn dark_channel_oracle(img: &ImageRgb, k: usize) -> ImagePlane {
    let (h, w) = img.shape();
    let half = (k / 2) as isize;
    ImagePlane::from_fn(h, w, |y, x| {
        let mut m = f32::INFINITY;
        for dy in -half..=half {
            for dx in -half..=half {
                let yy = clamp_idx(y as isize + dy, h);
                let xx = clamp_idx(x as isize + dx, w);
                for c in 0..3 {
                    m = m.min(img.plane(c).get(yy, xx));
                }
            }
        }
        m
    })
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut r = rng(101);
    let mut cases = 0;
    for i in 0..100 {
        let img = random_rgb(32, 32, &mut r);
        for k in [1, 3, 7, 15] {
            let fast = dark_channel(&img, DarkChannelParams::new(k).unwrap()).unwrap();
            let slow = dark_channel_oracle(&img, k);
            ensure!(fast == slow, "image {i}, s = {k}: fast result differs from the oracle");
            cases += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.2} s (limit 10 s)");
    Ok(Verdict::Pass(format!("{cases} cases bit-equal in {secs:.2} s")))
}

// ------------------------------------------------------------- criterion 2

/// Direct per-window evaluation: coefficients of every window, then the
/// average of the coefficients of all windows covering each pixel.
fn guided_filter_oracle(guide: &ImagePlane, p: &ImagePlane, r: usize, eps: f64) -> Vec<f64> {
    let (h, w) = guide.shape();
    let ri = r as isize;
    let at = |img: &ImagePlane, y: isize, x: isize| img.get(clamp_idx(y, h), clamp_idx(x, w)) as f64;
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let mut a = vec![0.0; h * w];
    let mut b = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut si, mut sp, mut sii, mut sip) = (0.0, 0.0, 0.0, 0.0);
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    let i = at(guide, y + dy, x + dx);
                    let q = at(p, y + dy, x + dx);
                    si += i;
                    sp += q;
                    sii += i * i;
                    sip += i * q;
                }
            }
            let mu = si / n;
            let pbar = sp / n;
            let var = sii / n - mu * mu;
            let ak = (sip / n - mu * pbar) / (var + eps);
            let k = y as usize * w + x as usize;
            a[k] = ak;
            b[k] = pbar - ak * mu;
        }
    }
    let coef = |v: &[f64], y: isize, x: isize| v[clamp_idx(y, h) * w + clamp_idx(x, w)];
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut sa, mut sb) = (0.0, 0.0);
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    sa += coef(&a, y + dy, x + dx);
                    sb += coef(&b, y + dy, x + dx);
                }
            }
            let i = guide.get(y as usize, x as usize) as f64;
            out[y as usize * w + x as usize] = (sa / n) * i + sb / n;
        }
    }
    out
}

fn criterion_2() -> Outcome {
    let mut r = rng(202);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for i in 0..100 {
        let guide = random_plane(16, 16, &mut r);
        let p = random_plane(16, 16, &mut r);
        for radius in [1, 2, 4] {
            for eps in [1e-4, 1e-3, 1e-1] {
                let fast = guided_filter(&guide, &p, GuidedFilterParams::new(radius, eps).unwrap()).unwrap();
                let slow = guided_filter_oracle(&guide, &p, radius, eps);
                for (f, s) in fast.data().iter().zip(&slow) {
                    worst = worst.max((*f as f64 - s.clamp(0.0, 1.0)).abs());
                }
                ensure!(worst <= 1e-6, "pair {i}, r = {radius}, eps = {eps}: error {worst:e}");
                cases += 1;
            }
        }
    }
    Ok(Verdict::Pass(format!("{cases} cases, max abs error {worst:.2e} (limit 1e-6)")))
}

// ------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let ranges = [
        (IntensityTier::Low, 0.40f32, 0.55f32),
        (IntensityTier::Medium, 0.60, 0.75),
        (IntensityTier::High, 0.77, 0.92),
    ];
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (tier, lo, hi) in ranges {
        for k in 0..50u64 {
            let seed = 3000 + k;
            let clear = synthetic_frame(32, 32, seed);
            let params = draw_params(tier, seed, &SmokeConfig::default());
            let l = params.intensity;
            ensure!((lo..=hi).contains(&l), "{tier} sample {k}: l = {l} outside [{lo}, {hi}]");
            let (smoked, t) = apply_smoke(&clear, &params).unwrap();
            let a = params.atmospheric_light;
            for c in 0..3 {
                for y in 0..32 {
                    for x in 0..32 {
                        let tv = t.get(y, x) as f64;
                        if tv < 0.08 {
                            continue;
                        }
                        let i = smoked.plane(c).get(y, x) as f64;
                        let j = (i - (1.0 - tv) * a[c] as f64) / tv;
                        worst = worst.max((j - clear.plane(c).get(y, x) as f64).abs());
                        checked += 1;
                    }
                }
            }
        }
    }
    ensure!(worst <= 1e-5, "max inversion error {worst:e} (limit 1e-5)");
    Ok(Verdict::Pass(format!(
        "150 pairs, all l in tier range, {checked} samples with t >= 0.08, max error {worst:.2e}"
    )))
}

// ------------------------------------------------------------- criterion 4

const TABLE_II: [(usize, usize, usize); 17] = [
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
];

const TABLE_I: [(usize, usize, usize); 7] = [
    (128, 128, 64),
    (64, 64, 128),
    (32, 32, 256),
    (34, 34, 256),
    (31, 31, 512),
    (33, 33, 512),
    (30, 30, 1),
];

fn criterion_4() -> Outcome {
    use BlockKind::*;
    let gspec = GeneratorSpec::default();
    let trace = gspec.trace().map_err(|e| e.to_string())?;
    let shapes: Vec<_> = trace.iter().map(|r| r.shape).collect();
    ensure!(shapes == TABLE_II, "generator trace {shapes:?}");
    let kinds: Vec<_> = trace.iter().map(|r| r.block).collect();
    let expected_kinds = [C, C, C, C, C, C, C, C, CTD, CTD, CTD, CT, CT, CT, CT, CT, Tanh];
    ensure!(kinds == expected_kinds, "generator blocks {kinds:?}");
    for r in &trace[..7] {
        ensure!(r.skip_to == Some(17 - r.row), "row {} skips to {:?}", r.row, r.skip_to);
    }

    let dspec = DiscriminatorSpec::default();
    let dtrace = dspec.trace().map_err(|e| e.to_string())?;
    let dshapes: Vec<_> = dtrace.iter().map(|r| r.shape).collect();
    ensure!(dshapes == TABLE_I, "discriminator trace {dshapes:?}");

    // the built networks must produce the traced shapes too
    let mut r = rng(404);
    let x = Tensor::from_vec(1, 4, 256, 256, (0..4 * 256 * 256).map(|_| r.random()).collect()).unwrap();
    let mut g = Generator::<f32>::new(gspec, 1).unwrap();
    let rows = g.trace_forward(&x, None).unwrap();
    let run: Vec<_> = rows.iter().map(|t| t.hwc()).collect();
    ensure!(run == TABLE_II, "executed generator shapes {run:?}");
    drop(g);
    let mut d = Discriminator::<f32>::new(dspec, 2).unwrap();
    let out = rows.last().unwrap();
    let drows = d.trace_forward(&x, out, Mode::EvalDeterministic).unwrap();
    let drun: Vec<_> = drows.iter().map(|t| t.hwc()).collect();
    ensure!(drun == TABLE_I, "executed discriminator shapes {drun:?}");
    Ok(Verdict::Pass(
        "17 generator rows and 7 discriminator rows match, traced and executed".into(),
    ))
}

// ------------------------------------------------------------- criterion 5

/// Convolutions feeding a batch norm have their weights multiplied by this
/// before checking. Normalization makes the network's function invariant to
/// it, and it keeps the fixed step small next to N(0, 0.02) weights.
const UNIT_VARIANCE: f64 = 50.0;

struct GradCase {
    g: Generator<f64>,
    d: Discriminator<f64>,
    x: Tensor<f64>,
    target: Tensor<f64>,
    loss: LossConfig,
    /// Discriminator rows ending in a leaky ReLU.
    d_kink_rows: Vec<usize>,
}

/// Value of a loss plus the on/off pattern of every piecewise-linear unit it
/// passed through (rectifiers and the L1 term).
struct Eval {
    loss: f64,
    pattern: Vec<bool>,
}

fn signs(t: &Tensor<f64>, out: &mut Vec<bool>) {
    out.extend(t.data.iter().map(|v| *v > 0.0));
}

impl GradCase {
    fn new(seed: u64) -> Self {
        let ws = WidthScale::new(1, 16).unwrap();
        let gspec = GeneratorSpec {
            dropout_rate: 0.0,
            ..GeneratorSpec::scaled(16, ws)
        };
        let dspec = DiscriminatorSpec {
            downsample_rows: 2,
            ..DiscriminatorSpec::scaled(16, ws)
        };
        let mut r = rng(seed);
        let n = 4;
        let x = Tensor::from_vec(n, 4, 16, 16, (0..n * 4 * 256).map(|_| r.random()).collect()).unwrap();
        let target = Tensor::from_vec(n, 3, 16, 16, (0..n * 3 * 256).map(|_| r.random()).collect()).unwrap();
        let mut g = Generator::new(gspec, r.random()).unwrap();
        let mut d = Discriminator::new(dspec, r.random()).unwrap();
        let g_rows = g.trace().unwrap();
        let d_rows = d.trace().unwrap();
        let g_out = format!("g.row{}.", g_rows.len());
        let d_out = format!("d.row{}.", d_rows.len());
        for p in g.params.params.iter_mut().chain(d.params.params.iter_mut()) {
            if p.name.ends_with(".weight") && !p.name.starts_with(&g_out) && !p.name.starts_with(&d_out) {
                p.value.iter_mut().for_each(|v| *v *= UNIT_VARIANCE);
            }
        }
        let d_kink_rows = d_rows
            .iter()
            .enumerate()
            .filter(|(_, r)| matches!(r.block, BlockKind::C | BlockKind::NormPad))
            .map(|(i, _)| i)
            .collect();
        Self {
            g,
            d,
            x,
            target,
            loss: LossConfig::default(),
            d_kink_rows,
        }
    }

    /// Raw scores for `candidate`, recording the rectifier pattern.
    fn scores(&mut self, candidate: &Tensor<f64>, pattern: &mut Vec<bool>) -> Tensor<f64> {
        let rows = self.d.trace_forward(&self.x, candidate, Mode::Train).unwrap();
        for &i in &self.d_kink_rows {
            signs(&rows[i], pattern);
        }
        rows.into_iter().last().unwrap()
    }

    fn fake(&mut self, pattern: &mut Vec<bool>) -> Tensor<f64> {
        let rows = self.g.trace_forward_mode(&self.x, Mode::Train, &mut rng(0)).unwrap();
        for row in &rows[..rows.len() - 1] {
            signs(row, pattern);
        }
        rows.into_iter().last().unwrap()
    }

    fn g_loss(&mut self) -> Eval {
        let mut pattern = Vec::new();
        let fake = self.fake(&mut pattern);
        let diff = Tensor::from_vec(
            fake.n,
            3,
            fake.h,
            fake.w,
            fake.data.iter().zip(&self.target.data).map(|(a, b)| a - b).collect(),
        )
        .unwrap();
        signs(&diff, &mut pattern);
        let scores = self.scores(&fake, &mut pattern);
        let (_, adv) = adversarial_loss(&scores, &scores);
        let loss = total_generator_loss(adv, l1_rgb_tensor(&fake, &self.target).unwrap(), &self.loss);
        Eval { loss, pattern }
    }

    fn d_loss(&mut self, fake: &Tensor<f64>) -> Eval {
        let mut pattern = Vec::new();
        let target = self.target.clone();
        let real = self.scores(&target, &mut pattern);
        let fk = self.scores(fake, &mut pattern);
        Eval {
            loss: adversarial_loss(&real, &fk).0,
            pattern,
        }
    }
}

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn block_of(row_kinds: &[(usize, BlockKind)], name: &str) -> BlockKind {
    let row: usize = name
        .split('.')
        .nth(1)
        .and_then(|s| s.strip_prefix("row"))
        .and_then(|s| s.parse().ok())
        .expect("parameter names carry their row");
    row_kinds.iter().find(|(r, _)| *r == row).expect("row exists").1
}

struct GradSample {
    name: String,
    block: BlockKind,
    analytic: f64,
    numeric: f64,
}

#[derive(Clone, Copy, PartialEq)]
enum Net {
    G,
    D,
}

/// Central differences on sampled entries of every trainable tensor.
/// Entries whose perturbation flips any rectifier or L1 sign are redrawn:
/// the loss has a kink between the two evaluations there, so the
/// difference quotient is not an estimate of the derivative.
fn gradient_check(seed: u64, step: f64, per_tensor: usize) -> (Vec<GradSample>, usize) {
    let mut case = GradCase::new(seed);
    let g_rows: Vec<_> = case.g.trace().unwrap().iter().map(|r| (r.row, r.block)).collect();
    let d_rows: Vec<_> = case.d.trace().unwrap().iter().map(|r| (r.row, r.block)).collect();

    let pass = generator_pass(&mut case.g, &case.x, Mode::Train, &mut rng(0)).unwrap();
    let fake = pass.fake.clone();
    let (x, target, loss) = (case.x.clone(), case.target.clone(), case.loss);
    generator_gradients(&mut case.g, &mut case.d, pass, &x, &target, &loss).unwrap();
    let g_grads = case.g.params.clone();
    discriminator_gradients(&mut case.d, &x, &target, &fake).unwrap();
    let d_grads = case.d.params.clone();

    let mut pick = rng(seed ^ 0x5eed);
    let mut samples = Vec::new();
    let mut kinked = 0;
    for (net, grads) in [(Net::G, &g_grads), (Net::D, &d_grads)] {
        for (pi, p) in grads.params.iter().enumerate().filter(|(_, p)| p.trainable) {
            let mut taken = 0;
            for _ in 0..50 * per_tensor {
                if taken == per_tensor {
                    break;
                }
                let k = pick.random_range(0..p.value.len());
                let set = |c: &mut GradCase, v: f64| match net {
                    Net::G => c.g.params.params[pi].value[k] = v,
                    Net::D => c.d.params.params[pi].value[k] = v,
                };
                let w0 = p.value[k];
                let mut eval_at = |h: f64| {
                    set(&mut case, w0 + h);
                    let e = match net {
                        Net::G => case.g_loss(),
                        Net::D => case.d_loss(&fake),
                    };
                    set(&mut case, w0);
                    e
                };
                let plus = eval_at(step);
                let minus = eval_at(-step);
                if plus.pattern != minus.pattern {
                    kinked += 1;
                    continue;
                }
                let rows = if net == Net::G { &g_rows } else { &d_rows };
                samples.push(GradSample {
                    name: format!("{}[{k}]", p.name),
                    block: block_of(rows, &p.name),
                    analytic: p.grad[k],
                    numeric: (plus.loss - minus.loss) / (2.0 * step),
                });
                taken += 1;
            }
        }
    }
    (samples, kinked)
}

fn criterion_5() -> Outcome {
    const STEP: f64 = 1e-4;
    const PER_TENSOR: usize = 4;
    let t = Instant::now();
    let mut total = 0;
    let mut kinked_total = 0;
    let mut worst = (String::new(), 0.0f64);
    for seed in [505, 506, 507] {
        let (samples, kinked) = gradient_check(seed, STEP, PER_TENSOR);
        kinked_total += kinked;
        total += samples.len();
        for s in &samples {
            let e = relative_error(s.analytic, s.numeric);
            if e > worst.1 {
                worst = (format!("{} (seed {seed})", s.name), e);
            }
        }
        let has = |pred: &dyn Fn(&GradSample) -> bool| samples.iter().any(pred);
        let covered = [
            ("C", has(&|s| s.name.starts_with("g.") && s.block == BlockKind::C)),
            ("CTD", has(&|s| s.name.starts_with("g.") && s.block == BlockKind::CTD)),
            ("CT", has(&|s| s.name.starts_with("g.") && s.block == BlockKind::CT)),
            ("tanh", has(&|s| s.name.starts_with("g.") && s.block == BlockKind::Tanh)),
            ("D strided conv", has(&|s| s.name.starts_with("d.") && s.name.contains(".conv") && s.block == BlockKind::C)),
            ("D stride-1 conv", has(&|s| s.name.starts_with("d.") && s.block == BlockKind::Conv)),
        ];
        for (label, ok) in covered {
            ensure!(ok, "seed {seed}: no sampled parameter in a {label} layer");
        }
        ensure!(samples.len() >= 100, "seed {seed}: only {} parameters sampled", samples.len());
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(worst.1 <= 1e-3, "relative error {:.3e} at {} (limit 1e-3)", worst.1, worst.0);
    ensure!(secs < 300.0, "took {secs:.1} s (limit 300 s)");
    Ok(Verdict::Pass(format!(
        "{total} parameters over 3 seeds spanning C/CTD/CT/tanh/D rows, max rel error {:.2e}, {kinked_total} kink-crossing draws redrawn, {secs:.1} s",
        worst.1
    )))
}

// ------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let mut r = rng(606);
    let (n, h, w) = (3, 8, 8);
    let rand_t = |c: usize, r: &mut ChaCha8Rng| {
        Tensor::<f32>::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| r.random()).collect()).unwrap()
    };
    let out3 = rand_t(3, &mut r);
    let tgt3 = rand_t(3, &mut r);
    let out4 = Tensor::concat_channels(&out3, &rand_t(1, &mut r));
    let tgt4 = Tensor::concat_channels(&tgt3, &rand_t(1, &mut r));
    let base = l1_rgb_tensor(&out3, &tgt3).unwrap();
    for (a, b) in [(&out4, &tgt3), (&out3, &tgt4), (&out4, &tgt4)] {
        let v = l1_rgb_tensor(a, b).unwrap();
        ensure!(v == base, "4th channel changed l1: {v} vs {base}");
    }
    let imgs = |t: &Tensor<f32>| t.to_rgbs().unwrap();
    ensure!(
        l1_rgb(&imgs(&out3), &imgs(&tgt3)).unwrap() == base,
        "image and tensor l1 disagree"
    );

    let zeros = Tensor::<f64>::zeros(2, 1, 30, 30);
    let (d, g) = adversarial_loss(&zeros, &zeros);
    let ln2 = std::f64::consts::LN_2;
    ensure!((d - 2.0 * ln2).abs() <= 1e-9, "d_loss at the fixed point is {d}");
    ensure!((g - ln2).abs() <= 1e-9, "g_adv at the fixed point is {g}");

    let log = read_log(&desk().outcome.checkpoint.with_file_name(LOG_FILE)).unwrap();
    ensure!(log.len() as u64 == DESK_STEPS, "log has {} records", log.len());
    for rec in &log {
        let again = rec.g_adv + 100.0 * rec.l1;
        ensure!(
            rec.total_g_loss == again,
            "step {}: logged total {} but g_adv + 100 l1 = {again}",
            rec.step,
            rec.total_g_loss
        );
    }
    Ok(Verdict::Pass(format!(
        "l1 ignores a 4th channel exactly; {} logged totals re-derived exactly; fixed-point d_loss off by {:.1e}",
        log.len(),
        (d - 2.0 * ln2).abs()
    )))
}

// ------------------------------------------------------------- criterion 7

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

fn criterion_7() -> Outcome {
    let desk = desk();
    let log: &[TrainRecord] = &desk.outcome.log;
    ensure!(log.len() as u64 == DESK_STEPS, "ran {} steps", log.len());
    let totals: Vec<f64> = log.iter().map(|r| r.total_g_loss).collect();
    let first = median(totals[..10].to_vec());
    let last = median(totals[totals.len() - 10..].to_vec());
    ensure!(last < first, "median loss rose: first 10 {first:.4}, last 10 {last:.4}");

    let report = evaluate(
        &desk.manifest,
        &desk.outcome.checkpoint,
        &EvalOptions {
            split: Split::Train,
            ..EvalOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let out = report.overall.psnr.mean;
    let base = report.overall.baseline_psnr.mean;
    ensure!(report.overall.psnr.count == DESK_TRAIN, "scored {} pairs", report.overall.psnr.count);
    ensure!(out - base >= 1.0, "PSNR {out:.3} dB vs smoked {base:.3} dB (need +1.0)");
    ensure!(desk.train_secs <= 1800.0, "training took {:.0} s", desk.train_secs);
    Ok(Verdict::Pass(format!(
        "loss median {first:.3} -> {last:.3}; PSNR {out:.2} dB vs smoked {base:.2} dB (+{:.2}); trained in {:.1} s",
        out - base,
        desk.train_secs
    )))
}

// ------------------------------------------------------------- criterion 8

fn mse_oracle(a: &ImageRgb, b: &ImageRgb) -> f64 {
    let mut total = 0.0;
    for c in 0..3 {
        let (pa, pb) = (a.plane(c).data(), b.plane(c).data());
        let s: f64 = pa.iter().zip(pb).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
        total += s / pa.len() as f64;
    }
    total / 3.0
}

fn gray(img: &ImageRgb) -> Vec<f64> {
    let (h, w) = img.shape();
    (0..h * w)
        .map(|k| (0..3).map(|c| img.plane(c).data()[k] as f64).sum::<f64>() / 3.0)
        .collect()
}

/// Single-pass raw-moment form of the SSIM statistic.
fn ssim_oracle(x: &[f64], y: &[f64], max: f64) -> f64 {
    let n = x.len() as f64;
    let (c1, c2) = ((0.01 * max).powi(2), (0.03 * max).powi(2));
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    let (mx, my) = (sx / n, sy / n);
    let vx = sxx / n - mx * mx;
    let vy = syy / n - my * my;
    let cxy = sxy / n - mx * my;
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

fn windowed_ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize, win: usize) -> f64 {
    let mut vals = Vec::new();
    for y0 in 0..=h - win {
        for x0 in 0..=w - win {
            let patch = |img: &[f64]| -> Vec<f64> {
                (y0..y0 + win).flat_map(|yy| img[yy * w + x0..yy * w + x0 + win].to_vec()).collect()
            };
            vals.push(ssim_oracle(&patch(x), &patch(y), 1.0));
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn criterion_8() -> Outcome {
    let cfg = MetricConfig::default();
    let win = MetricConfig {
        ssim_mode: SsimMode::Windowed { window: 7, stride: 1 },
        ..cfg
    };
    let mut r = rng(808);
    let mut worst = [0.0f64; 4];
    for i in 0..100 {
        let (h, w) = (r.random_range(8..24), r.random_range(8..24));
        let a = random_rgb(h, w, &mut r);
        let b = random_rgb(h, w, &mut r);
        let m = mse_oracle(&a, &b);
        let errs = [
            (mse(&a, &b).unwrap() - m).abs(),
            (psnr(&a, &b, &cfg).unwrap() - 10.0 * (1.0 / m).log10()).abs(),
            (ssim(&a, &b, &cfg).unwrap() - ssim_oracle(&gray(&a), &gray(&b), 1.0)).abs(),
            (ssim(&a, &b, &win).unwrap() - windowed_ssim_oracle(&gray(&a), &gray(&b), h, w, 7)).abs(),
        ];
        for (wst, e) in worst.iter_mut().zip(errs) {
            *wst = wst.max(e);
        }
        ensure!(worst.iter().all(|e| *e <= 1e-9), "pair {i}: errors {worst:?}");
        ensure!(ssim(&a, &a, &cfg).unwrap() == 1.0, "ssim(I, I) != 1 for pair {i}");
        ensure!(ssim(&a, &a, &win).unwrap() == 1.0, "windowed ssim(I, I) != 1 for pair {i}");
    }
    let hi = 0.1f32;
    let lo = (hi as f64 - 0.1) as f32;
    let p = psnr(&ImageRgb::filled(16, 16, [hi; 3]), &ImageRgb::filled(16, 16, [lo; 3]), &cfg).unwrap();
    ensure!(p == 20.0, "uniform 0.1 difference gives {p} dB");
    Ok(Verdict::Pass(format!(
        "100 pairs, max errors mse {:.1e} / psnr {:.1e} dB / ssim {:.1e} / windowed {:.1e}; ssim(I,I) = 1; 0.1 offset = 20 dB",
        worst[0], worst[1], worst[2], worst[3]
    )))
}

// ------------------------------------------------------------- criterion 9

fn dir_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_train_config(max_steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        epochs: 100,
        max_steps: Some(max_steps),
        checkpoint_every: 0,
        seed: 9,
        width_scale: WidthScale::new(1, 16).unwrap(),
        prepare: PrepareConfig {
            dark: DarkChannelParams::new(3).unwrap(),
            guided: GuidedFilterParams::new(2, 1e-3).unwrap(),
        },
        ..TrainConfig::default()
    }
}

fn losses(log: &[TrainRecord]) -> Vec<(u64, u64, f64, f64, f64, f64)> {
    log.iter()
        .map(|r| (r.step, r.epoch, r.d_loss, r.g_adv, r.l1, r.total_g_loss))
        .collect()
}

fn criterion_9() -> Outcome {
    let tmp = TempDir::new().unwrap();
    let src = tmp.path().join("src");
    write_sources(&src, 8, 40, 90);
    let gen = GenerateConfig {
        n_train: 6,
        n_test: 2,
        seed: 19,
        resolution: 32,
        ..GenerateConfig::default()
    };
    let (da, db) = (tmp.path().join("da"), tmp.path().join("db"));
    generate(&src, &da, &gen).unwrap();
    generate(&src, &db, &gen).unwrap();
    ensure!(dir_bytes(&da) == dir_bytes(&db), "two dataset generations differ");
    let m = load_manifest(da.join(MANIFEST_FILE)).unwrap();

    let run = |name: &str, steps: u64| train(&m, &small_train_config(steps), &tmp.path().join(name)).unwrap();
    let a = run("a", 6);
    let b = run("b", 6);
    ensure!(losses(&a.log) == losses(&b.log), "training logs differ between identical runs");
    let bytes = |p: &Path| std::fs::read(p).unwrap();
    ensure!(bytes(&a.checkpoint) == bytes(&b.checkpoint), "final checkpoints differ between identical runs");

    let half = run("r", 3);
    let resumed = resume(&half.checkpoint, &m, &small_train_config(6), &tmp.path().join("r")).unwrap();
    ensure!(
        bytes(&resumed.checkpoint) == bytes(&a.checkpoint),
        "resumed checkpoint differs from the uninterrupted one"
    );
    let joined = read_log(&tmp.path().join("r").join(LOG_FILE)).unwrap();
    ensure!(losses(&joined) == losses(&a.log), "resumed log differs from the uninterrupted one");
    ensure!(
        tmp.path().join("r").join(FINAL_CHECKPOINT).is_file(),
        "resume wrote no final checkpoint"
    );

    let mut g = desk_generator();
    let frames: Vec<ImageRgb> = desk()
        .manifest
        .records_in(Split::Test)
        .take(4)
        .map(|r| load_image(desk().manifest.smoked_file(r)).unwrap())
        .collect();
    let prep = PrepareConfig::default();
    let o1 = restore(&mut g, &frames, &prep).unwrap();
    let o2 = restore(&mut g, &frames, &prep).unwrap();
    ensure!(o1 == o2, "eval-deterministic inference differs between runs");
    let (p1, p2) = (tmp.path().join("o1.png"), tmp.path().join("o2.png"));
    save_image(&o1[0], &p1).unwrap();
    save_image(&o2[0], &p2).unwrap();
    ensure!(bytes(&p1) == bytes(&p2), "saved inference PNGs differ");
    Ok(Verdict::Pass(
        "dataset files, training logs and checkpoints, resumed training and inference PNGs are byte-identical".into(),
    ))
}

// ------------------------------------------------------------ criterion 10

fn criterion_10() -> Outcome {
    let desk = desk();
    let frames: Vec<ImageRgb> = desk
        .manifest
        .records_in(Split::Test)
        .map(|r| load_image(desk.manifest.smoked_file(r)).unwrap())
        .collect();
    ensure!(frames.len() >= 16, "only {} held-out images", frames.len());
    let mut g = desk_generator();
    let stats = mask_probe(&mut g, &frames, &PrepareConfig::default(), [0.0, 1.0, 2.0]).map_err(|e| e.to_string())?;
    let m = stats.mean_abs_change;
    let msg = format!(
        "{} images, mean |output - input| for factors 0 / 1 / 2: {:.5} / {:.5} / {:.5}",
        stats.images, m[0], m[1], m[2]
    );
    Ok(if stats.non_decreasing() {
        Verdict::Pass(msg)
    } else {
        Verdict::Warn(format!("{msg} (not non-decreasing)"))
    })
}

// ------------------------------------------------------------ criterion 11

fn criterion_11() -> Outcome {
    let mut g = desk_generator();
    let frame = synthetic_frame(DESK_RES, DESK_RES, 0);
    let prep = PrepareConfig::default();
    let rep = run_bench(&mut g, &frame, &prep, &BenchConfig { iterations: 10, warmup: 2 }).map_err(|e| e.to_string())?;
    let s = rep.stages;
    ensure!(
        [s.dark_channel_ms, s.guided_filter_ms, s.embed_ms, s.generator_ms].iter().all(|v| *v >= 0.0),
        "negative stage timing {s:?}"
    );
    ensure!(rep.fps > 0.0 && rep.fps.is_finite(), "fps = {}", rep.fps);
    ensure!(s.sum_ms() <= rep.total_ms, "stages sum to {} ms > total {} ms", s.sum_ms(), rep.total_ms);
    ensure!(
        (rep.fps * rep.total_ms / 1e3 - 1.0).abs() < 1e-9,
        "fps {} inconsistent with {} ms/frame",
        rep.fps,
        rep.total_ms
    );
    ensure!(rep.iterations == 10 && rep.warmup == 2 && !rep.hardware.is_empty(), "bookkeeping fields wrong");
    let json = serde_json::to_string(&rep).map_err(|e| e.to_string())?;
    let back: BenchReport = serde_json::from_str(&json).map_err(|e| e.to_string())?;
    ensure!(back == rep, "JSON round trip changed the report");
    let doubled =
        run_bench(&mut g, &frame, &prep, &BenchConfig { iterations: 20, warmup: 2 }).map_err(|e| e.to_string())?;
    Ok(Verdict::Pass(format!(
        "{:.1} fps at {res}x{res}, width {} ({:.2} ms/frame: dark {:.2}, guided {:.2}, embed {:.2}, G {:.2}); \
         20 iterations: {:.1} fps; {}",
        rep.fps,
        rep.width_scale,
        rep.total_ms,
        s.dark_channel_ms,
        s.guided_filter_ms,
        s.embed_ms,
        s.generator_ms,
        doubled.fps,
        rep.hardware,
        res = rep.resolution,
    )))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("dark channel oracle", criterion_1),
        ("guided filter oracle", criterion_2),
        ("compositing inversion", criterion_3),
        ("architecture conformance", criterion_4),
        ("gradient check", criterion_5),
        ("loss contracts", criterion_6),
        ("desk-scale training", criterion_7),
        ("metric oracles", criterion_8),
        ("determinism", criterion_9),
        ("mask-probe trend", criterion_10),
        ("benchmark harness", criterion_11),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.iter().any(|s| s == &id.to_string()) {
            continue;
        }
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(Verdict::Pass(msg)) => println!("PASS criterion {id:>2} {name}: {msg} [{secs:.1}s]"),
            Ok(Verdict::Warn(msg)) => println!("WARN criterion {id:>2} {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {id:>2} {name}: {msg} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
