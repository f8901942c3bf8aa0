//! `desmoke` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use desmoke::bench::{run_bench, BenchConfig};
use desmoke::dataset::{self, GenerateConfig, Split, TierMix, MANIFEST_FILE};
use desmoke::dcprior::{dark_channel, refined_dark_channel, DarkChannelParams, GuidedFilterParams, PrepareConfig};
use desmoke::imagecore::{load_image, save_image, ImageRgb};
use desmoke::metrics::{evaluate, EvalOptions, MetricConfig, SsimMode};
use desmoke::model::checkpoint::Checkpoint;
use desmoke::model::{LossConfig, WidthScale};
use desmoke::pipeline::{prepare_for, restore, restore_stacks, trained_prepare};
use desmoke::probe::{mask_probe, plane_as_rgb, probe_frame, side_by_side, DEFAULT_FACTORS};
use desmoke::scenes::synthetic_frame;
use desmoke::smokesim::{apply_smoke, draw_params, perlin_mask, IntensityTier, SmokeConfig};
use desmoke::trainer::{resume, train, TrainConfig};

const DATA_DIR_ENV: &str = "DESMOKE_DATA_DIR";

/// Dark-channel-guided desmoking for laparoscopic frames.
#[derive(Parser, Debug)]
#[command(name = "desmoke", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write deterministic synthetic clear frames.
    MakeFrames(MakeFramesArgs),
    /// Add synthetic smoke to one image or a directory of PNGs.
    Synth(SynthArgs),
    /// Build a paired train/test dataset with a manifest.
    Dataset(DatasetArgs),
    /// Write the dark channel of an image.
    Darkchannel(DarkArgs),
    /// Write the guided-filter refined dark channel of an image.
    Refine(RefineArgs),
    /// Train the generator/discriminator pair.
    Train(TrainArgs),
    /// Desmoke one image or a directory of PNGs.
    Infer(InferArgs),
    /// Score a checkpoint against a manifest split.
    Eval(EvalArgs),
    /// Run inference with the guide channel scaled per vertical third.
    ProbeMask(ProbeArgs),
    /// Time the per-frame pipeline.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct MakeFramesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Clear PNG or directory of PNGs.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output PNG (for a file input) or directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "medium")]
    tier: IntensityTier,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the smoke mask next to each output.
    #[arg(long)]
    emit_mask: bool,
}

#[derive(Args, Debug)]
struct DatasetArgs {
    /// Directory of clear PNGs (subdirectories group frames).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory; defaults to $DESMOKE_DATA_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    train: usize,
    #[arg(long)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    /// Low, medium, high proportions.
    #[arg(long, value_delimiter = ',')]
    mix: Option<Vec<f64>>,
    /// Draw the atmospheric light per sample.
    #[arg(long)]
    jitter_light: bool,
}

#[derive(Args, Debug, Clone, Copy)]
struct DarkFlags {
    /// Dark channel window side (odd).
    #[arg(long, default_value_t = 15)]
    kernel: usize,
}

#[derive(Args, Debug, Clone, Copy)]
struct GuideFlags {
    /// Guided filter radius.
    #[arg(long, default_value_t = 20)]
    radius: usize,
    /// Guided filter regularizer.
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
}

/// Preprocessing flags that fall back to what a checkpoint was trained with.
#[derive(Args, Debug, Clone, Copy)]
struct PrepOverride {
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
}

impl PrepOverride {
    fn apply(self, base: PrepareConfig) -> Result<PrepareConfig> {
        Ok(PrepareConfig {
            dark: DarkChannelParams::new(self.kernel.unwrap_or(base.dark.kernel_size))?,
            guided: GuidedFilterParams::new(
                self.radius.unwrap_or(base.guided.radius),
                self.eps.unwrap_or(base.guided.epsilon),
            )?,
        })
    }
}

#[derive(Args, Debug)]
struct DarkArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    dark: DarkFlags,
}

#[derive(Args, Debug)]
struct RefineArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    dark: DarkFlags,
    #[command(flatten)]
    guide: GuideFlags,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Defaults to $DESMOKE_DATA_DIR/manifest.jsonl.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Run directory for train.log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    epochs: u64,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Channel width multiplier, e.g. `1/4`.
    #[arg(long, default_value = "1")]
    scale: WidthScale,
    /// Network resolution; defaults to the manifest's.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long, default_value_t = 100.0)]
    lambda: f64,
    #[arg(long, default_value_t = 5)]
    checkpoint_every: u64,
    /// Stride-2 rows in the discriminator.
    #[arg(long, default_value_t = 3)]
    d_downsample: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    /// Print a progress line every N steps (0 for quiet).
    #[arg(long, default_value_t = 10)]
    progress: u64,
    #[command(flatten)]
    dark: DarkFlags,
    #[command(flatten)]
    guide: GuideFlags,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Smoked PNG or directory of PNGs.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output PNG (for a file input) or directory.
    #[arg(long)]
    out: PathBuf,
    /// Resize outputs back to each input's size instead of the network's.
    #[arg(long)]
    match_input: bool,
    #[command(flatten)]
    prep: PrepOverride,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to $DESMOKE_DATA_DIR/manifest.jsonl.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory for eval.csv, eval_summary.json and eval_boxplot.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Windowed SSIM with this window side instead of the global statistic.
    #[arg(long)]
    ssim_window: Option<usize>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[command(flatten)]
    prep: PrepOverride,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Smoked PNG to visualize.
    #[arg(long = "in")]
    input: PathBuf,
    /// Composite PNG; a `.json` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Guide factors for the left, middle and right thirds.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FACTORS)]
    factors: Vec<f32>,
    /// Also measure the per-factor change over this manifest's test split.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    prep: PrepOverride,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Frame to time on; a synthetic frame by default.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    iterations: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    prep: PrepOverride,
}

fn data_dir() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

fn manifest_path(flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| data_dir().map(|d| d.join(MANIFEST_FILE)))
        .with_context(|| format!("no --manifest given and {DATA_DIR_ENV} is not set"))
}

fn prep_from(dark: DarkFlags, guide: GuideFlags) -> Result<PrepareConfig> {
    Ok(PrepareConfig {
        dark: DarkChannelParams::new(dark.kernel)?,
        guided: GuidedFilterParams::new(guide.radius, guide.eps)?,
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// `(input, output)` pairs for a file or a directory of PNGs.
fn io_pairs(input: &Path, out: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    if input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(input)
            .with_context(|| format!("reading {}", input.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(files
            .into_iter()
            .map(|f| {
                let o = out.join(f.file_name().expect("listed files have names"));
                (f, o)
            })
            .collect())
    } else if input.is_file() {
        ensure_parent(out)?;
        Ok(vec![(input.to_path_buf(), out.to_path_buf())])
    } else {
        Err(desmoke::Error::NotFound(input.to_path_buf()).into())
    }
}

fn cmd_make_frames(a: MakeFramesArgs) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for i in 0..a.count {
        let frame = synthetic_frame(a.resolution, a.resolution, a.seed.wrapping_add(i as u64));
        save_image(&frame, a.out.join(format!("frame_{i:05}.png")))?;
    }
    println!("wrote {} frames to {}", a.count, a.out.display());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SmokeConfig::default();
    for (i, (src, dst)) in io_pairs(&a.input, &a.out)?.into_iter().enumerate() {
        let clear = load_image(&src)?;
        let seed = a.seed.wrapping_add(i as u64);
        let params = draw_params(a.tier, seed, &cfg);
        let (smoked, _) = apply_smoke(&clear, &params)?;
        save_image(&smoked, &dst)?;
        if a.emit_mask {
            let (h, w) = clear.shape();
            let stem = dst.file_stem().unwrap_or_default().to_string_lossy();
            save_image(&perlin_mask(h, w, &params)?, dst.with_file_name(format!("{stem}_mask.png")))?;
        }
        write_json(
            &sidecar(&dst),
            &json!({ "source": src, "tier": a.tier, "seed": seed, "params": params }),
        )?;
    }
    Ok(())
}

fn cmd_dataset(a: DatasetArgs) -> Result<()> {
    let out = a
        .out
        .or_else(data_dir)
        .with_context(|| format!("no --out given and {DATA_DIR_ENV} is not set"))?;
    let cfg = GenerateConfig {
        n_train: a.train,
        n_test: a.test,
        seed: a.seed,
        tier_mix: match a.mix.as_deref() {
            Some(&[lo, mid, hi]) => TierMix([lo, mid, hi]),
            Some(_) => bail!("--mix takes exactly three values"),
            None => TierMix::default(),
        },
        resolution: a.resolution,
        smoke: SmokeConfig {
            jitter_light: a.jitter_light,
            ..SmokeConfig::default()
        },
    };
    let m = dataset::generate(&a.input, &out, &cfg)?;
    println!(
        "wrote {} train / {} test pairs to {}",
        m.count(Split::Train),
        m.count(Split::Test),
        out.join(MANIFEST_FILE).display()
    );
    Ok(())
}

fn cmd_darkchannel(a: DarkArgs) -> Result<()> {
    let img = load_image(&a.input)?;
    let dc = dark_channel(&img, DarkChannelParams::new(a.dark.kernel)?)?;
    ensure_parent(&a.out)?;
    save_image(&dc, &a.out)?;
    Ok(())
}

fn cmd_refine(a: RefineArgs) -> Result<()> {
    let img = load_image(&a.input)?;
    let prep = prep_from(a.dark, a.guide)?;
    let refined = refined_dark_channel(&img, prep.dark, prep.guided)?;
    ensure_parent(&a.out)?;
    save_image(&refined, &a.out)?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let manifest = dataset::load_manifest(manifest_path(a.manifest)?)?;
    let cfg = TrainConfig {
        batch_size: a.batch,
        optimizer: desmoke::trainer::AdamConfig {
            learning_rate: a.lr,
            ..Default::default()
        },
        epochs: a.epochs,
        max_steps: a.steps,
        checkpoint_every: a.checkpoint_every,
        seed: a.seed,
        loss: LossConfig::new(a.lambda)?,
        resolution: a.resolution,
        width_scale: a.scale,
        discriminator_downsample: a.d_downsample,
        prepare: prep_from(a.dark, a.guide)?,
        progress_every: a.progress,
    };
    let outcome = match &a.checkpoint {
        Some(ck) => resume(ck, &manifest, &cfg, &a.out)?,
        None => train(&manifest, &cfg, &a.out)?,
    };
    println!("final checkpoint: {}", outcome.checkpoint.display());
    Ok(())
}

fn load_generator(path: &Path, prep: PrepOverride) -> Result<(Checkpoint, PrepareConfig)> {
    let ck = Checkpoint::load(path)?;
    let prep = prep.apply(trained_prepare(&ck))?;
    Ok((ck, prep))
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let (mut ck, prep) = load_generator(&a.checkpoint, a.prep)?;
    let g = &mut ck.generator;
    for (src, dst) in io_pairs(&a.input, &a.out)? {
        let smoked = load_image(&src)?;
        let out = if a.match_input {
            restore(g, std::slice::from_ref(&smoked), &prep)?
        } else {
            restore_stacks(g, &[prepare_for(g, &smoked, &prep)?])?
        };
        save_image(&out[0], &dst)?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let manifest = dataset::load_manifest(manifest_path(a.manifest)?)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let metric = MetricConfig {
        ssim_mode: match a.ssim_window {
            Some(window) => SsimMode::Windowed { window, stride: 1 },
            None => SsimMode::Global,
        },
        ..MetricConfig::default()
    };
    let opts = EvalOptions {
        split: a.split.into(),
        metric,
        prepare: a.prep.apply(trained_prepare(&ck))?,
        batch_size: a.batch,
    };
    drop(ck);
    let report = evaluate(&manifest, &a.checkpoint, &opts)?;
    report.write_all(&a.out)?;
    let o = &report.overall;
    println!(
        "{} images: PSNR {:.3} dB (smoked {:.3}), SSIM {:.4} (smoked {:.4})",
        o.psnr.count, o.psnr.mean, o.baseline_psnr.mean, o.ssim.mean, o.baseline_ssim.mean
    );
    Ok(())
}

fn cmd_probe_mask(a: ProbeArgs) -> Result<()> {
    let factors: [f32; 3] = a.factors.as_slice().try_into().context("--factors takes exactly three values")?;
    let (mut ck, prep) = load_generator(&a.checkpoint, a.prep)?;
    let g = &mut ck.generator;
    let smoked = load_image(&a.input)?;
    let (stack, out) = probe_frame(g, &smoked, &prep, factors)?;
    let composite = side_by_side(&[stack.rgb().clone(), plane_as_rgb(stack.guide()), out])?;
    ensure_parent(&a.out)?;
    save_image(&composite, &a.out)?;

    let stats = match &a.manifest {
        Some(path) => {
            let m = dataset::load_manifest(path)?;
            let frames = m
                .records_in(Split::Test)
                .map(|r| load_image(m.smoked_file(r)))
                .collect::<desmoke::Result<Vec<ImageRgb>>>()?;
            let s = mask_probe(g, &frames, &prep, factors)?;
            println!(
                "mean |output - input| per factor {:?}: {:?} (non-decreasing: {})",
                s.factors,
                s.mean_abs_change,
                s.non_decreasing()
            );
            Some(s)
        }
        None => None,
    };
    write_json(
        &sidecar(&a.out),
        &json!({
            "input": a.input,
            "checkpoint": a.checkpoint,
            "factors": factors,
            "panels": ["input", "guide", "output"],
            "stats": stats,
        }),
    )
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let (mut ck, prep) = load_generator(&a.checkpoint, a.prep)?;
    let r = ck.generator.spec().input_resolution;
    let frame = match &a.input {
        Some(p) => load_image(p)?,
        None => synthetic_frame(r, r, 0),
    };
    let cfg = BenchConfig {
        iterations: a.iterations,
        warmup: a.warmup,
    };
    let report = run_bench(&mut ck.generator, &frame, &prep, &cfg)?;
    let value = serde_json::to_value(&report)?;
    if let Some(out) = &a.out {
        write_json(out, &value)?;
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeFrames(a) => cmd_make_frames(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Dataset(a) => cmd_dataset(a),
        Command::Darkchannel(a) => cmd_darkchannel(a),
        Command::Refine(a) => cmd_refine(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::ProbeMask(a) => cmd_probe_mask(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // clap's rendering already starts with "error: "
            eprint!("desmoke: {}", e.render());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("desmoke: error: {e:#}");
            ExitCode::from(2)
        }
    }
}
