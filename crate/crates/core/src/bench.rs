//! Per-frame throughput of the full desmoking pipeline.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dcprior::{dark_channel, guided_filter, PrepareConfig};
use crate::error::{Error, Result};
use crate::imagecore::{resize_to, stack_guide, ImageRgb};
use crate::model::{Generator, Mode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub iterations: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            warmup: 3,
        }
    }
}

/// Mean milliseconds per frame for each stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub dark_channel_ms: f64,
    pub guided_filter_ms: f64,
    /// Resizing, stacking the guide and building the input tensor.
    pub embed_ms: f64,
    pub generator_ms: f64,
}

impl StageTimings {
    pub fn sum_ms(&self) -> f64 {
        self.dark_channel_ms + self.guided_filter_ms + self.embed_ms + self.generator_ms
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub stages: StageTimings,
    /// Mean wall time per frame over the timed iterations.
    pub total_ms: f64,
    /// Timed iterations divided by their total wall time.
    pub fps: f64,
    pub iterations: usize,
    pub warmup: usize,
    pub resolution: usize,
    pub width_scale: String,
    pub hardware: String,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let s = &self.stages;
        format!(
            "resolution      {0}x{0} (width scale {1})\n\
             iterations      {2} (+{3} warmup)\n\
             dark channel    {4:9.3} ms\n\
             guided filter   {5:9.3} ms\n\
             embed           {6:9.3} ms\n\
             generator       {7:9.3} ms\n\
             total           {8:9.3} ms/frame\n\
             throughput      {9:9.2} fps\n\
             hardware        {10}\n",
            self.resolution,
            self.width_scale,
            self.iterations,
            self.warmup,
            s.dark_channel_ms,
            s.guided_filter_ms,
            s.embed_ms,
            s.generator_ms,
            self.total_ms,
            self.fps,
            self.hardware
        )
    }
}

/// Best-effort description of the machine: CPU model, logical cores, target.
pub fn hardware_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|t| {
            t.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown CPU".into());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!(
        "{cpu}, {threads} logical cores, {}-{}",
        std::env::consts::ARCH,
        std::env::consts::OS
    )
}

/// Times the pipeline on one fixed frame: dark channel, guided refinement,
/// embedding and a deterministic generator pass, run serially.
pub fn run_bench(g: &mut Generator, frame: &ImageRgb, prep: &PrepareConfig, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.iterations == 0 || cfg.warmup == 0 {
        return Err(Error::InvalidParameter("iterations and warmup must both be >= 1".into()));
    }
    let r = g.spec().input_resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut once = |g: &mut Generator, acc: &mut [Duration; 4]| -> Result<()> {
        let t0 = Instant::now();
        let img = resize_to(frame, r, r)?;
        let t1 = Instant::now();
        let dc = dark_channel(&img, prep.dark)?;
        let t2 = Instant::now();
        let guide = guided_filter(&img.grayscale(), &dc, prep.guided)?;
        let t3 = Instant::now();
        let x = Tensor::from_stacks(&[stack_guide(img, guide)?])?;
        let t4 = Instant::now();
        let out = g.forward(&x, Mode::EvalDeterministic, &mut rng)?.to_rgbs()?;
        let t5 = Instant::now();
        std::hint::black_box(out);
        acc[0] += t2 - t1;
        acc[1] += t3 - t2;
        acc[2] += (t1 - t0) + (t4 - t3);
        acc[3] += t5 - t4;
        Ok(())
    };
    let mut scratch = [Duration::ZERO; 4];
    for _ in 0..cfg.warmup {
        once(g, &mut scratch)?;
    }
    let mut acc = [Duration::ZERO; 4];
    let start = Instant::now();
    for _ in 0..cfg.iterations {
        once(g, &mut acc)?;
    }
    let wall = start.elapsed().as_secs_f64();
    let per = |d: Duration| d.as_secs_f64() * 1e3 / cfg.iterations as f64;
    Ok(BenchReport {
        stages: StageTimings {
            dark_channel_ms: per(acc[0]),
            guided_filter_ms: per(acc[1]),
            embed_ms: per(acc[2]),
            generator_ms: per(acc[3]),
        },
        total_ms: wall * 1e3 / cfg.iterations as f64,
        fps: cfg.iterations as f64 / wall,
        iterations: cfg.iterations,
        warmup: cfg.warmup,
        resolution: r,
        width_scale: g.spec().width_scale.to_string(),
        hardware: hardware_description(),
    })
}
