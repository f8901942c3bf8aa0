//! Restoration quality: MSE, PSNR, SSIM and per-tier aggregation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Split};
use crate::dcprior::PrepareConfig;
use crate::error::{Error, Result};
use crate::imagecore::{load_image, ImagePlane, ImageRgb};
use crate::model::checkpoint::Checkpoint;
use crate::model::Generator;
use crate::pipeline::restore;
use crate::smokesim::IntensityTier;

/// PSNR gap treated as a visible difference.
pub const SIGNIFICANCE_DB: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SsimMode {
    /// One evaluation over whole-image moments.
    Global,
    /// Mean over `window x window` patches placed every `stride` pixels.
    Windowed { window: usize, stride: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub max_value: f64,
    pub c1: f64,
    pub c2: f64,
    pub ssim_mode: SsimMode,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self::with_max(1.0)
    }
}

impl MetricConfig {
    /// Standard constants `C1 = (0.01 MAX)^2`, `C2 = (0.03 MAX)^2`.
    pub fn with_max(max_value: f64) -> Self {
        Self {
            max_value,
            c1: (0.01 * max_value).powi(2),
            c2: (0.03 * max_value).powi(2),
            ssim_mode: SsimMode::Global,
        }
    }

    /// For integer images of `bits` depth.
    pub fn for_bits(bits: u32) -> Self {
        Self::with_max(2f64.powi(bits as i32) - 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_value > 0.0 && self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "MAX, C1 and C2 must be positive, got {}, {}, {}",
                self.max_value, self.c1, self.c2
            )));
        }
        if let SsimMode::Windowed { window, stride } = self.ssim_mode {
            if window == 0 || stride == 0 {
                return Err(Error::InvalidParameter("SSIM window and stride must be >= 1".into()));
            }
        }
        Ok(())
    }
}

fn same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("images are {a:?} and {b:?}")));
    }
    Ok(())
}

/// Compensated (Neumaier) sum, so large images do not drift.
fn accurate_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Per-channel mean squared error, averaged over channels.
pub fn mse(i: &ImageRgb, j: &ImageRgb) -> Result<f64> {
    same_shape(i.shape(), j.shape())?;
    let per_channel = i.planes().iter().zip(j.planes()).map(|(a, b)| {
        let s = accurate_sum(a.data().iter().zip(b.data()).map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        }));
        s / a.data().len() as f64
    });
    Ok(per_channel.map(|m| m / 3.0).sum())
}

/// `10 log10(MAX^2 / MSE)` in dB, `+inf` for identical images.
pub fn psnr(i: &ImageRgb, j: &ImageRgb, cfg: &MetricConfig) -> Result<f64> {
    let e = mse(i, j)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (cfg.max_value * cfg.max_value / e).log10())
}

fn ssim_moments(a: &[f64], b: &[f64], c1: f64, c2: f64) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    va /= n;
    vb /= n;
    cov /= n;
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

fn ssim_values(a: &[f64], b: &[f64], (h, w): (usize, usize), cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    match cfg.ssim_mode {
        SsimMode::Global => Ok(ssim_moments(a, b, cfg.c1, cfg.c2)),
        SsimMode::Windowed { window, stride } => {
            if window > h || window > w {
                return Err(Error::InvalidParameter(format!(
                    "SSIM window {window} exceeds image {h}x{w}"
                )));
            }
            let mut total = 0.0;
            let mut count = 0usize;
            let mut pa = Vec::with_capacity(window * window);
            let mut pb = Vec::with_capacity(window * window);
            for y0 in (0..=h - window).step_by(stride) {
                for x0 in (0..=w - window).step_by(stride) {
                    pa.clear();
                    pb.clear();
                    for y in y0..y0 + window {
                        pa.extend_from_slice(&a[y * w + x0..y * w + x0 + window]);
                        pb.extend_from_slice(&b[y * w + x0..y * w + x0 + window]);
                    }
                    total += ssim_moments(&pa, &pb, cfg.c1, cfg.c2);
                    count += 1;
                }
            }
            Ok(total / count as f64)
        }
    }
}

/// SSIM of two single-channel planes.
pub fn ssim_plane(i: &ImagePlane, j: &ImagePlane, cfg: &MetricConfig) -> Result<f64> {
    same_shape(i.shape(), j.shape())?;
    if i == j {
        cfg.validate()?;
        return Ok(1.0);
    }
    let a: Vec<f64> = i.data().iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = j.data().iter().map(|&v| v as f64).collect();
    ssim_values(&a, &b, i.shape(), cfg)
}

fn gray64(img: &ImageRgb) -> Vec<f64> {
    let [r, g, b] = img.planes();
    r.data()
        .iter()
        .zip(g.data())
        .zip(b.data())
        .map(|((&r, &g), &b)| (r as f64 + g as f64 + b as f64) / 3.0)
        .collect()
}

/// SSIM on the grayscale (channel mean) images.
pub fn ssim(i: &ImageRgb, j: &ImageRgb, cfg: &MetricConfig) -> Result<f64> {
    same_shape(i.shape(), j.shape())?;
    if i == j {
        cfg.validate()?;
        return Ok(1.0);
    }
    ssim_values(&gray64(i), &gray64(j), i.shape(), cfg)
}

/// Serializes non-finite dB values as strings (`"inf"`), which JSON numbers
/// cannot express.
mod db {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn format(v: f64) -> String {
        if v == f64::INFINITY {
            "inf".into()
        } else if v == f64::NEG_INFINITY {
            "-inf".into()
        } else if v.is_nan() {
            "nan".into()
        } else {
            format!("{v}")
        }
    }

    pub fn parse(s: &str) -> Option<f64> {
        match s.trim() {
            "inf" => Some(f64::INFINITY),
            "-inf" => Some(f64::NEG_INFINITY),
            "nan" => Some(f64::NAN),
            t => t.parse().ok(),
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&format(*v))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => parse(&t).ok_or_else(|| serde::de::Error::custom(format!("bad value `{t}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub tier: IntensityTier,
    #[serde(with = "db")]
    pub psnr: f64,
    pub ssim: f64,
    /// Scores of the smoked input itself.
    #[serde(with = "db")]
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

impl EvalRow {
    /// PSNR gain of the restoration over the smoked input.
    pub fn gain_db(&self) -> f64 {
        if self.psnr == self.baseline_psnr {
            0.0
        } else {
            self.psnr - self.baseline_psnr
        }
    }

    pub fn significant(&self) -> bool {
        self.gain_db().abs() >= SIGNIFICANCE_DB
    }
}

/// Five-number summary plus mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    #[serde(with = "db")]
    pub mean: f64,
    #[serde(with = "db")]
    pub min: f64,
    #[serde(with = "db")]
    pub q1: f64,
    #[serde(with = "db")]
    pub median: f64,
    #[serde(with = "db")]
    pub q3: f64,
    #[serde(with = "db")]
    pub max: f64,
}

impl Summary {
    /// Quartiles by linear interpolation between order statistics.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                count: 0,
                mean: f64::NAN,
                min: f64::NAN,
                q1: f64::NAN,
                median: f64::NAN,
                q3: f64::NAN,
                max: f64::NAN,
            };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            if lo == hi || v[lo] == v[hi] {
                v[lo]
            } else {
                v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
            }
        };
        Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierSummary {
    pub tier: IntensityTier,
    pub psnr: Summary,
    pub ssim: Summary,
    pub baseline_psnr: Summary,
    pub baseline_ssim: Summary,
    /// Rows whose gain reaches the significance threshold.
    pub significant: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub tiers: Vec<TierSummary>,
    pub overall: TierSummaryAll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierSummaryAll {
    pub psnr: Summary,
    pub ssim: Summary,
    pub baseline_psnr: Summary,
    pub baseline_ssim: Summary,
    pub significant: usize,
}

fn summarize<'a>(rows: impl Iterator<Item = &'a EvalRow> + Clone) -> TierSummaryAll {
    let col = |f: fn(&EvalRow) -> f64| rows.clone().map(f).collect::<Vec<_>>();
    TierSummaryAll {
        psnr: Summary::of(&col(|r| r.psnr)),
        ssim: Summary::of(&col(|r| r.ssim)),
        baseline_psnr: Summary::of(&col(|r| r.baseline_psnr)),
        baseline_ssim: Summary::of(&col(|r| r.baseline_ssim)),
        significant: rows.filter(|r| r.significant()).count(),
    }
}

const CSV_HEADER: &str = "id,tier,psnr_db,ssim,baseline_psnr_db,baseline_ssim,gain_db,significant";

impl EvalReport {
    /// Aggregates rows per tier (tiers without rows are omitted).
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let tiers = IntensityTier::ALL
            .iter()
            .filter(|&&t| rows.iter().any(|r| r.tier == t))
            .map(|&tier| {
                let s = summarize(rows.iter().filter(|r| r.tier == tier));
                TierSummary {
                    tier,
                    psnr: s.psnr,
                    ssim: s.ssim,
                    baseline_psnr: s.baseline_psnr,
                    baseline_ssim: s.baseline_ssim,
                    significant: s.significant,
                }
            })
            .collect();
        let overall = summarize(rows.iter());
        Self { rows, tiers, overall }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.id,
                r.tier,
                db::format(r.psnr),
                r.ssim,
                db::format(r.baseline_psnr),
                r.baseline_ssim,
                db::format(r.gain_db()),
                r.significant()
            );
        }
        out
    }

    /// Parses the rows of [`EvalReport::to_csv`] output and re-aggregates.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::InvalidParameter("not an eval CSV (header mismatch)".into()));
        }
        let bad = |n: usize, what: &str| Error::InvalidParameter(format!("eval CSV line {}: bad {what}", n + 2));
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(n, "field count"));
            }
            let num = |i: usize, what: &str| db::parse(f[i]).ok_or_else(|| bad(n, what));
            rows.push(EvalRow {
                id: f[0].to_string(),
                tier: f[1].parse().map_err(|_| bad(n, "tier"))?,
                psnr: num(2, "psnr")?,
                ssim: num(3, "ssim")?,
                baseline_psnr: num(4, "baseline psnr")?,
                baseline_ssim: num(5, "baseline ssim")?,
            });
        }
        Ok(Self::from_rows(rows))
    }

    /// Per-tier quartiles in long form, one line per (tier, metric, source).
    pub fn boxplot_csv(&self) -> String {
        let mut out = String::from("tier,metric,source,count,min,q1,median,q3,max,mean\n");
        let mut line = |tier: &str, metric: &str, source: &str, s: &Summary| {
            let _ = writeln!(
                out,
                "{tier},{metric},{source},{},{},{},{},{},{},{}",
                s.count,
                db::format(s.min),
                db::format(s.q1),
                db::format(s.median),
                db::format(s.q3),
                db::format(s.max),
                db::format(s.mean)
            );
        };
        for t in &self.tiers {
            let name = t.tier.name();
            line(name, "psnr", "output", &t.psnr);
            line(name, "psnr", "baseline", &t.baseline_psnr);
            line(name, "ssim", "output", &t.ssim);
            line(name, "ssim", "baseline", &t.baseline_ssim);
        }
        out
    }

    /// Writes `eval.csv`, `eval_summary.json` and `eval_boxplot.csv`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("eval.csv", self.to_csv())?;
        put("eval_summary.json", serde_json::to_string_pretty(self)?)?;
        put("eval_boxplot.csv", self.boxplot_csv())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub split: Split,
    pub metric: MetricConfig,
    pub prepare: PrepareConfig,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            metric: MetricConfig::default(),
            prepare: PrepareConfig::default(),
            batch_size: 8,
        }
    }
}

/// Scores a generator on one split of a manifest, with the smoked input as
/// the no-op baseline.
pub fn evaluate_generator(manifest: &DatasetManifest, g: &mut Generator, opts: &EvalOptions) -> Result<EvalReport> {
    opts.metric.validate()?;
    let records: Vec<_> = manifest.records_in(opts.split).collect();
    if records.is_empty() {
        return Err(Error::EmptySplit(opts.split.name().into()));
    }
    let mut rows = Vec::with_capacity(records.len());
    for chunk in records.chunks(opts.batch_size.max(1)) {
        let smoked = chunk
            .iter()
            .map(|r| load_image(manifest.smoked_file(r)))
            .collect::<Result<Vec<_>>>()?;
        let restored = restore(g, &smoked, &opts.prepare)?;
        for ((rec, s), out) in chunk.iter().zip(&smoked).zip(&restored) {
            let clear = load_image(manifest.clear_file(rec))?;
            rows.push(EvalRow {
                id: rec.id.clone(),
                tier: rec.tier,
                psnr: psnr(out, &clear, &opts.metric)?,
                ssim: ssim(out, &clear, &opts.metric)?,
                baseline_psnr: psnr(s, &clear, &opts.metric)?,
                baseline_ssim: ssim(s, &clear, &opts.metric)?,
            });
        }
    }
    Ok(EvalReport::from_rows(rows))
}

/// [`evaluate_generator`] with the generator loaded from a checkpoint.
pub fn evaluate(manifest: &DatasetManifest, checkpoint: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    if manifest.count(opts.split) == 0 {
        return Err(Error::EmptySplit(opts.split.name().into()));
    }
    let mut ck = Checkpoint::load(checkpoint)?;
    evaluate_generator(manifest, &mut ck.generator, opts)
}
