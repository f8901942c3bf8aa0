//! Paired clear/smoked datasets and their `manifest.jsonl`.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest.jsonl
//! clear/<id>.png
//! smoked/<id>.png
//! ```
//!
//! The manifest's first line is a header object (`"kind": "header"`), each
//! following line one record (`"kind": "record"`). Paths are relative to the
//! manifest's directory and always use `/`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dcprior::{prepare_input, PrepareConfig};
use crate::error::{Error, Result};
use crate::imagecore::{load_image, resize_to, save_image, ImageRgb, ImageStack4};
use crate::smokesim::{apply_smoke, draw_params, IntensityTier, SmokeConfig, SmokeParams};
use crate::TOOL_VERSION;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Proportions of low / medium / high tiers; must sum to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierMix(pub [f64; 3]);

impl Default for TierMix {
    fn default() -> Self {
        TierMix([1.0 / 3.0; 3])
    }
}

impl TierMix {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.0.iter().sum();
        if self.0.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter(format!(
                "tier proportions must be non-negative and sum to 1, got {:?}",
                self.0
            )));
        }
        Ok(())
    }

    fn pick(&self, u: f64) -> IntensityTier {
        let mut acc = 0.0;
        for (tier, p) in IntensityTier::ALL.iter().zip(self.0) {
            acc += p;
            if u < acc {
                return *tier;
            }
        }
        // u landed in rounding slack; take the last tier with nonzero weight
        IntensityTier::ALL
            .iter()
            .zip(self.0)
            .rev()
            .find(|(_, p)| *p > 0.0)
            .map(|(t, _)| *t)
            .unwrap_or(IntensityTier::High)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub clear_path: String,
    pub smoked_path: String,
    pub tier: IntensityTier,
    pub smoke: SmokeParams,
    pub split: Split,
    /// Source frame path relative to the ingest directory.
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_group: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    resolution: usize,
    global_seed: u64,
    tool_version: String,
    tier_mix: TierMix,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Header(Header),
    Record(PairRecord),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<PairRecord>,
    pub resolution: usize,
    pub global_seed: u64,
    pub tool_version: String,
    pub tier_mix: TierMix,
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &PairRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.records_in(split).count()
    }

    pub fn clear_file(&self, rec: &PairRecord) -> PathBuf {
        self.root.join(&rec.clear_path)
    }

    pub fn smoked_file(&self, rec: &PairRecord) -> PathBuf {
        self.root.join(&rec.smoked_path)
    }

    /// Serializes to the line-delimited format.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&Line::Header(Header {
            resolution: self.resolution,
            global_seed: self.global_seed,
            tool_version: self.tool_version.clone(),
            tier_mix: self.tier_mix,
        }))?;
        out.push('\n');
        for rec in &self.records {
            out.push_str(&serde_json::to_string(&Line::Record(rec.clone()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Settings for [`generate`].
#[derive(Clone, Debug, PartialEq)]
pub struct GenerateConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub tier_mix: TierMix,
    pub resolution: usize,
    pub smoke: SmokeConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_train: 0,
            n_test: 0,
            seed: 0,
            tier_mix: TierMix::default(),
            resolution: 256,
            smoke: SmokeConfig::default(),
        }
    }
}

struct Source {
    rel: String,
    group: Option<String>,
}

fn is_png(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

fn file_name(p: &Path) -> String {
    p.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

/// PNGs directly in `dir` (ungrouped) and one level down (grouped by
/// subdirectory name).
fn scan_sources(dir: &Path) -> Result<Vec<Source>> {
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let mut out = Vec::new();
    for entry in sorted_entries(dir)? {
        if entry.is_dir() {
            let group = file_name(&entry);
            for inner in sorted_entries(&entry)? {
                if is_png(&inner) {
                    out.push(Source {
                        rel: format!("{group}/{}", file_name(&inner)),
                        group: Some(group.clone()),
                    });
                }
            }
        } else if is_png(&entry) {
            out.push(Source {
                rel: file_name(&entry),
                group: None,
            });
        }
    }
    Ok(out)
}

/// Assigns whole groups (ungrouped frames count as singleton groups) to the
/// test split first, then draws the train split from the remaining groups.
fn partition(sources: Vec<Source>, n_train: usize, n_test: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<Source>, Vec<Source>)> {
    let found = sources.len();
    let mut units: Vec<Vec<Source>> = Vec::new();
    for s in sources {
        match (&s.group, units.last_mut()) {
            (Some(g), Some(last)) if last[0].group.as_ref() == Some(g) => last.push(s),
            _ => units.push(vec![s]),
        }
    }
    units.shuffle(rng);

    let mut test = Vec::new();
    let mut rest = Vec::new();
    for unit in units {
        if test.len() < n_test {
            test.extend(unit);
        } else {
            rest.extend(unit);
        }
    }
    if test.len() < n_test || rest.len() < n_train {
        return Err(Error::InsufficientSources {
            needed: n_train + n_test,
            found,
        });
    }
    test.truncate(n_test);
    rest.truncate(n_train);
    Ok((rest, test))
}

/// Builds a paired dataset from the clear frames in `clear_dir`.
///
/// Every frame is resized to `resolution` square, quantized to 8 bits and
/// smoked with parameters drawn from `seed`; the smoked frame is computed
/// from the quantized clear frame, so it can be re-derived exactly from the
/// files on disk.
pub fn generate(clear_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>, cfg: &GenerateConfig) -> Result<DatasetManifest> {
    let clear_dir = clear_dir.as_ref();
    let out_dir = out_dir.as_ref();
    cfg.tier_mix.validate()?;
    if cfg.resolution == 0 {
        return Err(Error::InvalidParameter("resolution must be positive".into()));
    }
    let sources = scan_sources(clear_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train, test) = partition(sources, cfg.n_train, cfg.n_test, &mut rng)?;

    for sub in ["clear", "smoked"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let mut records = Vec::with_capacity(train.len() + test.len());
    for (split, list) in [(Split::Train, train), (Split::Test, test)] {
        for (i, src) in list.into_iter().enumerate() {
            let id = format!("{}_{i:05}", split.name());
            let tier = cfg.tier_mix.pick(rng.random());
            let smoke = draw_params(tier, rng.random(), &cfg.smoke);

            let frame = load_image(clear_dir.join(&src.rel))?;
            let clear = resize_to(&frame, cfg.resolution, cfg.resolution)?.quantized_u8();
            let (smoked, _) = apply_smoke(&clear, &smoke)?;

            let rec = PairRecord {
                clear_path: format!("clear/{id}.png"),
                smoked_path: format!("smoked/{id}.png"),
                id,
                tier,
                smoke,
                split,
                source: src.rel,
                source_group: src.group,
            };
            save_image(&clear, out_dir.join(&rec.clear_path))?;
            save_image(&smoked, out_dir.join(&rec.smoked_path))?;
            records.push(rec);
        }
    }

    let manifest = DatasetManifest {
        records,
        resolution: cfg.resolution,
        global_seed: cfg.seed,
        tool_version: TOOL_VERSION.to_string(),
        tier_mix: cfg.tier_mix,
        root: out_dir.to_path_buf(),
    };
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Parses a manifest and checks that every referenced file exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let parse_err = |line: usize, message: String| Error::ManifestParse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut header = None;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (n, raw) in text.lines().enumerate() {
        let lineno = n + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let line: Line = serde_json::from_str(raw).map_err(|e| parse_err(lineno, e.to_string()))?;
        match line {
            Line::Header(h) => {
                if header.is_some() || !records.is_empty() {
                    return Err(parse_err(lineno, "header must be the first line".into()));
                }
                header = Some(h);
            }
            Line::Record(r) => {
                if header.is_none() {
                    return Err(parse_err(lineno, "record before header".into()));
                }
                if !seen.insert(r.id.clone()) {
                    return Err(Error::DuplicateId(r.id));
                }
                records.push(r);
            }
        }
    }
    let header = header.ok_or_else(|| parse_err(1, "missing header line".into()))?;
    let manifest = DatasetManifest {
        records,
        resolution: header.resolution,
        global_seed: header.global_seed,
        tool_version: header.tool_version,
        tier_mix: header.tier_mix,
        root,
    };
    for rec in &manifest.records {
        for file in [manifest.clear_file(rec), manifest.smoked_file(rec)] {
            if !file.is_file() {
                return Err(Error::MissingRecordFile {
                    id: rec.id.clone(),
                    path: file,
                });
            }
        }
    }
    Ok(manifest)
}

/// A prepared network input with its clear target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub input: ImageStack4,
    pub target: ImageRgb,
}

/// Loads one record's smoked frame, builds its 4-channel input and loads the
/// clear target.
pub fn load_sample(manifest: &DatasetManifest, rec: &PairRecord, prep: &PrepareConfig) -> Result<Sample> {
    let smoked = load_image(manifest.smoked_file(rec))?;
    let target = load_image(manifest.clear_file(rec))?;
    Ok(Sample {
        id: rec.id.clone(),
        input: prepare_input(&smoked, prep)?,
        target,
    })
}

/// Deterministic permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, shuffle_seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    idx
}

/// Lazily loaded batches over one split.
pub struct Batches<'a> {
    manifest: &'a DatasetManifest,
    records: Vec<&'a PairRecord>,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    prep: PrepareConfig,
}

impl Iterator for Batches<'_> {
    type Item = Result<Vec<Sample>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end]
            .iter()
            .map(|&i| load_sample(self.manifest, self.records[i], &self.prep))
            .collect();
        self.pos = end;
        Some(batch)
    }
}

/// Shuffled batches of `(input, target)` samples; the last batch may be short.
pub fn batches<'a>(
    manifest: &'a DatasetManifest,
    split: Split,
    batch_size: usize,
    shuffle_seed: u64,
    prep: PrepareConfig,
) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be >= 1".into()));
    }
    let records: Vec<&PairRecord> = manifest.records_in(split).collect();
    let order = epoch_order(records.len(), shuffle_seed);
    Ok(Batches {
        manifest,
        records,
        order,
        batch_size,
        pos: 0,
        prep,
    })
}
