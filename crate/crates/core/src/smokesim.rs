//! Procedural smoke: fractal Perlin masks, transmission maps and
//! atmospheric-scattering compositing.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{ImagePlane, ImageRgb};

/// Smoke density grade; each tier owns a closed interval of intensities `l`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntensityTier {
    Low,
    Medium,
    High,
}

impl IntensityTier {
    pub const ALL: [IntensityTier; 3] = [IntensityTier::Low, IntensityTier::Medium, IntensityTier::High];

    /// Closed interval `[lo, hi]` of `l` values for the tier.
    pub fn range(self) -> (f32, f32) {
        match self {
            IntensityTier::Low => (0.40, 0.55),
            IntensityTier::Medium => (0.60, 0.75),
            IntensityTier::High => (0.77, 0.92),
        }
    }

    pub fn contains(self, l: f32) -> bool {
        let (lo, hi) = self.range();
        (lo..=hi).contains(&l)
    }

    pub fn name(self) -> &'static str {
        match self {
            IntensityTier::Low => "low",
            IntensityTier::Medium => "medium",
            IntensityTier::High => "high",
        }
    }
}

impl std::fmt::Display for IntensityTier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for IntensityTier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "low" => Ok(IntensityTier::Low),
            "medium" => Ok(IntensityTier::Medium),
            "high" => Ok(IntensityTier::High),
            other => Err(Error::InvalidParameter(format!(
                "unknown tier `{other}` (expected low, medium or high)"
            ))),
        }
    }
}

/// Everything needed to reproduce one smoked frame from its clear source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmokeParams {
    /// Scales the transmission map; 1 means no attenuation beyond the mask.
    pub intensity: f32,
    pub atmospheric_light: [f32; 3],
    /// Seed of the noise lattice.
    pub seed: u64,
    pub octaves: u32,
    pub persistence: f32,
    /// Lattice cycles across the image width for the first octave.
    pub base_frequency: f32,
}

impl SmokeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.intensity > 0.0 && self.intensity <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "intensity must be in (0, 1], got {}",
                self.intensity
            )));
        }
        if self.atmospheric_light.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidParameter(format!(
                "atmospheric light must lie in [0, 1]^3, got {:?}",
                self.atmospheric_light
            )));
        }
        if self.octaves == 0 {
            return Err(Error::InvalidParameter("octaves must be >= 1".into()));
        }
        if !(self.persistence > 0.0 && self.persistence < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "persistence must be in (0, 1), got {}",
                self.persistence
            )));
        }
        if !(self.base_frequency > 0.0) || !self.base_frequency.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "base frequency must be positive, got {}",
                self.base_frequency
            )));
        }
        Ok(())
    }
}

/// Generation knobs for [`smoke_pair_with`]; the per-sample intensity and
/// seed are drawn separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmokeConfig {
    pub atmospheric_light: [f32; 3],
    /// Draw each light component uniformly from `[0.85, 1.0]` instead of
    /// using `atmospheric_light`.
    pub jitter_light: bool,
    pub octaves: u32,
    pub persistence: f32,
    pub base_frequency: f32,
}

impl Default for SmokeConfig {
    fn default() -> Self {
        Self {
            atmospheric_light: [0.92; 3],
            jitter_light: false,
            octaves: 4,
            persistence: 0.5,
            base_frequency: 4.0,
        }
    }
}

/// 2-D gradient noise lattice with a seeded permutation table.
struct Perlin {
    perm: [u8; 512],
}

const GRADIENTS: [(f64, f64); 8] = [
    (1.0, 0.0),
    (-1.0, 0.0),
    (0.0, 1.0),
    (0.0, -1.0),
    (std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
    (-std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
    (std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2),
    (-std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2),
];

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

impl Perlin {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut table: Vec<u8> = (0..=255).collect();
        table.shuffle(rng);
        let mut perm = [0u8; 512];
        for i in 0..512 {
            perm[i] = table[i & 255];
        }
        Self { perm }
    }

    #[inline]
    fn grad(&self, xi: i64, yi: i64, dx: f64, dy: f64) -> f64 {
        let h = self.perm[self.perm[(xi & 255) as usize] as usize + (yi & 255) as usize];
        let (gx, gy) = GRADIENTS[(h & 7) as usize];
        gx * dx + gy * dy
    }

    fn noise(&self, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (xi, yi) = (x0 as i64, y0 as i64);
        let (fx, fy) = (x - x0, y - y0);
        let (u, v) = (fade(fx), fade(fy));
        let n00 = self.grad(xi, yi, fx, fy);
        let n10 = self.grad(xi + 1, yi, fx - 1.0, fy);
        let n01 = self.grad(xi, yi + 1, fx, fy - 1.0);
        let n11 = self.grad(xi + 1, yi + 1, fx - 1.0, fy - 1.0);
        let top = n00 + u * (n10 - n00);
        let bot = n01 + u * (n11 - n01);
        top + v * (bot - top)
    }
}

/// Octave-summed Perlin noise, min-max normalized to `[0, 1]`.
///
/// Only `seed`, `octaves`, `persistence` and `base_frequency` of `params`
/// are used. A flat field (every sample equal) normalizes to all zeros.
pub fn perlin_mask(height: usize, width: usize, params: &SmokeParams) -> Result<ImagePlane> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidParameter("mask dimensions must be positive".into()));
    }
    if params.octaves == 0 {
        return Err(Error::InvalidParameter("octaves must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let lattice = Perlin::new(&mut rng);
    // random per-octave offsets keep octaves from sharing lattice zeros
    let offsets: Vec<(f64, f64)> = (0..params.octaves)
        .map(|_| (rng.random::<f64>() * 256.0, rng.random::<f64>() * 256.0))
        .collect();

    let scale = params.base_frequency as f64 / width as f64;
    let mut field = vec![0f64; height * width];
    let mut amp = 1.0;
    let mut freq = 1.0;
    for &(ox, oy) in &offsets {
        for y in 0..height {
            for x in 0..width {
                let sx = (x as f64 + 0.5) * scale * freq + ox;
                let sy = (y as f64 + 0.5) * scale * freq + oy;
                field[y * width + x] += amp * lattice.noise(sx, sy);
            }
        }
        amp *= params.persistence as f64;
        freq *= 2.0;
    }
    let (lo, hi) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let data = if span > 0.0 {
        field.iter().map(|&v| ((v - lo) / span) as f32).collect()
    } else {
        vec![0.0; height * width]
    };
    ImagePlane::from_clamped(height, width, data)
}

/// `t = l * (1 - m)`.
pub fn transmission(mask: &ImagePlane, intensity: f32) -> Result<ImagePlane> {
    if !(intensity > 0.0 && intensity <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "intensity must be in (0, 1], got {intensity}"
        )));
    }
    let (h, w) = mask.shape();
    ImagePlane::from_clamped(
        h,
        w,
        mask.data().iter().map(|&m| intensity * (1.0 - m)).collect(),
    )
}

/// Scattering model `I = J * t + (1 - t) * A`, per channel.
pub fn composite(clear: &ImageRgb, t: &ImagePlane, light: [f32; 3]) -> Result<ImageRgb> {
    if clear.shape() != t.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image is {:?} but transmission is {:?}",
            clear.shape(),
            t.shape()
        )));
    }
    let (h, w) = clear.shape();
    let mut planes = Vec::with_capacity(3);
    for (c, a) in light.iter().enumerate() {
        let data = clear
            .plane(c)
            .data()
            .iter()
            .zip(t.data())
            .map(|(&j, &t)| j * t + (1.0 - t) * a)
            .collect();
        planes.push(ImagePlane::from_clamped(h, w, data)?);
    }
    let [r, g, b]: [ImagePlane; 3] = planes.try_into().expect("three channels");
    ImageRgb::from_planes(r, g, b)
}

/// Uniform draw from the tier's closed interval, fixed by `seed`.
pub fn sample_intensity(tier: IntensityTier, seed: u64) -> f32 {
    let (lo, hi) = tier.range();
    ChaCha8Rng::seed_from_u64(seed).random_range(lo..=hi)
}

/// Renders the smoked image and its transmission map for a complete
/// parameter record.
pub fn apply_smoke(clear: &ImageRgb, params: &SmokeParams) -> Result<(ImageRgb, ImagePlane)> {
    params.validate()?;
    let (h, w) = clear.shape();
    let mask = perlin_mask(h, w, params)?;
    let t = transmission(&mask, params.intensity)?;
    let smoked = composite(clear, &t, params.atmospheric_light)?;
    Ok((smoked, t))
}

/// Draws a full [`SmokeParams`] record for `tier` from `seed`.
pub fn draw_params(tier: IntensityTier, seed: u64, cfg: &SmokeConfig) -> SmokeParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intensity = sample_intensity(tier, rng.random());
    let mask_seed = rng.random();
    let atmospheric_light = if cfg.jitter_light {
        [0, 1, 2].map(|_| rng.random_range(0.85f32..=1.0))
    } else {
        cfg.atmospheric_light
    };
    SmokeParams {
        intensity,
        atmospheric_light,
        seed: mask_seed,
        octaves: cfg.octaves,
        persistence: cfg.persistence,
        base_frequency: cfg.base_frequency,
    }
}

/// Smokes `clear` with default generation settings.
pub fn smoke_pair(clear: &ImageRgb, tier: IntensityTier, seed: u64) -> Result<(ImageRgb, SmokeParams)> {
    smoke_pair_with(clear, tier, seed, &SmokeConfig::default())
}

pub fn smoke_pair_with(
    clear: &ImageRgb,
    tier: IntensityTier,
    seed: u64,
    cfg: &SmokeConfig,
) -> Result<(ImageRgb, SmokeParams)> {
    let params = draw_params(tier, seed, cfg);
    let (smoked, _) = apply_smoke(clear, &params)?;
    Ok((smoked, params))
}
