//! Dark channel extraction, guided-filter refinement and the four-channel
//! network input.
//!
//! Borders are handled by edge replication throughout: the windowed minimum
//! and every box mean see the nearest in-bounds sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{stack_guide, ImagePlane, ImageRgb, ImageStack4};

/// Side length `s` of the square window used by [`dark_channel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DarkChannelParams {
    pub kernel_size: usize,
}

impl Default for DarkChannelParams {
    fn default() -> Self {
        Self { kernel_size: 15 }
    }
}

impl DarkChannelParams {
    pub fn new(kernel_size: usize) -> Result<Self> {
        let p = Self { kernel_size };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "dark channel kernel must be odd and >= 1, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidedFilterParams {
    /// Window side is `2 * radius + 1`.
    pub radius: usize,
    pub epsilon: f64,
}

impl Default for GuidedFilterParams {
    fn default() -> Self {
        Self {
            radius: 20,
            epsilon: 1e-3,
        }
    }
}

impl GuidedFilterParams {
    pub fn new(radius: usize, epsilon: f64) -> Result<Self> {
        let p = Self { radius, epsilon };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if self.radius == 0 {
            return Err(Error::InvalidParameter("guided filter radius must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "guided filter epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Parameters for turning an RGB frame into the network's 4-channel input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrepareConfig {
    pub dark: DarkChannelParams,
    pub guided: GuidedFilterParams,
}

/// Sliding-window minimum along one line with replicated edges.
fn min_filter_line(src: &[f32], dst: &mut [f32], half: usize) {
    let n = src.len();
    for (i, out) in dst.iter_mut().enumerate() {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        // replicated samples beyond the edge equal src[0] / src[n-1], which
        // are already inside [lo, hi] whenever the window crosses an edge
        *out = src[lo..=hi].iter().copied().fold(f32::INFINITY, f32::min);
    }
}

/// Windowed minimum over all three channels.
///
/// Computed as the per-pixel channel minimum followed by a separable
/// horizontal then vertical minimum filter.
pub fn dark_channel(img: &ImageRgb, params: DarkChannelParams) -> Result<ImagePlane> {
    params.validate()?;
    let (h, w) = img.shape();
    if params.kernel_size > h.min(w) {
        return Err(Error::InvalidParameter(format!(
            "kernel {} larger than image {h}x{w}",
            params.kernel_size
        )));
    }
    let half = params.kernel_size / 2;
    let cmin = img.channel_min().into_data();

    let mut rows = vec![0f32; h * w];
    for y in 0..h {
        min_filter_line(&cmin[y * w..(y + 1) * w], &mut rows[y * w..(y + 1) * w], half);
    }
    let mut out = vec![0f32; h * w];
    let mut col = vec![0f32; h];
    let mut col_out = vec![0f32; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = rows[y * w + x];
        }
        min_filter_line(&col, &mut col_out, half);
        for y in 0..h {
            out[y * w + x] = col_out[y];
        }
    }
    ImagePlane::new(h, w, out)
}

/// Mean over a `(2r+1)^2` window with replicated edges, via running sums.
fn box_mean(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let side = 2 * r + 1;
    let norm = (side * side) as f64;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    let mut horiz = vec![0f64; h * w];
    let mut prefix = vec![0f64; w + 2 * r + 1];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for k in 0..w + 2 * r {
            prefix[k + 1] = prefix[k] + row[clamp(k as isize - r as isize, w)];
        }
        for x in 0..w {
            horiz[y * w + x] = prefix[x + side] - prefix[x];
        }
    }
    let mut out = vec![0f64; h * w];
    let mut prefix = vec![0f64; h + 2 * r + 1];
    for x in 0..w {
        for k in 0..h + 2 * r {
            prefix[k + 1] = prefix[k] + horiz[clamp(k as isize - r as isize, h) * w + x];
        }
        for y in 0..h {
            out[y * w + x] = (prefix[y + side] - prefix[y]) / norm;
        }
    }
    out
}

/// Unclamped guided filter output in `f64`.
fn guided_filter_raw(guide: &ImagePlane, p: &ImagePlane, params: GuidedFilterParams) -> Result<Vec<f64>> {
    params.validate()?;
    if guide.shape() != p.shape() {
        return Err(Error::ShapeMismatch(format!(
            "guide is {:?} but input is {:?}",
            guide.shape(),
            p.shape()
        )));
    }
    let (h, w) = guide.shape();
    let r = params.radius;
    let g: Vec<f64> = guide.data().iter().map(|&v| v as f64).collect();
    let q: Vec<f64> = p.data().iter().map(|&v| v as f64).collect();
    let gq: Vec<f64> = g.iter().zip(&q).map(|(a, b)| a * b).collect();
    let gg: Vec<f64> = g.iter().map(|a| a * a).collect();

    let mean_g = box_mean(&g, h, w, r);
    let mean_q = box_mean(&q, h, w, r);
    let mean_gq = box_mean(&gq, h, w, r);
    let mean_gg = box_mean(&gg, h, w, r);

    let mut a = vec![0f64; h * w];
    let mut b = vec![0f64; h * w];
    for i in 0..h * w {
        let var = (mean_gg[i] - mean_g[i] * mean_g[i]).max(0.0);
        let cov = mean_gq[i] - mean_g[i] * mean_q[i];
        a[i] = cov / (var + params.epsilon);
        b[i] = mean_q[i] - a[i] * mean_g[i];
    }
    let mean_a = box_mean(&a, h, w, r);
    let mean_b = box_mean(&b, h, w, r);
    Ok((0..h * w).map(|i| mean_a[i] * g[i] + mean_b[i]).collect())
}

/// Edge-preserving smoothing of `p` steered by `guide`.
///
/// Per window: `a = cov(I, p) / (var(I) + eps)`, `b = mean(p) - a * mean(I)`;
/// the output at each pixel is `mean(a) * I + mean(b)` with the coefficient
/// means taken over every window covering that pixel. The result is clamped
/// to `[0, 1]`.
pub fn guided_filter(guide: &ImagePlane, p: &ImagePlane, params: GuidedFilterParams) -> Result<ImagePlane> {
    let raw = guided_filter_raw(guide, p, params)?;
    let (h, w) = guide.shape();
    ImagePlane::from_clamped(h, w, raw.into_iter().map(|v| v as f32).collect())
}

/// Dark channel smoothed by a guided filter whose guide is the grayscale
/// (channel mean) image.
pub fn refined_dark_channel(
    img: &ImageRgb,
    dark: DarkChannelParams,
    guided: GuidedFilterParams,
) -> Result<ImagePlane> {
    let dc = dark_channel(img, dark)?;
    guided_filter(&img.grayscale(), &dc, guided)
}

/// Builds the 4-channel network input: the RGB frame plus its refined dark
/// channel.
pub fn prepare_input(img: &ImageRgb, cfg: &PrepareConfig) -> Result<ImageStack4> {
    let guide = refined_dark_channel(img, cfg.dark, cfg.guided)?;
    stack_guide(img.clone(), guide)
}
