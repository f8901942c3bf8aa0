//! Guide-channel manipulation probe.
//!
//! The refined dark channel is split into vertical thirds and each third is
//! scaled by its own factor before inference. If the generator uses the guide
//! as a smoke-density hint, a weaker guide should change the frame less and a
//! stronger one more.

use serde::{Deserialize, Serialize};

use crate::dcprior::PrepareConfig;
use crate::error::{Error, Result};
use crate::imagecore::{stack_guide, ImagePlane, ImageRgb, ImageStack4};
use crate::model::Generator;
use crate::pipeline::{prepare_for, restore_stacks};

pub const DEFAULT_FACTORS: [f32; 3] = [0.0, 1.0, 2.0];

/// Column range `[start, end)` of third `k` for an image `width` wide.
pub fn third_bounds(width: usize, k: usize) -> (usize, usize) {
    (k * width / 3, (k + 1) * width / 3)
}

/// Scales the left, middle and right thirds of `guide` by `factors`,
/// clamping to `[0, 1]`.
pub fn scale_thirds(guide: &ImagePlane, factors: [f32; 3]) -> Result<ImagePlane> {
    if factors.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::InvalidParameter(format!(
            "probe factors must be finite and >= 0, got {factors:?}"
        )));
    }
    let (h, w) = guide.shape();
    let bounds = [third_bounds(w, 0), third_bounds(w, 1), third_bounds(w, 2)];
    let data = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| {
            let k = bounds.iter().position(|&(a, b)| x >= a && x < b).unwrap_or(2);
            guide.get(y, x) * factors[k]
        })
        .collect();
    ImagePlane::from_clamped(h, w, data)
}

pub fn manipulate(stack: &ImageStack4, factors: [f32; 3]) -> Result<ImageStack4> {
    stack_guide(stack.rgb().clone(), scale_thirds(stack.guide(), factors)?)
}

/// Restores one frame with its guide thirds scaled by `factors`. Returns the
/// manipulated stack and the output, both at the generator's resolution.
pub fn probe_frame(
    g: &mut Generator,
    smoked: &ImageRgb,
    prep: &PrepareConfig,
    factors: [f32; 3],
) -> Result<(ImageStack4, ImageRgb)> {
    let stack = manipulate(&prepare_for(g, smoked, prep)?, factors)?;
    let out = restore_stacks(g, std::slice::from_ref(&stack))?
        .pop()
        .expect("one output per input");
    Ok((stack, out))
}

fn third_mean_abs(a: &ImageRgb, b: &ImageRgb, k: usize) -> f64 {
    let (h, w) = a.shape();
    let (x0, x1) = third_bounds(w, k);
    let mut sum = 0.0;
    for c in 0..3 {
        for y in 0..h {
            for x in x0..x1 {
                sum += (a.plane(c).get(y, x) as f64 - b.plane(c).get(y, x) as f64).abs();
            }
        }
    }
    sum / (3 * h * (x1 - x0)) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub factors: [f32; 3],
    /// Mean |output - input| over pixels whose guide used `factors[i]`.
    pub mean_abs_change: [f64; 3],
    pub images: usize,
}

impl ProbeStats {
    /// Whether the change grows (weakly) with the factor.
    pub fn non_decreasing(&self) -> bool {
        let mut idx = [0, 1, 2];
        idx.sort_by(|&a, &b| self.factors[a].total_cmp(&self.factors[b]));
        idx.windows(2)
            .all(|p| self.mean_abs_change[p[0]] <= self.mean_abs_change[p[1]])
    }
}

/// Measures how strongly each factor changes the restored frames. Every frame
/// is run three times with the factors rotated across the thirds, so each
/// factor sees each third's content once.
pub fn mask_probe(g: &mut Generator, frames: &[ImageRgb], prep: &PrepareConfig, factors: [f32; 3]) -> Result<ProbeStats> {
    if frames.is_empty() {
        return Err(Error::InvalidParameter("mask probe needs at least one frame".into()));
    }
    let mut acc = [0.0f64; 3];
    for frame in frames {
        let stack = prepare_for(g, frame, prep)?;
        for rot in 0..3 {
            // third k receives factor (k + rot) % 3
            let rotated = [0, 1, 2].map(|k| factors[(k + rot) % 3]);
            let m = manipulate(&stack, rotated)?;
            let out = restore_stacks(g, std::slice::from_ref(&m))?
                .pop()
                .expect("one output per input");
            for k in 0..3 {
                acc[(k + rot) % 3] += third_mean_abs(&out, stack.rgb(), k);
            }
        }
    }
    let n = (frames.len() * 3) as f64;
    Ok(ProbeStats {
        factors,
        mean_abs_change: acc.map(|v| v / n),
        images: frames.len(),
    })
}

/// Places images left to right on a common height.
pub fn side_by_side(images: &[ImageRgb]) -> Result<ImageRgb> {
    let h = images
        .first()
        .map(|i| i.height())
        .ok_or_else(|| Error::InvalidParameter("nothing to compose".into()))?;
    if images.iter().any(|i| i.height() != h) {
        return Err(Error::ShapeMismatch("composite panels differ in height".into()));
    }
    let w: usize = images.iter().map(|i| i.width()).sum();
    let mut offsets = Vec::with_capacity(images.len());
    let mut x0 = 0;
    for img in images {
        offsets.push(x0);
        x0 += img.width();
    }
    Ok(ImageRgb::from_fn(h, w, |y, x| {
        let k = offsets.iter().rposition(|&o| o <= x).expect("offset 0 exists");
        images[k].pixel(y, x - offsets[k])
    }))
}

/// Grey RGB rendering of a single plane.
pub fn plane_as_rgb(p: &ImagePlane) -> ImageRgb {
    let (h, w) = p.shape();
    ImageRgb::from_fn(h, w, |y, x| [p.get(y, x); 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GeneratorSpec, WidthScale};
    use crate::pipeline::restore;
    use crate::scenes::synthetic_frame;

    #[test]
    fn thirds_cover_the_width() {
        for w in [3, 7, 64, 100] {
            assert_eq!(third_bounds(w, 0).0, 0);
            assert_eq!(third_bounds(w, 0).1, third_bounds(w, 1).0);
            assert_eq!(third_bounds(w, 1).1, third_bounds(w, 2).0);
            assert_eq!(third_bounds(w, 2).1, w);
        }
    }

    #[test]
    fn scaling_clamps_and_identity_is_noop() {
        let g = ImagePlane::filled(2, 6, 0.6);
        let s = scale_thirds(&g, [0.0, 1.0, 2.0]).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0, 0.6, 0.6, 1.0, 1.0, 0.0, 0.0, 0.6, 0.6, 1.0, 1.0]);
        assert_eq!(scale_thirds(&g, [1.0; 3]).unwrap(), g);
        assert!(scale_thirds(&g, [-1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn unit_factors_match_plain_inference() {
        let mut g = Generator::new(GeneratorSpec::scaled(16, WidthScale::new(1, 16).unwrap()), 4).unwrap();
        let prep = PrepareConfig {
            dark: crate::dcprior::DarkChannelParams::new(3).unwrap(),
            guided: crate::dcprior::GuidedFilterParams::new(2, 1e-3).unwrap(),
        };
        let f = synthetic_frame(16, 16, 3);
        let (_, out) = probe_frame(&mut g, &f, &prep, [1.0; 3]).unwrap();
        assert_eq!(out, restore(&mut g, &[f.clone()], &prep).unwrap()[0]);
        let stats = mask_probe(&mut g, &[f], &prep, [1.0; 3]).unwrap();
        let m = stats.mean_abs_change;
        assert!((m[0] - m[1]).abs() < 1e-12 && (m[1] - m[2]).abs() < 1e-12);
    }

    #[test]
    fn composite_concatenates_panels() {
        let a = ImageRgb::filled(2, 2, [0.1; 3]);
        let b = ImageRgb::filled(2, 3, [0.9; 3]);
        let c = side_by_side(&[a, b]).unwrap();
        assert_eq!(c.shape(), (2, 5));
        assert_eq!(c.pixel(1, 1), [0.1; 3]);
        assert_eq!(c.pixel(1, 2), [0.9; 3]);
    }

    #[test]
    fn trend_check_orders_by_factor() {
        let s = ProbeStats {
            factors: [2.0, 0.0, 1.0],
            mean_abs_change: [0.3, 0.1, 0.2],
            images: 1,
        };
        assert!(s.non_decreasing());
        let s = ProbeStats {
            mean_abs_change: [0.1, 0.3, 0.2],
            ..s
        };
        assert!(!s.non_decreasing());
    }
}
