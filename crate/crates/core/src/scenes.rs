//! Procedural stand-ins for clear laparoscopic frames.
//!
//! Used to build desk-scale datasets and test fixtures when real surgical
//! frames are not at hand. Frames are reddish tissue textures with vessels,
//! an occasional grey instrument, specular glints and a scope vignette, so
//! their dark channel is low the way real clear frames are.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imagecore::ImageRgb;
use crate::smokesim::{perlin_mask, SmokeParams};

fn noise(h: usize, w: usize, seed: u64, octaves: u32, freq: f32) -> Vec<f32> {
    let p = SmokeParams {
        intensity: 1.0,
        atmospheric_light: [1.0; 3],
        seed,
        octaves,
        persistence: 0.5,
        base_frequency: freq,
    };
    perlin_mask(h, w, &p).expect("valid noise parameters").into_data()
}

fn smoothstep(e0: f32, e1: f32, x: f32) -> f32 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Deterministic synthetic frame of `height x width` for `seed`.
pub fn synthetic_frame(height: usize, width: usize, seed: u64) -> ImageRgb {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tissue = noise(height, width, rng.random(), 4, 3.0);
    let tint = noise(height, width, rng.random(), 3, 2.0);
    let vessels = noise(height, width, rng.random(), 2, 5.0);

    let base_r = rng.random_range(0.55f32..0.75);
    let base_g = rng.random_range(0.12f32..0.25);
    let base_b = rng.random_range(0.10f32..0.22);

    let tool = rng.random_bool(0.6).then(|| {
        let angle = rng.random_range(0.0f32..std::f32::consts::PI);
        let offset = rng.random_range(-0.3f32..0.3);
        let half_width = rng.random_range(0.05f32..0.1);
        let shade = rng.random_range(0.45f32..0.7);
        (angle.cos(), angle.sin(), offset, half_width, shade)
    });
    let glints: Vec<(f32, f32, f32)> = (0..rng.random_range(1..5))
        .map(|_| {
            (
                rng.random_range(0.15f32..0.85),
                rng.random_range(0.15f32..0.85),
                rng.random_range(0.01f32..0.03),
            )
        })
        .collect();

    ImageRgb::from_fn(height, width, |y, x| {
        let k = y * width + x;
        let u = (x as f32 + 0.5) / width as f32;
        let v = (y as f32 + 0.5) / height as f32;
        let n = tissue[k];
        let m = tint[k];
        let mut px = [
            base_r + 0.3 * (n - 0.5),
            base_g + 0.15 * (m - 0.5) + 0.1 * (n - 0.5),
            base_b + 0.12 * (m - 0.5),
        ];
        let vessel = 1.0 - smoothstep(0.0, 0.04, (vessels[k] - 0.5).abs());
        px[0] -= 0.3 * vessel;
        px[1] -= 0.06 * vessel;

        if let Some((c, s, off, hw, shade)) = tool {
            let d = (u - 0.5) * c + (v - 0.5) * s - off;
            let cover = 1.0 - smoothstep(hw * 0.8, hw, d.abs());
            let sheen = 0.15 * (1.0 - (d / hw).abs()).max(0.0);
            for (ch, tone) in px.iter_mut().zip([shade, shade + 0.02, shade + 0.05]) {
                *ch = *ch * (1.0 - cover) + (tone + sheen) * cover;
            }
        }
        for &(gx, gy, r) in &glints {
            let d = ((u - gx).powi(2) + (v - gy).powi(2)).sqrt();
            let g = 1.0 - smoothstep(r * 0.5, r, d);
            for ch in px.iter_mut() {
                *ch = *ch * (1.0 - g) + 0.97 * g;
            }
        }
        let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt() / 0.5;
        let vignette = 1.0 - 0.75 * smoothstep(0.85, 1.3, r);
        px.map(|c| c * vignette)
    })
}
