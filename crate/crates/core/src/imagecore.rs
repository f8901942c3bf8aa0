//! Raster types and PNG I/O.
//!
//! All rasters hold `f32` samples in `[0, 1]`, row-major. Colour images are
//! planar: three [`ImagePlane`]s of identical shape. [`ImageStack4`] pairs a
//! colour image with a guide plane, which is the network input layout.

use std::fs;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb, Rgba};

use crate::error::{Error, Result};

const PNG_MAGIC: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Single-channel raster.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImagePlane {
    /// Builds a plane from row-major samples, rejecting bad lengths and values
    /// outside `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter(format!(
                "plane dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} plane needs {} samples, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!(
                "sample {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Clamps every sample into `[0, 1]`; non-finite values become 0.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "plane dimensions must be positive");
        assert!((0.0..=1.0).contains(&value), "fill value outside [0, 1]");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    /// Builds a plane by evaluating `f(row, col)`; results are clamped.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(height > 0 && width > 0, "plane dimensions must be positive");
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let v = f(y, x);
                data.push(if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Three-channel (R, G, B) raster stored as planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    planes: [ImagePlane; 3],
}

impl ImageRgb {
    pub fn from_planes(r: ImagePlane, g: ImagePlane, b: ImagePlane) -> Result<Self> {
        if r.shape() != g.shape() || r.shape() != b.shape() {
            return Err(Error::ShapeMismatch(format!(
                "channel planes differ: {:?} {:?} {:?}",
                r.shape(),
                g.shape(),
                b.shape()
            )));
        }
        Ok(Self { planes: [r, g, b] })
    }

    /// Builds an image from an interleaved `RGBRGB...` buffer.
    pub fn from_interleaved(height: usize, width: usize, data: &[f32]) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x3 image needs {} samples, got {}",
                height * width * 3,
                data.len()
            )));
        }
        let plane = |c: usize| {
            ImagePlane::new(height, width, data.iter().skip(c).step_by(3).copied().collect())
        };
        Self::from_planes(plane(0)?, plane(1)?, plane(2)?)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self {
            planes: rgb.map(|v| ImagePlane::filled(height, width, v)),
        }
    }

    /// Builds an image by evaluating `f(row, col) -> [r, g, b]`; results are clamped.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut buf = [
            Vec::with_capacity(height * width),
            Vec::with_capacity(height * width),
            Vec::with_capacity(height * width),
        ];
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for c in 0..3 {
                    buf[c].push(px[c]);
                }
            }
        }
        let [r, g, b] = buf;
        let mk = |d| ImagePlane::from_clamped(height, width, d).expect("dimensions are positive");
        Self {
            planes: [mk(r), mk(g), mk(b)],
        }
    }

    pub fn height(&self) -> usize {
        self.planes[0].height
    }

    pub fn width(&self) -> usize {
        self.planes[0].width
    }

    pub fn shape(&self) -> (usize, usize) {
        self.planes[0].shape()
    }

    pub fn plane(&self, c: usize) -> &ImagePlane {
        &self.planes[c]
    }

    pub fn planes(&self) -> &[ImagePlane; 3] {
        &self.planes
    }

    pub fn into_planes(self) -> [ImagePlane; 3] {
        self.planes
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = y * self.width() + x;
        [
            self.planes[0].data[i],
            self.planes[1].data[i],
            self.planes[2].data[i],
        ]
    }

    /// Per-pixel mean of R, G and B.
    pub fn grayscale(&self) -> ImagePlane {
        let [r, g, b] = &self.planes;
        let data = r
            .data
            .iter()
            .zip(&g.data)
            .zip(&b.data)
            .map(|((&r, &g), &b)| ((r + g + b) / 3.0).clamp(0.0, 1.0))
            .collect();
        ImagePlane {
            height: self.height(),
            width: self.width(),
            data,
        }
    }

    /// Per-pixel minimum over the three channels.
    pub fn channel_min(&self) -> ImagePlane {
        let [r, g, b] = &self.planes;
        let data = r
            .data
            .iter()
            .zip(&g.data)
            .zip(&b.data)
            .map(|((&r, &g), &b)| r.min(g).min(b))
            .collect();
        ImagePlane {
            height: self.height(),
            width: self.width(),
            data,
        }
    }

    pub fn mean(&self) -> f64 {
        self.planes.iter().map(ImagePlane::mean).sum::<f64>() / 3.0
    }

    /// Rounds every sample to the nearest 8-bit level, the same values a
    /// save/load cycle produces.
    pub fn quantized_u8(&self) -> ImageRgb {
        ImageRgb {
            planes: self.planes.clone().map(|p| ImagePlane {
                height: p.height,
                width: p.width,
                data: p.data.iter().map(|&v| quantize_u8(v) as f32 / 255.0).collect(),
            }),
        }
    }
}

/// A colour image with an extra guide plane in the fourth channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStack4 {
    rgb: ImageRgb,
    guide: ImagePlane,
}

impl ImageStack4 {
    pub fn rgb(&self) -> &ImageRgb {
        &self.rgb
    }

    pub fn guide(&self) -> &ImagePlane {
        &self.guide
    }

    pub fn shape(&self) -> (usize, usize) {
        self.rgb.shape()
    }

    pub fn unstack(self) -> (ImageRgb, ImagePlane) {
        (self.rgb, self.guide)
    }
}

/// Attaches `guide` as the fourth channel of `rgb`. Both are moved in as-is.
pub fn stack_guide(rgb: ImageRgb, guide: ImagePlane) -> Result<ImageStack4> {
    if rgb.shape() != guide.shape() {
        return Err(Error::ShapeMismatch(format!(
            "rgb is {:?} but guide is {:?}",
            rgb.shape(),
            guide.shape()
        )));
    }
    Ok(ImageStack4 { rgb, guide })
}

#[inline]
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn read_png(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < PNG_MAGIC.len() || bytes[..8] != PNG_MAGIC {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "not a PNG file".into(),
        });
    }
    image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| {
        Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })
}

fn planes_from_samples<S: Copy + Into<f32>>(
    h: usize,
    w: usize,
    samples: &[S],
    stride: usize,
    scale: f32,
) -> ImageRgb {
    let mut planes = [
        Vec::with_capacity(h * w),
        Vec::with_capacity(h * w),
        Vec::with_capacity(h * w),
    ];
    for px in samples.chunks_exact(stride) {
        for c in 0..3 {
            planes[c].push(px[c].into() / scale);
        }
    }
    ImageRgb {
        planes: planes.map(|data| ImagePlane {
            height: h,
            width: w,
            data,
        }),
    }
}

/// Loads an 8- or 16-bit RGB(A) PNG. Alpha is dropped; samples are divided
/// by `2^B - 1`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRgb> {
    let path = path.as_ref();
    let img = read_png(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match &img {
        DynamicImage::ImageRgb8(buf) => Ok(planes_from_samples(h, w, buf.as_raw(), 3, 255.0)),
        DynamicImage::ImageRgba8(buf) => Ok(planes_from_samples(h, w, buf.as_raw(), 4, 255.0)),
        DynamicImage::ImageRgb16(buf) => Ok(planes_from_samples(h, w, buf.as_raw(), 3, 65535.0)),
        DynamicImage::ImageRgba16(buf) => Ok(planes_from_samples(h, w, buf.as_raw(), 4, 65535.0)),
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_) => Err(Error::ChannelCount {
            path: path.to_path_buf(),
            channels: img.color().channel_count(),
        }),
        other => Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("color type {:?}", other.color()),
        }),
    }
}

/// Loads an 8- or 16-bit grayscale PNG as a plane.
pub fn load_plane(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let img = read_png(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match &img {
        DynamicImage::ImageLuma8(buf) => buf.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => {
            buf.as_raw().iter().map(|&v| v as f32 / 65535.0).collect()
        }
        other => {
            return Err(Error::ChannelCount {
                path: path.to_path_buf(),
                channels: other.color().channel_count(),
            })
        }
    };
    Ok(ImagePlane {
        height: h,
        width: w,
        data,
    })
}

/// Anything that can be written as an 8-bit PNG.
pub trait PngRaster {
    fn write_png(&self, path: &Path) -> Result<()>;
}

fn save_buffer<P, C>(buf: ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::Pixel<Subpixel = u8> + image::PixelWithColorType,
    C: std::ops::Deref<Target = [u8]>,
{
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && !parent.exists() {
            return Err(Error::NotFound(parent.to_path_buf()));
        }
    }
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Codec {
                path: path.to_path_buf(),
                source: other,
            },
        })
}

impl PngRaster for ImagePlane {
    fn write_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.data.iter().map(|&v| quantize_u8(v)).collect();
        let buf = ImageBuffer::<Luma<u8>, _>::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions");
        save_buffer(buf, path)
    }
}

impl PngRaster for ImageRgb {
    fn write_png(&self, path: &Path) -> Result<()> {
        let mut raw = Vec::with_capacity(self.height() * self.width() * 3);
        for i in 0..self.height() * self.width() {
            for p in &self.planes {
                raw.push(quantize_u8(p.data[i]));
            }
        }
        let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(self.width() as u32, self.height() as u32, raw)
            .expect("buffer length matches dimensions");
        save_buffer(buf, path)
    }
}

impl PngRaster for ImageStack4 {
    fn write_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.shape();
        let mut raw = Vec::with_capacity(h * w * 4);
        for i in 0..h * w {
            for p in &self.rgb.planes {
                raw.push(quantize_u8(p.data[i]));
            }
            raw.push(quantize_u8(self.guide.data[i]));
        }
        let buf = ImageBuffer::<Rgba<u8>, _>::from_raw(w as u32, h as u32, raw)
            .expect("buffer length matches dimensions");
        save_buffer(buf, path)
    }
}

/// Writes an 8-bit PNG: grayscale for planes, RGB for colour images, RGBA
/// (guide in alpha) for stacks. Samples are quantized as `round(v * 255)`.
pub fn save_image<R: PngRaster + ?Sized>(img: &R, path: impl AsRef<Path>) -> Result<()> {
    img.write_png(path.as_ref())
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_to(img: &ImageRgb, height: usize, width: usize) -> Result<ImageRgb> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidParameter(format!(
            "target size must be positive, got {height}x{width}"
        )));
    }
    if img.shape() == (height, width) {
        return Ok(img.clone());
    }
    let (ih, iw) = img.shape();
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5)
                    .clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = taps(height, ih);
    let xs = taps(width, iw);
    let planes = img.planes.clone().map(|p| {
        let mut data = Vec::with_capacity(height * width);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let v00 = p.data[y0 * iw + x0] as f64;
                let v01 = p.data[y0 * iw + x1] as f64;
                let v10 = p.data[y1 * iw + x0] as f64;
                let v11 = p.data[y1 * iw + x1] as f64;
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                data.push((top + (bot - top) * fy).clamp(0.0, 1.0) as f32);
            }
        }
        ImagePlane {
            height,
            width,
            data,
        }
    });
    Ok(ImageRgb { planes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_u8_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageRgb {
        ImageRgb::from_fn(h, w, |_, _| {
            [0, 1, 2].map(|_| rng.random::<u8>() as f32 / 255.0)
        })
    }

    #[test]
    fn black_and_white_pngs_normalize() {
        let dir = tempfile::tempdir().unwrap();
        let black = dir.path().join("black.png");
        let white = dir.path().join("white.png");
        image::RgbImage::from_pixel(2, 2, image::Rgb([0, 0, 0]))
            .save(&black)
            .unwrap();
        image::RgbImage::from_pixel(3, 2, image::Rgb([255, 255, 255]))
            .save(&white)
            .unwrap();
        let b = load_image(&black).unwrap();
        assert!(b.planes().iter().all(|p| p.data().iter().all(|&v| v == 0.0)));
        let w = load_image(&white).unwrap();
        assert_eq!(w.shape(), (2, 3));
        assert!(w.planes().iter().all(|p| p.data().iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn sixteen_bit_and_alpha_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p16 = dir.path().join("deep.png");
        let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
            ImageBuffer::from_pixel(2, 2, Rgb([65535, 0, 32768]));
        buf.save(&p16).unwrap();
        let img = load_image(&p16).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 32768.0 / 65535.0]);

        let rgba = dir.path().join("alpha.png");
        image::RgbaImage::from_pixel(2, 2, Rgba([255, 0, 0, 7]))
            .save(&rgba)
            .unwrap();
        assert_eq!(load_image(&rgba).unwrap().pixel(1, 1), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.png");
        assert!(matches!(load_image(&missing), Err(Error::NotFound(p)) if p == missing));

        let text = dir.path().join("text.png");
        fs::write(&text, b"hello, not an image").unwrap();
        assert!(matches!(load_image(&text), Err(Error::UnsupportedFormat { .. })));

        let gray = dir.path().join("gray.png");
        image::GrayImage::from_pixel(2, 2, Luma([9])).save(&gray).unwrap();
        assert!(matches!(
            load_image(&gray),
            Err(Error::ChannelCount { channels: 1, .. })
        ));
    }

    #[test]
    fn random_u8_images_round_trip_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..100 {
            let img = random_u8_image(&mut rng, 1 + i % 7, 1 + (i * 3) % 9);
            let path = dir.path().join(format!("{i}.png"));
            save_image(&img, &path).unwrap();
            assert_eq!(load_image(&path).unwrap(), img);
        }
    }

    #[test]
    fn save_load_error_is_bounded_by_half_step() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = ImageRgb::from_fn(9, 13, |_, _| [rng.random(), rng.random(), rng.random()]);
        let path = dir.path().join("q.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        for c in 0..3 {
            for (a, b) in img.plane(c).data().iter().zip(back.plane(c).data()) {
                assert!((a - b).abs() as f64 <= 1.0 / 510.0 + 1e-7);
            }
        }
    }

    #[test]
    fn half_gray_plane_saves_as_128() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.png");
        save_image(&ImagePlane::filled(3, 4, 0.5), &path).unwrap();
        let raw = image::open(&path).unwrap().into_luma8();
        assert!(raw.pixels().all(|p| p.0[0] == 128));
        // a second cycle changes nothing
        let once = load_plane(&path).unwrap();
        let again = dir.path().join("again.png");
        save_image(&once, &again).unwrap();
        assert_eq!(load_plane(&again).unwrap(), once);
    }

    #[test]
    fn stack_saves_guide_as_fourth_channel() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = ImageRgb::filled(2, 2, [1.0, 0.0, 0.2]);
        let stack = stack_guide(rgb, ImagePlane::filled(2, 2, 0.4)).unwrap();
        let path = dir.path().join("s.png");
        save_image(&stack, &path).unwrap();
        let raw = image::open(&path).unwrap();
        assert_eq!(raw.color().channel_count(), 4);
        let px = raw.into_rgba8().get_pixel(1, 0).0;
        assert_eq!(px, [255, 0, 51, 102]);
    }

    #[test]
    fn stack_keeps_inputs_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rgb = ImageRgb::from_fn(5, 4, |_, _| [rng.random(), rng.random(), rng.random()]);
        let stack = stack_guide(rgb.clone(), ImagePlane::zeros(5, 4)).unwrap();
        assert!(stack.guide().data().iter().all(|&v| v == 0.0));
        assert_eq!(stack.rgb(), &rgb);
        let (r, g) = stack.unstack();
        assert_eq!(r, rgb);
        assert_eq!(g, ImagePlane::zeros(5, 4));
        assert!(matches!(
            stack_guide(rgb, ImagePlane::zeros(4, 5)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn resize_constant_and_identity() {
        let img = ImageRgb::filled(7, 5, [0.3, 0.6, 0.9]);
        let big = resize_to(&img, 13, 21).unwrap();
        for c in 0..3 {
            let want = img.plane(c).get(0, 0);
            assert!(big.plane(c).data().iter().all(|&v| (v - want).abs() < 1e-7));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = ImageRgb::from_fn(16, 16, |_, _| [rng.random(), rng.random(), rng.random()]);
        assert_eq!(resize_to(&r, 16, 16).unwrap(), r);
    }

    #[test]
    fn checkerboard_upscale_matches_bilinear_oracle() {
        let (h, w) = (6, 8);
        let img = ImageRgb::from_fn(h, w, |y, x| {
            let v = if (x + y) % 2 == 0 { 0.9 } else { 0.1 };
            [v, 1.0 - v, v * 0.5]
        });
        let out = resize_to(&img, 2 * h, 2 * w).unwrap();
        // 2x with half-pixel centres: output o samples input at o/2 - 0.25
        let sample = |p: &ImagePlane, sy: f64, sx: f64| -> f64 {
            let sy = sy.max(0.0).min((h - 1) as f64);
            let sx = sx.max(0.0).min((w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (wy, wx) = (sy - y0 as f64, sx - x0 as f64);
            (1.0 - wy) * (1.0 - wx) * p.get(y0, x0) as f64
                + (1.0 - wy) * wx * p.get(y0, x1) as f64
                + wy * (1.0 - wx) * p.get(y1, x0) as f64
                + wy * wx * p.get(y1, x1) as f64
        };
        for c in 0..3 {
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    let want = sample(img.plane(c), oy as f64 / 2.0 - 0.25, ox as f64 / 2.0 - 0.25);
                    let got = out.plane(c).get(oy, ox) as f64;
                    assert!((got - want).abs() <= 1e-6, "({oy},{ox}) {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn plane_rejects_out_of_range() {
        assert!(ImagePlane::new(1, 2, vec![0.5, 1.5]).is_err());
        assert!(ImagePlane::new(1, 2, vec![0.5]).is_err());
        assert!(ImagePlane::new(1, 1, vec![f32::NAN]).is_err());
    }
}
