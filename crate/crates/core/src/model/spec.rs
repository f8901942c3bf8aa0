//! Architecture descriptions and their analytic shape traces.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Rational multiplier applied to every filter count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WidthScale {
    pub num: u32,
    pub den: u32,
}

impl WidthScale {
    pub const ONE: WidthScale = WidthScale { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 || num > den {
            return Err(Error::InvalidParameter(format!(
                "width scale must be a ratio in (0, 1], got {num}/{den}"
            )));
        }
        Ok(Self { num, den })
    }

    /// Scales `filters`, failing if the result is not a positive integer.
    pub fn apply(&self, filters: usize) -> Result<usize> {
        let scaled = filters * self.num as usize;
        if scaled % self.den as usize != 0 || scaled == 0 {
            return Err(Error::InvalidParameter(format!(
                "{filters} filters scaled by {self} is not a whole number"
            )));
        }
        Ok(scaled / self.den as usize)
    }
}

impl fmt::Display for WidthScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for WidthScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("cannot parse width scale `{s}`"));
        match s.split_once('/') {
            Some((a, b)) => WidthScale::new(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => WidthScale::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

impl Serialize for WidthScale {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for WidthScale {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Block type of one architecture row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    /// Convolution, batch norm, leaky ReLU.
    C,
    /// Deconvolution, batch norm, ReLU, dropout.
    CTD,
    /// Deconvolution, batch norm, ReLU.
    CT,
    /// Deconvolution then tanh.
    Tanh,
    ZeroPad,
    /// Bare convolution.
    Conv,
    /// Batch norm, leaky ReLU, zero padding.
    NormPad,
}

/// One row of a shape trace. `shape` is `(height, width, channels)` of the
/// row's output, after any skip concatenation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub row: usize,
    pub block: BlockKind,
    /// Filters of the row's (de)convolution, 0 for parameter-free rows.
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub shape: (usize, usize, usize),
    /// For encoder rows: the decoder row that receives this output.
    pub skip_to: Option<usize>,
    /// For decoder rows: the encoder row concatenated onto the output.
    pub skip_from: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub input_resolution: usize,
    pub input_channels: usize,
    pub output_channels: usize,
    pub base_width: usize,
    pub max_width: usize,
    pub width_scale: WidthScale,
    /// Number of leading decoder rows that apply dropout.
    pub dropout_rows: usize,
    pub dropout_rate: f64,
    pub leaky_slope: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            input_resolution: 256,
            input_channels: 4,
            output_channels: 3,
            base_width: 64,
            max_width: 512,
            width_scale: WidthScale::ONE,
            dropout_rows: 3,
            dropout_rate: 0.5,
            leaky_slope: 0.2,
        }
    }
}

impl GeneratorSpec {
    pub fn scaled(resolution: usize, width_scale: WidthScale) -> Self {
        Self {
            input_resolution: resolution,
            width_scale,
            ..Self::default()
        }
    }

    /// Encoder stages needed to reach a 1x1 bottleneck.
    pub fn encoder_depth(&self) -> Result<usize> {
        let r = self.input_resolution;
        if r < 2 || !r.is_power_of_two() {
            return Err(Error::InvalidParameter(format!(
                "generator resolution must be a power of two >= 2, got {r}"
            )));
        }
        Ok(r.trailing_zeros() as usize)
    }

    /// Scaled filter count of encoder row `i` (0-based).
    pub fn encoder_width(&self, i: usize) -> Result<usize> {
        self.width_scale
            .apply((self.base_width << i.min(20)).min(self.max_width))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.output_channels == 0 {
            return Err(Error::InvalidParameter("channel counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidParameter(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        let depth = self.encoder_depth()?;
        for i in 0..depth {
            self.encoder_width(i)?;
        }
        Ok(())
    }

    /// Analytic per-row output shapes: `depth` encoder rows, `depth` decoder
    /// rows and the output row.
    pub fn trace(&self) -> Result<Vec<LayerTrace>> {
        self.validate()?;
        let n = self.encoder_depth()?;
        let rows = 2 * n + 1;
        let widths: Vec<usize> = (0..n).map(|i| self.encoder_width(i)).collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(rows);
        let mut size = self.input_resolution;
        for (i, &w) in widths.iter().enumerate() {
            size /= 2;
            let row = i + 1;
            out.push(LayerTrace {
                row,
                block: BlockKind::C,
                filters: w,
                kernel: 4,
                stride: 2,
                shape: (size, size, w),
                skip_to: (row < n).then_some(rows - row),
                skip_from: None,
            });
        }
        // row n+1 stays at 1x1 and carries the bottleneck alongside
        let bottleneck = widths[n - 1];
        out.push(LayerTrace {
            row: n + 1,
            block: self.decoder_kind(0),
            filters: bottleneck,
            kernel: 4,
            stride: 1,
            shape: (1, 1, 2 * bottleneck),
            skip_to: None,
            skip_from: None,
        });
        for j in 1..n {
            let enc_row = n - j;
            let filters = widths[enc_row - 1];
            size = 1 << j;
            out.push(LayerTrace {
                row: n + 1 + j,
                block: self.decoder_kind(j),
                filters,
                kernel: 4,
                stride: 2,
                shape: (size, size, 2 * filters),
                skip_to: None,
                skip_from: Some(enc_row),
            });
        }
        out.push(LayerTrace {
            row: rows,
            block: BlockKind::Tanh,
            filters: self.output_channels,
            kernel: 4,
            stride: 2,
            shape: (self.input_resolution, self.input_resolution, self.output_channels),
            skip_to: None,
            skip_from: None,
        });
        Ok(out)
    }

    pub(crate) fn decoder_kind(&self, j: usize) -> BlockKind {
        if j < self.dropout_rows {
            BlockKind::CTD
        } else {
            BlockKind::CT
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub input_resolution: usize,
    /// Conditioning stack plus candidate image.
    pub input_channels: usize,
    pub base_width: usize,
    pub max_width: usize,
    pub width_scale: WidthScale,
    /// Stride-2 rows before the zero padding (3 in the reference table).
    pub downsample_rows: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            input_resolution: 256,
            input_channels: 7,
            base_width: 64,
            max_width: 512,
            width_scale: WidthScale::ONE,
            downsample_rows: 3,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorSpec {
    pub fn scaled(resolution: usize, width_scale: WidthScale) -> Self {
        Self {
            input_resolution: resolution,
            width_scale,
            ..Self::default()
        }
    }

    pub(crate) fn width(&self, i: usize) -> Result<usize> {
        self.width_scale
            .apply((self.base_width << i.min(20)).min(self.max_width))
    }

    /// Analytic per-row output shapes.
    pub fn trace(&self) -> Result<Vec<LayerTrace>> {
        if self.downsample_rows == 0 || self.input_channels == 0 {
            return Err(Error::InvalidParameter(
                "discriminator needs at least one downsampling row and one input channel".into(),
            ));
        }
        let mut rows = Vec::new();
        let mut size = self.input_resolution;
        let mut ch = 0;
        let row = |rows: &Vec<LayerTrace>| rows.len() + 1;
        for i in 0..self.downsample_rows {
            if size < 2 || size % 2 != 0 {
                return Err(Error::InvalidParameter(format!(
                    "discriminator resolution {} does not survive {} halvings",
                    self.input_resolution, self.downsample_rows
                )));
            }
            size /= 2;
            ch = self.width(i)?;
            rows.push(LayerTrace {
                row: row(&rows),
                block: BlockKind::C,
                filters: ch,
                kernel: 4,
                stride: 2,
                shape: (size, size, ch),
                skip_to: None,
                skip_from: None,
            });
        }
        size += 2;
        rows.push(LayerTrace {
            row: row(&rows),
            block: BlockKind::ZeroPad,
            filters: 0,
            kernel: 0,
            stride: 0,
            shape: (size, size, ch),
            skip_to: None,
            skip_from: None,
        });
        if size < 4 {
            return Err(Error::InvalidParameter(format!(
                "discriminator resolution {} too small for its stride-1 rows",
                self.input_resolution
            )));
        }
        size -= 3;
        ch = self.width(self.downsample_rows)?;
        rows.push(LayerTrace {
            row: row(&rows),
            block: BlockKind::Conv,
            filters: ch,
            kernel: 4,
            stride: 1,
            shape: (size, size, ch),
            skip_to: None,
            skip_from: None,
        });
        size += 2;
        rows.push(LayerTrace {
            row: row(&rows),
            block: BlockKind::NormPad,
            filters: 0,
            kernel: 0,
            stride: 0,
            shape: (size, size, ch),
            skip_to: None,
            skip_from: None,
        });
        if size < 4 {
            return Err(Error::InvalidParameter(format!(
                "discriminator resolution {} too small for its output row",
                self.input_resolution
            )));
        }
        size -= 3;
        rows.push(LayerTrace {
            row: row(&rows),
            block: BlockKind::Conv,
            filters: 1,
            kernel: 4,
            stride: 1,
            shape: (size, size, 1),
            skip_to: None,
            skip_from: None,
        });
        Ok(rows)
    }
}
