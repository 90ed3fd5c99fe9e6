//! Rasterizes an input window into a grayscale line chart whose width is an
//! exact multiple of the temporal patch count.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary line-chart image, row 0 at the top.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chart {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl Chart {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel(&self, row: usize, col: usize) -> f64 {
        f64::from(self.pixels[row * self.width + col])
    }

    /// Rows holding a lit pixel in column `col`, top to bottom.
    pub fn lit_rows(&self, col: usize) -> Vec<usize> {
        (0..self.height)
            .filter(|&r| self.pixels[r * self.width + col] != 0)
            .collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| f64::from(p)).collect();
        Tensor::new(vec![self.height, self.width], data).expect("chart dimensions are positive")
    }
}

/// Renders `x_enc` (`[L x D]`) as a `height x (patch_count * height)` chart.
///
/// All variables share one min-max scale per window. Column `c` samples the
/// piecewise-linear series at time `c * (L - 1) / (W - 1)`, so each column
/// receives exactly one lit pixel per variable and column band `k` lines up
/// with temporal patch `k`.
pub fn render_chart(x_enc: &Tensor, height: usize, patch_count: usize) -> Result<Chart> {
    if patch_count == 0 || height == 0 {
        return Err(Error::Config(format!(
            "chart needs positive height and patch count, got {height} and {patch_count}"
        )));
    }
    if x_enc.rank() != 2 {
        return Err(Error::shape("render_chart", format!("{:?} is not [L x D]", x_enc.shape())));
    }
    if !x_enc.is_finite() {
        return Err(Error::Numeric("chart input contains non-finite values".into()));
    }
    let (len, vars) = (x_enc.shape()[0], x_enc.shape()[1]);
    let width = patch_count * height;
    let (lo, hi) = x_enc
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;

    let mut pixels = vec![0u8; height * width];
    for col in 0..width {
        let t = if width > 1 && len > 1 {
            col as f64 * (len - 1) as f64 / (width - 1) as f64
        } else {
            0.0
        };
        let left = (t.floor() as usize).min(len - 1);
        let right = (left + 1).min(len - 1);
        let frac = t - left as f64;
        for v in 0..vars {
            let value = x_enc.at(left, v) * (1.0 - frac) + x_enc.at(right, v) * frac;
            let scaled = if span > 0.0 { (value - lo) / span } else { 0.5 };
            let row = ((1.0 - scaled) * (height - 1) as f64).round() as usize;
            pixels[row.min(height - 1) * width + col] = 1;
        }
    }
    Ok(Chart {
        height,
        width,
        pixels,
    })
}
