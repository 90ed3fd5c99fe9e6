//! Chart image encoder: vertical-strip patches aligned with the temporal
//! patches, a positional grid collapsed and bicubically resampled to the
//! strip count, and a bidirectional transformer encoder.

use crate::config::{Ablation, ModelConfig};
use crate::data::Chart;
use crate::error::{Error, Result};
use crate::nn::{EncoderBlock, Linear};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Splits a `[H x W]` image into `count` vertical strips and flattens each
/// into a row: the result is `[count x H*(W/count)]`.
pub fn partition_strips(image: &Tensor, count: usize) -> Result<Tensor> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if count == 0 || w % count != 0 {
        return Err(Error::Partition { width: w, count });
    }
    let pw = w / count;
    let mut data = Vec::with_capacity(h * w);
    for k in 0..count {
        for r in 0..h {
            data.extend_from_slice(&image.data()[r * w + k * pw..r * w + (k + 1) * pw]);
        }
    }
    Tensor::new(vec![count, h * pw], data)
}

/// Splits a `[H x W]` image into a `grid x grid` set of equal tiles, in
/// row-major tile order: `[grid^2 x (H/grid)*(W/grid)]`.
pub fn partition_grid(image: &Tensor, grid: usize) -> Result<Tensor> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(Error::Partition { width: w, count: grid });
    }
    let (ph, pw) = (h / grid, w / grid);
    let mut data = Vec::with_capacity(h * w);
    for gr in 0..grid {
        for gc in 0..grid {
            for r in gr * ph..(gr + 1) * ph {
                data.extend_from_slice(&image.data()[r * w + gc * pw..r * w + (gc + 1) * pw]);
            }
        }
    }
    Tensor::new(vec![grid * grid, ph * pw], data)
}

/// Cubic convolution kernel with `a = -0.5`.
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// `[dst x src]` bicubic resampling matrix with half-pixel centers and edge
/// clamping. Rows sum to 1; equal lengths give the identity.
pub fn bicubic_matrix(src: usize, dst: usize) -> Tensor {
    let scale = src as f64 / dst as f64;
    let mut m = vec![0.0; dst * src];
    for i in 0..dst {
        let pos = (i as f64 + 0.5) * scale - 0.5;
        let base = pos.floor();
        let frac = pos - base;
        for offset in -1i64..=2 {
            let j = (base as i64 + offset).clamp(0, src as i64 - 1) as usize;
            m[i * src + j] += cubic(frac - offset as f64);
        }
    }
    Tensor::new(vec![dst, src], m).expect("positive dimensions")
}

/// `[grid x grid^2]` matrix averaging each column of a row-major grid.
fn column_mean_matrix(grid: usize) -> Tensor {
    let mut m = vec![0.0; grid * grid * grid];
    for c in 0..grid {
        for r in 0..grid {
            m[c * grid * grid + r * grid + c] = 1.0 / grid as f64;
        }
    }
    Tensor::new(vec![grid, grid * grid], m).expect("positive dimensions")
}

/// Collapses a `[grid^2 x d]` positional grid to `[count x d]`: average over
/// grid rows, then bicubic along the width. Linear in `pe`.
pub fn interpolate_pos_embedding(pe: &Tensor, grid: usize, count: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pe = tape.constant(pe.clone());
    let out = interpolate_on_tape(&mut tape, pe, grid, count)?;
    Ok(tape.value(out).clone())
}

fn interpolate_on_tape(tape: &mut Tape, pe: Var, grid: usize, count: usize) -> Result<Var> {
    let collapse = tape.constant(column_mean_matrix(grid));
    let resample = tape.constant(bicubic_matrix(grid, count));
    let rows = tape.matmul(collapse, pe)?;
    tape.matmul(resample, rows)
}

/// 2-D bicubic resize of a row-major `[g^2 x d]` grid to `[n^2 x d]`.
fn resize_grid_matrix(src: usize, dst: usize) -> Tensor {
    let r = bicubic_matrix(src, dst);
    let mut m = vec![0.0; dst * dst * src * src];
    for i in 0..dst {
        for j in 0..dst {
            for a in 0..src {
                for b in 0..src {
                    m[(i * dst + j) * src * src + a * src + b] = r.at(i, a) * r.at(j, b);
                }
            }
        }
    }
    Tensor::new(vec![dst * dst, src * src], m).expect("positive dimensions")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchLayout {
    /// `T` vertical strips, one per temporal patch.
    Strips { count: usize },
    /// Square `grid x grid` tiling; outputs are column-pooled and resampled
    /// to `count` rows so they still align with the temporal patches.
    Grid { grid: usize, count: usize },
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub layout: PatchLayout,
    pub proj: Linear,
    /// `[pe_grid^2 x d]` positional grid.
    pub pos: ParamId,
    pub pe_grid: usize,
    pub blocks: Vec<EncoderBlock>,
}

fn largest_common_divisor_up_to(a: usize, b: usize, limit: usize) -> usize {
    (1..=limit.max(1)).rev().find(|g| a.is_multiple_of(*g) && b.is_multiple_of(*g)).unwrap_or(1)
}

impl ImageEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let t = cfg.patch_count();
        let (h, w) = (cfg.chart_height, cfg.chart_height * t);
        let (layout, patch_area) = if cfg.has(Ablation::NoMgtsVit) {
            let grid = largest_common_divisor_up_to(h, w, cfg.pe_grid);
            (PatchLayout::Grid { grid, count: t }, (h / grid) * (w / grid))
        } else {
            (PatchLayout::Strips { count: t }, h * (w / t))
        };
        let g = cfg.pe_grid;
        Ok(Self {
            layout,
            proj: Linear::new(pb, "image.proj", patch_area, d)?,
            pos: pb.glorot_shaped("image.pos", &[g * g, d], g * g, d)?,
            pe_grid: g,
            blocks: (0..cfg.image_depth)
                .map(|i| EncoderBlock::new(pb, &format!("image.block{i}"), d, cfg.attn_heads, cfg.ffn_mult * d, cfg.rms_eps))
                .collect::<Result<_>>()?,
        })
    }

    /// Projected patches plus positional rows: the encoder input `z`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor) -> Result<Var> {
        let pe = tape.param(store, self.pos);
        let (patches, pos) = match self.layout {
            PatchLayout::Strips { count } => {
                let p = partition_strips(image, count)?;
                (p, interpolate_on_tape(tape, pe, self.pe_grid, count)?)
            }
            PatchLayout::Grid { grid, .. } => {
                let p = partition_grid(image, grid)?;
                let pos = if grid == self.pe_grid {
                    pe
                } else {
                    let m = tape.constant(resize_grid_matrix(self.pe_grid, grid));
                    tape.matmul(m, pe)?
                };
                (p, pos)
            }
        };
        let patches = tape.constant(patches);
        let x = self.proj.forward(tape, store, patches)?;
        tape.add(x, pos)
    }

    pub fn encode_tokens(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let mut h = z;
        for block in &self.blocks {
            h = block.forward(tape, store, h)?;
        }
        Ok(h)
    }

    /// Chart to `[T x d]` image node features.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, chart: &Chart) -> Result<Var> {
        let image = chart.to_tensor();
        let z = self.embed(tape, store, &image)?;
        let h = self.encode_tokens(tape, store, z)?;
        match self.layout {
            PatchLayout::Strips { .. } => Ok(h),
            PatchLayout::Grid { grid, count } => {
                let pool = tape.constant(column_mean_matrix(grid));
                let cols = tape.matmul(pool, h)?;
                let resample = tape.constant(bicubic_matrix(grid, count));
                tape.matmul(resample, cols)
            }
        }
    }
}
