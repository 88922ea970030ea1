//! Tiled denoising of canvases larger than the trained latent size.
//!
//! Each step crops every tile, runs the model and the Euler update on the
//! crop, and fuses the per-tile proposals with a separable Hann window.
//! Fusion is accumulated relative to a reference proposal (the first rect
//! covering the pixel), so a single tile reproduces its proposal bit for bit
//! and equal proposals fuse to exactly that value.

use autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imageio::GrayImage;
use crate::scheduler::{self, NoiseSchedule, TimestepSelection};

pub const WINDOW_FLOOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileLayout {
    pub canvas: (usize, usize),
    pub tile: (usize, usize),
    pub stride: (usize, usize),
    pub rects: Vec<Rect>,
    /// Row-major tile weights in [0.01, 1].
    pub window: Vec<f64>,
}

fn axis_positions(canvas: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut pos = vec![0];
    while pos[pos.len() - 1] + tile < canvas {
        let next = (pos[pos.len() - 1] + stride).min(canvas - tile);
        pos.push(next);
    }
    pos
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| (std::f64::consts::PI * (i as f64 + 0.5) / n as f64).sin().powi(2)).collect()
}

pub fn plan_tiles(canvas: (usize, usize), tile: (usize, usize), stride: (usize, usize)) -> Result<TileLayout> {
    if tile.0 == 0 || tile.1 == 0 {
        return Err(invalid("tile must be non-empty"));
    }
    if tile.0 > canvas.0 || tile.1 > canvas.1 {
        return Err(invalid(format!("tile {tile:?} is larger than canvas {canvas:?}")));
    }
    if stride.0 == 0 || stride.1 == 0 || stride.0 > tile.0 || stride.1 > tile.1 {
        return Err(invalid(format!("stride {stride:?} must satisfy 0 < stride <= tile {tile:?}")));
    }
    let ys = axis_positions(canvas.0, tile.0, stride.0);
    let xs = axis_positions(canvas.1, tile.1, stride.1);
    let rects = ys.iter().flat_map(|&y| xs.iter().map(move |&x| Rect { y, x, h: tile.0, w: tile.1 })).collect();
    let (wy, wx) = (hann(tile.0), hann(tile.1));
    let window = wy.iter().flat_map(|a| wx.iter().map(move |b| (a * b).max(WINDOW_FLOOR))).collect();
    Ok(TileLayout { canvas, tile, stride, rects, window })
}

/// Default stride: half the tile, at least 1.
pub fn default_stride(tile: (usize, usize)) -> (usize, usize) {
    ((tile.0 / 2).max(1), (tile.1 / 2).max(1))
}

impl TileLayout {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Latent rows / columns where some rect starts or ends, excluding the
    /// canvas border.
    pub fn edge_lines(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rows: Vec<usize> = self.rects.iter().flat_map(|r| [r.y, r.y + r.h]).collect();
        let mut cols: Vec<usize> = self.rects.iter().flat_map(|r| [r.x, r.x + r.w]).collect();
        rows.retain(|&v| v > 0 && v < self.canvas.0);
        cols.retain(|&v| v > 0 && v < self.canvas.1);
        rows.sort_unstable();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        (rows, cols)
    }
}

/// Copy rect `r` out of a (c, H, W) tensor.
pub fn crop(z: &Tensor, r: &Rect) -> Tensor {
    let (c, _, w) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let mut out = Vec::with_capacity(c * r.h * r.w);
    for ch in 0..c {
        for y in r.y..r.y + r.h {
            let base = (ch * z.shape()[1] + y) * w + r.x;
            out.extend_from_slice(&z.data()[base..base + r.w]);
        }
    }
    Tensor::new(vec![c, r.h, r.w], out)
}

/// Accumulates weighted deviations from the reference proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionAccumulator {
    pub shape: Vec<usize>,
    pub reference: Vec<f64>,
    pub reference_rect: Vec<usize>,
    pub value_sum: Vec<f64>,
    pub weight_sum: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl FusionAccumulator {
    /// Reference = proposal of the lowest-index rect covering each pixel.
    pub fn new(layout: &TileLayout, channels: usize, proposals: &[Tensor]) -> Result<Self> {
        let (hh, ww) = layout.canvas;
        let n = channels * hh * ww;
        let mut reference = vec![f64::NAN; n];
        let mut reference_rect = vec![usize::MAX; hh * ww];
        for (k, (r, p)) in layout.rects.iter().zip(proposals).enumerate() {
            for y in 0..r.h {
                for x in 0..r.w {
                    let pix = (r.y + y) * ww + r.x + x;
                    if reference_rect[pix] == usize::MAX {
                        reference_rect[pix] = k;
                        for ch in 0..channels {
                            reference[ch * hh * ww + pix] = p.data()[(ch * r.h + y) * r.w + x];
                        }
                    }
                }
            }
        }
        if reference_rect.contains(&usize::MAX) {
            return Err(invalid("tile layout does not cover the canvas"));
        }
        Ok(Self {
            shape: vec![channels, hh, ww],
            lo: reference.clone(),
            hi: reference.clone(),
            reference,
            reference_rect,
            value_sum: vec![0.0; n],
            weight_sum: vec![0.0; hh * ww],
        })
    }

    pub fn add(&mut self, rect: &Rect, window: &[f64], proposal: &Tensor) {
        let (c, hh, ww) = (self.shape[0], self.shape[1], self.shape[2]);
        for y in 0..rect.h {
            for x in 0..rect.w {
                let pix = (rect.y + y) * ww + rect.x + x;
                let w = window[y * rect.w + x];
                self.weight_sum[pix] += w;
                for ch in 0..c {
                    let i = ch * hh * ww + pix;
                    let p = proposal.data()[(ch * rect.h + y) * rect.w + x];
                    self.value_sum[i] += w * (p - self.reference[i]);
                    self.lo[i] = self.lo[i].min(p);
                    self.hi[i] = self.hi[i].max(p);
                }
            }
        }
    }

    /// reference + value_sum / weight_sum, clamped to the proposal range.
    pub fn finish(&self) -> Result<Tensor> {
        let (hh, ww) = (self.shape[1], self.shape[2]);
        let mut out = Vec::with_capacity(self.reference.len());
        for (i, (&r, &v)) in self.reference.iter().zip(&self.value_sum).enumerate() {
            let w = self.weight_sum[i % (hh * ww)];
            if !(w > 0.0) {
                return Err(invalid("canvas pixel received no weight"));
            }
            out.push((r + v / w).clamp(self.lo[i], self.hi[i]));
        }
        Ok(Tensor::new(self.shape.clone(), out))
    }
}

/// Fuse already computed per-rect proposals, adding rects in `order`.
pub fn fuse(layout: &TileLayout, proposals: &[Tensor], order: &[usize]) -> Result<Tensor> {
    let c = proposals.first().map(|p| p.shape()[0]).ok_or_else(|| invalid("no proposals"))?;
    let mut acc = FusionAccumulator::new(layout, c, proposals)?;
    for &k in order {
        acc.add(&layout.rects[k], &layout.window, &proposals[k]);
    }
    acc.finish()
}

/// Per-rect Euler proposals for one step: crops are batched through `eps_fn`.
pub fn tile_proposals<F>(z: &Tensor, layout: &TileLayout, t: usize, sigma: f64, sigma_next: f64, eps_fn: &mut F) -> Result<Vec<Tensor>>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let crops: Vec<Tensor> = layout.rects.iter().map(|r| crop(z, r)).collect();
    let inputs: Vec<Tensor> = crops.iter().map(|c| scheduler::model_input(c, sigma)).collect();
    let eps = eps_fn(&Tensor::stack(&inputs), t)?;
    let mut out = Vec::with_capacity(crops.len());
    for (k, c) in crops.iter().enumerate() {
        let e = eps.index0(k);
        let (next, _) = scheduler::euler_update(c, &e, sigma, sigma_next);
        if !next.all_finite() {
            return Err(Error::NonFinite { step: k, detail: format!("tile {k} proposal at t={t}") });
        }
        out.push(next);
    }
    Ok(out)
}

/// One fused step from `sigma` to `sigma_next` on a (c, H, W) canvas.
pub fn fused_denoise_step<F>(z: &Tensor, layout: &TileLayout, t: usize, sigma: f64, sigma_next: f64, eps_fn: &mut F) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    if z.shape()[1..] != [layout.canvas.0, layout.canvas.1] {
        return Err(Error::Shape(format!("latent {:?} does not match canvas {:?}", z.shape(), layout.canvas)));
    }
    let proposals = tile_proposals(z, layout, t, sigma, sigma_next, eps_fn)?;
    let order: Vec<usize> = (0..proposals.len()).collect();
    fuse(layout, &proposals, &order)
}

/// Euler ladder over the canvas from a noised start.
pub fn multidiffusion_sample<F>(
    mut eps_fn: F,
    z_start: &Tensor,
    layout: &TileLayout,
    steps: &TimestepSelection,
    schedule: &NoiseSchedule,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let sigmas = steps.sigma_ladder(schedule);
    let mut z = z_start.clone();
    for (i, &t) in steps.indices.iter().enumerate() {
        z = fused_denoise_step(&z, layout, t, sigmas[i], sigmas[i + 1], &mut eps_fn).map_err(|e| match e {
            Error::NonFinite { detail, .. } => Error::NonFinite { step: i, detail },
            other => other,
        })?;
    }
    Ok(z)
}

/// Mean absolute second difference across pixel lines at latent-cell
/// boundaries: (at tile edges, at other latent-cell boundaries).
pub fn seam_metric(image: &GrayImage, layout: &TileLayout, factor: usize) -> (f64, f64) {
    let (rows, cols) = layout.edge_lines();
    let (w, h) = (image.width, image.height);
    let px = |y: usize, x: usize| image.pixels[y * w + x];
    let mut seam = (0.0, 0usize);
    let mut inner = (0.0, 0usize);
    // a boundary at pixel b separates b-1 and b; use the second differences
    // centred on both sides
    for lc in 1..layout.canvas.1 {
        let b = lc * factor;
        if b < 2 || b + 1 >= w {
            continue;
        }
        let acc = if cols.contains(&lc) { &mut seam } else { &mut inner };
        for y in 0..h {
            for x in [b - 1, b] {
                acc.0 += (px(y, x + 1) - 2.0 * px(y, x) + px(y, x - 1)).abs();
                acc.1 += 1;
            }
        }
    }
    for lr in 1..layout.canvas.0 {
        let b = lr * factor;
        if b < 2 || b + 1 >= h {
            continue;
        }
        let acc = if rows.contains(&lr) { &mut seam } else { &mut inner };
        for x in 0..w {
            for y in [b - 1, b] {
                acc.0 += (px(y + 1, x) - 2.0 * px(y, x) + px(y - 1, x)).abs();
                acc.1 += 1;
            }
        }
    }
    (seam.0 / seam.1.max(1) as f64, inner.0 / inner.1.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_examples() {
        assert_eq!(plan_tiles((16, 16), (8, 8), (8, 8)).unwrap().rects.len(), 4);
        let l = plan_tiles((16, 16), (8, 8), (4, 4)).unwrap();
        assert_eq!(l.rects.len(), 9);
        assert_eq!(l.rects[1], Rect { y: 0, x: 4, h: 8, w: 8 });
        assert_eq!(plan_tiles((8, 8), (8, 8), (4, 4)).unwrap().rects.len(), 1);
        assert!(plan_tiles((8, 8), (16, 16), (4, 4)).is_err());
        assert!(plan_tiles((16, 16), (8, 8), (0, 4)).is_err());
        assert!(plan_tiles((16, 16), (8, 8), (9, 4)).is_err());
        // uneven canvas: last rect is pulled inward
        let u = plan_tiles((8, 14), (8, 8), (4, 4)).unwrap();
        assert_eq!(u.rects.iter().map(|r| r.x).collect::<Vec<_>>(), vec![0, 4, 6]);
        assert!(l.window.iter().all(|w| *w >= WINDOW_FLOOR && *w <= 1.0));
    }

    #[test]
    fn half_overlapping_1d_tiles_average() {
        let layout = TileLayout {
            canvas: (1, 3),
            tile: (1, 2),
            stride: (1, 1),
            rects: vec![Rect { y: 0, x: 0, h: 1, w: 2 }, Rect { y: 0, x: 1, h: 1, w: 2 }],
            window: vec![1.0, 1.0],
        };
        let p1 = Tensor::new(vec![1, 1, 2], vec![0.3, 0.7]);
        let p2 = Tensor::new(vec![1, 1, 2], vec![0.2, 0.9]);
        let out = fuse(&layout, &[p1, p2], &[0, 1]).unwrap();
        assert_eq!(out.data()[0], 0.3);
        assert!((out.data()[1] - 0.45).abs() < 1e-15);
        assert_eq!(out.data()[2], 0.9);
    }

    #[test]
    fn edge_lines_of_half_overlap() {
        let l = plan_tiles((16, 16), (8, 8), (4, 4)).unwrap();
        assert_eq!(l.edge_lines(), (vec![4, 8, 12], vec![4, 8, 12]));
    }

    #[test]
    fn layout_json_round_trip() {
        let l = plan_tiles((16, 24), (8, 8), (4, 4)).unwrap();
        let back: TileLayout = serde_json::from_str(&l.to_json().unwrap()).unwrap();
        assert_eq!(back, l);
    }
}
