//! 3×3×3 same-size convolution with zero padding.
//!
//! Feature maps are laid out as (depth, channel, height, width) so that the
//! output of every depth slice is one contiguous block; slices are computed
//! independently, which keeps results identical for any worker count.

use crate::real::Real;
use rayon::prelude::*;
use std::ops::Range;

pub const KERNEL: usize = 3;
pub const TAPS: usize = KERNEL * KERNEL * KERNEL;

/// Depth slices per parameter-gradient partial sum.
const GRAD_CHUNK: usize = 4;

/// Spatial extent of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape3 {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub fn new(depth: usize, height: usize, width: usize) -> Self {
        Shape3 { depth, height, width }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.depth * self.plane()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Weights `(out, in, kz, ky, kx)` and one bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv3d<T> {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Conv3d { in_ch, out_ch, weight: vec![T::zero(); out_ch * in_ch * TAPS], bias: vec![T::zero(); out_ch] }
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * TAPS
    }

    /// Kernel for the input gradient: channels swapped, taps mirrored.
    fn flipped(&self) -> Conv3d<T> {
        let mut w = vec![T::zero(); self.weight.len()];
        for o in 0..self.out_ch {
            for i in 0..self.in_ch {
                for t in 0..TAPS {
                    w[(i * self.out_ch + o) * TAPS + (TAPS - 1 - t)] = self.weight[(o * self.in_ch + i) * TAPS + t];
                }
            }
        }
        Conv3d { in_ch: self.out_ch, out_ch: self.in_ch, weight: w, bias: vec![T::zero(); self.in_ch] }
    }

    pub fn forward(&self, input: &[T], shape: Shape3) -> Vec<T> {
        conv_forward(self, input, shape, true)
    }

    /// Gradient of the layer input given the gradient of its output.
    pub fn backward_input(&self, grad_out: &[T], shape: Shape3) -> Vec<T> {
        conv_forward(&self.flipped(), grad_out, shape, false)
    }

    /// Accumulates weight and bias gradients into `gw`, `gb`.
    pub fn backward_params(&self, input: &[T], grad_out: &[T], shape: Shape3, gw: &mut [T], gb: &mut [T]) {
        assert_eq!(input.len(), self.in_ch * shape.len());
        assert_eq!(grad_out.len(), self.out_ch * shape.len());
        let plane = shape.plane();
        let k = self.in_ch * TAPS;
        let chunks: Vec<(Vec<T>, Vec<f64>)> = (0..shape.depth.div_ceil(GRAD_CHUNK))
            .into_par_iter()
            .map(|c| {
                let tr = tile_rows(shape);
                let mut col = vec![T::zero(); k * tr * shape.width];
                let mut dw = vec![T::zero(); self.out_ch * k];
                let mut db = vec![0.0f64; self.out_ch];
                for z in c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(shape.depth) {
                    let dy = &grad_out[z * self.out_ch * plane..(z + 1) * self.out_ch * plane];
                    for y0 in (0..shape.height).step_by(tr) {
                        let ys = y0..(y0 + tr).min(shape.height);
                        let n = ys.len() * shape.width;
                        im2col(input, self.in_ch, shape, z, ys, &mut col);
                        T::gemm(
                            self.out_ch,
                            n,
                            k,
                            T::one(),
                            &dy[y0 * shape.width..],
                            plane as isize,
                            1,
                            &col,
                            1,
                            n as isize,
                            T::one(),
                            &mut dw,
                            k as isize,
                            1,
                        );
                    }
                    for (o, acc) in db.iter_mut().enumerate() {
                        *acc += dy[o * plane..(o + 1) * plane].iter().map(|v| v.f64()).sum::<f64>();
                    }
                }
                (dw, db)
            })
            .collect();
        for (dw, db) in chunks {
            gw.iter_mut().zip(&dw).for_each(|(g, d)| *g += *d);
            gb.iter_mut().zip(&db).for_each(|(g, d)| *g += T::of(*d));
        }
    }
}

/// Output rows per im2col tile, sized so a tile stays in cache.
fn tile_rows(shape: Shape3) -> usize {
    (512 / shape.width.max(1)).clamp(1, shape.height.max(1))
}

/// Unfolds the 3×3×3 neighbourhoods of rows `ys` of depth slice `z` into
/// `col`, a `(in_ch · 27) × (ys.len() · width)` row-major matrix.
fn im2col<T: Real>(input: &[T], in_ch: usize, shape: Shape3, z: usize, ys: Range<usize>, col: &mut [T]) {
    let (h, w) = (shape.height, shape.width);
    let plane = shape.plane();
    let cols = ys.len() * w;
    for kz in 0..KERNEL {
        let zz = z as isize + kz as isize - 1;
        let inside = zz >= 0 && (zz as usize) < shape.depth;
        for ci in 0..in_ch {
            let src = if inside {
                let base = (zz as usize * in_ch + ci) * plane;
                Some(&input[base..base + plane])
            } else {
                None
            };
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = ci * TAPS + kz * 9 + ky * 3 + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let Some(src) = src else {
                        dst.fill(T::zero());
                        continue;
                    };
                    for (r, y) in ys.clone().enumerate() {
                        let yy = y as isize + ky as isize - 1;
                        let out = &mut dst[r * w..(r + 1) * w];
                        if yy < 0 || yy as usize >= h {
                            out.fill(T::zero());
                            continue;
                        }
                        let line = &src[yy as usize * w..(yy as usize + 1) * w];
                        match kx {
                            0 => {
                                out[0] = T::zero();
                                out[1..].copy_from_slice(&line[..w - 1]);
                            }
                            1 => out.copy_from_slice(line),
                            _ => {
                                out[..w - 1].copy_from_slice(&line[1..]);
                                out[w - 1] = T::zero();
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Real>(layer: &Conv3d<T>, input: &[T], shape: Shape3, with_bias: bool) -> Vec<T> {
    assert_eq!(input.len(), layer.in_ch * shape.len(), "conv input has wrong size");
    let plane = shape.plane();
    let k = layer.in_ch * TAPS;
    let mut out = vec![T::zero(); layer.out_ch * shape.len()];
    if out.is_empty() {
        return out;
    }
    let tr = tile_rows(shape);
    out.par_chunks_mut(layer.out_ch * plane).enumerate().for_each_init(
        || vec![T::zero(); k * tr * shape.width],
        |col, (z, out_z)| {
            if with_bias {
                for (o, b) in layer.bias.iter().enumerate() {
                    out_z[o * plane..(o + 1) * plane].fill(*b);
                }
            }
            for y0 in (0..shape.height).step_by(tr) {
                let ys = y0..(y0 + tr).min(shape.height);
                let n = ys.len() * shape.width;
                im2col(input, layer.in_ch, shape, z, ys, col);
                T::gemm(
                    layer.out_ch,
                    k,
                    n,
                    T::one(),
                    &layer.weight,
                    k as isize,
                    1,
                    col,
                    n as isize,
                    1,
                    if with_bias { T::one() } else { T::zero() },
                    &mut out_z[y0 * shape.width..],
                    plane as isize,
                    1,
                );
            }
        },
    );
    out
}
