//! Scale-aware patchify: image ⇄ fixed-window token sequences.
//!
//! An image `[B, C, H, W]` is reflect-padded on the bottom/right to a
//! multiple of the window `p`, then cut into non-overlapping `p×p` windows
//! laid out in raster order along a new sequence axis:
//! `[B, T, C, p, p]` with `T = ⌈H/p⌉·⌈W/p⌉`. Larger images give longer
//! sequences; the per-token shape never changes.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Catmull-Rom coefficient.
const CUBIC_A: f64 = -0.5;

fn cubic_kernel(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (CUBIC_A + 2.0) * t * t * t - (CUBIC_A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        CUBIC_A * t * t * t - 5.0 * CUBIC_A * t * t + 8.0 * CUBIC_A * t - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Four (source index, weight) taps per output coordinate, half-pixel
/// centres, clamped at the edges, weights normalised to sum to one.
fn cubic_taps(in_len: usize, out_len: usize) -> Vec<[(usize, f64); 4]> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut taps = [(0usize, 0.0f64); 4];
            let mut total = 0.0;
            for (j, tap) in taps.iter_mut().enumerate() {
                let offset = j as f64 - 1.0;
                let w = cubic_kernel(offset - frac);
                let idx = (base + offset).clamp(0.0, (in_len - 1) as f64) as usize;
                *tap = (idx, w);
                total += w;
            }
            for tap in taps.iter_mut() {
                tap.1 /= total;
            }
            taps
        })
        .collect()
}

fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        &[b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::invalid_shape(shape, "expected [B, C, H, W]")),
    }
}

/// Separable bicubic (Catmull-Rom, a = -0.5) resize with half-pixel alignment
/// and edge clamping. Same-size resizes return the input unchanged.
pub fn bicubic_resize<E: Scalar>(x: &Tensor<E>, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
    let (b, c, h, w) = image_dims(x.shape())?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be at least 1x1".into()));
    }
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let lit = |taps: Vec<[(usize, f64); 4]>| -> Vec<[(usize, E); 4]> {
        taps.into_iter().map(|t| t.map(|(i, wt)| (i, E::lit(wt)))).collect()
    };
    let tx = lit(cubic_taps(w, out_w));
    let ty = lit(cubic_taps(h, out_h));
    let planes = b * c;
    // horizontal pass: [planes, h, out_w]
    let mut tmp = vec![E::zero(); planes * h * out_w];
    for (src_row, dst_row) in x.data().chunks_exact(w).zip(tmp.chunks_exact_mut(out_w)) {
        for (d, taps) in dst_row.iter_mut().zip(&tx) {
            *d = taps.iter().fold(E::zero(), |acc, &(i, wt)| acc + src_row[i] * wt);
        }
    }
    let mut out = vec![E::zero(); planes * out_h * out_w];
    for pl in 0..planes {
        let src = &tmp[pl * h * out_w..(pl + 1) * h * out_w];
        let dst = &mut out[pl * out_h * out_w..(pl + 1) * out_h * out_w];
        for (oy, taps) in ty.iter().enumerate() {
            let row = &mut dst[oy * out_w..(oy + 1) * out_w];
            for &(iy, wt) in taps {
                let srow = &src[iy * out_w..(iy + 1) * out_w];
                for (d, &s) in row.iter_mut().zip(srow) {
                    *d = *d + s * wt;
                }
            }
        }
    }
    Tensor::new(vec![b, c, out_h, out_w], out)
}

/// Mirror index without repeating the edge sample (`-1 → 1`, `n → n-2`).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

pub fn padding_for(extent: usize, p: usize) -> usize {
    (p - extent % p) % p
}

/// Reflect-pads bottom/right so both extents divide by `p`.
/// Returns `(padded, pad_bottom, pad_right)`.
pub fn pad_to_multiple<E: Scalar>(x: &Tensor<E>, p: usize) -> Result<(Tensor<E>, usize, usize)> {
    if p == 0 {
        return Err(Error::InvalidArgument("window must be at least 1".into()));
    }
    let (b, c, h, w) = image_dims(x.shape())?;
    let (pb, pr) = (padding_for(h, p), padding_for(w, p));
    if pb == 0 && pr == 0 {
        return Ok((x.clone(), 0, 0));
    }
    if (pb > 0 && h < 2) || (pr > 0 && w < 2) {
        return Err(Error::InvalidArgument(format!(
            "cannot reflect-pad a {h}x{w} image: padded dimensions need at least 2 pixels"
        )));
    }
    let (hp, wp) = (h + pb, w + pr);
    let src = x.data();
    let mut out = Vec::with_capacity(b * c * hp * wp);
    for plane in src.chunks_exact(h * w) {
        for y in 0..hp {
            let row = &plane[reflect(y, h) * w..(reflect(y, h) + 1) * w];
            out.extend_from_slice(row);
            out.extend((w..wp).map(|xx| row[reflect(xx, w)]));
        }
    }
    Ok((Tensor::new(vec![b, c, hp, wp], out)?, pb, pr))
}

/// Top-left crop of an image tensor.
pub fn crop<E: Scalar>(x: &Tensor<E>, h: usize, w: usize) -> Result<Tensor<E>> {
    let (b, c, _, _) = image_dims(x.shape())?;
    let index = crop_index(x.shape(), 0, 0, h, w)?;
    x.gather(&[b, c, h, w], &index)
}

/// Source offsets for a `[B, C, h, w]` window of an image starting at `(top, left)`.
pub fn crop_index(shape: &[usize], top: usize, left: usize, h: usize, w: usize) -> Result<Vec<usize>> {
    let (b, c, hh, ww) = image_dims(shape)?;
    if top + h > hh || left + w > ww || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "crop {h}x{w}+{top}+{left} outside {hh}x{ww}"
        )));
    }
    let mut index = Vec::with_capacity(b * c * h * w);
    for plane in 0..b * c {
        for y in 0..h {
            let start = plane * hh * ww + (top + y) * ww + left;
            index.extend(start..start + w);
        }
    }
    Ok(index)
}

/// Layout of a token grid over a (padded) image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub window: usize,
    pub orig_h: usize,
    pub orig_w: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl PatchGrid {
    /// Grid for an unpadded image of the given extents.
    pub fn for_image(h: usize, w: usize, window: usize) -> Self {
        let (pb, pr) = (padding_for(h, window), padding_for(w, window));
        Self {
            grid_rows: (h + pb) / window,
            grid_cols: (w + pr) / window,
            window,
            orig_h: h,
            orig_w: w,
            pad_bottom: pb,
            pad_right: pr,
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn padded_h(&self) -> usize {
        self.grid_rows * self.window
    }

    pub fn padded_w(&self) -> usize {
        self.grid_cols * self.window
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.window > 0
            && self.grid_rows > 0
            && self.grid_cols > 0
            && self.orig_h > 0
            && self.orig_w > 0
            && self.orig_h + self.pad_bottom == self.padded_h()
            && self.orig_w + self.pad_right == self.padded_w()
            && self.pad_bottom < self.window
            && self.pad_right < self.window;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("inconsistent patch grid {self:?}")))
        }
    }

    /// For each element of the `[B, T, C, p, p]` token tensor, its offset in the
    /// padded `[B, C, Hp, Wp]` image.
    pub fn token_index(&self, batch: usize, channels: usize) -> Vec<usize> {
        let p = self.window;
        let (hp, wp) = (self.padded_h(), self.padded_w());
        let mut index = Vec::with_capacity(batch * self.tokens() * channels * p * p);
        for b in 0..batch {
            for row in 0..self.grid_rows {
                for col in 0..self.grid_cols {
                    for c in 0..channels {
                        for y in 0..p {
                            let start = ((b * channels + c) * hp + row * p + y) * wp + col * p;
                            index.extend(start..start + p);
                        }
                    }
                }
            }
        }
        index
    }

    /// For each element of the cropped `[B, C, orig_h, orig_w]` image, its offset
    /// in the `[B, T, C, p, p]` token tensor.
    pub fn reassemble_index(&self, batch: usize, channels: usize) -> Vec<usize> {
        let p = self.window;
        let t = self.tokens();
        let mut index = Vec::with_capacity(batch * channels * self.orig_h * self.orig_w);
        for b in 0..batch {
            for c in 0..channels {
                for y in 0..self.orig_h {
                    let (row, iy) = (y / p, y % p);
                    for x in 0..self.orig_w {
                        let (col, ix) = (x / p, x % p);
                        let tok = row * self.grid_cols + col;
                        index.push((((b * t + tok) * channels + c) * p + iy) * p + ix);
                    }
                }
            }
        }
        index
    }
}

/// Tokenised image windows plus the metadata needed to undo the tokenisation.
#[derive(Debug, Clone)]
pub struct PatchSequence<E: Scalar = f32> {
    /// `[B, T, C, p, p]`, raster-ordered tokens.
    pub tokens: Tensor<E>,
    pub grid: PatchGrid,
}

impl<E: Scalar> PatchSequence<E> {
    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[2]
    }
}

/// Cuts an already-padded image into raster-ordered `p×p` windows.
pub fn patchify<E: Scalar>(x: &Tensor<E>, p: usize) -> Result<PatchSequence<E>> {
    let (b, c, h, w) = image_dims(x.shape())?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} image is not divisible into {p}x{p} windows"
        )));
    }
    let grid = PatchGrid {
        grid_rows: h / p,
        grid_cols: w / p,
        window: p,
        orig_h: h,
        orig_w: w,
        pad_bottom: 0,
        pad_right: 0,
    };
    let tokens = x.gather(&[b, grid.tokens(), c, p, p], &grid.token_index(b, c))?;
    Ok(PatchSequence { tokens, grid })
}

/// Pads to a multiple of `p` and tokenises, remembering the padding.
pub fn patchify_padded<E: Scalar>(x: &Tensor<E>, p: usize) -> Result<PatchSequence<E>> {
    let (_, _, h, w) = image_dims(x.shape())?;
    let (padded, pb, pr) = pad_to_multiple(x, p)?;
    let mut seq = patchify(&padded, p)?;
    seq.grid.orig_h = h;
    seq.grid.orig_w = w;
    seq.grid.pad_bottom = pb;
    seq.grid.pad_right = pr;
    Ok(seq)
}

/// Inverse of [`patchify_padded`]: stitches tokens back and crops the padding.
pub fn reassemble<E: Scalar>(seq: &PatchSequence<E>) -> Result<Tensor<E>> {
    seq.grid.validate()?;
    let shape = seq.tokens.shape();
    let p = seq.grid.window;
    if shape.len() != 5 || shape[1] != seq.grid.tokens() || shape[3] != p || shape[4] != p {
        return Err(Error::InvalidArgument(format!(
            "token tensor {shape:?} does not match grid {:?}",
            seq.grid
        )));
    }
    let (b, c) = (shape[0], shape[2]);
    seq.tokens.gather(
        &[b, c, seq.grid.orig_h, seq.grid.orig_w],
        &seq.grid.reassemble_index(b, c),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Train,
    Infer,
}

/// Draws the window size for each training step.
#[derive(Debug, Clone)]
pub struct BucketSampler {
    buckets: Vec<usize>,
    probabilities: Vec<f64>,
    seed: u64,
    mode: SamplerMode,
    infer_window: usize,
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl BucketSampler {
    pub fn new(
        buckets: Vec<usize>,
        probabilities: Vec<f64>,
        seed: u64,
        mode: SamplerMode,
        infer_window: usize,
    ) -> Result<Self> {
        if buckets.is_empty() {
            return Err(Error::InvalidConfig("bucket list is empty".into()));
        }
        if probabilities.len() != buckets.len() {
            return Err(Error::InvalidConfig(format!(
                "{} buckets but {} probabilities",
                buckets.len(),
                probabilities.len()
            )));
        }
        if let Some(b) = buckets.iter().find(|&&b| b < 4) {
            return Err(Error::InvalidConfig(format!("bucket window {b} is below 4")));
        }
        if probabilities.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidConfig("bucket probabilities must be nonnegative".into()));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "bucket probabilities sum to {total}, expected 1"
            )));
        }
        if infer_window == 0 {
            return Err(Error::InvalidConfig("inference window must be positive".into()));
        }
        let dist = WeightedIndex::new(&probabilities)
            .map_err(|e| Error::InvalidConfig(format!("bucket probabilities: {e}")))?;
        Ok(Self {
            buckets,
            probabilities,
            seed,
            mode,
            infer_window,
            dist,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn uniform(buckets: Vec<usize>, seed: u64, infer_window: usize) -> Result<Self> {
        let n = buckets.len().max(1);
        Self::new(buckets, vec![1.0 / n as f64; n], seed, SamplerMode::Train, infer_window)
    }

    /// A sampler that always returns `window` (the static-window ablation).
    pub fn fixed(window: usize, seed: u64) -> Result<Self> {
        Self::new(vec![window], vec![1.0], seed, SamplerMode::Train, window)
    }

    pub fn buckets(&self) -> &[usize] {
        &self.buckets
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> SamplerMode {
        self.mode
    }

    pub fn infer_window(&self) -> usize {
        self.infer_window
    }

    pub fn set_mode(&mut self, mode: SamplerMode) {
        self.mode = mode;
    }

    pub fn sample_window(&mut self) -> usize {
        match self.mode {
            SamplerMode::Infer => self.infer_window,
            SamplerMode::Train => self.buckets[self.dist.sample(&mut self.rng)],
        }
    }
}
