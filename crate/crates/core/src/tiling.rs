//! Tiled inference and the seam-error comparator (§1, Fig. 1(c)).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{lrms_offset_step, SamplePair};
use crate::error::{Error, Result};
use crate::model::{infer, ModelConfig, ModelParams};
use crate::tensor::Tensor;

/// How overlapping tiles are stitched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Blend {
    /// Every pixel comes from exactly one tile; overlaps are split at their midpoint.
    Hard,
    /// Linear ramps across each overlap, normalised by the summed weights.
    Feather,
}

impl FromStr for Blend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Blend::Hard),
            "feather" => Ok(Blend::Feather),
            _ => Err(Error::InvalidArgument(format!("unknown blend `{s}` (expected hard or feather)"))),
        }
    }
}

impl fmt::Display for Blend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Blend::Hard => "hard",
            Blend::Feather => "feather",
        })
    }
}

/// Tiles along one axis: `(start, len)` pairs covering `0..extent`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AxisTiles {
    pub tiles: Vec<(usize, usize)>,
    /// Ownership cuts for hard stitching: tile `i` owns `cuts[i]..cuts[i+1]`.
    pub cuts: Vec<usize>,
}

/// Lays out tiles of `tile` pixels with nominal `overlap` along an axis of
/// `extent` pixels. Starts are multiples of `quantum`; the last tile is pulled
/// back to end at `extent`. A tile at least as large as the extent yields one
/// tile spanning it.
pub fn axis_tiles(extent: usize, tile: usize, overlap: usize, quantum: usize) -> Result<AxisTiles> {
    if tile == 0 || quantum == 0 || extent == 0 {
        return Err(Error::InvalidArgument("tile, quantum and extent must be positive".into()));
    }
    if 2 * overlap >= tile {
        return Err(Error::InvalidArgument(format!("overlap {overlap} must be below half the tile {tile}")));
    }
    if tile >= extent {
        return Ok(AxisTiles {
            tiles: vec![(0, extent)],
            cuts: vec![0, extent],
        });
    }
    if tile % quantum != 0 || overlap % quantum != 0 || extent % quantum != 0 {
        return Err(Error::InvalidArgument(format!(
            "tile {tile}, overlap {overlap} and extent {extent} must be multiples of {quantum} to stay registered"
        )));
    }
    let stride = tile - overlap;
    let mut tiles = Vec::new();
    let mut start = 0;
    loop {
        if start + tile >= extent {
            tiles.push((extent - tile, tile));
            break;
        }
        tiles.push((start, tile));
        start += stride;
    }
    let mut cuts = vec![0];
    for pair in tiles.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let end_a = a.0 + a.1;
        // Midpoint of the overlap [b.start, end_a); abutting tiles cut at b.start.
        cuts.push((b.0 + end_a) / 2);
    }
    cuts.push(extent);
    Ok(AxisTiles { tiles, cuts })
}

/// Feather weight of local position `u` in tile `i` along one axis.
fn feather_weight(axis: &AxisTiles, i: usize, u: usize) -> f64 {
    let (start, len) = axis.tiles[i];
    let mut w: f64 = 1.0;
    if i > 0 {
        let prev = axis.tiles[i - 1];
        let ov = (prev.0 + prev.1).saturating_sub(start);
        if ov > 0 {
            w = w.min((u + 1) as f64 / (ov + 1) as f64);
        }
    }
    if i + 1 < axis.tiles.len() {
        let next = axis.tiles[i + 1];
        let ov = (start + len).saturating_sub(next.0);
        if ov > 0 {
            let from_end = len - 1 - u;
            w = w.min((from_end + 1) as f64 / (ov + 1) as f64);
        }
    }
    w
}

fn crop_chw(t: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
    let (c, hh, ww) = match *t.shape() {
        [c, hh, ww] => (c, hh, ww),
        _ => return Err(Error::invalid_shape(t.shape(), "expected [C, H, W]")),
    };
    if top + h > hh || left + w > ww {
        return Err(Error::InvalidArgument(format!("crop {h}x{w} at ({top}, {left}) exceeds {hh}x{ww}")));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in top..top + h {
            let row = (ch * hh + y) * ww;
            out.extend_from_slice(&t.data()[row + left..row + left + w]);
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Full-image inference on one `[1,H,W]` / `[C,h,w]` pair; returns `[C,H,W]`.
pub fn full_inference(params: &ModelParams, cfg: &ModelConfig, pair: &SamplePair, window: usize) -> Result<Tensor> {
    pair.validate()?;
    let (h, w) = pair.extent();
    let out = infer(
        params,
        cfg,
        &crate::data::batched(&pair.pan)?,
        &crate::data::batched(&pair.lrms)?,
        pair.ratio,
        window,
    )?;
    out.reshape(vec![cfg.ms_bands, h, w])
}

/// The bicubic-upsampled LRMS at PAN resolution, `[C,H,W]`: the no-learning
/// baseline every model is compared against.
pub fn bicubic_baseline(pair: &SamplePair) -> Result<Tensor> {
    pair.validate()?;
    let (h, w) = pair.extent();
    let up = crate::patchify::bicubic_resize(&crate::data::batched(&pair.lrms)?, h, w)?;
    up.reshape(vec![pair.bands(), h, w])
}

/// Runs inference tile by tile (sequentially) and stitches the results.
/// Output extents equal those of full-image inference.
pub fn tiled_inference(
    params: &ModelParams,
    cfg: &ModelConfig,
    pair: &SamplePair,
    window: usize,
    tile: usize,
    overlap: usize,
    blend: Blend,
) -> Result<Tensor> {
    pair.validate()?;
    if tile < window {
        return Err(Error::InvalidArgument(format!("tile {tile} is smaller than the window {window}")));
    }
    let (h, w) = pair.extent();
    let step = lrms_offset_step(pair.ratio);
    let quantum = (step as f64 * pair.ratio).round() as usize;
    let rows = axis_tiles(h, tile, overlap, quantum)?;
    let cols = axis_tiles(w, tile, overlap, quantum)?;
    if rows.tiles.len() == 1 && cols.tiles.len() == 1 {
        return full_inference(params, cfg, pair, window);
    }
    let c = cfg.ms_bands;
    let mut acc = vec![0f64; c * h * w];
    let mut weight = vec![0f64; h * w];
    let mut out = vec![0f32; c * h * w];
    let to_ms = |px: usize| (px as f64 / pair.ratio).round() as usize;
    for (ti, &(y0, th)) in rows.tiles.iter().enumerate() {
        for (tj, &(x0, tw)) in cols.tiles.iter().enumerate() {
            let sub = SamplePair {
                pan: crop_chw(&pair.pan, y0, x0, th, tw)?,
                lrms: crop_chw(&pair.lrms, to_ms(y0), to_ms(x0), to_ms(th), to_ms(tw))?,
                gt: None,
                ratio: pair.ratio,
                id: format!("{}@{y0},{x0}", pair.id),
            };
            let pred = full_inference(params, cfg, &sub, window)?;
            let pd = pred.data();
            for ch in 0..c {
                for u in 0..th {
                    for v in 0..tw {
                        let (y, x) = (y0 + u, x0 + v);
                        let val = pd[(ch * th + u) * tw + v];
                        match blend {
                            Blend::Hard => {
                                let owns = (rows.cuts[ti]..rows.cuts[ti + 1]).contains(&y)
                                    && (cols.cuts[tj]..cols.cuts[tj + 1]).contains(&x);
                                if owns {
                                    out[(ch * h + y) * w + x] = val;
                                }
                            }
                            Blend::Feather => {
                                let wt = feather_weight(&rows, ti, u) * feather_weight(&cols, tj, v);
                                acc[(ch * h + y) * w + x] += wt * val as f64;
                                if ch == 0 {
                                    weight[y * w + x] += wt;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if blend == Blend::Feather {
        for ch in 0..c {
            for i in 0..h * w {
                out[ch * h * w + i] = (acc[ch * h * w + i] / weight[i]) as f32;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Mean absolute cross-boundary gradient on tile borders divided by the mean
/// absolute gradient inside tiles. Borders are the hard-stitching cuts of the
/// same tile layout `tiled_inference` uses (quantum 1). `img` is `[C,H,W]`.
/// Returns 1.0 when both means vanish (e.g. a constant image).
pub fn seam_error(img: &Tensor, tile: usize, overlap: usize) -> Result<f64> {
    let (c, h, w) = match *img.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::invalid_shape(img.shape(), "expected [C, H, W]")),
    };
    let rows = axis_tiles(h, tile, overlap, 1)?;
    let cols = axis_tiles(w, tile, overlap, 1)?;
    if rows.tiles.len() == 1 && cols.tiles.len() == 1 {
        return Err(Error::InvalidArgument(format!(
            "a {tile}-pixel tile covers the whole {h}x{w} image; there are no seams to measure"
        )));
    }
    let row_cut: Vec<bool> = (0..h).map(|y| rows.cuts[1..rows.cuts.len() - 1].contains(&y)).collect();
    let col_cut: Vec<bool> = (0..w).map(|x| cols.cuts[1..cols.cuts.len() - 1].contains(&x)).collect();
    let d = img.data();
    let (mut border, mut nb, mut interior, mut ni) = (0.0f64, 0usize, 0.0f64, 0usize);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = d[(ch * h + y) * w + x] as f64;
                if x > 0 {
                    let g = (v - d[(ch * h + y) * w + x - 1] as f64).abs();
                    if col_cut[x] {
                        border += g;
                        nb += 1;
                    } else {
                        interior += g;
                        ni += 1;
                    }
                }
                if y > 0 {
                    let g = (v - d[(ch * h + y - 1) * w + x] as f64).abs();
                    if row_cut[y] {
                        border += g;
                        nb += 1;
                    } else {
                        interior += g;
                        ni += 1;
                    }
                }
            }
        }
    }
    let mb = border / nb.max(1) as f64;
    let mi = interior / ni.max(1) as f64;
    Ok(match (mb == 0.0, mi == 0.0) {
        (true, true) => 1.0,
        (false, true) => f64::INFINITY,
        _ => mb / mi,
    })
}
