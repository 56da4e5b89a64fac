//! PanScale-Bench metric suite: six reference metrics, three no-reference
//! indices, and report aggregation/rendering (Appendix B.3).
//!
//! All metrics take `[C, H, W]` tensors, accumulate in f64 and are pure.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchify::bicubic_resize;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Block size for the universal quality index and everything built on it.
pub const Q_BLOCK: usize = 8;

/// The nine metrics in report column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    Psnr,
    Ssim,
    Sam,
    Ergas,
    Scc,
    Q,
    DLambda,
    DS,
    Qnr,
}

impl Metric {
    pub const ALL: [Metric; 9] = [
        Metric::Psnr,
        Metric::Ssim,
        Metric::Sam,
        Metric::Ergas,
        Metric::Scc,
        Metric::Q,
        Metric::DLambda,
        Metric::DS,
        Metric::Qnr,
    ];

    /// Column name used in tables and CSV.
    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "PSNR",
            Metric::Ssim => "SSIM",
            Metric::Sam => "SAM",
            Metric::Ergas => "ERGAS",
            Metric::Scc => "SCC",
            Metric::Q => "Q",
            Metric::DLambda => "D_lambda",
            Metric::DS => "D_S",
            Metric::Qnr => "QNR",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Sam | Metric::Ergas | Metric::DLambda | Metric::DS)
    }

    /// Whether the metric needs a ground-truth reference.
    pub fn needs_reference(self) -> bool {
        !matches!(self, Metric::DLambda | Metric::DS | Metric::Qnr)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `[C, H, W]` view with f64 accessors.
struct Bands<'a> {
    c: usize,
    h: usize,
    w: usize,
    data: &'a [f32],
}

impl<'a> Bands<'a> {
    fn new(t: &'a Tensor) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Ok(Self { c, h, w, data: t.data() }),
            _ => Err(Error::invalid_shape(t.shape(), "expected [C, H, W]")),
        }
    }

    fn band(&self, b: usize) -> &'a [f32] {
        &self.data[b * self.h * self.w..(b + 1) * self.h * self.w]
    }

    fn at(&self, b: usize, y: usize, x: usize) -> f64 {
        self.data[(b * self.h + y) * self.w + x] as f64
    }
}

fn same_shape(x: &Tensor, r: &Tensor) -> Result<()> {
    if x.shape() != r.shape() {
        return Err(Error::shape(x.shape(), r.shape()));
    }
    Ok(())
}

fn pair<'a>(x: &'a Tensor, r: &'a Tensor) -> Result<(Bands<'a>, Bands<'a>)> {
    same_shape(x, r)?;
    Ok((Bands::new(x)?, Bands::new(r)?))
}

fn mse(x: &[f32], r: &[f32]) -> f64 {
    x.iter().zip(r).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / x.len() as f64
}

/// Peak signal-to-noise ratio in dB; identical inputs give `f64::INFINITY`.
pub fn psnr(x: &Tensor, reference: &Tensor, data_range: f64) -> Result<f64> {
    let (xb, _) = pair(x, reference)?;
    if !(data_range > 0.0) {
        return Err(Error::InvalidArgument(format!("data_range must be positive, got {data_range}")));
    }
    if xb.data.is_empty() {
        return Err(Error::invalid_shape(x.shape(), "empty image"));
    }
    let m = mse(x.data(), reference.data());
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

/// Normalised 1-D Gaussian taps of length [`SSIM_WINDOW`].
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable "valid" filtering of a plane with the SSIM Gaussian.
fn gauss_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, &t)| t * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, &t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Structural similarity: 11×11 Gaussian window (σ = 1.5) over valid positions,
/// mean per band, then averaged over bands.
pub fn ssim(x: &Tensor, reference: &Tensor, data_range: f64) -> Result<f64> {
    let (xb, rb) = pair(x, reference)?;
    if xb.h < SSIM_WINDOW || xb.w < SSIM_WINDOW {
        return Err(Error::invalid_shape(x.shape(), "SSIM needs H, W >= 11"));
    }
    if !(data_range > 0.0) {
        return Err(Error::InvalidArgument(format!("data_range must be positive, got {data_range}")));
    }
    let taps = ssim_taps();
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let (h, w) = (xb.h, xb.w);
    let mut total = 0.0;
    for b in 0..xb.c {
        let xs: Vec<f64> = xb.band(b).iter().map(|&v| v as f64).collect();
        let rs: Vec<f64> = rb.band(b).iter().map(|&v| v as f64).collect();
        let prod = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).collect::<Vec<f64>>();
        let mx = gauss_valid(&xs, h, w, &taps);
        let my = gauss_valid(&rs, h, w, &taps);
        let sxx = gauss_valid(&prod(&|i| xs[i] * xs[i]), h, w, &taps);
        let syy = gauss_valid(&prod(&|i| rs[i] * rs[i]), h, w, &taps);
        let sxy = gauss_valid(&prod(&|i| xs[i] * rs[i]), h, w, &taps);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / xb.c as f64)
}

/// Spectral angle mapper in radians, averaged over pixels; zero-norm pixels
/// contribute 0.
pub fn sam(x: &Tensor, reference: &Tensor) -> Result<f64> {
    let (xb, rb) = pair(x, reference)?;
    if xb.c < 2 {
        return Err(Error::invalid_shape(x.shape(), "SAM needs at least 2 bands"));
    }
    let n = xb.h * xb.w;
    let mut total = 0.0;
    for p in 0..n {
        let (mut dot, mut nx, mut nr) = (0.0, 0.0, 0.0);
        for b in 0..xb.c {
            let (a, r) = (xb.data[b * n + p] as f64, rb.data[b * n + p] as f64);
            dot += a * r;
            nx += a * a;
            nr += r * r;
        }
        if nx > 0.0 && nr > 0.0 {
            total += (dot / (nx * nr).sqrt()).clamp(-1.0, 1.0).acos();
        }
    }
    Ok(total / n as f64)
}

/// ERGAS with scale factor `100 / r`.
pub fn ergas(x: &Tensor, reference: &Tensor, ratio: f64) -> Result<f64> {
    let (xb, rb) = pair(x, reference)?;
    if !(ratio > 1.0) {
        return Err(Error::InvalidArgument(format!("ERGAS ratio must exceed 1, got {ratio}")));
    }
    let mut acc = 0.0;
    for b in 0..xb.c {
        let rband = rb.band(b);
        let mean = rband.iter().map(|&v| v as f64).sum::<f64>() / rband.len() as f64;
        if mean == 0.0 {
            return Err(Error::InvalidArgument(format!("ERGAS reference band {b} has zero mean")));
        }
        acc += mse(xb.band(b), rband) / (mean * mean);
    }
    Ok(100.0 / ratio * (acc / xb.c as f64).sqrt())
}

/// Laplacian high-pass over the valid region of one band.
fn laplacian_valid(bands: &Bands<'_>, b: usize) -> Vec<f64> {
    let (h, w) = (bands.h, bands.w);
    let mut out = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut ring = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    if dy != 1 || dx != 1 {
                        ring += bands.at(b, y + dy - 1, x + dx - 1);
                    }
                }
            }
            out.push(8.0 * bands.at(b, y, x) - ring);
        }
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Spatial correlation coefficient of Laplacian-filtered bands, band-averaged.
pub fn scc(x: &Tensor, reference: &Tensor) -> Result<f64> {
    let (xb, rb) = pair(x, reference)?;
    if xb.h < 3 || xb.w < 3 {
        return Err(Error::invalid_shape(x.shape(), "SCC needs H, W >= 3"));
    }
    let mut total = 0.0;
    for b in 0..xb.c {
        let hx = laplacian_valid(&xb, b);
        let hr = laplacian_valid(&rb, b);
        total += pearson(&hx, &hr).ok_or_else(|| {
            Error::InvalidArgument(format!("SCC: high-passed band {b} has zero variance"))
        })?;
    }
    Ok(total / xb.c as f64)
}

/// Wang–Bovik index of one block given its statistics. Degenerate blocks fall
/// back to the surviving luminance/contrast factor (1 when both are constant
/// and equal).
fn q_from_stats(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    let lum = mx * mx + my * my;
    let var = vx + vy;
    match (lum == 0.0, var == 0.0) {
        (true, true) => 1.0,
        (false, true) => 2.0 * mx * my / lum,
        (true, false) => 2.0 * cxy / var,
        (false, false) => 4.0 * cxy * mx * my / (var * lum),
    }
}

/// Mean universal quality index over all 8×8 sliding blocks of two planes.
pub fn q_plane(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<f64> {
    if h < Q_BLOCK || w < Q_BLOCK {
        return Err(Error::InvalidArgument(format!("Q index needs at least 8x8, got {h}x{w}")));
    }
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::shape(&[a.len()], &[h * w]));
    }
    let n = (Q_BLOCK * Q_BLOCK) as f64;
    let mut total = 0.0;
    let count = (h + 1 - Q_BLOCK) * (w + 1 - Q_BLOCK);
    for y0 in 0..=h - Q_BLOCK {
        for x0 in 0..=w - Q_BLOCK {
            let (mut sa, mut sb) = (0.0, 0.0);
            for y in y0..y0 + Q_BLOCK {
                for x in x0..x0 + Q_BLOCK {
                    sa += a[y * w + x] as f64;
                    sb += b[y * w + x] as f64;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
            for y in y0..y0 + Q_BLOCK {
                for x in x0..x0 + Q_BLOCK {
                    let da = a[y * w + x] as f64 - ma;
                    let db = b[y * w + x] as f64 - mb;
                    va += da * da;
                    vb += db * db;
                    cab += da * db;
                }
            }
            total += q_from_stats(ma, mb, va / n, vb / n, cab / n);
        }
    }
    Ok(total / count as f64)
}

/// Universal image quality index, averaged over blocks and bands.
pub fn q_index(x: &Tensor, reference: &Tensor) -> Result<f64> {
    let (xb, rb) = pair(x, reference)?;
    let mut total = 0.0;
    for b in 0..xb.c {
        total += q_plane(xb.band(b), rb.band(b), xb.h, xb.w)?;
    }
    Ok(total / xb.c as f64)
}

/// Reference-free indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoReference {
    pub d_lambda: f64,
    pub d_s: f64,
    pub qnr: f64,
}

/// D_λ, D_S and QNR with α = β = p = q = 1 and 8×8 Q blocks.
pub fn no_reference_indices(fused: &Tensor, lrms: &Tensor, pan: &Tensor, ratio: f64) -> Result<NoReference> {
    let f = Bands::new(fused)?;
    let m = Bands::new(lrms)?;
    let p = Bands::new(pan)?;
    if f.c < 2 {
        return Err(Error::invalid_shape(fused.shape(), "no-reference indices need at least 2 bands"));
    }
    if m.c != f.c || p.c != 1 || p.h != f.h || p.w != f.w {
        return Err(Error::shape(fused.shape(), lrms.shape()));
    }
    crate::data::check_registration(p.h, p.w, m.h, m.w, ratio)?;
    let mut d_lambda = 0.0;
    let mut pairs = 0usize;
    for i in 0..f.c {
        for j in 0..f.c {
            if i != j {
                let qf = q_plane(f.band(i), f.band(j), f.h, f.w)?;
                let qm = q_plane(m.band(i), m.band(j), m.h, m.w)?;
                d_lambda += (qf - qm).abs();
                pairs += 1;
            }
        }
    }
    d_lambda /= pairs as f64;
    let pan4 = pan.reshape(&[1, 1, p.h, p.w])?;
    let p_low = bicubic_resize(&pan4, m.h, m.w)?;
    let mut d_s = 0.0;
    for i in 0..f.c {
        let qf = q_plane(f.band(i), p.data, f.h, f.w)?;
        let qm = q_plane(m.band(i), p_low.data(), m.h, m.w)?;
        d_s += (qf - qm).abs();
    }
    d_s /= f.c as f64;
    Ok(NoReference {
        d_lambda,
        d_s,
        qnr: (1.0 - d_lambda) * (1.0 - d_s),
    })
}

/// Metric values for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub values: BTreeMap<Metric, f64>,
}

/// Computes the six reference metrics (when `gt` is present) and the three
/// no-reference indices for one fused image. All images are `[C, H, W]`.
pub fn evaluate_image(
    id: &str,
    fused: &Tensor,
    lrms: &Tensor,
    pan: &Tensor,
    gt: Option<&Tensor>,
    ratio: f64,
    data_range: f64,
) -> Result<ImageMetrics> {
    let mut values = BTreeMap::new();
    if let Some(gt) = gt {
        values.insert(Metric::Psnr, psnr(fused, gt, data_range)?);
        values.insert(Metric::Ssim, ssim(fused, gt, data_range)?);
        values.insert(Metric::Sam, sam(fused, gt)?);
        values.insert(Metric::Ergas, ergas(fused, gt, ratio)?);
        values.insert(Metric::Scc, scc(fused, gt)?);
        values.insert(Metric::Q, q_index(fused, gt)?);
    }
    let nr = no_reference_indices(fused, lrms, pan, ratio)?;
    values.insert(Metric::DLambda, nr.d_lambda);
    values.insert(Metric::DS, nr.d_s);
    values.insert(Metric::Qnr, nr.qnr);
    Ok(ImageMetrics { id: id.to_string(), values })
}

/// Per-image metrics plus unweighted means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub means: BTreeMap<Metric, f64>,
    /// Per metric, how many +∞ entries (perfect PSNR) were left out of the mean.
    pub excluded_infinite: BTreeMap<Metric, usize>,
}

impl MetricReport {
    /// Builds a report; every image must carry the same metric keys.
    pub fn from_images(images: Vec<ImageMetrics>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot build a report from zero images".into()))?;
        let keys: Vec<Metric> = first.values.keys().copied().collect();
        for img in &images {
            if !img.values.keys().copied().eq(keys.iter().copied()) {
                return Err(Error::InvalidArgument(format!(
                    "metric keys of image {:?} differ from image {:?}",
                    img.id, first.id
                )));
            }
        }
        let mut means = BTreeMap::new();
        let mut excluded_infinite = BTreeMap::new();
        for &k in &keys {
            let (mut sum, mut n, mut inf) = (0.0, 0usize, 0usize);
            for img in &images {
                let v = img.values[&k];
                if v.is_infinite() && v > 0.0 {
                    inf += 1;
                } else {
                    sum += v;
                    n += 1;
                }
            }
            means.insert(k, if n == 0 { f64::INFINITY } else { sum / n as f64 });
            if inf > 0 {
                excluded_infinite.insert(k, inf);
            }
        }
        Ok(Self {
            images,
            means,
            excluded_infinite,
        })
    }

    pub fn metrics(&self) -> Vec<Metric> {
        self.means.keys().copied().collect()
    }

    /// Aligned text table in the paper's column layout, ending with a mean row.
    pub fn to_table(&self) -> String {
        let id_w = self
            .images
            .iter()
            .map(|i| i.id.len())
            .chain(["image_id".len(), "mean".len()])
            .max()
            .unwrap_or(8);
        let mut out = String::new();
        let _ = write!(out, "{:<id_w$}", "image_id");
        for m in Metric::ALL {
            let _ = write!(out, " {:>10}", m.name());
        }
        out.push('\n');
        let mut row = |id: &str, vals: &BTreeMap<Metric, f64>| {
            let _ = write!(out, "{id:<id_w$}");
            for m in Metric::ALL {
                let _ = write!(out, " {:>10}", vals.get(&m).map_or("-".to_string(), |&v| format_value(v)));
            }
            out.push('\n');
        };
        for img in &self.images {
            row(&img.id, &img.values);
        }
        row("mean", &self.means);
        for (m, n) in &self.excluded_infinite {
            let _ = writeln!(out, "note: {n} infinite {m} value(s) excluded from the mean");
        }
        out
    }

    /// CSV with the fixed header; absent metrics are empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let mut row = |id: &str, vals: &BTreeMap<Metric, f64>| {
            out.push_str(id);
            for m in Metric::ALL {
                out.push(',');
                if let Some(&v) = vals.get(&m) {
                    out.push_str(&format_value(v));
                }
            }
            out.push('\n');
        };
        for img in &self.images {
            row(&img.id, &img.values);
        }
        row("mean", &self.means);
        out
    }
}

pub const CSV_HEADER: &str = "image_id,PSNR,SSIM,SAM,ERGAS,SCC,Q,D_lambda,D_S,QNR";

/// Four decimals as in the paper's tables; infinities render as `inf`.
pub fn format_value(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.4}")
    }
}

/// Merges reports into one whose means are unweighted over all images.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("aggregate needs at least one report".into()));
    }
    let keys = reports[0].metrics();
    for r in reports {
        if r.metrics() != keys {
            return Err(Error::InvalidArgument(format!(
                "report metric keys differ: {:?} vs {:?}",
                keys,
                r.metrics()
            )));
        }
    }
    MetricReport::from_images(reports.iter().flat_map(|r| r.images.iter().cloned()).collect())
}
