//! Synthetic scenes, Appendix B.1 preprocessing, Wald-protocol pair
//! construction, raster I/O and dataset manifests.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchify::bicubic_resize;
use crate::tensor::Tensor;

/// A registered PAN / LRMS pair with optional ground truth.
#[derive(Debug, Clone)]
pub struct SamplePair {
    /// `[1, H, W]`
    pub pan: Tensor,
    /// `[C, h, w]`
    pub lrms: Tensor,
    /// `[C, H, W]`
    pub gt: Option<Tensor>,
    pub ratio: f64,
    pub id: String,
}

fn chw(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::invalid_shape(t.shape(), format!("{what}: expected [C, H, W]"))),
    }
}

/// PAN extents must equal `round(r × LRMS extents)`.
pub fn check_registration(pan_h: usize, pan_w: usize, ms_h: usize, ms_w: usize, ratio: f64) -> Result<()> {
    let expect = |ms: usize| (ms as f64 * ratio).round() as usize;
    if !(ratio > 1.0) || expect(ms_h) != pan_h || expect(ms_w) != pan_w {
        return Err(Error::Misregistration {
            pan_h,
            pan_w,
            ms_h,
            ms_w,
            ratio,
        });
    }
    Ok(())
}

impl SamplePair {
    pub fn validate(&self) -> Result<()> {
        let (pc, ph, pw) = chw(&self.pan, "pan")?;
        if pc != 1 {
            return Err(Error::invalid_shape(self.pan.shape(), "PAN must have one band"));
        }
        let (c, h, w) = chw(&self.lrms, "lrms")?;
        check_registration(ph, pw, h, w, self.ratio)?;
        if let Some(gt) = &self.gt {
            if gt.shape() != [c, ph, pw] {
                return Err(Error::shape(gt.shape(), &[c, ph, pw]));
            }
        }
        let in_range = |t: &Tensor| t.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !in_range(&self.pan) || !in_range(&self.lrms) || !self.gt.as_ref().map_or(true, in_range) {
            return Err(Error::InvalidArgument(format!("sample {}: values outside [0, 1]", self.id)));
        }
        Ok(())
    }

    pub fn bands(&self) -> usize {
        self.lrms.shape()[0]
    }

    /// PAN extents `(H, W)`.
    pub fn extent(&self) -> (usize, usize) {
        (self.pan.shape()[1], self.pan.shape()[2])
    }
}

/// Adds a leading batch axis of 1.
pub fn batched(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.reshape(shape)
}

// ----------------------------------------------------------------------------
// Appendix B.1 preprocessing

/// `I' = I ⊙ Mask`, broadcasting a `[1, H, W]` binary mask across bands.
pub fn apply_cloud_mask(img: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(img, "image")?;
    if mask.shape() != [1, h, w] {
        return Err(Error::shape(mask.shape(), &[1, h, w]));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::InvalidArgument("cloud mask must be binary {0, 1}".into()));
    }
    let m = mask.data();
    let mut out = img.clone();
    for band in out.data_mut().chunks_exact_mut(h * w) {
        for (v, &k) in band.iter_mut().zip(m) {
            if k == 0.0 {
                *v = 0.0;
            }
        }
    }
    debug_assert_eq!(out.numel(), c * h * w);
    Ok(out)
}

/// Co-registered observations `𝓘` with per-image binary masks.
#[derive(Debug, Clone)]
pub struct SceneStack {
    pub images: Vec<Tensor>,
    pub masks: Vec<Tensor>,
}

/// Result of [`median_composite`].
#[derive(Debug, Clone)]
pub struct Composite {
    pub image: Tensor,
    /// Pixels with no clear observation in any image (set to 0).
    pub uncovered: usize,
}

/// Pixel-wise median over the cloud-free observations of each pixel.
pub fn median_composite(stack: &SceneStack) -> Result<Composite> {
    let first = stack
        .images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty scene stack".into()))?;
    let (c, h, w) = chw(first, "stack image")?;
    if stack.masks.len() != stack.images.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} masks",
            stack.images.len(),
            stack.masks.len()
        )));
    }
    for (img, mask) in stack.images.iter().zip(&stack.masks) {
        if img.shape() != first.shape() {
            return Err(Error::shape(img.shape(), first.shape()));
        }
        if mask.shape() != [1, h, w] {
            return Err(Error::shape(mask.shape(), &[1, h, w]));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::InvalidArgument("cloud mask must be binary {0, 1}".into()));
        }
    }
    let plane = h * w;
    let mut out = vec![0.0f32; c * plane];
    let mut uncovered = 0;
    let mut values = Vec::with_capacity(stack.images.len());
    for px in 0..plane {
        let clear: Vec<usize> = (0..stack.images.len())
            .filter(|&i| stack.masks[i].data()[px] == 1.0)
            .collect();
        if clear.is_empty() {
            uncovered += 1;
            continue;
        }
        for b in 0..c {
            values.clear();
            values.extend(clear.iter().map(|&i| stack.images[i].data()[b * plane + px]));
            values.sort_by(f32::total_cmp);
            let n = values.len();
            out[b * plane + px] = if n % 2 == 1 {
                values[n / 2]
            } else {
                0.5 * (values[n / 2 - 1] + values[n / 2])
            };
        }
    }
    Ok(Composite {
        image: Tensor::new(vec![c, h, w], out)?,
        uncovered,
    })
}

// ----------------------------------------------------------------------------
// Synthetic scenes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    GaussianField,
    Blocks,
    Stripes,
    Mixed,
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-field" => Ok(Self::GaussianField),
            "blocks" => Ok(Self::Blocks),
            "stripes" => Ok(Self::Stripes),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::InvalidArgument(format!(
                "unknown scene generator `{other}` (expected gaussian-field, blocks, stripes or mixed)"
            ))),
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GaussianField => "gaussian-field",
            Self::Blocks => "blocks",
            Self::Stripes => "stripes",
            Self::Mixed => "mixed",
        })
    }
}

/// Scene generator parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub generator: Generator,
    /// Target inter-band correlation in `[0, 1]`.
    pub rho: f64,
    /// Texture correlation length in pixels.
    pub correlation_length: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            generator: Generator::GaussianField,
            rho: 0.8,
            correlation_length: 4.0,
        }
    }
}

/// Number of random Fourier components in a Gaussian field.
const FOURIER_COMPONENTS: usize = 128;
/// Scene value = 0.5 + CONTRAST · z for a unit-variance field z.
const CONTRAST: f64 = 0.12;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(1)))
}

/// A stationary, zero-mean, unit-variance texture evaluated at pixel centres.
/// Evaluation depends only on absolute position, so renders at different
/// sizes show the same process.
enum Field {
    /// `sqrt(2/N) Σ cos(ω·x + φ)` with Gaussian ω: squared-exponential covariance.
    Fourier { freqs: Vec<(f64, f64, f64)> },
    /// Piecewise-constant cells with hashed uniform values.
    Blocks { key: u64, cell: f64, ox: f64, oy: f64 },
    Sum(Box<Field>, Box<Field>),
}

impl Field {
    fn fourier(seed: u64, components: usize, length: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let freqs = (0..components)
            .map(|_| {
                let wx: f64 = rng.sample::<f64, _>(StandardNormal) / length;
                let wy: f64 = rng.sample::<f64, _>(StandardNormal) / length;
                (wx, wy, rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        Field::Fourier { freqs }
    }

    fn stripes(seed: u64, length: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let freqs = (0..3)
            .map(|_| {
                let angle = rng.random_range(0.0..PI);
                let k = rng.random_range(0.5..1.5) / length;
                (k * angle.cos(), k * angle.sin(), rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        Field::Fourier { freqs }
    }

    fn blocks(seed: u64, length: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = (3.0 * length).max(2.0);
        Field::Blocks {
            key: rng.random(),
            cell,
            ox: rng.random_range(0.0..cell),
            oy: rng.random_range(0.0..cell),
        }
    }

    fn build(generator: Generator, seed: u64, length: f64) -> Self {
        match generator {
            Generator::GaussianField => Self::fourier(seed, FOURIER_COMPONENTS, length),
            Generator::Stripes => Self::stripes(seed, length),
            Generator::Blocks => Self::blocks(seed, length),
            Generator::Mixed => Field::Sum(
                Box::new(Self::fourier(stream_seed(seed, 1), FOURIER_COMPONENTS, length)),
                Box::new(Self::blocks(stream_seed(seed, 2), length)),
            ),
        }
    }

    fn render(&self, h: usize, w: usize) -> Vec<f64> {
        match self {
            Field::Fourier { freqs } => {
                let amp = (2.0 / freqs.len() as f64).sqrt();
                let mut out = vec![0.0; h * w];
                for &(wx, wy, phase) in freqs {
                    // cos(a + b) via per-axis tables keeps this O(N(H + W) + NHW)
                    let (cx, sx): (Vec<f64>, Vec<f64>) =
                        (0..w).map(|x| ((wx * x as f64).cos(), (wx * x as f64).sin())).unzip();
                    for y in 0..h {
                        let a = wy * y as f64 + phase;
                        let (ca, sa) = (a.cos(), a.sin());
                        let row = &mut out[y * w..(y + 1) * w];
                        for ((o, &c), &s) in row.iter_mut().zip(&cx).zip(&sx) {
                            *o += amp * (ca * c - sa * s);
                        }
                    }
                }
                out
            }
            Field::Blocks { key, cell, ox, oy } => {
                let mut out = Vec::with_capacity(h * w);
                for y in 0..h {
                    let cy = ((y as f64 + oy) / cell).floor() as i64 as u64;
                    for x in 0..w {
                        let cx = ((x as f64 + ox) / cell).floor() as i64 as u64;
                        let hsh = splitmix64(key ^ splitmix64(cy.wrapping_mul(0x1000_0001) ^ cx));
                        let u = (hsh >> 11) as f64 / (1u64 << 53) as f64;
                        // uniform on [-√3, √3]: unit variance
                        out.push((2.0 * u - 1.0) * 3f64.sqrt());
                    }
                }
                out
            }
            Field::Sum(a, b) => a
                .render(h, w)
                .into_iter()
                .zip(b.render(h, w))
                .map(|(u, v)| (u + v) / 2f64.sqrt())
                .collect(),
        }
    }
}

/// Procedural multispectral scene `[C, H, W]` in `[0, 1]`.
///
/// Each band is `√ρ·common + √(1−ρ)·own` of unit-variance stationary fields,
/// so inter-band correlation is ρ before clamping.
pub fn synth_scene(seed: u64, bands: usize, h: usize, w: usize, spec: &SceneSpec) -> Result<Tensor> {
    if bands == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument("scene extents must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.rho) {
        return Err(Error::InvalidArgument(format!("rho {} outside [0, 1]", spec.rho)));
    }
    if !(spec.correlation_length > 0.0) {
        return Err(Error::InvalidArgument("correlation length must be positive".into()));
    }
    let common = Field::build(spec.generator, stream_seed(seed, 0), spec.correlation_length).render(h, w);
    let (a, b) = (spec.rho.sqrt(), (1.0 - spec.rho).sqrt());
    let mut data = Vec::with_capacity(bands * h * w);
    for band in 0..bands {
        let own = if b > 0.0 {
            Field::build(spec.generator, stream_seed(seed, 100 + band as u64), spec.correlation_length)
                .render(h, w)
        } else {
            vec![0.0; h * w]
        };
        data.extend(
            common
                .iter()
                .zip(&own)
                .map(|(&c, &o)| (0.5 + CONTRAST * (a * c + b * o)).clamp(0.0, 1.0) as f32),
        );
    }
    Tensor::new(vec![bands, h, w], data)
}

// ----------------------------------------------------------------------------
// Wald protocol

/// Normalised 1-D Gaussian taps for `sigma`, radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur with clamped (replicated) borders on `[C, H, W]`.
pub fn gaussian_blur(x: &Tensor, sigma: f64) -> Result<Tensor> {
    let (c, h, w) = chw(x, "blur input")?;
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0f64; c * h * w];
    for (src, dst) in x.data().chunks_exact(w).zip(tmp.chunks_exact_mut(w)) {
        for (xx, d) in dst.iter_mut().enumerate() {
            *d = k
                .iter()
                .enumerate()
                .map(|(j, &t)| t * src[clamp(xx as i64 + j as i64 - r, w)] as f64)
                .sum();
        }
    }
    let mut out = vec![0.0f32; c * h * w];
    for b in 0..c {
        let plane = &tmp[b * h * w..(b + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(j, &t)| t * plane[clamp(y as i64 + j as i64 - r, h) * w + xx])
                    .sum();
                out[(b * h + y) * w + xx] = v as f32;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Normalised band-weighted sum: `[C, H, W] → [1, H, W]`.
pub fn synthesize_pan(gt: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let (c, h, w) = chw(gt, "ground truth")?;
    if weights.len() != c {
        return Err(Error::InvalidArgument(format!("{} PAN weights for {c} bands", weights.len())));
    }
    if weights.iter().any(|&v| !(v >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(
            "PAN weights must be nonnegative and sum to 1".into(),
        ));
    }
    let mut pan = vec![0.0f32; h * w];
    for (band, &wt) in gt.data().chunks_exact(h * w).zip(weights) {
        let wt = wt as f32;
        for (p, &v) in pan.iter_mut().zip(band) {
            *p += wt * v;
        }
    }
    Tensor::new(vec![1, h, w], pan)
}

/// Reduced-resolution pair: LRMS = bicubic-downsample(blur_{σ=r/2}(gt)), PAN =
/// weighted band sum of gt.
pub fn wald_degrade(gt: &Tensor, ratio: f64, pan_weights: &[f64]) -> Result<SamplePair> {
    let (c, h, w) = chw(gt, "ground truth")?;
    if !(ratio > 1.0) {
        return Err(Error::InvalidArgument(format!("ratio {ratio} must exceed 1")));
    }
    if (h as f64) < 2.0 * ratio || (w as f64) < 2.0 * ratio {
        return Err(Error::InvalidArgument(format!("{h}x{w} image too small for ratio {ratio}")));
    }
    let pan = synthesize_pan(gt, pan_weights)?;
    let (lh, lw) = ((h as f64 / ratio).round() as usize, (w as f64 / ratio).round() as usize);
    check_registration(h, w, lh, lw, ratio)?;
    let blurred = gaussian_blur(gt, 0.5 * ratio)?.reshape(vec![1, c, h, w])?;
    let lrms = bicubic_resize(&blurred, lh, lw)?
        .map(|v| v.clamp(0.0, 1.0))
        .reshape(vec![c, lh, lw])?;
    Ok(SamplePair {
        pan,
        lrms,
        gt: Some(gt.clone()),
        ratio,
        id: String::new(),
    })
}

pub fn uniform_weights(bands: usize) -> Vec<f64> {
    vec![1.0 / bands as f64; bands]
}

/// Smallest LRMS offset step `k` with `k·r` integral, so that PAN crops or
/// tiles starting at multiples of `k·r` stay registered with the LRMS grid.
pub fn lrms_offset_step(ratio: f64) -> usize {
    (1..=64)
        .find(|&k| ((k as f64 * ratio) - (k as f64 * ratio).round()).abs() < 1e-9)
        .unwrap_or(1)
}

fn scale_compatible(scale: usize, ratio: f64) -> bool {
    let q = scale as f64 / (2.0 * ratio);
    (q - q.round()).abs() < 1e-9 && q >= 1.0
}

/// Scene seed for image `index` of a given scale within a seed family.
pub fn scene_seed(seed: u64, scale: usize, index: usize) -> u64 {
    stream_seed(stream_seed(seed, scale as u64), index as u64)
}

/// Reduced-resolution test pairs at several square scales.
pub fn make_multiscale_testset(
    seed: u64,
    scales: &[usize],
    bands: usize,
    ratio: f64,
    count_per_scale: usize,
    spec: &SceneSpec,
) -> Result<Vec<SamplePair>> {
    let mut pairs = Vec::with_capacity(scales.len() * count_per_scale);
    for &s in scales {
        if !scale_compatible(s, ratio) {
            return Err(Error::InvalidArgument(format!(
                "scale {s} is not divisible by 2r = {}",
                2.0 * ratio
            )));
        }
        for i in 0..count_per_scale {
            let gt = synth_scene(scene_seed(seed, s, i), bands, s, s, spec)?;
            let mut pair = wald_degrade(&gt, ratio, &uniform_weights(bands))?;
            pair.id = format!("s{s}_{i:03}");
            pairs.push(pair);
        }
    }
    Ok(pairs)
}

// ----------------------------------------------------------------------------
// Raster I/O

const SFRT_MAGIC: &[u8; 4] = b"SFRT";
const SFRT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RasterFormat {
    /// Binary 16-bit PGM (1 band) / PPM (3 bands), big-endian samples.
    Netpbm,
    /// Native lossless float raster.
    Sfrt,
}

impl RasterFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pgm" | "ppm") => Ok(Self::Netpbm),
            Some("sfrt") => Ok(Self::Sfrt),
            _ => Err(Error::InvalidArgument(format!(
                "{}: unknown raster extension (expected .sfrt, .pgm or .ppm)",
                path.display()
            ))),
        }
    }
}

fn ensure_unit_range(img: &Tensor) -> Result<()> {
    if img.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::InvalidArgument("raster values must lie in [0, 1]".into()))
    }
}

pub fn encode_sfrt(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = chw(img, "raster")?;
    ensure_unit_range(img)?;
    let mut out = Vec::with_capacity(20 + 4 * img.numel());
    out.extend_from_slice(SFRT_MAGIC);
    for v in [SFRT_VERSION, c as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Truncated {
            needed: at + 4,
            found: bytes.len(),
        })
}

pub fn decode_sfrt(bytes: &[u8]) -> Result<Tensor> {
    let magic = bytes.get(..4).unwrap_or(bytes);
    if magic != SFRT_MAGIC {
        return Err(Error::BadMagic {
            expected: "SFRT".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = read_u32(bytes, 4)?;
    if version != SFRT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (c, h, w) = (read_u32(bytes, 8)? as usize, read_u32(bytes, 12)? as usize, read_u32(bytes, 16)? as usize);
    let n = c * h * w;
    let needed = 20 + 4 * n;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    let data = bytes[20..needed]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(vec![c, h, w], data)
}

pub fn encode_netpbm(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = chw(img, "raster")?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::UnsupportedBands(c)),
    };
    ensure_unit_range(img)?;
    let mut out = format!("{magic}\n{w} {h}\n65535\n").into_bytes();
    let plane = h * w;
    for px in 0..plane {
        for b in 0..c {
            let q = (img.data()[b * plane + px] as f64 * 65535.0).round() as u16;
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    Ok(out)
}

pub fn decode_netpbm(bytes: &[u8]) -> Result<Tensor> {
    let malformed = |reason: &str| Error::Malformed {
        what: "PGM/PPM header".into(),
        reason: reason.into(),
    };
    let magic = bytes.get(..2).unwrap_or(bytes);
    let c = match magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => {
            return Err(Error::BadMagic {
                expected: "P5 or P6".into(),
                found: String::from_utf8_lossy(magic).into_owned(),
            })
        }
    };
    // three whitespace-separated header fields, '#' comments allowed
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("expected width, height and maxval"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        fields.push(text.parse::<usize>().map_err(|_| malformed("number out of range"))?);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed("missing separator after maxval"));
    }
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 65535 {
        return Err(malformed("only 16-bit rasters (maxval 65535) are supported"));
    }
    let plane = h * w;
    let needed = pos + 2 * c * plane;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    let mut data = vec![0.0f32; c * plane];
    for (i, s) in bytes[pos..needed].chunks_exact(2).enumerate() {
        let v = u16::from_be_bytes([s[0], s[1]]);
        let (px, b) = (i / c, i % c);
        data[b * plane + px] = (v as f64 / 65535.0) as f32;
    }
    Tensor::new(vec![c, h, w], data)
}

/// Writes `[C, H, W]`, choosing the format from the file extension.
pub fn write_raster(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = match RasterFormat::from_path(path)? {
        RasterFormat::Sfrt => encode_sfrt(img)?,
        RasterFormat::Netpbm => encode_netpbm(img)?,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: &Path) -> Result<Tensor> {
    let format = RasterFormat::from_path(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        RasterFormat::Sfrt => decode_sfrt(&bytes),
        RasterFormat::Netpbm => decode_netpbm(&bytes),
    }
}

// ----------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Test => "test",
        })
    }
}

/// One manifest record. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub scale: usize,
    pub ratio: f64,
    pub pan: PathBuf,
    pub lrms: PathBuf,
    pub gt: Option<PathBuf>,
}

/// Dataset index: one `key=value` record per line, `#` comments allowed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

fn check_token(value: &str, key: &str) -> Result<()> {
    if value.is_empty() || value.chars().any(|ch| ch.is_whitespace() || ch == '=') {
        return Err(Error::InvalidArgument(format!(
            "manifest {key} `{value}` must be non-empty without whitespace or '='"
        )));
    }
    Ok(())
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| Error::Malformed {
                what: format!("manifest line {}", lineno + 1),
                reason,
            };
            let mut kv = BTreeMap::new();
            for field in line.split_whitespace() {
                let (k, v) = field
                    .split_once('=')
                    .ok_or_else(|| bad(format!("`{field}` is not key=value")))?;
                if kv.insert(k, v).is_some() {
                    return Err(bad(format!("duplicate key `{k}`")));
                }
            }
            let mut take = |k: &str| kv.remove(k).ok_or_else(|| bad(format!("missing `{k}`")));
            let entry = ManifestEntry {
                id: take("id")?.to_string(),
                split: take("split")?.parse().map_err(|e: Error| bad(e.to_string()))?,
                scale: take("scale")?.parse().map_err(|e| bad(format!("scale: {e}")))?,
                ratio: take("r")?.parse().map_err(|e| bad(format!("r: {e}")))?,
                pan: PathBuf::from(take("pan")?),
                lrms: PathBuf::from(take("lrms")?),
                gt: kv.remove("gt").map(PathBuf::from),
            };
            if let Some(k) = kv.keys().next() {
                return Err(bad(format!("unknown key `{k}`")));
            }
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn render(&self) -> Result<String> {
        let mut out = String::from("# scaleformer dataset manifest\n");
        for e in &self.entries {
            check_token(&e.id, "id")?;
            let path = |p: &Path, key: &str| -> Result<String> {
                let s = p.to_string_lossy().into_owned();
                check_token(&s, key)?;
                Ok(s)
            };
            out.push_str(&format!(
                "id={} split={} scale={} r={} pan={} lrms={}",
                e.id,
                e.split,
                e.scale,
                e.ratio,
                path(&e.pan, "pan")?,
                path(&e.lrms, "lrms")?
            ));
            if let Some(gt) = &e.gt {
                out.push_str(&format!(" gt={}", path(gt, "gt")?));
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()?).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Reads the rasters of one manifest entry, resolving paths against `root`.
pub fn load_pair(entry: &ManifestEntry, root: &Path) -> Result<SamplePair> {
    let pair = SamplePair {
        pan: read_raster(&root.join(&entry.pan))?,
        lrms: read_raster(&root.join(&entry.lrms))?,
        gt: entry.gt.as_ref().map(|p| read_raster(&root.join(p))).transpose()?,
        ratio: entry.ratio,
        id: entry.id.clone(),
    };
    pair.validate()?;
    Ok(pair)
}

/// What `synth-data` builds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub seed: u64,
    pub bands: usize,
    pub ratio: f64,
    /// Square test scales (PAN extents).
    pub scales: Vec<usize>,
    pub test_per_scale: usize,
    pub train_count: usize,
    /// Extent of the square training scenes.
    pub train_size: usize,
    pub scene: SceneSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            bands: 4,
            ratio: 2.0,
            scales: vec![32, 64, 128, 256],
            test_per_scale: 2,
            train_count: 16,
            train_size: 128,
            scene: SceneSpec::default(),
        }
    }
}

/// Scale tag used for training-split seeds so they never collide with test scenes.
const TRAIN_STREAM: usize = usize::MAX;

/// Generates rasters plus `manifest.txt` under `dir`; returns the manifest.
pub fn build_dataset(dir: &Path, spec: &DatasetSpec) -> Result<Manifest> {
    if spec.bands == 0 || spec.train_count == 0 && spec.scales.is_empty() {
        return Err(Error::InvalidConfig("dataset would be empty".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    let mut emit = |pair: &SamplePair, split: Split, scale: usize| -> Result<()> {
        let name = |kind: &str| PathBuf::from(format!("{}_{kind}.sfrt", pair.id));
        let entry = ManifestEntry {
            id: pair.id.clone(),
            split,
            scale,
            ratio: pair.ratio,
            pan: name("pan"),
            lrms: name("lrms"),
            gt: pair.gt.as_ref().map(|_| name("gt")),
        };
        write_raster(&dir.join(&entry.pan), &pair.pan)?;
        write_raster(&dir.join(&entry.lrms), &pair.lrms)?;
        if let (Some(gt), Some(p)) = (&pair.gt, &entry.gt) {
            write_raster(&dir.join(p), gt)?;
        }
        manifest.entries.push(entry);
        Ok(())
    };
    if spec.train_count > 0 && !scale_compatible(spec.train_size, spec.ratio) {
        return Err(Error::InvalidConfig(format!(
            "train size {} is not divisible by 2r",
            spec.train_size
        )));
    }
    for i in 0..spec.train_count {
        let s = spec.train_size;
        let gt = synth_scene(scene_seed(spec.seed, TRAIN_STREAM, i), spec.bands, s, s, &spec.scene)?;
        let mut pair = wald_degrade(&gt, spec.ratio, &uniform_weights(spec.bands))?;
        pair.id = format!("train_{i:04}");
        emit(&pair, Split::Train, s)?;
    }
    let test = make_multiscale_testset(
        spec.seed,
        &spec.scales,
        spec.bands,
        spec.ratio,
        spec.test_per_scale,
        &spec.scene,
    )?;
    for pair in &test {
        emit(pair, Split::Test, pair.extent().0)?;
    }
    manifest.save(&dir.join("manifest.txt"))?;
    Ok(manifest)
}
