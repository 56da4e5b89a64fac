//! Analytic compute and memory model (Fig. 1(b), Fig. 4(c)(d), Table 5 framing).
//!
//! Counting convention: one multiply-accumulate (MAC) per product term of a
//! matmul or convolution (1 MAC = 2 FLOPs). Softmax and layer norm are charged
//! [`NORM_COST`] MACs per element they touch. Elementwise adds, GELU, RoPE,
//! rearranges, padding and the bicubic resize are not counted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Axis, ModelConfig};

/// MAC-equivalents charged per element for softmax and layer norm.
pub const NORM_COST: u64 = 5;
/// Bytes per activation element (f32).
pub const BYTES_PER_ELEMENT: u64 = 4;

/// Per-stage MAC counts for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    /// Window tokens `T = ⌈H/p⌉·⌈W/p⌉`.
    pub tokens: usize,
    /// Both convolutional encoders.
    pub encoder: u64,
    /// Spatial (within-window) attention stages of the single blocks,
    /// including their layer norms and q/k/v/o projections.
    pub spatial_attention: u64,
    /// Sequence (across-window) attention stages of the single blocks,
    /// including their layer norms and projections.
    pub sequence_attention: u64,
    /// Attention stages of the cross blocks (both axes), with norms and projections.
    pub cross: u64,
    /// Every feed-forward network together with its pre-norm.
    pub ffn: u64,
    /// Output convolution.
    pub head: u64,
    pub total: u64,
    /// Inference activation high-water mark, in elements (batch 1).
    pub peak_activation_elements: u64,
    /// Same network with every attention stage global over all `H·W` pixels.
    pub global_attention_total: u64,
}

impl FlopReport {
    pub fn stages(&self) -> [(&'static str, u64); 6] {
        [
            ("encoder", self.encoder),
            ("spatial_attention", self.spatial_attention),
            ("sequence_attention", self.sequence_attention),
            ("cross", self.cross),
            ("ffn", self.ffn),
            ("head", self.head),
        ]
    }

    pub fn gflops(&self) -> f64 {
        2.0 * self.total as f64 / 1e9
    }
}

fn check(cfg: &ModelConfig, h: usize, w: usize, window: usize) -> Result<()> {
    cfg.validate()?;
    if window == 0 || h < window || w < window {
        return Err(Error::InvalidArgument(format!(
            "window {window} must be positive and fit inside the {h}x{w} image"
        )));
    }
    Ok(())
}

/// Padded pixel count and token count for a `h × w` image at window `p`.
fn tiling(h: usize, w: usize, p: usize) -> (u64, u64) {
    let t = (h.div_ceil(p) * w.div_ceil(p)) as u64;
    (t * (p * p) as u64, t)
}

/// Cost of one attention stage over `pixels` feature vectors, arranged as
/// `groups` independent sequences of length `len`, plus `norms` layer norms.
fn attention_stage(cfg: &ModelConfig, pixels: u64, groups: u64, len: u64, norms: u64) -> u64 {
    let c = cfg.channels as u64;
    let heads = cfg.heads as u64;
    let projections = 4 * pixels * c * c;
    let core = 2 * groups * len * len * c;
    let softmax = NORM_COST * groups * heads * len * len;
    projections + core + softmax + norms * NORM_COST * pixels * c
}

fn ffn_stage(cfg: &ModelConfig, pixels: u64) -> u64 {
    let c = cfg.channels as u64;
    let hidden = (cfg.channels * cfg.ffn_ratio) as u64;
    2 * pixels * c * hidden + NORM_COST * pixels * c
}

fn encoder_cost(cfg: &ModelConfig, pixels: u64) -> u64 {
    let c = cfg.channels as u64;
    let taps = 9;
    let pan = pixels * c * taps * (1 + c);
    let ms = pixels * c * taps * (cfg.ms_bands as u64 + c);
    pan + ms
}

fn stage_counts(cfg: &ModelConfig) -> (u64, u64) {
    let single_stages = 2 * cfg.n_single as u64;
    let cross_stages = cfg.n_cross as u64;
    (single_stages, cross_stages)
}

/// Closed-form MAC counts for one `h × w` image at window `p`. The ratio `r`
/// only sizes the LRMS input and enters the peak-memory estimate.
pub fn flop_count(cfg: &ModelConfig, h: usize, w: usize, ratio: f64, window: usize) -> Result<FlopReport> {
    check(cfg, h, w, window)?;
    let (pixels, t) = tiling(h, w, window);
    let p2 = (window * window) as u64;
    let (single_per_axis, cross_per_axis) = stage_counts(cfg);
    let spatial_one = |norms| attention_stage(cfg, pixels, t, p2, norms);
    let second_one = |norms| match cfg.second_axis() {
        Axis::Spatial => attention_stage(cfg, pixels, t, p2, norms),
        Axis::Sequence => attention_stage(cfg, pixels, p2, t, norms),
    };
    let (spatial_attention, sequence_attention) = match cfg.second_axis() {
        Axis::Spatial => (2 * single_per_axis * spatial_one(1), 0),
        Axis::Sequence => (single_per_axis * spatial_one(1), single_per_axis * second_one(1)),
    };
    let cross = cross_per_axis * (spatial_one(2) + second_one(2));
    let n_ffn = 2 * single_per_axis + 2 * cross_per_axis;
    let ffn = n_ffn * ffn_stage(cfg, pixels);
    let encoder = encoder_cost(cfg, pixels);
    let head = pixels * cfg.ms_bands as u64 * cfg.channels as u64 * 9;
    let total = encoder + spatial_attention + sequence_attention + cross + ffn + head;

    let global_pixels = (h * w) as u64;
    let global_attention = 2 * single_per_axis * attention_stage(cfg, global_pixels, 1, global_pixels, 1)
        + 2 * cross_per_axis * attention_stage(cfg, global_pixels, 1, global_pixels, 2);
    let global_attention_total = encoder_cost(cfg, global_pixels)
        + global_attention
        + n_ffn * ffn_stage(cfg, global_pixels)
        + global_pixels * cfg.ms_bands as u64 * cfg.channels as u64 * 9;

    Ok(FlopReport {
        height: h,
        width: w,
        window,
        tokens: t as usize,
        encoder,
        spatial_attention,
        sequence_attention,
        cross,
        ffn,
        head,
        total,
        peak_activation_elements: memory_estimate(cfg, h, w, ratio, window, 1)?.elements,
        global_attention_total,
    })
}

/// Inference activation high-water mark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub elements: u64,
    pub bytes: u64,
}

/// Peak live activation elements of a no-grad forward pass.
///
/// Live throughout the blocks: the PAN/LRMS inputs, the upsampled MS, padded
/// and patchified copies of both, and the two feature maps `f_pan`, `f_ms`.
/// On top of that the largest stage transient: an attention stage holds the
/// normed input, q, k, v, the context and the output projection (six `N·C`
/// maps, eight for across-window stages because of the two relayouts) plus the
/// probability tensor; an FFN holds its norm, two `N·4C`-sized hidden maps
/// (matmul result and biased copy) and the GELU output.
pub fn memory_estimate(
    cfg: &ModelConfig,
    h: usize,
    w: usize,
    ratio: f64,
    window: usize,
    batch: usize,
) -> Result<MemoryEstimate> {
    check(cfg, h, w, window)?;
    if !(ratio >= 1.0) {
        return Err(Error::InvalidArgument(format!("ratio must be at least 1, got {ratio}")));
    }
    let (pixels, t) = tiling(h, w, window);
    let p2 = (window * window) as u64;
    let c = cfg.channels as u64;
    let bands = cfg.ms_bands as u64;
    let heads = cfg.heads as u64;
    let hidden = (cfg.channels * cfg.ffn_ratio) as u64;
    let full = (h * w) as u64;
    let lrms = (bands as f64 * full as f64 / (ratio * ratio)).ceil() as u64;

    let persistent = full * (1 + bands) + lrms + 2 * pixels * (1 + bands) + 2 * pixels * c;
    let spatial_probs = t * heads * p2 * p2;
    let sequence_probs = p2 * heads * t * t;
    let spatial = 6 * pixels * c + spatial_probs;
    let second = match cfg.second_axis() {
        Axis::Spatial => spatial,
        Axis::Sequence => 8 * pixels * c + sequence_probs,
    };
    let ffn = 2 * pixels * c + 3 * pixels * hidden;
    let encoder = 3 * pixels * c;
    let head = pixels * c + 2 * pixels * bands + 2 * full * bands;
    let transient = spatial.max(second).max(ffn).max(encoder).max(head);
    let elements = batch as u64 * (persistent + transient);
    Ok(MemoryEstimate {
        elements,
        bytes: elements * BYTES_PER_ELEMENT,
    })
}
