//! ScaleFormer: encoder, Single Transformer, Cross Transformer, RoPE on the
//! sequence axis and the reconstruction head (Eqs. 2–10).
//!
//! Inside the blocks, features are kept channel-last as `[B·T, p², C]`: each
//! row is one pixel of one window. Spatial attention mixes the `p²` pixels of
//! a window. Sequence attention rearranges to `[B·p², T, C]` and mixes the `T`
//! windows at each pixel offset. No parameter shape depends on `T` or `p`.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::check_registration;
use crate::error::{Error, Result};
use crate::patchify::{bicubic_resize, pad_to_multiple, patchify, PatchGrid};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Standard deviation of the truncated-normal projection init.
pub const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature width C.
    pub channels: usize,
    pub heads: usize,
    /// Single-transformer blocks per modality.
    pub n_single: usize,
    pub n_cross: usize,
    pub ffn_ratio: usize,
    pub use_rope: bool,
    /// When false, the sequence stage of every block is a second spatial stage.
    pub use_seq_transformer: bool,
    /// When false, training uses a single static window (read by the trainer).
    pub use_sap: bool,
    pub global_residual: bool,
    pub rope_base: f64,
    /// Number of multispectral bands.
    pub ms_bands: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            heads: 4,
            n_single: 2,
            n_cross: 2,
            ffn_ratio: 2,
            use_rope: true,
            use_seq_transformer: true,
            use_sap: true,
            global_residual: true,
            rope_base: 10_000.0,
            ms_bands: 4,
        }
    }
}

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Normal(0, 0.02) truncated at two standard deviations.
    TruncNormal,
    /// He normal over the conv fan-in.
    He,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Which axis an attention stage mixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// The `p²` pixels inside each window.
    Spatial,
    /// The `T` windows at each pixel offset.
    Sequence,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!(
                "channels ({}) must be a positive multiple of heads ({})",
                self.channels, self.heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dimension {} must be even for RoPE", self.head_dim()));
        }
        if self.n_single == 0 || self.n_cross == 0 {
            return bad("block counts must be at least 1".into());
        }
        if self.ffn_ratio == 0 || self.ms_bands == 0 {
            return bad("ffn_ratio and ms_bands must be positive".into());
        }
        if !(self.rope_base > 1.0 && self.rope_base.is_finite()) {
            return bad(format!("rope_base {} must exceed 1", self.rope_base));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads.max(1)
    }

    /// Axis of the second stage of every block.
    pub fn second_axis(&self) -> Axis {
        if self.use_seq_transformer {
            Axis::Sequence
        } else {
            Axis::Spatial
        }
    }

    /// Every parameter's name, shape and initialiser, in a fixed order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.channels;
        let hidden = c * self.ffn_ratio;
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { name, shape, init });

        for (prefix, cin) in [("enc_pan", 1), ("enc_ms", self.ms_bands)] {
            add(format!("{prefix}.conv1.weight"), vec![c, cin, 3, 3], Init::He);
            add(format!("{prefix}.conv1.bias"), vec![c], Init::Zeros);
            add(format!("{prefix}.conv2.weight"), vec![c, c, 3, 3], Init::He);
            add(format!("{prefix}.conv2.bias"), vec![c], Init::Zeros);
        }
        let ln = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: String| {
            add(format!("{p}.weight"), vec![c], Init::Ones);
            add(format!("{p}.bias"), vec![c], Init::Zeros);
        };
        let attn = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: String| {
            for proj in ["q", "k", "v"] {
                add(format!("{p}.{proj}.weight"), vec![c, c], Init::TruncNormal);
                add(format!("{p}.{proj}.bias"), vec![c], Init::Zeros);
            }
            add(format!("{p}.o.weight"), vec![c, c], Init::Zeros);
            add(format!("{p}.o.bias"), vec![c], Init::Zeros);
        };
        let ffn = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: String| {
            add(format!("{p}.fc1.weight"), vec![c, hidden], Init::TruncNormal);
            add(format!("{p}.fc1.bias"), vec![hidden], Init::Zeros);
            add(format!("{p}.fc2.weight"), vec![hidden, c], Init::Zeros);
            add(format!("{p}.fc2.bias"), vec![c], Init::Zeros);
        };
        for modality in ["single_pan", "single_ms"] {
            for i in 0..self.n_single {
                for stage in ["stage1", "stage2"] {
                    let p = format!("{modality}.{i}.{stage}");
                    ln(&mut add, format!("{p}.ln_attn"));
                    attn(&mut add, format!("{p}.attn"));
                    ln(&mut add, format!("{p}.ln_ffn"));
                    ffn(&mut add, format!("{p}.ffn"));
                }
            }
        }
        for i in 0..self.n_cross {
            for stage in ["stage1", "stage2"] {
                let p = format!("cross.{i}.{stage}");
                ln(&mut add, format!("{p}.ln_q"));
                ln(&mut add, format!("{p}.ln_kv"));
                attn(&mut add, format!("{p}.attn"));
                ln(&mut add, format!("{p}.ln_ffn"));
                ffn(&mut add, format!("{p}.ffn"));
            }
        }
        add("head.weight".into(), vec![self.ms_bands, c, 3, 3], Init::Zeros);
        add("head.bias".into(), vec![self.ms_bands], Init::Zeros);
        specs
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the model seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Named learned tensors of a ScaleFormer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<E: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<E>>,
}

impl ModelParams<f32> {
    /// Seeded initialisation. Each tensor draws from its own stream keyed by
    /// name, so the values do not depend on parameter ordering.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
        let mut tensors = BTreeMap::new();
        for spec in cfg.param_specs() {
            let n: usize = spec.shape.iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &spec.name));
            let data: Vec<f32> = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::He => {
                    let fan_in: usize = spec.shape[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| (normal.sample(&mut rng) * std) as f32).collect()
                }
                Init::TruncNormal => (0..n)
                    .map(|_| loop {
                        let z = normal.sample(&mut rng);
                        if z.abs() <= 2.0 {
                            break (z * INIT_STD) as f32;
                        }
                    })
                    .collect(),
            };
            tensors.insert(spec.name, Tensor::new(spec.shape, data)?);
        }
        Ok(Self { tensors })
    }
}

impl<E: Scalar> ModelParams<E> {
    /// Builds a parameter set from named tensors, checking it against `cfg`.
    pub fn from_map(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor<E>>) -> Result<Self> {
        let params = Self { tensors };
        params.check(cfg)?;
        Ok(params)
    }

    /// Verifies that names and shapes are exactly those `cfg` prescribes and
    /// that every value is finite.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let specs = cfg.param_specs();
        for spec in &specs {
            let t = self
                .tensors
                .get(&spec.name)
                .ok_or_else(|| Error::MissingTensor(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::TensorShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
            t.ensure_finite(&spec.name)?;
        }
        if self.tensors.len() != specs.len() {
            let known: std::collections::BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            if let Some(extra) = self.tensors.keys().find(|k| !known.contains(k.as_str())) {
                return Err(Error::UnknownTensor(extra.clone()));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<E>)> {
        self.tensors.iter_mut()
    }

    /// Mutable access to the underlying map for in-place updates that keep
    /// names and shapes (optimisers).
    pub(crate) fn map_mut(&mut self) -> &mut BTreeMap<String, Tensor<E>> {
        &mut self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<F: Scalar>(&self) -> ModelParams<F> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<E>> {
        self.tensors
    }

    /// True when every tensor matches bitwise.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bitwise_eq(b))
    }
}

/// Parameters bound to a tape as leaves.
pub struct Bound<E: Scalar = f32> {
    vars: BTreeMap<String, Var<E>>,
}

impl<E: Scalar> Bound<E> {
    pub fn new(tape: &Tape<E>, params: &ModelParams<E>, requires_grad: bool) -> Self {
        Self {
            vars: params
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Var<E>> {
        self.vars.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<E>)> {
        self.vars.iter()
    }

    /// Accumulated gradients after `backward`, zeros where none arrived.
    pub fn grads(&self) -> BTreeMap<String, Tensor<E>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let g = v.grad().map(|g| g.clone()).unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()));
                (k.clone(), g)
            })
            .collect()
    }
}

/// Token layout of a `[B·T, …]` feature batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub batch: usize,
    pub tokens: usize,
    pub window: usize,
}

impl Layout {
    /// Pixels per window, the spatial-attention sequence length.
    pub fn pixels(&self) -> usize {
        self.window * self.window
    }

    fn check_nchw(&self, shape: &[usize], channels: usize) -> Result<()> {
        if shape != [self.batch * self.tokens, channels, self.window, self.window] {
            return Err(Error::InvalidArgument(format!(
                "features {shape:?} do not match layout {self:?} with {channels} channels"
            )));
        }
        Ok(())
    }
}

struct Ctx<'a, E: Scalar> {
    tape: &'a Tape<E>,
    vars: &'a Bound<E>,
    cfg: &'a ModelConfig,
}

impl<E: Scalar> Ctx<'_, E> {
    fn var(&self, name: &str) -> Result<&Var<E>> {
        self.vars.get(name)
    }

    /// `x·W + b` over the last axis.
    fn linear(&self, x: &Var<E>, prefix: &str) -> Result<Var<E>> {
        let w = self.var(&format!("{prefix}.weight"))?;
        let b = self.var(&format!("{prefix}.bias"))?;
        let shape = x.shape().to_vec();
        let (cin, cout) = (w.shape()[0], w.shape()[1]);
        let rows = x.value().numel() / cin;
        let flat = self.tape.reshape(x, &[rows, cin])?;
        let y = self.tape.add(&self.tape.matmul(&flat, w)?, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = cout;
        self.tape.reshape(&y, &out_shape)
    }

    fn layer_norm(&self, x: &Var<E>, prefix: &str) -> Result<Var<E>> {
        self.tape.layer_norm(
            x,
            x.shape().len() - 1,
            self.var(&format!("{prefix}.weight"))?,
            self.var(&format!("{prefix}.bias"))?,
            E::lit(LAYER_NORM_EPS),
        )
    }

    fn ffn(&self, x: &Var<E>, prefix: &str) -> Result<Var<E>> {
        let h = self.tape.gelu(&self.linear(x, &format!("{prefix}.fc1"))?);
        self.linear(&h, &format!("{prefix}.fc2"))
    }

    fn conv(&self, x: &Var<E>, prefix: &str) -> Result<Var<E>> {
        self.tape.conv2d(
            x,
            self.var(&format!("{prefix}.weight"))?,
            Some(self.var(&format!("{prefix}.bias"))?),
        )
    }

    /// Multi-head scaled dot-product attention on `[N, L, C]` sequences.
    fn multi_head(
        &self,
        q_in: &Var<E>,
        kv_in: &Var<E>,
        prefix: &str,
        rope_positions: Option<&[usize]>,
    ) -> Result<(Var<E>, Tensor<E>)> {
        let h = self.cfg.heads;
        let split = |x: Var<E>| self.tape.rearrange(&x, "n l (h d) -> n h l d", &[("h", h)]);
        let mut q = split(self.linear(q_in, &format!("{prefix}.q"))?)?;
        let mut k = split(self.linear(kv_in, &format!("{prefix}.k"))?)?;
        let v = split(self.linear(kv_in, &format!("{prefix}.v"))?)?;
        if let Some(pos) = rope_positions {
            q = self.tape.rope(&q, pos, self.cfg.rope_base)?;
            k = self.tape.rope(&k, pos, self.cfg.rope_base)?;
        }
        let scale = E::lit(1.0 / (self.cfg.head_dim() as f64).sqrt());
        let (ctx, probs) = self.tape.attention_with_probs(&q, &k, &v, scale)?;
        let merged = self.tape.rearrange(&ctx, "n h l d -> n l (h d)", &[])?;
        Ok((self.linear(&merged, &format!("{prefix}.o"))?, probs))
    }

    /// Attention along `axis` on channel-last `[B·T, p², C]` features.
    fn attend(
        &self,
        q_src: &Var<E>,
        kv_src: &Var<E>,
        layout: Layout,
        axis: Axis,
        prefix: &str,
        position_offset: usize,
    ) -> Result<(Var<E>, Tensor<E>)> {
        if q_src.shape() != kv_src.shape() {
            return Err(Error::InvalidArgument(format!(
                "query {:?} and key/value {:?} layouts differ",
                q_src.shape(),
                kv_src.shape()
            )));
        }
        match axis {
            Axis::Spatial => self.multi_head(q_src, kv_src, prefix, None),
            Axis::Sequence => {
                let b = [("b", layout.batch)];
                let to_seq = |x: &Var<E>| self.tape.rearrange(x, "(b t) l c -> (b l) t c", &b);
                let (q, kv) = (to_seq(q_src)?, to_seq(kv_src)?);
                let positions: Vec<usize> =
                    (position_offset..position_offset + layout.tokens).collect();
                let rope = self.cfg.use_rope.then_some(positions.as_slice());
                let (out, probs) = self.multi_head(&q, &kv, prefix, rope)?;
                let back = self.tape.rearrange(&out, "(b l) t c -> (b t) l c", &b)?;
                Ok((back, probs))
            }
        }
    }

    /// Eqs. 3–4 / 5–6: `x + Attn(LN(x))`, then `+ FFN(LN(·))`.
    fn single_stage(&self, x: &Var<E>, layout: Layout, axis: Axis, prefix: &str) -> Result<Var<E>> {
        let n = self.layer_norm(x, &format!("{prefix}.ln_attn"))?;
        let (a, _) = self.attend(&n, &n, layout, axis, &format!("{prefix}.attn"), 0)?;
        let x1 = self.tape.add(x, &a)?;
        let f = self.ffn(&self.layer_norm(&x1, &format!("{prefix}.ln_ffn"))?, &format!("{prefix}.ffn"))?;
        self.tape.add(&x1, &f)
    }

    /// Eqs. 7–8 / 9–10 with MS as query and PAN as key/value.
    fn cross_stage(&self, m: &Var<E>, p: &Var<E>, layout: Layout, axis: Axis, prefix: &str) -> Result<Var<E>> {
        let q = self.layer_norm(m, &format!("{prefix}.ln_q"))?;
        let kv = self.layer_norm(p, &format!("{prefix}.ln_kv"))?;
        let (a, _) = self.attend(&q, &kv, layout, axis, &format!("{prefix}.attn"), 0)?;
        let m1 = self.tape.add(m, &a)?;
        let f = self.ffn(&self.layer_norm(&m1, &format!("{prefix}.ln_ffn"))?, &format!("{prefix}.ffn"))?;
        self.tape.add(&m1, &f)
    }

    fn single_block(&self, x: &Var<E>, layout: Layout, prefix: &str) -> Result<Var<E>> {
        let x = self.single_stage(x, layout, Axis::Spatial, &format!("{prefix}.stage1"))?;
        self.single_stage(&x, layout, self.cfg.second_axis(), &format!("{prefix}.stage2"))
    }

    fn cross_block(&self, m: &Var<E>, p: &Var<E>, layout: Layout, prefix: &str) -> Result<Var<E>> {
        let m = self.cross_stage(m, p, layout, Axis::Spatial, &format!("{prefix}.stage1"))?;
        self.cross_stage(&m, p, layout, self.cfg.second_axis(), &format!("{prefix}.stage2"))
    }

    /// `[B, T, Cin, p, p] → [B·T, C, p, p]`.
    fn encode(&self, x5d: &Var<E>, prefix: &str) -> Result<Var<E>> {
        let x = self.tape.rearrange(x5d, "b t c h w -> (b t) c h w", &[])?;
        let h = self.tape.gelu(&self.conv(&x, &format!("{prefix}.conv1"))?);
        self.conv(&h, &format!("{prefix}.conv2"))
    }

    fn to_tokens(&self, x: &Var<E>) -> Result<Var<E>> {
        self.tape.rearrange(x, "n c h w -> n (h w) c", &[])
    }

    fn from_tokens(&self, x: &Var<E>, window: usize) -> Result<Var<E>> {
        self.tape.rearrange(x, "n (h w) c -> n c h w", &[("h", window)])
    }
}

/// Eq. 2: `R54` then conv3x3 → GELU → conv3x3. `prefix` is `enc_pan` or `enc_ms`.
pub fn encode<E: Scalar>(
    tape: &Tape<E>,
    vars: &Bound<E>,
    x5d: &Var<E>,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<Var<E>> {
    if x5d.shape().len() != 5 {
        return Err(Error::invalid_shape(x5d.shape(), "encode expects [B, T, C, p, p]"));
    }
    Ctx { tape, vars, cfg }.encode(x5d, prefix)
}

/// RoPE on the last axis of `[..., L, d]` at the given positions.
pub fn rope_rotate<E: Scalar>(x: &Tensor<E>, positions: &[usize], base: f64) -> Result<Tensor<E>> {
    let tape = Tape::no_grad();
    Ok(tape.rope(&tape.constant(x.clone()), positions, base)?.value().clone())
}

/// Attention output together with the probability matrices.
pub struct AttentionOutput<E: Scalar = f32> {
    /// Same shape as the query source.
    pub out: Var<E>,
    /// `[N, heads, Lq, Lk]`: `N = B·T` for spatial, `B·p²` for sequence attention.
    pub probs: Tensor<E>,
}

/// One attention stage on `[B·T, C, p, p]` features. Self-attention when
/// `q_src` and `kv_src` are the same variable. Sequence positions are
/// `position_offset..position_offset + T` (0 in the model).
#[allow(clippy::too_many_arguments)]
pub fn attention<E: Scalar>(
    tape: &Tape<E>,
    vars: &Bound<E>,
    q_src: &Var<E>,
    kv_src: &Var<E>,
    layout: Layout,
    axis: Axis,
    prefix: &str,
    cfg: &ModelConfig,
    position_offset: usize,
) -> Result<AttentionOutput<E>> {
    layout.check_nchw(q_src.shape(), cfg.channels)?;
    layout.check_nchw(kv_src.shape(), cfg.channels)?;
    let ctx = Ctx { tape, vars, cfg };
    let q = ctx.to_tokens(q_src)?;
    let kv = if q_src.id() == kv_src.id() { q.clone() } else { ctx.to_tokens(kv_src)? };
    let (out, probs) = ctx.attend(&q, &kv, layout, axis, prefix, position_offset)?;
    Ok(AttentionOutput {
        out: ctx.from_tokens(&out, layout.window)?,
        probs,
    })
}

/// Eqs. 3–6 on `[B·T, C, p, p]` features; `prefix` like `single_pan.0`.
pub fn single_block<E: Scalar>(
    tape: &Tape<E>,
    vars: &Bound<E>,
    f: &Var<E>,
    layout: Layout,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<Var<E>> {
    layout.check_nchw(f.shape(), cfg.channels)?;
    let ctx = Ctx { tape, vars, cfg };
    let out = ctx.single_block(&ctx.to_tokens(f)?, layout, prefix)?;
    ctx.from_tokens(&out, layout.window)
}

/// Eqs. 7–10 on `[B·T, C, p, p]` features; `prefix` like `cross.0`.
pub fn cross_block<E: Scalar>(
    tape: &Tape<E>,
    vars: &Bound<E>,
    f_ms: &Var<E>,
    f_pan: &Var<E>,
    layout: Layout,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<Var<E>> {
    layout.check_nchw(f_ms.shape(), cfg.channels)?;
    layout.check_nchw(f_pan.shape(), cfg.channels)?;
    let ctx = Ctx { tape, vars, cfg };
    let out = ctx.cross_block(&ctx.to_tokens(f_ms)?, &ctx.to_tokens(f_pan)?, layout, prefix)?;
    ctx.from_tokens(&out, layout.window)
}

/// Validates inputs of [`forward`] and returns `(B, H, W)`.
fn check_inputs<E: Scalar>(
    pan: &Tensor<E>,
    lrms: &Tensor<E>,
    ratio: f64,
    cfg: &ModelConfig,
    window: usize,
) -> Result<(usize, usize, usize)> {
    let (b, h, w) = match *pan.shape() {
        [b, 1, h, w] => (b, h, w),
        _ => return Err(Error::invalid_shape(pan.shape(), "PAN must be [B, 1, H, W]")),
    };
    let (ms_h, ms_w) = match *lrms.shape() {
        [mb, c, mh, mw] if mb == b && c == cfg.ms_bands => (mh, mw),
        _ => {
            return Err(Error::invalid_shape(
                lrms.shape(),
                format!("LRMS must be [{b}, {}, h, w]", cfg.ms_bands),
            ))
        }
    };
    check_registration(h, w, ms_h, ms_w, ratio)?;
    if window == 0 || h < window || w < window {
        return Err(Error::InvalidArgument(format!(
            "window {window} must be positive and fit inside the {h}x{w} image"
        )));
    }
    Ok((b, h, w))
}

/// Full pipeline (§4.1): upsample LRMS, pad, patchify, encode, single and
/// cross blocks, head, reassemble, global residual, crop. Returns `[B, C, H, W]`.
#[allow(clippy::too_many_arguments)]
pub fn forward<E: Scalar>(
    tape: &Tape<E>,
    vars: &Bound<E>,
    pan: &Tensor<E>,
    lrms: &Tensor<E>,
    ratio: f64,
    cfg: &ModelConfig,
    window: usize,
) -> Result<Var<E>> {
    let (b, h, w) = check_inputs(pan, lrms, ratio, cfg, window)?;
    let up = bicubic_resize(lrms, h, w)?;
    let (pan_pad, _, _) = pad_to_multiple(pan, window)?;
    let (ms_pad, _, _) = pad_to_multiple(&up, window)?;
    let pan_seq = patchify(&pan_pad, window)?;
    let ms_seq = patchify(&ms_pad, window)?;
    let grid = PatchGrid::for_image(h, w, window);
    let layout = Layout {
        batch: b,
        tokens: grid.tokens(),
        window,
    };

    let ctx = Ctx { tape, vars, cfg };
    let mut f_pan = ctx.to_tokens(&ctx.encode(&tape.constant(pan_seq.tokens), "enc_pan")?)?;
    let mut f_ms = ctx.to_tokens(&ctx.encode(&tape.constant(ms_seq.tokens), "enc_ms")?)?;
    for i in 0..cfg.n_single {
        f_pan = ctx.single_block(&f_pan, layout, &format!("single_pan.{i}"))?;
        f_ms = ctx.single_block(&f_ms, layout, &format!("single_ms.{i}"))?;
    }
    for i in 0..cfg.n_cross {
        f_ms = ctx.cross_block(&f_ms, &f_pan, layout, &format!("cross.{i}"))?;
    }
    let fused = ctx.from_tokens(&f_ms, window)?;
    let head = ctx.conv(&fused, "head")?;
    let head5 = tape.reshape(&head, &[b, layout.tokens, cfg.ms_bands, window, window])?;
    let index = Rc::new(grid.reassemble_index(b, cfg.ms_bands));
    let out = tape.gather(&head5, &[b, cfg.ms_bands, h, w], index)?;
    if cfg.global_residual {
        tape.add(&out, &tape.constant(up))
    } else {
        Ok(out)
    }
}

/// Gradient-free forward pass.
pub fn infer(
    params: &ModelParams,
    cfg: &ModelConfig,
    pan: &Tensor,
    lrms: &Tensor,
    ratio: f64,
    window: usize,
) -> Result<Tensor> {
    let tape = Tape::no_grad();
    let vars = Bound::new(&tape, params, false);
    let out = forward(&tape, &vars, pan, lrms, ratio, cfg, window)?;
    Ok(out.value().clone())
}
