//! Encoder–decoder transformer with a per-token labeling head.
//!
//! Pre-norm residual layers, sinusoidal positions, ReLU feed-forward blocks.
//! The labeling head is a single affine map from the final (normalised)
//! encoder states to four label logits.
//!
//! Parameters are stored as named [`Var`]s in a fixed order; the same order
//! is used by checkpoints and by the optimizer.

use std::cell::RefCell;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LABEL_CLASSES: usize = 4;
const NEG_INF: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub heads: usize,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub label_classes: usize,
    pub max_positions: usize,
}

impl ModelConfig {
    /// Desk-scale default: 4+4 layers, 256-dim states, 1024-dim FFN, 4 heads.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            enc_layers: 4,
            dec_layers: 4,
            d_model: 256,
            d_ffn: 1024,
            heads: 4,
            dropout: 0.3,
            attn_dropout: 0.1,
            src_vocab,
            tgt_vocab,
            label_classes: LABEL_CLASSES,
            max_positions: 512,
        }
    }

    /// Transformer-big dimensions.
    pub fn big(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            enc_layers: 6,
            dec_layers: 6,
            d_model: 1024,
            d_ffn: 4096,
            heads: 16,
            ..Self::desk(src_vocab, tgt_vocab)
        }
    }

    /// Tiny configuration used by the numerical checks.
    pub fn tiny(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 16,
            d_ffn: 32,
            heads: 2,
            dropout: 0.0,
            attn_dropout: 0.0,
            src_vocab,
            tgt_vocab,
            label_classes: LABEL_CLASSES,
            max_positions: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("heads", self.heads),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.label_classes != LABEL_CLASSES {
            return Err(Error::Config(format!("label_classes must be {LABEL_CLASSES}")));
        }
        for (name, p) in [("dropout", self.dropout), ("attn_dropout", self.attn_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name}={p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Forward-pass mode. Training mode applies dropout with masks drawn from
/// the context's own generator, so runs are reproducible.
pub struct Ctx {
    train: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn dropout(&self, x: &Tensor, p: f64) -> Result<Tensor> {
        if !self.train || p == 0.0 {
            return Ok(x.clone());
        }
        let n = x.elem_count();
        let keep = 1.0 / (1.0 - p);
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<f32> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep as f32 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

/// Ordered parameter registry.
#[derive(Default)]
struct Registry {
    params: Vec<(String, Var)>,
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    dtype: DType,
    device: &'a Device,
}

impl Init<'_> {
    fn tensor(&mut self, shape: &[usize], f: impl Fn(&mut ChaCha8Rng) -> f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| f(self.rng)).collect();
        Ok(Tensor::from_vec(data, shape, self.device)?.to_dtype(self.dtype)?)
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor> {
        self.tensor(shape, |r| r.random_range(-bound..bound))
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        // Box-Muller keeps the draw order explicit.
        self.tensor(shape, |r| {
            let u1: f64 = r.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = r.random();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    fn constant(&mut self, shape: &[usize], v: f64) -> Result<Tensor> {
        Ok(Tensor::full(v, shape, self.device)?.to_dtype(self.dtype)?)
    }
}

impl Registry {
    fn add(&mut self, name: String, t: Tensor) -> Result<Var> {
        let v = Var::from_tensor(&t)?;
        self.params.push((name, v.clone()));
        Ok(v)
    }
}

struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    fn new(reg: &mut Registry, init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let weight = reg.add(format!("{name}.weight"), init.uniform(&[d_out, d_in], bound)?)?;
        let bias = reg.add(format!("{name}.bias"), init.constant(&[d_out], 0.0)?)?;
        Ok(Self { weight, bias })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("non-scalar input");
        let rows = x.elem_count() / d_in;
        let y = x
            .reshape((rows, d_in))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

struct LayerNorm {
    gain: Var,
    bias: Var,
}

impl LayerNorm {
    fn new(reg: &mut Registry, init: &mut Init, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: reg.add(format!("{name}.weight"), init.constant(&[d], 1.0)?)?,
            bias: reg.add(format!("{name}.bias"), init.constant(&[d], 0.0)?)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)?)
    }
}

/// Softmax over the last dimension, built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(reg: &mut Registry, init: &mut Init, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(reg, init, &format!("{name}.q"), d, d)?,
            k: Linear::new(reg, init, &format!("{name}.k"), d, d)?,
            v: Linear::new(reg, init, &format!("{name}.v"), d, d)?,
            o: Linear::new(reg, init, &format!("{name}.o"), d, d)?,
            heads,
        })
    }

    /// (B, T, d) -> (B, H, T, d/H)
    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    fn key_values(&self, kv: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.split_heads(&self.k.forward(kv)?)?, self.split_heads(&self.v.forward(kv)?)?))
    }

    /// Attend from `query` (B, Tq, d) over split keys/values (B, H, Tk, d/H).
    fn attend(&self, query: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>, ctx: &Ctx, attn_p: f64) -> Result<Tensor> {
        let (b, tq, d) = query.dims3()?;
        let dh = d / self.heads;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let mut scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let probs = ctx.dropout(&softmax_last(&scores)?, attn_p)?;
        let out = probs.matmul(v)?.transpose(1, 2)?.contiguous()?.reshape((b, tq, d))?;
        self.o.forward(&out)
    }

    /// `bias` broadcasts to (B, H, Tq, Tk).
    fn forward(&self, query: &Tensor, kv: &Tensor, bias: &Tensor, ctx: &Ctx, attn_p: f64) -> Result<Tensor> {
        let (k, v) = self.key_values(kv)?;
        self.attend(query, &k, &v, Some(bias), ctx, attn_p)
    }
}

struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(reg: &mut Registry, init: &mut Init, name: &str, d: usize, d_ffn: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(reg, init, &format!("{name}.fc1"), d, d_ffn)?,
            down: Linear::new(reg, init, &format!("{name}.fc2"), d_ffn, d)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.relu()?)
    }
}

struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Affine map from encoder states to label logits.
pub struct LabelingHead {
    weight: Var,
    bias: Var,
}

impl LabelingHead {
    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }

    /// Logits for states of shape (.., d_model).
    pub fn logits(&self, h: &Tensor) -> Result<Tensor> {
        let dims = h.dims().to_vec();
        let d = *dims.last().expect("non-scalar input");
        let rows = h.elem_count() / d;
        let y = h
            .reshape((rows, d))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out = dims;
        *out.last_mut().unwrap() = LABEL_CLASSES;
        Ok(y.reshape(out)?)
    }
}

/// Final encoder states for one sequence.
pub struct EncoderOutput {
    /// (m, d_model)
    pub h: Tensor,
    pub mask: Vec<bool>,
}

impl EncoderOutput {
    pub fn rows(&self) -> usize {
        self.mask.len()
    }
}

/// Per-layer keys and values for incremental decoding. Row `r` of every
/// tensor belongs to hypothesis `r`.
#[derive(Clone)]
pub struct DecoderCache {
    cross: Vec<(Tensor, Tensor)>,
    past: Vec<Option<(Tensor, Tensor)>>,
    len: usize,
}

impl DecoderCache {
    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Keep the given rows, in order; rows may repeat.
    pub fn select_rows(&mut self, rows: &[usize]) -> Result<()> {
        let device = match self.cross.first() {
            Some((k, _)) => k.device().clone(),
            None => return Ok(()),
        };
        let idx: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
        let idx = Tensor::new(idx.as_slice(), &device)?;
        let pick = |t: &Tensor| t.index_select(&idx, 0);
        for (k, v) in self.cross.iter_mut() {
            *k = pick(k)?;
            *v = pick(v)?;
        }
        for (k, v) in self.past.iter_mut().flatten() {
            *k = pick(k)?;
            *v = pick(v)?;
        }
        Ok(())
    }
}

pub struct Transformer {
    config: ModelConfig,
    device: Device,
    dtype: DType,
    params: Vec<(String, Var)>,
    src_embed: Var,
    tgt_embed: Var,
    enc_layers: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    dec_layers: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    out_proj: Linear,
    head: LabelingHead,
    positions: Tensor,
}

fn sinusoid_table(max_pos: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; max_pos * d];
    for pos in 0..max_pos {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            out[pos * d + i] = (pos as f64 * freq).sin();
            out[pos * d + half + i] = (pos as f64 * freq).cos();
        }
    }
    out
}

impl Transformer {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            rng: &mut rng,
            dtype,
            device,
        };
        let mut reg = Registry::default();
        let emb_std = (d as f64).powf(-0.5);
        let src_embed = reg.add("src_embed".into(), init.normal(&[config.src_vocab, d], emb_std)?)?;
        let tgt_embed = reg.add("tgt_embed".into(), init.normal(&[config.tgt_vocab, d], emb_std)?)?;
        let mut enc_layers = Vec::new();
        for l in 0..config.enc_layers {
            let p = format!("encoder.{l}");
            enc_layers.push(EncoderLayer {
                ln_attn: LayerNorm::new(&mut reg, &mut init, &format!("{p}.ln_attn"), d)?,
                attn: Attention::new(&mut reg, &mut init, &format!("{p}.attn"), d, config.heads)?,
                ln_ffn: LayerNorm::new(&mut reg, &mut init, &format!("{p}.ln_ffn"), d)?,
                ffn: FeedForward::new(&mut reg, &mut init, &format!("{p}.ffn"), d, config.d_ffn)?,
            });
        }
        let enc_norm = LayerNorm::new(&mut reg, &mut init, "encoder.ln_out", d)?;
        let mut dec_layers = Vec::new();
        for l in 0..config.dec_layers {
            let p = format!("decoder.{l}");
            dec_layers.push(DecoderLayer {
                ln_self: LayerNorm::new(&mut reg, &mut init, &format!("{p}.ln_self"), d)?,
                self_attn: Attention::new(&mut reg, &mut init, &format!("{p}.self_attn"), d, config.heads)?,
                ln_cross: LayerNorm::new(&mut reg, &mut init, &format!("{p}.ln_cross"), d)?,
                cross_attn: Attention::new(&mut reg, &mut init, &format!("{p}.cross_attn"), d, config.heads)?,
                ln_ffn: LayerNorm::new(&mut reg, &mut init, &format!("{p}.ln_ffn"), d)?,
                ffn: FeedForward::new(&mut reg, &mut init, &format!("{p}.ffn"), d, config.d_ffn)?,
            });
        }
        let dec_norm = LayerNorm::new(&mut reg, &mut init, "decoder.ln_out", d)?;
        let out_proj = Linear::new(&mut reg, &mut init, "out_proj", d, config.tgt_vocab)?;
        let bound = (6.0 / (d + LABEL_CLASSES) as f64).sqrt();
        let head = LabelingHead {
            weight: reg.add("label_head.weight".into(), init.uniform(&[LABEL_CLASSES, d], bound)?)?,
            bias: reg.add("label_head.bias".into(), init.constant(&[LABEL_CLASSES], 0.0)?)?,
        };
        let positions = Tensor::from_vec(sinusoid_table(config.max_positions, d), (config.max_positions, d), device)?
            .to_dtype(dtype)?;
        Ok(Self {
            config,
            device: device.clone(),
            dtype,
            params: reg.params,
            src_embed,
            tgt_embed,
            enc_layers,
            enc_norm,
            dec_layers,
            dec_norm,
            out_proj,
            head,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Named parameters in registration order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn head(&self) -> &LabelingHead {
        &self.head
    }

    /// Parameters excluding the labeling head.
    pub fn translation_params(&self) -> impl Iterator<Item = &(String, Var)> {
        self.params.iter().filter(|(n, _)| !n.starts_with("label_head."))
    }

    fn embed(&self, table: &Var, ids: &Tensor, offset: usize, ctx: &Ctx) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        if offset + t > self.config.max_positions {
            return Err(Error::Overlength {
                len: offset + t,
                max: self.config.max_positions,
            });
        }
        let d = self.config.d_model;
        let x = table.index_select(&ids.flatten_all()?, 0)?.reshape((b, t, d))?;
        let x = (x * (d as f64).sqrt())?;
        let pos = self.positions.narrow(0, offset, t)?.unsqueeze(0)?;
        ctx.dropout(&x.broadcast_add(&pos)?, self.config.dropout)
    }

    /// Additive attention bias (B, 1, 1, S) from a validity mask (B, S).
    pub fn padding_bias(&self, valid: &Tensor) -> Result<Tensor> {
        let (b, s) = valid.dims2()?;
        let bias = ((valid.to_dtype(self.dtype)? - 1.0)? * (-NEG_INF))?;
        Ok(bias.reshape((b, 1, 1, s))?)
    }

    fn causal_bias(&self, t: usize) -> Result<Tensor> {
        let data: Vec<f64> = (0..t * t)
            .map(|k| if k % t > k / t { NEG_INF } else { 0.0 })
            .collect();
        Ok(Tensor::from_vec(data, (1, 1, t, t), &self.device)?.to_dtype(self.dtype)?)
    }

    /// Encoder states (B, S, d) for ids (B, S) with validity mask (B, S).
    pub fn encode_batch(&self, src: &Tensor, src_valid: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let bias = self.padding_bias(src_valid)?;
        let p = self.config.dropout;
        let mut x = self.embed(&self.src_embed, src, 0, ctx)?;
        for layer in &self.enc_layers {
            let h = layer.ln_attn.forward(&x)?;
            let a = layer.attn.forward(&h, &h, &bias, ctx, self.config.attn_dropout)?;
            x = (x + ctx.dropout(&a, p)?)?;
            let h = layer.ln_ffn.forward(&x)?;
            x = (x + ctx.dropout(&layer.ffn.forward(&h)?, p)?)?;
        }
        self.enc_norm.forward(&x)
    }

    /// Decoder logits (B, T, V) for shifted target input (B, T).
    pub fn decode_batch(&self, enc: &Tensor, src_bias: &Tensor, tgt_in: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let t = tgt_in.dim(1)?;
        let causal = self.causal_bias(t)?;
        let p = self.config.dropout;
        let mut x = self.embed(&self.tgt_embed, tgt_in, 0, ctx)?;
        for layer in &self.dec_layers {
            let h = layer.ln_self.forward(&x)?;
            let a = layer.self_attn.forward(&h, &h, &causal, ctx, self.config.attn_dropout)?;
            x = (x + ctx.dropout(&a, p)?)?;
            let h = layer.ln_cross.forward(&x)?;
            let a = layer.cross_attn.forward(&h, enc, src_bias, ctx, self.config.attn_dropout)?;
            x = (x + ctx.dropout(&a, p)?)?;
            let h = layer.ln_ffn.forward(&x)?;
            x = (x + ctx.dropout(&layer.ffn.forward(&h)?, p)?)?;
        }
        self.out_proj.forward(&self.dec_norm.forward(&x)?)
    }

    fn check_ids(&self, ids: &[u32], vocab: usize, side: &str) -> Result<()> {
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::Input(format!("{side} id {bad} outside vocabulary of {vocab}")));
        }
        if ids.len() > self.config.max_positions {
            return Err(Error::Overlength {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        Ok(())
    }

    fn row(&self, ids: &[u32]) -> Result<Tensor> {
        Ok(Tensor::new(ids, &self.device)?.unsqueeze(0)?)
    }

    fn ones(&self, n: usize) -> Result<Tensor> {
        Ok(Tensor::ones((1, n), self.dtype, &self.device)?)
    }

    /// Encode a single sequence (evaluation mode).
    pub fn encode(&self, src: &[u32]) -> Result<EncoderOutput> {
        if src.is_empty() {
            return Err(Error::Input("empty source sequence".into()));
        }
        self.check_ids(src, self.config.src_vocab, "source")?;
        let h = self.encode_batch(&self.row(src)?, &self.ones(src.len())?, &Ctx::eval())?;
        Ok(EncoderOutput {
            h: h.squeeze(0)?,
            mask: vec![true; src.len()],
        })
    }

    /// Next-token log-probabilities (B, V) after each prefix, all prefixes
    /// sharing one encoded source (1, S, d).
    pub fn next_log_probs(&self, enc: &Tensor, src_bias: &Tensor, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let t = prefixes.first().map(Vec::len).unwrap_or(0);
        debug_assert!(prefixes.iter().all(|p| p.len() == t));
        let b = prefixes.len();
        let flat: Vec<u32> = prefixes.iter().flatten().copied().collect();
        let tgt = Tensor::from_vec(flat, (b, t), &self.device)?;
        let enc = enc.broadcast_as((b, enc.dim(1)?, enc.dim(2)?))?.contiguous()?;
        let logits = self.decode_batch(&enc, src_bias, &tgt, &Ctx::eval())?;
        let last = logits.narrow(1, t - 1, 1)?.squeeze(1)?;
        let lp = log_softmax_last(&last)?.to_dtype(DType::F64)?;
        Ok(lp.to_vec2::<f64>()?)
    }

    /// Encoded source (1, S, d) plus its attention bias.
    pub fn encode_for_decoding(&self, src: &[u32]) -> Result<(Tensor, Tensor)> {
        if src.is_empty() {
            return Err(Error::Input("empty source sequence".into()));
        }
        self.check_ids(src, self.config.src_vocab, "source")?;
        let valid = self.ones(src.len())?;
        let enc = self.encode_batch(&self.row(src)?, &valid, &Ctx::eval())?;
        Ok((enc, self.padding_bias(&valid)?))
    }

    /// Start incremental decoding of one source sequence.
    pub fn begin_decoding(&self, src: &[u32]) -> Result<DecoderCache> {
        let (enc, _) = self.encode_for_decoding(src)?;
        let cross = self
            .dec_layers
            .iter()
            .map(|l| l.cross_attn.key_values(&enc))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecoderCache {
            cross,
            past: vec![None; self.dec_layers.len()],
            len: 0,
        })
    }

    /// Feed one token per cache row; returns next-token log-probabilities
    /// (rows, V).
    pub fn decode_step(&self, cache: &mut DecoderCache, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        let b = tokens.len();
        let rows = cache.cross.first().map(|(k, _)| k.dim(0)).transpose()?.unwrap_or(b);
        if rows != b {
            return Err(Error::Input(format!("{b} tokens for {rows} cache rows")));
        }
        let ctx = Ctx::eval();
        let ids = Tensor::from_vec(tokens.to_vec(), (b, 1), &self.device)?;
        let mut x = self.embed(&self.tgt_embed, &ids, cache.len, &ctx)?;
        for (i, layer) in self.dec_layers.iter().enumerate() {
            let h = layer.ln_self.forward(&x)?;
            let (k, v) = layer.self_attn.key_values(&h)?;
            let (k, v) = match cache.past[i].take() {
                Some((pk, pv)) => (Tensor::cat(&[&pk, &k], 2)?, Tensor::cat(&[&pv, &v], 2)?),
                None => (k, v),
            };
            let a = layer.self_attn.attend(&h, &k, &v, None, &ctx, 0.0)?;
            cache.past[i] = Some((k, v));
            x = (x + a)?;
            let h = layer.ln_cross.forward(&x)?;
            let (ck, cv) = &cache.cross[i];
            x = (x + layer.cross_attn.attend(&h, ck, cv, None, &ctx, 0.0)?)?;
            let h = layer.ln_ffn.forward(&x)?;
            x = (x + layer.ffn.forward(&h)?)?;
        }
        cache.len += 1;
        let logits = self.out_proj.forward(&self.dec_norm.forward(&x)?)?.squeeze(1)?;
        Ok(log_softmax_last(&logits)?.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    pub fn target_vocab(&self) -> usize {
        self.config.tgt_vocab
    }

    /// Copy parameter values from another model with identical layout.
    pub fn load_values(&self, values: &[(String, Tensor)]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                values.len(),
                self.params.len()
            )));
        }
        for ((name, var), (vname, t)) in self.params.iter().zip(values) {
            if name != vname {
                return Err(Error::Format(format!("expected tensor {name}, found {vname}")));
            }
            if var.dims() != t.dims() {
                return Err(Error::Format(format!(
                    "tensor {name}: shape {:?} vs {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Per-token label distributions for encoder states.
pub fn label_probs(head: &LabelingHead, enc: &EncoderOutput) -> Result<Vec<[f64; LABEL_CLASSES]>> {
    let p = softmax_last(&head.logits(&enc.h)?)?.to_dtype(DType::F64)?;
    Ok(p.to_vec2::<f64>()?
        .into_iter()
        .map(|r| [r[0], r[1], r[2], r[3]])
        .collect())
}

/// Token-mean label-smoothed cross entropy.
///
/// `logits` is (N, V), `targets` (N,) u32 and `weights` (N,) with 1 for real
/// tokens and 0 for padding. The smoothing mass is spread uniformly over the
/// vocabulary.
pub fn smoothed_nll(logits: &Tensor, targets: &Tensor, weights: &Tensor, smoothing: f64) -> Result<Tensor> {
    let logp = log_softmax_last(logits)?;
    let gold = logp.gather(&targets.unsqueeze(1)?, 1)?.squeeze(1)?.neg()?;
    let per_token = if smoothing > 0.0 {
        let uniform = logp.mean(1)?.neg()?;
        ((gold * (1.0 - smoothing))? + (uniform * smoothing)?)?
    } else {
        gold
    };
    let weights = weights.to_dtype(per_token.dtype())?;
    let total = (per_token * &weights)?.sum_all()?;
    Ok(total.broadcast_div(&weights.sum_all()?)?)
}

/// Translation loss of one pair under teacher forcing (evaluation mode).
/// `y` excludes BOS/EOS; they are added here.
pub fn translation_nll(model: &Transformer, x: &[u32], y: &[u32], smoothing: f64) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Input("empty target sequence".into()));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    model.check_ids(y, model.config.tgt_vocab, "target")?;
    let (enc, bias) = model.encode_for_decoding(x)?;
    let mut tgt_in = vec![crate::tokenizer::BOS_ID];
    tgt_in.extend_from_slice(y);
    let mut tgt_out = y.to_vec();
    tgt_out.push(crate::tokenizer::EOS_ID);
    let logits = model.decode_batch(&enc, &bias, &model.row(&tgt_in)?, &Ctx::eval())?;
    let t = tgt_out.len();
    let logits = logits.reshape((t, model.config.tgt_vocab))?;
    let targets = Tensor::new(tgt_out.as_slice(), &model.device)?;
    let w = Tensor::ones(t, model.dtype, &model.device)?;
    let loss = smoothed_nll(&logits, &targets, &w, smoothing)?;
    Ok(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Token-mean negative log-probability of the gold labels.
pub fn labeling_nll(head: &LabelingHead, enc: &EncoderOutput, labels: &[u8]) -> Result<f64> {
    if labels.len() != enc.rows() {
        return Err(Error::Input(format!("{} labels for {} encoder rows", labels.len(), enc.rows())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= LABEL_CLASSES) {
        return Err(Error::Input(format!("label {bad} outside 0..=3")));
    }
    let logits = head.logits(&enc.h)?;
    let ids: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let targets = Tensor::new(ids.as_slice(), logits.device())?;
    let w = Tensor::ones(labels.len(), logits.dtype(), logits.device())?;
    let loss = smoothed_nll(&logits, &targets, &w, 0.0)?;
    Ok(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Overall objective: translation loss plus weighted labeling loss.
pub fn combined_loss(l_mt: f64, l_sl: f64, lambda: f64) -> f64 {
    l_mt + lambda * l_sl
}

pub fn combined_loss_tensor(l_mt: &Tensor, l_sl: &Tensor, lambda: f64) -> Result<Tensor> {
    Ok((l_mt + (l_sl * lambda)?)?)
}
