//! The TF-GridNet network: a conv2d+gLN encoder, B stacked blocks (each an
//! intra-frame module, a sub-band module, and optionally full-band
//! self-attention), and a deconv2d decoder producing per-speaker RI planes.
//!
//! Embeddings live on the tape as `[T, F, D]` (channel-last). The intra-frame
//! module runs its BLSTM along frequency with frames batched; the sub-band
//! module swaps the two roles. Parameters are declared once in
//! [`param_specs`] — initialization, counting, checkpointing, and the
//! optimizer all walk that same list.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{BlstmWeightIds, NormMode, SeqAxis};
use crate::scalar::Scalar;
use crate::stft::StftConfig;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// What the decoder's RI planes mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// Planes are the predicted spectrogram directly (complex spectral mapping).
    Mapping,
    /// Planes are a complex ratio mask, clipped then multiplied with the mixture.
    ComplexRatioMask,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Embedding dimension per T-F unit (D).
    pub emb_dim: usize,
    /// Number of stacked blocks (B).
    pub num_blocks: usize,
    /// Unfold kernel (I).
    pub kernel: usize,
    /// Unfold stride (J).
    pub stride: usize,
    /// BLSTM hidden units per direction (H).
    pub hidden: usize,
    /// Query/key channels per head (E).
    pub qk_channels: usize,
    /// Attention heads (L).
    pub heads: usize,
    pub use_attention: bool,
    /// Speaker count (C).
    pub speakers: usize,
    /// Frequency bins (F), fixed by the STFT config.
    pub n_freq: usize,
    pub head_mode: HeadMode,
    pub mask_clip: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [
            self.emb_dim,
            self.num_blocks,
            self.kernel,
            self.stride,
            self.hidden,
            self.qk_channels,
            self.heads,
            self.speakers,
            self.n_freq,
        ]
        .iter()
        .all(|&v| v >= 1);
        if !all_positive {
            return Err(Error::invalid("model_config", "all extents must be >= 1"));
        }
        if self.kernel < self.stride {
            return Err(Error::invalid(
                "model_config",
                format!("need I >= J, got I={} J={}", self.kernel, self.stride),
            ));
        }
        if self.use_attention && self.emb_dim % self.heads != 0 {
            return Err(Error::invalid(
                "model_config",
                format!("D={} not divisible by L={}", self.emb_dim, self.heads),
            ));
        }
        if self.head_mode == HeadMode::ComplexRatioMask && !(self.mask_clip > 0.0) {
            return Err(Error::invalid("model_config", "mask mode needs mask_clip > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// uniform(−bound, bound)
    Uniform(f64),
    Const(f64),
    /// uniform(−bound, bound), then +1 on the forget-gate quarter.
    LstmBiasIh(f64),
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// All trainable parameters of a model, sorted by name. This list is the
/// single source of truth for shapes and initialization.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, f, c) = (cfg.emb_dim, cfg.n_freq, cfg.speakers);
    let (i, h) = (cfg.kernel, cfg.hidden);
    let mut specs: Vec<ParamSpec> = Vec::new();
    let mut push = |name: String, shape: &[usize], init: Init| {
        specs.push(ParamSpec { name, shape: shape.to_vec(), init });
    };

    let conv_bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    let lstm_bound = 1.0 / (h as f64).sqrt();

    push("enc.conv.w".into(), &[d, 2, 3, 3], Init::Uniform(conv_bound(2 * 9)));
    push("enc.conv.b".into(), &[d], Init::Uniform(conv_bound(2 * 9)));
    push("enc.norm.gamma".into(), &[d], Init::Const(1.0));
    push("enc.norm.beta".into(), &[d], Init::Const(0.0));

    for b in 0..cfg.num_blocks {
        for module in ["intra", "sub"] {
            let p = format!("blk{b:02}.{module}");
            push(format!("{p}.norm.gamma"), &[i * d], Init::Const(1.0));
            push(format!("{p}.norm.beta"), &[i * d], Init::Const(0.0));
            for dir in ["fwd", "bwd"] {
                push(format!("{p}.{dir}.w_ih"), &[4 * h, i * d], Init::Uniform(lstm_bound));
                push(format!("{p}.{dir}.w_hh"), &[4 * h, h], Init::Uniform(lstm_bound));
                push(format!("{p}.{dir}.b_ih"), &[4 * h], Init::LstmBiasIh(lstm_bound));
                push(format!("{p}.{dir}.b_hh"), &[4 * h], Init::Uniform(lstm_bound));
            }
            push(format!("{p}.deconv.w"), &[2 * h, d, i], Init::Uniform(conv_bound(2 * h * i)));
            push(format!("{p}.deconv.b"), &[d], Init::Uniform(conv_bound(2 * h * i)));
        }
        if cfg.use_attention {
            for l in 0..cfg.heads {
                for (proj, ch) in [("q", cfg.qk_channels), ("k", cfg.qk_channels), ("v", d / cfg.heads)] {
                    let p = format!("blk{b:02}.attn.head{l}.{proj}");
                    push(format!("{p}.conv.w"), &[ch, d, 1, 1], Init::Uniform(conv_bound(d)));
                    push(format!("{p}.conv.b"), &[ch], Init::Uniform(conv_bound(d)));
                    push(format!("{p}.alpha"), &[1], Init::Const(0.25));
                    push(format!("{p}.norm.gamma"), &[f, ch], Init::Const(1.0));
                    push(format!("{p}.norm.beta"), &[f, ch], Init::Const(0.0));
                }
            }
            if cfg.heads > 1 {
                let p = format!("blk{b:02}.attn.out");
                push(format!("{p}.conv.w"), &[d, d, 1, 1], Init::Uniform(conv_bound(d)));
                push(format!("{p}.conv.b"), &[d], Init::Uniform(conv_bound(d)));
                push(format!("{p}.alpha"), &[1], Init::Const(0.25));
                push(format!("{p}.norm.gamma"), &[f, d], Init::Const(1.0));
                push(format!("{p}.norm.beta"), &[f, d], Init::Const(0.0));
            }
        }
    }

    push("dec.deconv.w".into(), &[d, 2 * c, 3, 3], Init::Uniform(conv_bound(d * 9)));
    push("dec.deconv.b".into(), &[2 * c], Init::Uniform(conv_bound(d * 9)));

    specs.sort_by(|a, b| a.name.cmp(&b.name));
    specs
}

/// Total trainable scalars.
pub fn count_params(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(|s| s.numel()).sum()
}

/// Parameter values, ordered like [`param_specs`] (lexicographic by name).
pub struct ParamSet<S: Scalar> {
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamSet<S> {
    /// Fresh parameters drawn in spec order from `rng`.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(cfg);
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in &specs {
            let t = match spec.init {
                Init::Uniform(bound) => Tensor::uniform(&spec.shape, -bound, bound, rng),
                Init::Const(v) => Tensor::filled(&spec.shape, S::from_f64(v)),
                Init::LstmBiasIh(bound) => {
                    let mut t = Tensor::uniform(&spec.shape, -bound, bound, rng);
                    let h = spec.shape[0] / 4;
                    for v in &mut t.data_mut()[h..2 * h] {
                        *v += S::one();
                    }
                    t
                }
            };
            tensors.push(t);
        }
        Ok(Self::assemble(specs, tensors))
    }

    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor<S>>) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(cfg);
        if specs.len() != tensors.len() {
            return Err(Error::invalid(
                "param_set",
                format!("expected {} tensors, got {}", specs.len(), tensors.len()),
            ));
        }
        for (spec, t) in specs.iter().zip(&tensors) {
            if spec.shape != t.shape() {
                return Err(Error::shape(
                    "param_set",
                    format!("{}: want {:?}, got {:?}", spec.name, spec.shape, t.shape()),
                ));
            }
        }
        Ok(Self::assemble(specs, tensors))
    }

    fn assemble(specs: Vec<ParamSpec>, tensors: Vec<Tensor<S>>) -> Self {
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        ParamSet { specs, tensors, index }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.specs.iter().map(|s| s.numel()).sum()
    }

    /// Load every parameter onto a tape; `watched` enables gradients.
    pub fn bind(&self, tape: &mut Tape<S>, watched: bool) -> BoundParams {
        let ids = self
            .tensors
            .iter()
            .map(|t| if watched { tape.watched(t.clone()) } else { tape.input(t.clone()) })
            .collect();
        BoundParams { ids, index: self.index.clone() }
    }
}

/// Tape-resident parameter handles, addressed by spec name.
pub struct BoundParams {
    ids: Vec<TensorId>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.index
            .get(name)
            .map(|&i| self.ids[i])
            .ok_or_else(|| Error::invalid("params", format!("no parameter named {name}")))
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

/// Everything a forward pass produces, as tape handles.
pub struct Forward {
    /// Per-speaker time-domain estimates, each `[N]`.
    pub outputs: Vec<TensorId>,
    /// Per-speaker predicted spectrograms `[T, F, 2]` (before iSTFT).
    pub specs: Vec<TensorId>,
    /// Mixture spectrogram `[T, F, 2]`.
    pub mix_spec: TensorId,
    /// Softmax attention matrices, `[T, T]`, one per (block, head).
    pub attention: Vec<TensorId>,
}

/// conv2d 1×1 → PReLU → cfLN, the projection stack used inside attention.
fn conv_prelu_cfln<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    p: &BoundParams,
    prefix: &str,
) -> Result<TensorId> {
    let y = tape.conv2d(x, p.id(&format!("{prefix}.conv.w"))?, p.id(&format!("{prefix}.conv.b"))?)?;
    let y = tape.prelu(y, p.id(&format!("{prefix}.alpha"))?)?;
    tape.layer_norm(
        y,
        p.id(&format!("{prefix}.norm.gamma"))?,
        p.id(&format!("{prefix}.norm.beta"))?,
        NormMode::LastTwo,
    )
}

/// Shared body of the intra-frame (axis = Freq) and sub-band (axis = Time)
/// modules: unfold → chanLN → BLSTM → deconv1d → residual.
fn grid_module<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    p: &BoundParams,
    prefix: &str,
    cfg: &ModelConfig,
    axis: SeqAxis,
) -> Result<TensorId> {
    let sh = tape.value(x)?.shape().to_vec();
    let out_len = match axis {
        SeqAxis::Freq => sh[1],
        SeqAxis::Time => sh[0],
    };
    let u = tape.unfold_seq(x, cfg.kernel, cfg.stride, axis)?;
    let n = tape.layer_norm(
        u,
        p.id(&format!("{prefix}.norm.gamma"))?,
        p.id(&format!("{prefix}.norm.beta"))?,
        NormMode::LastOne,
    )?;
    let fwd = BlstmWeightIds {
        w_ih: p.id(&format!("{prefix}.fwd.w_ih"))?,
        w_hh: p.id(&format!("{prefix}.fwd.w_hh"))?,
        b_ih: p.id(&format!("{prefix}.fwd.b_ih"))?,
        b_hh: p.id(&format!("{prefix}.fwd.b_hh"))?,
    };
    let bwd = BlstmWeightIds {
        w_ih: p.id(&format!("{prefix}.bwd.w_ih"))?,
        w_hh: p.id(&format!("{prefix}.bwd.w_hh"))?,
        b_ih: p.id(&format!("{prefix}.bwd.b_ih"))?,
        b_hh: p.id(&format!("{prefix}.bwd.b_hh"))?,
    };
    let r = tape.blstm(n, &fwd, &bwd)?;
    let dc = tape.deconv1d_seq(
        r,
        p.id(&format!("{prefix}.deconv.w"))?,
        p.id(&format!("{prefix}.deconv.b"))?,
        cfg.kernel,
        cfg.stride,
        axis,
        out_len,
    )?;
    tape.add(x, dc)
}

/// Full-band self-attention over frames. Returns the residual output plus
/// the per-head softmax matrices (diagnostics: B·L of them per forward).
fn attention_module<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    p: &BoundParams,
    prefix: &str,
    cfg: &ModelConfig,
    diagnostics: &mut Vec<TensorId>,
) -> Result<TensorId> {
    let sh = tape.value(x)?.shape().to_vec();
    let (t, f) = (sh[0], sh[1]);
    let dv = cfg.emb_dim / cfg.heads;
    let scale = 1.0 / ((f * cfg.qk_channels) as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for l in 0..cfg.heads {
        let hp = format!("{prefix}.head{l}");
        let q = conv_prelu_cfln(tape, x, p, &format!("{hp}.q"))?;
        let k = conv_prelu_cfln(tape, x, p, &format!("{hp}.k"))?;
        let v = conv_prelu_cfln(tape, x, p, &format!("{hp}.v"))?;
        let q = tape.reshape(q, &[t, f * cfg.qk_channels])?;
        let k = tape.reshape(k, &[t, f * cfg.qk_channels])?;
        let v = tape.reshape(v, &[t, f * dv])?;
        let kt = tape.permute(k, &[1, 0])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, S::from_f64(scale))?;
        let weights = tape.softmax(scores)?;
        diagnostics.push(weights);
        let mixed = tape.matmul(weights, v)?;
        heads.push(tape.reshape(mixed, &[t, f, dv])?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat_last(&heads)? };
    let projected = if cfg.heads > 1 {
        conv_prelu_cfln(tape, cat, p, &format!("{prefix}.out"))?
    } else {
        cat
    };
    tape.add(x, projected)
}

/// Encoder: conv2d(2→D, 3×3) then gLN.
fn encode<S: Scalar>(tape: &mut Tape<S>, mix_spec: TensorId, p: &BoundParams) -> Result<TensorId> {
    let y = tape.conv2d(mix_spec, p.id("enc.conv.w")?, p.id("enc.conv.b")?)?;
    tape.layer_norm(y, p.id("enc.norm.gamma")?, p.id("enc.norm.beta")?, NormMode::All)
}

/// Decoder: deconv2d(D→2C, 3×3, linear), split into C packed spectrograms;
/// in mask mode, clip and complex-multiply with the mixture spectrogram.
fn decode<S: Scalar>(
    tape: &mut Tape<S>,
    emb: TensorId,
    mix_spec: TensorId,
    p: &BoundParams,
    cfg: &ModelConfig,
) -> Result<Vec<TensorId>> {
    let planes = tape.deconv2d(emb, p.id("dec.deconv.w")?, p.id("dec.deconv.b")?)?;
    let mut specs = Vec::with_capacity(cfg.speakers);
    for c in 0..cfg.speakers {
        let ri = tape.slice_last(planes, 2 * c, 2)?;
        let spec = match cfg.head_mode {
            HeadMode::Mapping => ri,
            HeadMode::ComplexRatioMask => {
                let clip = S::from_f64(cfg.mask_clip);
                let mask = tape.clamp(ri, -clip, clip)?;
                tape.complex_mul(mask, mix_spec)?
            }
        };
        specs.push(spec);
    }
    Ok(specs)
}

/// One block of the grid: intra-frame module, sub-band module, and — when
/// `cfg.use_attention` — full-band attention. `block` selects the parameter
/// prefix (`blk{block:02}.…`); attention matrices are appended to `attention`.
pub fn block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    emb: TensorId,
    p: &BoundParams,
    block: usize,
    cfg: &ModelConfig,
    attention: &mut Vec<TensorId>,
) -> Result<TensorId> {
    let mut emb = grid_module(tape, emb, p, &format!("blk{block:02}.intra"), cfg, SeqAxis::Freq)?;
    emb = grid_module(tape, emb, p, &format!("blk{block:02}.sub"), cfg, SeqAxis::Time)?;
    if cfg.use_attention {
        emb = attention_module(tape, emb, p, &format!("blk{block:02}.attn"), cfg, attention)?;
    }
    Ok(emb)
}

/// The complete separation pipeline on the tape:
/// stft → encode → B × (intra → sub → attention) → decode → istft per speaker.
pub fn forward_separate<S: Scalar>(
    tape: &mut Tape<S>,
    mix: TensorId,
    cfg: &ModelConfig,
    stft_cfg: &StftConfig,
    p: &BoundParams,
) -> Result<Forward> {
    cfg.validate()?;
    if stft_cfg.n_freq() != cfg.n_freq {
        return Err(Error::invalid(
            "forward_separate",
            format!("model built for F={}, stft gives F={}", cfg.n_freq, stft_cfg.n_freq()),
        ));
    }
    let n = tape.value(mix)?.numel();
    let mix_spec = tape.stft(mix, stft_cfg)?;
    let mut emb = encode(tape, mix_spec, p)?;
    let mut attention = Vec::new();
    for b in 0..cfg.num_blocks {
        emb = block_forward(tape, emb, p, b, cfg, &mut attention)?;
    }
    let specs = decode(tape, emb, mix_spec, p, cfg)?;
    let mut outputs = Vec::with_capacity(specs.len());
    for &spec in &specs {
        outputs.push(tape.istft(spec, stft_cfg, n)?);
    }
    Ok(Forward { outputs, specs, mix_spec, attention })
}
