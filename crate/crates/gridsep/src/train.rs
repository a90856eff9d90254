//! Training machinery: Adam with global-norm clipping, the
//! halve-on-plateau learning-rate schedule, a binary checkpoint container,
//! and the epoch loop that ties the corpus, model, and objectives together.
//!
//! Determinism is a feature here, not an accident: one seed fixes parameter
//! initialization and the segment-sampling stream, the manifest fixes the
//! data, and checkpoints capture the RNG mid-stream, so a resumed run
//! reproduces the interrupted one bit for bit (in f64 mode).

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{normalize_variance, realize_utterance, sample_segment, ManifestEntry, Utterance};
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{forward_separate, param_specs, ModelConfig, ParamSet};
use crate::objectives::{pit, si_sdri, PitLoss};
use crate::scalar::Scalar;
use crate::stft::StftConfig;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Which training objective `pit` minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// SI-SDR-SE alone (Eq. 1 style).
    Eq1,
    /// SI-SDR-SE plus the L1 mixture-constraint term (Eq. 2 style).
    Eq2,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Eq1 => "eq1",
            Objective::Eq2 => "eq2",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eq1" => Ok(Objective::Eq1),
            "eq2" => Ok(Objective::Eq2),
            other => Err(Error::Config(format!("unknown objective '{other}' (want eq1|eq2)"))),
        }
    }
}

/// Rescale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip global norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let total: f64 = grads.iter().map(|g| Scalar::to_f64(kernels::sumsq(g.data()))).sum();
    let norm = total.sqrt();
    if norm > max_norm {
        let s = S::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            kernels::scale_in_place(g.data_mut(), s);
        }
    }
    norm
}

/// Adam optimizer state: first/second moments shaped like the parameters.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<S: Scalar> AdamState<S> {
    /// Zero moments matching `tensors`, conventional betas, bias-corrected.
    pub fn new(tensors: &[Tensor<S>], lr: f64) -> Self {
        AdamState {
            m: tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Expects clipping to have been applied.
pub fn adam_step<S: Scalar>(
    params: &mut [Tensor<S>],
    grads: &[Tensor<S>],
    st: &mut AdamState<S>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != st.m.len() {
        return Err(Error::invalid(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), st.m.len()),
        ));
    }
    st.step += 1;
    let bc1 = 1.0 - st.beta1.powi(st.step as i32);
    let bc2 = 1.0 - st.beta2.powi(st.step as i32);
    let b1 = S::from_f64(st.beta1);
    let b1c = S::from_f64(1.0 - st.beta1);
    let b2 = S::from_f64(st.beta2);
    let b2c = S::from_f64(1.0 - st.beta2);
    let inv_bc1 = S::from_f64(1.0 / bc1);
    let inv_bc2 = S::from_f64(1.0 / bc2);
    let lr = S::from_f64(st.lr);
    let eps = S::from_f64(st.eps);
    for i in 0..params.len() {
        if params[i].shape() != grads[i].shape() {
            return Err(Error::shape("adam_step", format!("param {i} shape mismatch")));
        }
        let m = st.m[i].data_mut();
        let v = st.v[i].data_mut();
        let p = params[i].data_mut();
        let g = grads[i].data();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + b1c * g[j];
            v[j] = b2 * v[j] + b2c * g[j] * g[j];
            let mh = m[j] * inv_bc1;
            let vh = v[j] * inv_bc2;
            p[j] = p[j] - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Validation loss must beat the best by this much to count as improvement.
pub const IMPROVEMENT_EPS: f64 = 1e-6;

/// Consecutive non-improving epochs before the learning rate is halved.
pub const PATIENCE: u32 = 3;

/// Halve-on-plateau learning-rate schedule, driven once per epoch by the
/// validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleState {
    pub current_lr: f64,
    pub best_val_loss: f64,
    pub epochs_since_improvement: u32,
}

impl ScheduleState {
    pub fn new(lr0: f64) -> Self {
        ScheduleState {
            current_lr: lr0,
            best_val_loss: f64::INFINITY,
            epochs_since_improvement: 0,
        }
    }

    /// Record one epoch's validation loss; returns whether it improved.
    pub fn update(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best_val_loss - IMPROVEMENT_EPS {
            self.best_val_loss = val_loss;
            self.epochs_since_improvement = 0;
            true
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= PATIENCE {
                self.current_lr *= 0.5;
                self.epochs_since_improvement = 0;
            }
            false
        }
    }
}

/// Everything the epoch loop reports.
#[derive(Debug, Clone)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_sisdri_db: f64,
    /// Learning rate used during this epoch's updates.
    pub lr: f64,
    /// Mean magnitude of the mixture-constraint term (0 under eq1).
    pub mc_term: f64,
    pub wall_s: f64,
}

impl EpochStats {
    /// One log record. Floats use full round-trip precision so determinism
    /// can be checked by comparing log lines.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch, self.train_loss, self.val_loss, self.val_sisdri_db, self.lr, self.mc_term
        )
    }
}

/// Knobs of the training run itself (the model has its own config).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub objective: Objective,
    pub lr0: f64,
    pub clip_norm: f64,
    pub max_epochs: u32,
    pub min_lr: f64,
    pub segment_seconds: f64,
    /// Seeds parameter init (stream 0) and segment sampling (stream 1).
    pub seed: u64,
    /// Segments whose gradients are averaged per optimizer step.
    pub grad_accum: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Eq2,
            lr0: 1e-3,
            clip_norm: 1.0,
            max_epochs: 50,
            min_lr: 1e-5,
            segment_seconds: 4.0,
            seed: 0,
            grad_accum: 1,
        }
    }
}

/// Serializable RNG position: enough to resume the ChaCha stream exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), word_pos: rng.get_word_pos(), stream: rng.get_stream() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Full training snapshot; save/load round-trips bit-exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint<S: Scalar> {
    /// The run's configuration text, verbatim.
    pub config_text: String,
    /// Parameters in lexicographic name order.
    pub params: Vec<(String, Tensor<S>)>,
    pub adam: AdamState<S>,
    pub schedule: ScheduleState,
    /// Epochs completed.
    pub epoch: u32,
    pub rng: RngState,
}

const CKPT_MAGIC: &[u8; 4] = b"TFGN";
const CKPT_VERSION: u32 = 1;

fn ckpt_err(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

fn scalar_width<S: Scalar>() -> Result<u8> {
    match std::mem::size_of::<S>() {
        4 => Ok(4),
        8 => Ok(8),
        w => Err(ckpt_err(format!("unsupported scalar width {w}"))),
    }
}

struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn tensor<S: Scalar>(&mut self, name: &str, t: &Tensor<S>, width: u8) {
        self.str(name);
        self.u8(t.rank() as u8);
        for &e in t.shape() {
            self.u32(e as u32);
        }
        for &v in t.data() {
            // Via f64, which is exact for both supported widths.
            match width {
                4 => self.buf.extend_from_slice(&(Scalar::to_f64(v) as f32).to_le_bytes()),
                _ => self.buf.extend_from_slice(&Scalar::to_f64(v).to_le_bytes()),
            }
        }
    }
}

struct Dec<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(ckpt_err(format!("truncated while reading {what}")));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| ckpt_err(format!("{what} is not UTF-8")))
    }
    fn tensor<S: Scalar>(&mut self, width: u8) -> Result<(String, Tensor<S>)> {
        let name = self.str("tensor name")?;
        let rank = self.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("tensor extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = self.take(numel * width as usize, "tensor data")?;
        let data: Vec<S> = match width {
            4 => bytes
                .chunks_exact(4)
                .map(|c| S::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            _ => bytes
                .chunks_exact(8)
                .map(|c| S::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        let t = Tensor::from_vec(&shape, data)
            .map_err(|e| ckpt_err(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

impl<S: Scalar> Checkpoint<S> {
    /// Serialize and write atomically (temp file + rename), so a crashed
    /// save can never leave a half-written checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let width = scalar_width::<S>()?;
        let mut e = Enc { buf: Vec::new() };
        e.buf.extend_from_slice(CKPT_MAGIC);
        e.u32(CKPT_VERSION);
        e.u8(width);
        e.str(&self.config_text);
        e.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            e.tensor(name, t, width);
        }
        e.u64(self.adam.step);
        e.f64(self.adam.lr);
        e.f64(self.adam.beta1);
        e.f64(self.adam.beta2);
        e.f64(self.adam.eps);
        for (i, (name, _)) in self.params.iter().enumerate() {
            e.tensor(name, &self.adam.m[i], width);
        }
        for (i, (name, _)) in self.params.iter().enumerate() {
            e.tensor(name, &self.adam.v[i], width);
        }
        e.f64(self.schedule.current_lr);
        e.f64(self.schedule.best_val_loss);
        e.u32(self.schedule.epochs_since_improvement);
        e.u32(self.epoch);
        e.buf.extend_from_slice(&self.rng.seed);
        e.u128(self.rng.word_pos);
        e.u64(self.rng.stream);

        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &e.buf).map_err(|err| Error::io(&tmp, err))?;
        fs::rename(&tmp, path).map_err(|err| Error::io(path, err))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut d = Dec { b: &bytes, pos: 0 };
        if d.take(4, "magic")? != CKPT_MAGIC {
            return Err(ckpt_err("bad magic (not a TFGN checkpoint)"));
        }
        let version = d.u32("version")?;
        if version != CKPT_VERSION {
            return Err(ckpt_err(format!("unsupported version {version}")));
        }
        let width = d.u8("float width")?;
        if width != scalar_width::<S>()? {
            return Err(ckpt_err(format!(
                "checkpoint stores {width}-byte floats but this run uses {}-byte",
                std::mem::size_of::<S>()
            )));
        }
        let config_text = d.str("config text")?;
        let n = d.u32("parameter count")? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            params.push(d.tensor::<S>(width)?);
        }
        if !params.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err(ckpt_err("parameter names are not in lexicographic order"));
        }
        let step = d.u64("adam step")?;
        let lr = d.f64("adam lr")?;
        let beta1 = d.f64("adam beta1")?;
        let beta2 = d.f64("adam beta2")?;
        let eps = d.f64("adam eps")?;
        let read_moments = |d: &mut Dec, what: &str| -> Result<Vec<Tensor<S>>> {
            let mut out = Vec::with_capacity(n);
            for (name, t) in &params {
                let (mname, mt) = d.tensor::<S>(width)?;
                if &mname != name || mt.shape() != t.shape() {
                    return Err(ckpt_err(format!("{what} block does not match parameter {name}")));
                }
                out.push(mt);
            }
            Ok(out)
        };
        let m = read_moments(&mut d, "first-moment")?;
        let v = read_moments(&mut d, "second-moment")?;
        let schedule = ScheduleState {
            current_lr: d.f64("schedule lr")?,
            best_val_loss: d.f64("schedule best")?,
            epochs_since_improvement: d.u32("schedule counter")?,
        };
        let epoch = d.u32("epoch")?;
        let seed: [u8; 32] = d.take(32, "rng seed")?.try_into().unwrap();
        let word_pos = d.u128("rng word pos")?;
        let stream = d.u64("rng stream")?;
        if d.pos != bytes.len() {
            return Err(ckpt_err(format!("{} trailing bytes", bytes.len() - d.pos)));
        }
        Ok(Checkpoint {
            config_text,
            params,
            adam: AdamState { m, v, step, lr, beta1, beta2, eps },
            schedule,
            epoch,
            rng: RngState { seed, word_pos, stream },
        })
    }
}

/// Float width (bytes per scalar) recorded in a checkpoint, read without
/// deserializing the rest; lets a caller pick f32 or f64 before loading.
pub fn checkpoint_width(path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut d = Dec { b: &bytes, pos: 0 };
    if d.take(4, "magic")? != CKPT_MAGIC {
        return Err(ckpt_err("bad magic (not a TFGN checkpoint)"));
    }
    let version = d.u32("version")?;
    if version != CKPT_VERSION {
        return Err(ckpt_err(format!("unsupported version {version}")));
    }
    Ok(d.u8("float width")? as usize)
}

/// Forward-only separation of a raw mixture (already variance-normalized or
/// not — the caller decides). Returns per-speaker f64 estimates.
pub fn separate_mixture<S: Scalar>(
    params: &ParamSet<S>,
    model_cfg: &ModelConfig,
    stft_cfg: &StftConfig,
    mixture: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let mix = tape.input(Tensor::from_f64(&[mixture.len()], mixture)?);
    let fwd = forward_separate(&mut tape, mix, model_cfg, stft_cfg, &bound)?;
    fwd.outputs.iter().map(|&o| Ok(tape.value(o)?.to_f64_vec())).collect()
}

/// The epoch loop. Owns parameters, optimizer and schedule state, the
/// segment-sampling RNG, and a cache of realized utterances.
pub struct Trainer<S: Scalar> {
    pub model_cfg: ModelConfig,
    pub stft_cfg: StftConfig,
    pub cfg: TrainConfig,
    pub params: ParamSet<S>,
    pub adam: AdamState<S>,
    pub schedule: ScheduleState,
    /// Epochs completed so far.
    pub epoch: u32,
    rng: ChaCha8Rng,
    train_set: Vec<ManifestEntry>,
    valid_set: Vec<ManifestEntry>,
    cache: HashMap<String, Utterance>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(
        model_cfg: ModelConfig,
        stft_cfg: StftConfig,
        cfg: TrainConfig,
        train_set: Vec<ManifestEntry>,
        valid_set: Vec<ManifestEntry>,
    ) -> Result<Self> {
        if train_set.is_empty() || valid_set.is_empty() {
            return Err(Error::invalid("trainer", "empty train or valid split"));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = ParamSet::init(&model_cfg, &mut init_rng)?;
        let adam = AdamState::new(params.tensors(), cfg.lr0);
        let schedule = ScheduleState::new(cfg.lr0);
        // Stream 1 so segment sampling is independent of parameter init.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            model_cfg,
            stft_cfg,
            cfg,
            params,
            adam,
            schedule,
            epoch: 0,
            rng,
            train_set,
            valid_set,
            cache: HashMap::new(),
        })
    }

    /// Rebuild a trainer mid-run from a checkpoint.
    pub fn resume(
        model_cfg: ModelConfig,
        stft_cfg: StftConfig,
        cfg: TrainConfig,
        train_set: Vec<ManifestEntry>,
        valid_set: Vec<ManifestEntry>,
        ckpt: Checkpoint<S>,
    ) -> Result<Self> {
        if train_set.is_empty() || valid_set.is_empty() {
            return Err(Error::invalid("trainer", "empty train or valid split"));
        }
        let specs = param_specs(&model_cfg);
        if specs.len() != ckpt.params.len() {
            return Err(ckpt_err(format!(
                "model wants {} parameters, checkpoint has {}",
                specs.len(),
                ckpt.params.len()
            )));
        }
        for (spec, (name, _)) in specs.iter().zip(&ckpt.params) {
            if &spec.name != name {
                return Err(ckpt_err(format!(
                    "parameter mismatch: model wants {}, checkpoint has {name}",
                    spec.name
                )));
            }
        }
        let tensors = ckpt.params.into_iter().map(|(_, t)| t).collect();
        let params = ParamSet::from_tensors(&model_cfg, tensors)?;
        Ok(Trainer {
            model_cfg,
            stft_cfg,
            cfg,
            params,
            adam: ckpt.adam,
            schedule: ckpt.schedule,
            epoch: ckpt.epoch,
            rng: ckpt.rng.restore(),
            train_set,
            valid_set,
            cache: HashMap::new(),
        })
    }

    /// Snapshot the full training state.
    pub fn checkpoint(&self, config_text: &str) -> Checkpoint<S> {
        let params = self
            .params
            .specs()
            .iter()
            .zip(self.params.tensors())
            .map(|(s, t)| (s.name.clone(), t.clone()))
            .collect();
        Checkpoint {
            config_text: config_text.to_string(),
            params,
            adam: self.adam.clone(),
            schedule: self.schedule.clone(),
            epoch: self.epoch,
            rng: RngState::capture(&self.rng),
        }
    }

    /// Stop once the epoch budget is spent or the lr has decayed away.
    pub fn should_stop(&self) -> bool {
        self.epoch >= self.cfg.max_epochs || self.schedule.current_lr < self.cfg.min_lr
    }

    fn utterance(&mut self, entry: &ManifestEntry) -> Result<Utterance> {
        if let Some(u) = self.cache.get(&entry.id) {
            return Ok(u.clone());
        }
        let u = realize_utterance(entry)?;
        self.cache.insert(entry.id.clone(), u.clone());
        Ok(u)
    }

    /// One training pass + validation + schedule update.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let t0 = Instant::now();
        let lr_used = self.schedule.current_lr;
        self.adam.lr = lr_used;
        let (train_loss, mc_term) = self.train_pass()?;
        let (val_loss, val_sisdri_db) = self.validate()?;
        self.schedule.update(val_loss);
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            train_loss,
            val_loss,
            val_sisdri_db,
            lr: lr_used,
            mc_term,
            wall_s: t0.elapsed().as_secs_f64(),
        })
    }

    fn train_pass(&mut self) -> Result<(f64, f64)> {
        let n_utts = self.train_set.len();
        let entries = self.train_set.clone();
        let mut accum: Vec<Tensor<S>> =
            self.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut group = 0usize;
        let mut loss_sum = 0.0;
        let mut mc_sum = 0.0;
        for (idx, entry) in entries.iter().enumerate() {
            let utt = self.utterance(entry)?;
            let seg = sample_segment(&utt, self.cfg.segment_seconds, &mut self.rng);
            let norm = normalize_variance(&seg)?;

            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, true);
            let n = norm.mixture.samples.len();
            let mix = tape.input(Tensor::from_f64(&[n], &norm.mixture.samples)?);
            let mut refs = Vec::with_capacity(norm.sources.len());
            for s in &norm.sources {
                refs.push(tape.input(Tensor::from_f64(&[n], &s.samples)?));
            }
            let fwd = forward_separate(&mut tape, mix, &self.model_cfg, &self.stft_cfg, &bound)?;
            let pl = match self.cfg.objective {
                Objective::Eq1 => PitLoss::SiSdrSe,
                Objective::Eq2 => PitLoss::MixtureConstraint(mix),
            };
            let res = pit(&mut tape, &fwd.outputs, &refs, pl)?;
            let lv = Scalar::to_f64(tape.scalar_value(res.loss)?);
            if !lv.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite training loss {lv} on utterance {} (epoch {})",
                    entry.id,
                    self.epoch + 1
                )));
            }
            loss_sum += lv;
            if self.cfg.objective == Objective::Eq2 {
                mc_sum += mc_magnitude(&tape, &fwd.outputs, &res.alphas, &norm.mixture.samples)?;
            }

            tape.backward(res.loss)?;
            for (i, &id) in bound.ids().iter().enumerate() {
                if let Some(g) = tape.grad(id)? {
                    kernels::add_assign(accum[i].data_mut(), g.data());
                }
            }
            group += 1;

            let flush = group == self.cfg.grad_accum.max(1) || idx + 1 == n_utts;
            if flush {
                if group > 1 {
                    let inv = S::from_f64(1.0 / group as f64);
                    for t in &mut accum {
                        kernels::scale_in_place(t.data_mut(), inv);
                    }
                }
                clip_global_norm(&mut accum, self.cfg.clip_norm);
                adam_step(self.params.tensors_mut(), &accum, &mut self.adam)?;
                for t in &mut accum {
                    t.data_mut().fill(S::zero());
                }
                group = 0;
            }
        }
        Ok((loss_sum / n_utts as f64, mc_sum / n_utts as f64))
    }

    /// Deterministic validation over the full (unsegmented) valid split.
    /// Returns (mean loss under the training objective, mean SI-SDRi in dB).
    pub fn validate(&mut self) -> Result<(f64, f64)> {
        let entries = self.valid_set.clone();
        let mut loss_sum = 0.0;
        let mut sisdri_sum = 0.0;
        for entry in &entries {
            let utt = self.utterance(entry)?;
            let norm = normalize_variance(&utt)?;

            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let n = norm.mixture.samples.len();
            let mix = tape.input(Tensor::from_f64(&[n], &norm.mixture.samples)?);
            let mut refs = Vec::with_capacity(norm.sources.len());
            for s in &norm.sources {
                refs.push(tape.input(Tensor::from_f64(&[n], &s.samples)?));
            }
            let fwd = forward_separate(&mut tape, mix, &self.model_cfg, &self.stft_cfg, &bound)?;
            let pl = match self.cfg.objective {
                Objective::Eq1 => PitLoss::SiSdrSe,
                Objective::Eq2 => PitLoss::MixtureConstraint(mix),
            };
            let res = pit(&mut tape, &fwd.outputs, &refs, pl)?;
            let lv = Scalar::to_f64(tape.scalar_value(res.loss)?);
            if !lv.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite validation loss {lv} on utterance {}",
                    entry.id
                )));
            }
            loss_sum += lv;

            let ests: Vec<Vec<f64>> = fwd
                .outputs
                .iter()
                .map(|&o| Ok(tape.value(o)?.to_f64_vec()))
                .collect::<Result<_>>()?;
            let est_slices: Vec<&[f64]> = ests.iter().map(|v| v.as_slice()).collect();
            let ref_slices: Vec<&[f64]> =
                norm.sources.iter().map(|s| s.samples.as_slice()).collect();
            sisdri_sum += si_sdri(&est_slices, &ref_slices, &norm.mixture.samples)?;
        }
        let n = entries.len() as f64;
        Ok((loss_sum / n, sisdri_sum / n))
    }
}

/// Numeric (tape-free) value of the mixture-constraint term under the
/// winning assignment's scale factors, for logging.
fn mc_magnitude<S: Scalar>(
    tape: &Tape<S>,
    ests: &[TensorId],
    alphas: &[f64],
    mixture: &[f64],
) -> Result<f64> {
    let n = mixture.len();
    let mut acc = vec![0.0f64; n];
    for (&e, &a) in ests.iter().zip(alphas) {
        let v = tape.value(e)?;
        for (dst, &s) in acc.iter_mut().zip(v.data()) {
            *dst += a * Scalar::to_f64(s);
        }
    }
    let l1: f64 = acc.iter().zip(mixture).map(|(a, m)| (a - m).abs()).sum();
    Ok(l1 / n as f64)
}
