//! Flat `key = value` run configuration: model hyper-parameters, STFT
//! settings, objective, optimizer knobs, and numeric precision. Lines may
//! carry `#` comments; unknown or duplicate keys are rejected by name, and
//! the canonical text form round-trips through [`RunConfig::parse`].

use anyhow::{bail, Context, Result};
use gridsep::model::{HeadMode, ModelConfig};
use gridsep::stft::StftConfig;
use gridsep::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub stft: StftConfig,
    pub train: TrainConfig,
    pub precision: Precision,
}

impl Default for RunConfig {
    /// The desk-scale model: D=8, B=2, H=16, single-head attention, E=2,
    /// I=J=1, the paper's 8 kHz front end, and the eq2 objective.
    fn default() -> Self {
        let stft = StftConfig::default_8k();
        RunConfig {
            model: ModelConfig {
                emb_dim: 8,
                num_blocks: 2,
                kernel: 1,
                stride: 1,
                hidden: 16,
                qk_channels: 2,
                heads: 1,
                use_attention: true,
                speakers: 2,
                n_freq: stft.n_freq(),
                head_mode: HeadMode::Mapping,
                mask_clip: 5.0,
            },
            stft,
            train: TrainConfig::default(),
            precision: Precision::F64,
        }
    }
}

/// Keys that may legitimately differ when resuming from a checkpoint: they
/// only control when the loop stops, not what it computes.
const LOOP_KEYS: &[&str] = &["max_epochs", "min_lr"];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let Some((k, v)) = line.split_once('=') else {
                bail!("config line {lineno}: expected `key = value`, got {raw:?}");
            };
            let (key, val) = (k.trim(), v.trim());
            if !seen.insert(key.to_string()) {
                bail!("config line {lineno}: duplicate key `{key}`");
            }
            cfg.set(key, val).with_context(|| format!("config line {lineno}"))?;
        }
        // The STFT grid fixes F; rebuild through the validating constructor.
        cfg.stft = StftConfig::new(
            cfg.stft.sample_rate,
            cfg.stft.win_length,
            cfg.stft.hop,
            cfg.stft.n_dft,
        )?;
        cfg.model.n_freq = cfg.stft.n_freq();
        cfg.model.validate()?;
        if !(cfg.train.lr0 > 0.0) || !(cfg.train.clip_norm > 0.0) {
            bail!("lr and clip_norm must be positive");
        }
        if !(cfg.train.segment_seconds > 0.0) {
            bail!("segment_seconds must be positive");
        }
        if cfg.train.grad_accum == 0 {
            bail!("grad_accum must be at least 1");
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, val: &str) -> Result<()> {
        match key {
            "emb_dim" => self.model.emb_dim = int(key, val)?,
            "num_blocks" => self.model.num_blocks = int(key, val)?,
            "kernel" => self.model.kernel = int(key, val)?,
            "stride" => self.model.stride = int(key, val)?,
            "hidden" => self.model.hidden = int(key, val)?,
            "heads" => self.model.heads = int(key, val)?,
            "qk_channels" => self.model.qk_channels = int(key, val)?,
            "use_attention" => self.model.use_attention = boolean(key, val)?,
            "head_mode" => {
                self.model.head_mode = match val {
                    "mapping" => HeadMode::Mapping,
                    "mask" => HeadMode::ComplexRatioMask,
                    _ => bail!("key `{key}`: expected mapping|mask, got {val:?}"),
                }
            }
            "mask_clip" => self.model.mask_clip = float(key, val)?,
            "speakers" => self.model.speakers = int(key, val)?,
            "sample_rate" => self.stft.sample_rate = int(key, val)? as u32,
            "win_length" => self.stft.win_length = int(key, val)?,
            "hop" => self.stft.hop = int(key, val)?,
            "n_dft" => self.stft.n_dft = int(key, val)?,
            "objective" => self.train.objective = val.parse()?,
            "lr" => self.train.lr0 = float(key, val)?,
            "clip_norm" => self.train.clip_norm = float(key, val)?,
            "grad_accum" => self.train.grad_accum = int(key, val)?,
            "max_epochs" => self.train.max_epochs = int(key, val)? as u32,
            "min_lr" => self.train.min_lr = float(key, val)?,
            "segment_seconds" => self.train.segment_seconds = float(key, val)?,
            "seed" => {
                self.train.seed =
                    val.parse().map_err(|_| bad(key, val, "a 64-bit unsigned integer"))?
            }
            "precision" => {
                self.precision = match val {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => bail!("key `{key}`: expected f32|f64, got {val:?}"),
                }
            }
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    fn kv(&self) -> Vec<(&'static str, String)> {
        let (m, s, t) = (&self.model, &self.stft, &self.train);
        vec![
            ("emb_dim", m.emb_dim.to_string()),
            ("num_blocks", m.num_blocks.to_string()),
            ("kernel", m.kernel.to_string()),
            ("stride", m.stride.to_string()),
            ("hidden", m.hidden.to_string()),
            ("heads", m.heads.to_string()),
            ("qk_channels", m.qk_channels.to_string()),
            ("use_attention", m.use_attention.to_string()),
            (
                "head_mode",
                match m.head_mode {
                    HeadMode::Mapping => "mapping".to_string(),
                    HeadMode::ComplexRatioMask => "mask".to_string(),
                },
            ),
            ("mask_clip", m.mask_clip.to_string()),
            ("speakers", m.speakers.to_string()),
            ("sample_rate", s.sample_rate.to_string()),
            ("win_length", s.win_length.to_string()),
            ("hop", s.hop.to_string()),
            ("n_dft", s.n_dft.to_string()),
            ("objective", t.objective.to_string()),
            ("lr", t.lr0.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("grad_accum", t.grad_accum.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("min_lr", t.min_lr.to_string()),
            ("segment_seconds", t.segment_seconds.to_string()),
            ("seed", t.seed.to_string()),
            (
                "precision",
                match self.precision {
                    Precision::F32 => "f32".to_string(),
                    Precision::F64 => "f64".to_string(),
                },
            ),
        ]
    }

    /// Canonical text form; `parse(to_text())` reproduces the config exactly
    /// (floats print with round-trip precision).
    pub fn to_text(&self) -> String {
        let mut out = String::from("# gridsep run configuration\n");
        for (k, v) in self.kv() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// A resumed run must match the checkpoint's config except for the
    /// loop-control keys; anything else would silently change the math.
    pub fn check_resume_compatible(&self, stored: &RunConfig) -> Result<()> {
        for ((key, now), (_, then)) in self.kv().iter().zip(stored.kv().iter()) {
            if now != then && !LOOP_KEYS.contains(key) {
                bail!(
                    "config key `{key}` differs from the checkpoint ({now} vs {then}); \
                     only {} may change on resume",
                    LOOP_KEYS.join("/")
                );
            }
        }
        Ok(())
    }
}

fn bad(key: &str, val: &str, want: &str) -> anyhow::Error {
    anyhow::anyhow!("key `{key}`: expected {want}, got {val:?}")
}

fn int(key: &str, val: &str) -> Result<usize> {
    val.parse().map_err(|_| bad(key, val, "a non-negative integer"))
}

fn float(key: &str, val: &str) -> Result<f64> {
    val.parse().map_err(|_| bad(key, val, "a number"))
}

fn boolean(key: &str, val: &str) -> Result<bool> {
    val.parse().map_err(|_| bad(key, val, "true or false"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let re = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg.to_text(), re.to_text());
    }

    #[test]
    fn overrides_comments_and_blank_lines() {
        let cfg = RunConfig::parse(
            "# comment\n\nemb_dim = 4   # trailing comment\nobjective=eq1\nprecision = f32\n",
        )
        .unwrap();
        assert_eq!(cfg.model.emb_dim, 4);
        assert_eq!(cfg.train.objective, gridsep::train::Objective::Eq1);
        assert_eq!(cfg.precision, Precision::F32);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::parse("emb_dmi = 4\n").unwrap_err();
        assert!(format!("{err:#}").contains("unknown config key `emb_dmi`"), "{err:#}");
    }

    #[test]
    fn duplicates_and_bad_values_are_rejected() {
        let err = RunConfig::parse("emb_dim = 4\nemb_dim = 8\n").unwrap_err();
        assert!(format!("{err:#}").contains("duplicate key `emb_dim`"), "{err:#}");
        let err = RunConfig::parse("hidden = sixteen\n").unwrap_err();
        assert!(format!("{err:#}").contains("key `hidden`"), "{err:#}");
        let err = RunConfig::parse("lr\n").unwrap_err();
        assert!(format!("{err:#}").contains("expected `key = value`"), "{err:#}");
    }

    #[test]
    fn derived_f_follows_the_dft_size() {
        let cfg = RunConfig::parse("win_length = 128\nhop = 32\nn_dft = 128\n").unwrap();
        assert_eq!(cfg.model.n_freq, 65);
        // inconsistent grid rejected by the stft constructor
        assert!(RunConfig::parse("hop = 48\n").is_err());
    }

    #[test]
    fn resume_compatibility_ignores_loop_keys_only() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.train.max_epochs = 7;
        b.train.min_lr = 1e-7;
        a.check_resume_compatible(&b).unwrap();
        b.train.lr0 = 0.5;
        let err = a.check_resume_compatible(&b).unwrap_err();
        assert!(format!("{err:#}").contains("key `lr` differs"), "{err:#}");
    }
}
