//! The five subcommand bodies. Everything here is deterministic given the
//! flags (and, for training, the seed in the config file).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use gridsep::data::{build_manifests, normalize_variance, realize_utterance, Manifest, Split};
use gridsep::model::ParamSet;
use gridsep::objectives::{si_sdr_metric, si_sdri};
use gridsep::stft::Waveform;
use gridsep::train::{checkpoint_width, separate_mixture, Checkpoint, Trainer};
use gridsep::wav::{wav_read, wav_write};
use gridsep::Scalar;

use crate::config::{Precision, RunConfig};

pub fn synth_data(
    out: &Path,
    n_train: usize,
    n_valid: usize,
    n_test: usize,
    seed: u64,
    force: bool,
) -> Result<()> {
    if out.exists() {
        let mut entries =
            fs::read_dir(out).with_context(|| format!("reading {}", out.display()))?;
        if entries.next().is_some() && !force {
            bail!("{} is not empty; pass --force to write into it", out.display());
        }
    }
    let audio = out.join("audio");
    fs::create_dir_all(&audio).with_context(|| format!("creating {}", audio.display()))?;

    let manifests = build_manifests(seed, n_train, n_valid, n_test);
    for m in &manifests {
        m.write(out.join(format!("{}.tsv", m.split)))?;
    }
    let entries: Vec<_> = manifests.iter().flat_map(|m| m.entries.iter()).collect();
    entries.par_iter().try_for_each(|e| -> Result<()> {
        let u = realize_utterance(e)?;
        wav_write(audio.join(format!("{}.mix.wav", e.id)), &u.mixture)?;
        for (k, s) in u.sources.iter().enumerate() {
            wav_write(audio.join(format!("{}.spk{}.wav", e.id, k + 1)), s)?;
        }
        Ok(())
    })?;
    println!(
        "wrote {} utterances ({n_train} train / {n_valid} valid / {n_test} test) to {}",
        entries.len(),
        out.display()
    );
    Ok(())
}

pub fn train(
    config_path: &Path,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    print_config: bool,
) -> Result<()> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let cfg = RunConfig::parse(&text)?;
    if print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    match cfg.precision {
        Precision::F32 => run_train::<f32>(&cfg, data, out, resume),
        Precision::F64 => run_train::<f64>(&cfg, data, out, resume),
    }
}

fn run_train<S: Scalar>(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let train_m = Manifest::read(data.join("train.tsv"))?;
    let valid_m = Manifest::read(data.join("valid.tsv"))?;
    let (n_train, n_valid) = (train_m.entries.len(), valid_m.entries.len());
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::<S>::load(p)?;
            let stored = RunConfig::parse(&ck.config_text)
                .context("parsing the config stored in the checkpoint")?;
            cfg.check_resume_compatible(&stored)?;
            let t = Trainer::resume(
                cfg.model.clone(),
                cfg.stft,
                cfg.train.clone(),
                train_m.entries,
                valid_m.entries,
                ck,
            )?;
            println!("resumed {} at epoch {}", p.display(), t.epoch);
            t
        }
        None => Trainer::new(
            cfg.model.clone(),
            cfg.stft,
            cfg.train.clone(),
            train_m.entries,
            valid_m.entries,
        )?,
    };
    println!(
        "{} parameters, {n_train} train / {n_valid} valid utterances, objective {}",
        trainer.params.num_scalars(),
        cfg.train.objective
    );

    let config_text = cfg.to_text();
    let log_path = out.join("train.log");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut best = trainer.schedule.best_val_loss;
    while !trainer.should_stop() {
        let stats = trainer.run_epoch()?;
        writeln!(log, "{}", stats.log_line())?;
        log.flush()?;
        println!(
            "epoch {:>3}  train {:+.4}  val {:+.4}  si-sdri {:+.2} dB  lr {:.2e}  mc {:.4}  ({:.1} s)",
            stats.epoch,
            stats.train_loss,
            stats.val_loss,
            stats.val_sisdri_db,
            stats.lr,
            stats.mc_term,
            stats.wall_s
        );
        let ck = trainer.checkpoint(&config_text);
        ck.save(out.join("latest.ckpt"))?;
        if stats.val_loss < best {
            best = stats.val_loss;
            ck.save(out.join("best.ckpt"))?;
        }
    }
    println!(
        "stopped after epoch {} (lr {:.2e}); checkpoints in {}",
        trainer.epoch,
        trainer.schedule.current_lr,
        out.display()
    );
    Ok(())
}

/// Parameters plus the run config a checkpoint was trained under.
fn load_model<S: Scalar>(ckpt_path: &Path) -> Result<(ParamSet<S>, RunConfig)> {
    let ck = Checkpoint::<S>::load(ckpt_path)?;
    let cfg = RunConfig::parse(&ck.config_text)
        .context("parsing the config stored in the checkpoint")?;
    let tensors = ck.params.into_iter().map(|(_, t)| t).collect();
    let params = ParamSet::from_tensors(&cfg.model, tensors)?;
    Ok((params, cfg))
}

struct EvalRow {
    id: String,
    mix: f64,
    est: f64,
    imp: f64,
}

pub fn eval(ckpt: &Path, data: &Path, split: &str, report: Option<&Path>) -> Result<()> {
    let split: Split = split.parse()?;
    match checkpoint_width(ckpt)? {
        4 => run_eval::<f32>(ckpt, data, split, report),
        _ => run_eval::<f64>(ckpt, data, split, report),
    }
}

fn run_eval<S: Scalar>(
    ckpt: &Path,
    data: &Path,
    split: Split,
    report: Option<&Path>,
) -> Result<()> {
    let manifest = Manifest::read(data.join(format!("{split}.tsv")))?;
    let (params, cfg) = load_model::<S>(ckpt)?;
    let rows: Vec<EvalRow> = manifest
        .entries
        .par_iter()
        .map(|e| -> Result<EvalRow> {
            let utt = normalize_variance(&realize_utterance(e)?)?;
            let mix = &utt.mixture.samples;
            let ests = separate_mixture(&params, &cfg.model, &cfg.stft, mix)?;
            let est_slices: Vec<&[f64]> = ests.iter().map(|v| v.as_slice()).collect();
            let refs: Vec<&[f64]> = utt.sources.iter().map(|s| s.samples.as_slice()).collect();
            let imp = si_sdri(&est_slices, &refs, mix)?;
            let mut mix_metric = 0.0;
            for r in &refs {
                mix_metric += si_sdr_metric(mix, r)?;
            }
            mix_metric /= refs.len() as f64;
            Ok(EvalRow { id: e.id.clone(), mix: mix_metric, est: mix_metric + imp, imp })
        })
        .collect::<Result<_>>()?;

    let report_path = report
        .map(PathBuf::from)
        .unwrap_or_else(|| ckpt.with_file_name(format!("eval-{split}.tsv")));
    let mut text = String::new();
    for r in &rows {
        text.push_str(&format!("{}\t{}\t{}\t{}\n", r.id, r.mix, r.est, r.imp));
        println!(
            "{}  mix {:>6.2} dB  est {:>6.2} dB  si-sdri {:>6.2} dB",
            r.id, r.mix, r.est, r.imp
        );
    }
    fs::write(&report_path, text)
        .with_context(|| format!("writing {}", report_path.display()))?;
    let n = rows.len() as f64;
    let mean_mix = rows.iter().map(|r| r.mix).sum::<f64>() / n;
    let mean_imp = rows.iter().map(|r| r.imp).sum::<f64>() / n;
    println!(
        "mean over {} utterances: mixture {mean_mix:.2} dB, SI-SDRi {mean_imp:.2} dB",
        rows.len()
    );
    println!("report written to {}", report_path.display());
    Ok(())
}

pub fn separate(ckpt: &Path, input: &Path, out_prefix: &Path) -> Result<()> {
    match checkpoint_width(ckpt)? {
        4 => run_separate::<f32>(ckpt, input, out_prefix),
        _ => run_separate::<f64>(ckpt, input, out_prefix),
    }
}

fn run_separate<S: Scalar>(ckpt: &Path, input: &Path, out_prefix: &Path) -> Result<()> {
    let (params, cfg) = load_model::<S>(ckpt)?;
    let wav = wav_read(input)?;
    if wav.sample_rate != cfg.stft.sample_rate {
        bail!(
            "{} is {} Hz; this model expects {} Hz input",
            input.display(),
            wav.sample_rate,
            cfg.stft.sample_rate
        );
    }
    if wav.samples.is_empty() {
        bail!("{} contains no samples", input.display());
    }
    // Scale to unit variance for the model, undo on the way out.
    let n = wav.samples.len() as f64;
    let mean = wav.samples.iter().sum::<f64>() / n;
    let var = wav.samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) {
        bail!("{} is silent (zero variance)", input.display());
    }
    let norm: Vec<f64> = wav.samples.iter().map(|v| v / std).collect();
    let ests = separate_mixture(&params, &cfg.model, &cfg.stft, &norm)?;
    for (k, est) in ests.iter().enumerate() {
        let mut name = out_prefix.as_os_str().to_os_string();
        name.push(format!(".spk{}.wav", k + 1));
        let path = PathBuf::from(name);
        let samples: Vec<f64> = est.iter().map(|v| v * std).collect();
        wav_write(&path, &Waveform::new(samples, wav.sample_rate))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn verify(suite: &str) -> Result<()> {
    let checks = gridsep::verify::run_suite(suite)?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} of {} checks failed", checks.len());
    }
    println!("{} checks passed", checks.len());
    Ok(())
}
