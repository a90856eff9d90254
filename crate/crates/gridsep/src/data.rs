//! Synthetic two-speaker corpus: seeded source synthesis, SNR-controlled
//! mixing, variance normalization, segment sampling, and TSV manifests.
//!
//! Everything audible is a pure function of a 64-bit seed. A manifest row
//! stores the utterance seed plus the drawn duration/SNR, and those stored
//! values are authoritative on regeneration — floats round-trip exactly
//! through their shortest decimal form, so a manifest pins every sample.

use std::collections::HashSet;
use std::f64::consts::TAU;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::stft::Waveform;

/// Corpus-wide sample rate.
pub const SAMPLE_RATE: u32 = 8000;

/// Two overlapping broadband sources per mixture.
pub const NUM_SPEAKERS: usize = 2;

/// What kind of source to synthesize.
///
/// The two styles are deliberately different in structure — a harmonic
/// "voice" against a band of noise — so a separator must actually use
/// spectral cues, while both remain broadband enough that the labels stay
/// ambiguous and permutation handling matters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceStyle {
    /// Sum of 3–6 harmonics of a low fundamental with slow random
    /// frequency and amplitude modulation.
    Voiced,
    /// Stationary noise concentrated in a seed-chosen frequency band.
    NoiseBand,
}

/// A mixture together with the clean sources it was built from.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
    /// The utterance seed (provenance; regeneration key).
    pub seed: u64,
    /// Level of source 1 over scaled source 2, in dB.
    pub snr_db: f64,
}

/// Deterministically synthesize one source signal.
///
/// The peak absolute sample is normalized to 0.5 so that two sources sum
/// comfortably inside [−1, 1] before any further scaling.
///
/// Durations below half a second leave too little signal to mix or segment
/// meaningfully, so that is treated as a caller bug rather than an error.
pub fn synth_source(seed: u64, style: SourceStyle, duration_s: f64, sr: u32) -> Waveform {
    assert!(duration_s >= 0.5, "synth_source needs at least 0.5 s, got {duration_s}");
    let n = (duration_s * sr as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = vec![0.0f64; n];
    match style {
        SourceStyle::Voiced => {
            let f0: f64 = rng.random_range(90.0..300.0);
            let n_harm: usize = rng.random_range(3..=6);
            let mut amps = Vec::with_capacity(n_harm);
            let mut phases = Vec::with_capacity(n_harm);
            for h in 1..=n_harm {
                amps.push(rng.random_range(0.7..1.3) / h as f64);
                phases.push(rng.random_range(0.0..TAU));
            }
            let fm_rate: f64 = rng.random_range(1.0..5.0);
            let fm_phase: f64 = rng.random_range(0.0..TAU);
            // Per-seed pitch drift (relative, per second). Two voices with
            // near-identical fundamentals still decorrelate because their
            // chirp rates differ.
            let drift: f64 = rng.random_range(-0.04..0.04);
            let am_rate: f64 = rng.random_range(1.0..4.0);
            let am_phase: f64 = rng.random_range(0.0..TAU);
            // One shared phase accumulator keeps the harmonics locked to the
            // wobbling fundamental, like a glottal pulse train would be.
            let mut acc = 0.0f64;
            for (i, s) in samples.iter_mut().enumerate() {
                let t = i as f64 / sr as f64;
                let f_inst =
                    f0 * (1.0 + 0.03 * (TAU * fm_rate * t + fm_phase).sin() + drift * t);
                acc += TAU * f_inst / sr as f64;
                let env = 1.0 + 0.3 * (TAU * am_rate * t + am_phase).sin();
                let mut v = 0.0;
                for h in 0..n_harm {
                    v += amps[h] * ((h + 1) as f64 * acc + phases[h]).sin();
                }
                *s = env * v;
            }
        }
        SourceStyle::NoiseBand => {
            let center: f64 = rng.random_range(500.0..3000.0);
            let half_width: f64 = rng.random_range(150.0..600.0);
            let lo = (center - half_width).max(60.0);
            let hi = (center + half_width).min(3900.0);
            // Dense random partials inside the band approximate filtered
            // noise without needing an actual filter design.
            const PARTIALS: usize = 48;
            let mut freqs = [0.0f64; PARTIALS];
            let mut phases = [0.0f64; PARTIALS];
            let mut amps = [0.0f64; PARTIALS];
            for k in 0..PARTIALS {
                freqs[k] = rng.random_range(lo..hi);
                phases[k] = rng.random_range(0.0..TAU);
                amps[k] = rng.random_range(0.5..1.0);
            }
            for (i, s) in samples.iter_mut().enumerate() {
                let t = i as f64 / sr as f64;
                let mut v = 0.0;
                for k in 0..PARTIALS {
                    v += amps[k] * (TAU * freqs[k] * t + phases[k]).sin();
                }
                *s = v;
            }
        }
    }
    let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    assert!(peak > 0.0, "synthesized source is silent");
    let scale = 0.5 / peak;
    for s in &mut samples {
        *s *= scale;
    }
    Waveform::new(samples, sr)
}

/// Mix two sources at a given SNR (level of `s1` over rescaled `s2`, in dB).
///
/// `s2` is rescaled so that `10·log10(‖s1‖²/‖s2_scaled‖²) == snr_db`, and the
/// *scaled* source is what gets stored: the additive invariant
/// `mixture[i] == s1[i] + s2_scaled[i]` then holds exactly in f64.
pub fn make_mixture(s1: &Waveform, s2: &Waveform, snr_db: f64, seed: u64) -> Result<Utterance> {
    if s1.samples.len() != s2.samples.len() {
        return Err(Error::invalid(
            "make_mixture",
            format!("length mismatch: {} vs {}", s1.samples.len(), s2.samples.len()),
        ));
    }
    if s1.sample_rate != s2.sample_rate {
        return Err(Error::invalid(
            "make_mixture",
            format!("sample rate mismatch: {} vs {}", s1.sample_rate, s2.sample_rate),
        ));
    }
    let e1: f64 = s1.samples.iter().map(|v| v * v).sum();
    let e2: f64 = s2.samples.iter().map(|v| v * v).sum();
    if !(e1 > 0.0) || !(e2 > 0.0) {
        return Err(Error::invalid("make_mixture", "zero-energy source"));
    }
    let g = (e1 / (e2 * 10f64.powf(snr_db / 10.0))).sqrt();
    let s2_scaled: Vec<f64> = s2.samples.iter().map(|v| v * g).collect();
    let mixture: Vec<f64> =
        s1.samples.iter().zip(&s2_scaled).map(|(a, b)| a + b).collect();
    Ok(Utterance {
        mixture: Waveform::new(mixture, s1.sample_rate),
        sources: vec![s1.clone(), Waveform::new(s2_scaled, s2.sample_rate)],
        seed,
        snr_db,
    })
}

/// Divide the mixture by its sample standard deviation (population form,
/// about the mean) and every source by the same factor.
///
/// Only a common division is applied — no mean subtraction — so per-sample
/// source/mixture ratios are untouched.
pub fn normalize_variance(u: &Utterance) -> Result<Utterance> {
    let n = u.mixture.samples.len();
    if n == 0 {
        return Err(Error::invalid("normalize_variance", "empty mixture"));
    }
    let mean: f64 = u.mixture.samples.iter().sum::<f64>() / n as f64;
    let var: f64 =
        u.mixture.samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::invalid("normalize_variance", "mixture has zero variance"));
    }
    let scale_wave = |w: &Waveform| {
        Waveform::new(w.samples.iter().map(|v| v / std).collect(), w.sample_rate)
    };
    Ok(Utterance {
        mixture: scale_wave(&u.mixture),
        sources: u.sources.iter().map(scale_wave).collect(),
        seed: u.seed,
        snr_db: u.snr_db,
    })
}

/// Cut a fixed-length training segment, identically across all channels.
///
/// Longer utterances yield a uniformly random start; shorter ones are
/// zero-padded on the right. Either way the additive invariant survives,
/// because every channel is cut (or padded) at the same positions.
pub fn sample_segment(u: &Utterance, seconds: f64, rng: &mut impl Rng) -> Utterance {
    let sr = u.mixture.sample_rate;
    let seg = (seconds * sr as f64).round() as usize;
    let len = u.mixture.samples.len();
    let cut = |w: &Waveform, start: usize| -> Waveform {
        if len >= seg {
            Waveform::new(w.samples[start..start + seg].to_vec(), sr)
        } else {
            let mut s = w.samples.clone();
            s.resize(seg, 0.0);
            Waveform::new(s, sr)
        }
    };
    let start = if len > seg { rng.random_range(0..=len - seg) } else { 0 };
    Utterance {
        mixture: cut(&u.mixture, start),
        sources: u.sources.iter().map(|s| cut(s, start)).collect(),
        seed: u.seed,
        snr_db: u.snr_db,
    }
}

/// Corpus split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// One manifest row. `seed` regenerates the sources; `snr_db` and
/// `duration_s` are stored explicitly so the row alone reproduces the
/// utterance even if the drawing procedure ever changes.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub snr_db: f64,
    pub duration_s: f64,
    pub split: Split,
}

/// A split's worth of manifest rows.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Serialize as `id<TAB>seed<TAB>snr_db<TAB>duration_s<TAB>split` lines.
    ///
    /// Floats use their shortest round-trip decimal form, so read-back is
    /// bit-exact.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for e in &self.entries {
            writeln!(out, "{}\t{}\t{}\t{}\t{}", e.id, e.seed, e.snr_db, e.duration_s, e.split)
                .expect("writing to String cannot fail");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Parse a manifest file, validating field count, numeric fields, id
    /// uniqueness, and split consistency. Line numbers in errors are 1-based.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries: Vec<ManifestEntry> = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let mk = |detail: String| Error::Manifest { line: lineno, detail };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(mk(format!(
                    "expected 5 tab-separated fields, got {}",
                    fields.len()
                )));
            }
            let id = fields[0].to_string();
            if !seen.insert(id.clone()) {
                return Err(mk(format!("duplicate id '{id}'")));
            }
            let seed: u64 = fields[1]
                .parse()
                .map_err(|_| mk(format!("bad seed '{}'", fields[1])))?;
            let snr_db: f64 = fields[2]
                .parse()
                .map_err(|_| mk(format!("bad snr_db '{}'", fields[2])))?;
            let duration_s: f64 = fields[3]
                .parse()
                .map_err(|_| mk(format!("bad duration_s '{}'", fields[3])))?;
            let split = Split::from_str(fields[4])
                .map_err(|_| mk(format!("unknown split '{}'", fields[4])))?;
            if let Some(first) = entries.first() {
                if split != first.split {
                    return Err(mk(format!(
                        "mixed splits in one manifest ({} vs {})",
                        first.split, split
                    )));
                }
            }
            entries.push(ManifestEntry { id, seed, snr_db, duration_s, split });
        }
        let split = entries
            .first()
            .map(|e| e.split)
            .ok_or(Error::Manifest { line: 0, detail: "empty manifest".into() })?;
        Ok(Manifest { split, entries })
    }
}

/// Seed for the utterance at a global (cross-split) index.
///
/// Splits take consecutive global index ranges, so their seed sets are
/// disjoint for any base seed — the stand-in for speaker-disjoint splits.
pub fn utterance_seed(base_seed: u64, global_index: u64) -> u64 {
    base_seed.wrapping_mul(1_000_003).wrapping_add(global_index)
}

fn source_seeds(utt_seed: u64) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(utt_seed);
    (rng.random::<u64>(), rng.random::<u64>())
}

/// Draw the manifests for all three splits.
///
/// Per utterance, a seed-keyed stream yields (in order) the two source
/// seeds, a duration uniform on [4, 6) s, and an SNR uniform on [−5, 5) dB.
pub fn build_manifests(
    base_seed: u64,
    n_train: usize,
    n_valid: usize,
    n_test: usize,
) -> Vec<Manifest> {
    let mut global: u64 = 0;
    let mut out = Vec::with_capacity(3);
    for (split, count) in
        [(Split::Train, n_train), (Split::Valid, n_valid), (Split::Test, n_test)]
    {
        let mut entries = Vec::with_capacity(count);
        for k in 0..count {
            let seed = utterance_seed(base_seed, global);
            global += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let _s1: u64 = rng.random();
            let _s2: u64 = rng.random();
            let duration_s: f64 = rng.random_range(4.0..6.0);
            let snr_db: f64 = rng.random_range(-5.0..5.0);
            entries.push(ManifestEntry {
                id: format!("{split}-{k:05}"),
                seed,
                snr_db,
                duration_s,
                split,
            });
        }
        out.push(Manifest { split, entries });
    }
    out
}

/// Regenerate the full utterance a manifest row describes.
///
/// Source 1 is always voiced and source 2 a noise band; their seeds come
/// from the row's seed, while duration and SNR are taken from the row
/// itself (the stored values are authoritative).
pub fn realize_utterance(entry: &ManifestEntry) -> Result<Utterance> {
    let (s1_seed, s2_seed) = source_seeds(entry.seed);
    let s1 = synth_source(s1_seed, SourceStyle::Voiced, entry.duration_s, SAMPLE_RATE);
    let s2 = synth_source(s2_seed, SourceStyle::NoiseBand, entry.duration_s, SAMPLE_RATE);
    make_mixture(&s1, &s2, entry.snr_db, entry.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels;

    #[test]
    fn synth_is_deterministic_and_peak_normalized() {
        for style in [SourceStyle::Voiced, SourceStyle::NoiseBand] {
            let a = synth_source(42, style, 1.0, SAMPLE_RATE);
            let b = synth_source(42, style, 1.0, SAMPLE_RATE);
            assert_eq!(a.samples, b.samples);
            assert_eq!(a.sample_rate, SAMPLE_RATE);
            assert_eq!(a.samples.len(), 8000);
            let peak = a.samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            assert!((peak - 0.5).abs() < 1e-6, "{style:?} peak {peak}");
        }
    }

    /// Peak of |Σ_i x[i]·y[i+lag]| over all zero-padded lags, normalized by
    /// ‖x‖‖y‖.
    fn xcorr_peak(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len();
        assert_eq!(n, y.len());
        let nx = kernels::dot(x, x).sqrt();
        let ny = kernels::dot(y, y).sqrt();
        let mut peak = 0.0f64;
        for lag in 0..n {
            let a = kernels::dot(&x[..n - lag], &y[lag..]).abs();
            let b = kernels::dot(&x[lag..], &y[..n - lag]).abs();
            peak = peak.max(a).max(b);
        }
        peak / (nx * ny)
    }

    #[test]
    fn different_seeds_decorrelate() {
        // 100 fixed random seed pairs, half per style (same-style pairs are
        // the adversarial case; cross-style correlations are far smaller).
        // Observed worst over this set: 0.334 voiced, 0.110 noise-band.
        let mut meta = ChaCha8Rng::seed_from_u64(2024);
        for style in [SourceStyle::Voiced, SourceStyle::NoiseBand] {
            let mut worst = 0.0f64;
            for _ in 0..50 {
                let sa: u64 = meta.random();
                let sb: u64 = meta.random();
                let a = synth_source(sa, style, 1.0, SAMPLE_RATE);
                let b = synth_source(sb, style, 1.0, SAMPLE_RATE);
                worst = worst.max(xcorr_peak(&a.samples, &b.samples));
            }
            assert!(worst < 0.5, "{style:?} worst normalized xcorr peak {worst}");
        }
        // Same-seed control: perfect correlation at lag zero.
        let a = synth_source(77, SourceStyle::Voiced, 0.5, SAMPLE_RATE);
        let p = xcorr_peak(&a.samples, &a.samples);
        assert!(p > 1.0 - 1e-12, "self-correlation peak {p}");
    }

    #[test]
    fn mixture_scaling_and_additivity() {
        let s1 = synth_source(1, SourceStyle::Voiced, 1.0, SAMPLE_RATE);
        let s2 = synth_source(2, SourceStyle::NoiseBand, 1.0, SAMPLE_RATE);

        // Equal-energy inputs at 0 dB: the scale factor is exactly 1.
        let u0 = make_mixture(&s1, &s1, 0.0, 9).unwrap();
        assert_eq!(u0.sources[1].samples, s1.samples);

        // 5 dB: scaled s2 energy is ‖s1‖²/10^0.5.
        let u5 = make_mixture(&s1, &s2, 5.0, 9).unwrap();
        let e1: f64 = s1.samples.iter().map(|v| v * v).sum();
        let e2s: f64 = u5.sources[1].samples.iter().map(|v| v * v).sum();
        let want = e1 / 10f64.powf(0.5);
        assert!((e2s - want).abs() / want < 1e-12, "e2s={e2s} want={want}");

        // The additive invariant is exact, not approximate.
        for i in 0..u5.mixture.samples.len() {
            assert_eq!(
                u5.mixture.samples[i],
                u5.sources[0].samples[i] + u5.sources[1].samples[i]
            );
        }

        let silent = Waveform::new(vec![0.0; 8000], SAMPLE_RATE);
        assert!(make_mixture(&s1, &silent, 0.0, 9).is_err());
        assert!(make_mixture(&silent, &s2, 0.0, 9).is_err());
    }

    fn sample_variance(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
    }

    #[test]
    fn variance_normalization() {
        let s1 = synth_source(3, SourceStyle::Voiced, 1.0, SAMPLE_RATE);
        let s2 = synth_source(4, SourceStyle::NoiseBand, 1.0, SAMPLE_RATE);
        let u = make_mixture(&s1, &s2, -2.5, 11).unwrap();
        let nu = normalize_variance(&u).unwrap();
        assert!((sample_variance(&nu.mixture.samples) - 1.0).abs() < 1e-9);

        // Per-sample source/mixture ratios survive the common factor.
        for i in (0..u.mixture.samples.len()).step_by(997) {
            let before = u.sources[0].samples[i] / u.mixture.samples[i];
            let after = nu.sources[0].samples[i] / nu.mixture.samples[i];
            assert!((before - after).abs() <= 1e-12 * before.abs().max(1.0));
        }

        // Unit variance is a fixed point.
        let nn = normalize_variance(&nu).unwrap();
        for (a, b) in nu.mixture.samples.iter().zip(&nn.mixture.samples) {
            assert!((a - b).abs() < 1e-9);
        }

        let zero = Utterance {
            mixture: Waveform::new(vec![0.0; 100], SAMPLE_RATE),
            sources: vec![],
            seed: 0,
            snr_db: 0.0,
        };
        assert!(normalize_variance(&zero).is_err());
    }

    #[test]
    fn segment_sampling() {
        let s1 = synth_source(5, SourceStyle::Voiced, 6.0, SAMPLE_RATE);
        let s2 = synth_source(6, SourceStyle::NoiseBand, 6.0, SAMPLE_RATE);
        let u = make_mixture(&s1, &s2, 1.0, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let seg = sample_segment(&u, 4.0, &mut rng);
            assert_eq!(seg.mixture.samples.len(), 32000);
            // Locate the cut: the segment must be a contiguous slice.
            let start = u
                .mixture
                .samples
                .windows(32000)
                .position(|w| w == &seg.mixture.samples[..])
                .expect("segment not found in source utterance");
            assert!(start <= 48000 - 32000);
            assert_eq!(&u.sources[0].samples[start..start + 32000], &seg.sources[0].samples[..]);
            for i in 0..32000 {
                assert_eq!(
                    seg.mixture.samples[i],
                    seg.sources[0].samples[i] + seg.sources[1].samples[i]
                );
            }
        }

        // Shorter than the segment: right-padded with zeros in all channels.
        let s1 = synth_source(7, SourceStyle::Voiced, 3.0, SAMPLE_RATE);
        let s2 = synth_source(8, SourceStyle::NoiseBand, 3.0, SAMPLE_RATE);
        let short = make_mixture(&s1, &s2, 0.0, 14).unwrap();
        let seg = sample_segment(&short, 4.0, &mut rng);
        assert_eq!(seg.mixture.samples.len(), 32000);
        assert_eq!(&seg.mixture.samples[..24000], &short.mixture.samples[..]);
        assert!(seg.mixture.samples[24000..].iter().all(|&v| v == 0.0));
        assert!(seg.sources[0].samples[24000..].iter().all(|&v| v == 0.0));
        assert!(seg.sources[1].samples[24000..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn manifest_roundtrip_is_exact() {
        let dir = std::env::temp_dir().join(format!("gridsep-man-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let m = &build_manifests(123, 7, 0, 0)[0];
        let p = dir.join("train.tsv");
        m.write(&p).unwrap();
        let back = Manifest::read(&p).unwrap();
        assert_eq!(back.split, Split::Train);
        assert_eq!(back.entries.len(), 7);
        for (a, b) in m.entries.iter().zip(&back.entries) {
            assert_eq!(a, b); // f64 fields bit-exact via Display round-trip
        }
    }

    #[test]
    fn manifest_rejects_malformed_input() {
        let dir = std::env::temp_dir().join(format!("gridsep-man-bad-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let cases: &[(&str, &str, &str)] = &[
            ("fields.tsv", "a\t1\t0.0\t4.0\n", "expected 5"),
            ("seed.tsv", "a\tx\t0.0\t4.0\ttrain\n", "bad seed"),
            ("snr.tsv", "a\t1\tnope\t4.0\ttrain\n", "bad snr_db"),
            ("dup.tsv", "a\t1\t0.0\t4.0\ttrain\na\t2\t0.0\t4.0\ttrain\n", "duplicate id"),
            ("split.tsv", "a\t1\t0.0\t4.0\tdev\n", "unknown split"),
            (
                "mixed.tsv",
                "a\t1\t0.0\t4.0\ttrain\nb\t2\t0.0\t4.0\tvalid\n",
                "mixed splits",
            ),
            ("empty.tsv", "", "empty manifest"),
        ];
        for (name, text, needle) in cases {
            let p = dir.join(name);
            fs::write(&p, text).unwrap();
            let err = Manifest::read(&p).unwrap_err().to_string();
            assert!(err.contains(needle), "{name}: {err}");
        }
        // Errors carry the offending line number.
        let p = dir.join("dup.tsv");
        match Manifest::read(&p).unwrap_err() {
            Error::Manifest { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn corpus_counts_seeds_and_distributions() {
        let ms = build_manifests(7, 1000, 100, 100);
        assert_eq!(ms[0].entries.len(), 1000);
        assert_eq!(ms[1].entries.len(), 100);
        assert_eq!(ms[2].entries.len(), 100);
        assert_eq!(ms[0].entries[0].id, "train-00000");
        assert_eq!(ms[2].entries[99].id, "test-00099");

        let mut all_seeds = HashSet::new();
        for m in &ms {
            for e in &m.entries {
                assert!(all_seeds.insert(e.seed), "seed {} reused across splits", e.seed);
                assert!((4.0..6.0).contains(&e.duration_s));
                assert!((-5.0..5.0).contains(&e.snr_db));
            }
        }

        let mean_snr: f64 = ms[0].entries.iter().map(|e| e.snr_db).sum::<f64>() / 1000.0;
        assert!(mean_snr.abs() < 0.3, "train SNR mean {mean_snr}");
    }

    #[test]
    fn realized_utterances_are_reproducible() {
        let ms = build_manifests(99, 2, 1, 1);
        let e = &ms[1].entries[0];
        let a = realize_utterance(e).unwrap();
        let b = realize_utterance(e).unwrap();
        assert_eq!(a.mixture.samples, b.mixture.samples);
        assert_eq!(a.sources[0].samples, b.sources[0].samples);
        assert_eq!(a.sources[1].samples, b.sources[1].samples);
        assert_eq!(a.mixture.samples.len(), (e.duration_s * 8000.0).round() as usize);
        assert_eq!(a.seed, e.seed);
        for i in 0..a.mixture.samples.len() {
            assert_eq!(a.mixture.samples[i], a.sources[0].samples[i] + a.sources[1].samples[i]);
        }
    }
}
