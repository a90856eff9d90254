//! Minimal RIFF/WAVE I/O for the corpus: PCM 16-bit mono only, with the
//! int16 ↔ float mapping pinned exactly (divide by 32768 on read, round half
//! away from zero on write, −32768 ↔ −1.0).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::stft::Waveform;

fn wav_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Wav { path: path.to_path_buf(), detail: detail.into() }
}

/// Quantize one sample: clamp to [−1, 1), scale by 32768, round half away
/// from zero. The top of the range saturates at 32767 (1.0 itself is outside
/// the representable interval).
fn quantize(v: f64) -> i16 {
    let r = (v * 32768.0).round();
    if r <= -32768.0 {
        -32768
    } else if r >= 32767.0 {
        32767
    } else {
        r as i16
    }
}

/// Write `w` as RIFF/WAVE PCM16 mono.
pub fn wav_write(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let n = w.samples.len();
    let data_len = (n * 2) as u32;
    let mut bytes = Vec::with_capacity(44 + n * 2);
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&w.sample_rate.to_le_bytes());
    bytes.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    bytes.extend_from_slice(&2u16.to_le_bytes()); // block align
    bytes.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_len.to_le_bytes());
    for &v in &w.samples {
        bytes.extend_from_slice(&quantize(v).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(wav_err(self.path, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Read a RIFF/WAVE PCM16 mono file. Unknown chunks are skipped (RIFF pads
/// odd-sized chunks to even offsets); anything that is not PCM 16-bit mono is
/// rejected with a descriptive error.
pub fn wav_read(path: impl AsRef<Path>) -> Result<Waveform> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path: &path };

    if cur.take(4, "RIFF magic")? != b"RIFF" {
        return Err(wav_err(&path, "not a RIFF file (bad magic)"));
    }
    cur.u32("RIFF size")?;
    if cur.take(4, "WAVE magic")? != b"WAVE" {
        return Err(wav_err(&path, "RIFF file is not WAVE"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // code, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while cur.pos < bytes.len() {
        let tag: [u8; 4] = cur.take(4, "chunk tag")?.try_into().unwrap();
        let size = cur.u32("chunk size")? as usize;
        let body = cur.take(size, "chunk body")?;
        if size % 2 == 1 && cur.pos < bytes.len() {
            cur.pos += 1; // RIFF pad byte
        }
        match &tag {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(wav_err(&path, "fmt chunk shorter than 16 bytes"));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => {
                data = Some(body);
                // keep scanning only for a later fmt chunk if none seen yet
                if fmt.is_some() {
                    break;
                }
            }
            _ => {} // skip LIST, fact, cue, ...
        }
    }

    let (code, channels, rate, bits) =
        fmt.ok_or_else(|| wav_err(&path, "no fmt chunk found"))?;
    if code != 1 {
        return Err(wav_err(&path, format!("format code {code} is not PCM (1)")));
    }
    if channels != 1 {
        return Err(wav_err(&path, format!("{channels} channels, expected mono")));
    }
    if bits != 16 {
        return Err(wav_err(&path, format!("{bits} bits per sample, expected 16")));
    }
    let data = data.ok_or_else(|| wav_err(&path, "no data chunk found"))?;
    if data.len() % 2 != 0 {
        return Err(wav_err(&path, "data chunk has odd byte length"));
    }
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    Ok(Waveform::new(samples, rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("gridsep-wav-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn quantization_mapping() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(-1.0), -32768);
        assert_eq!(quantize(1.0), 32767); // 1.0 is outside [−1, 1): saturate
        assert_eq!(quantize(2.5), 32767);
        assert_eq!(quantize(-3.0), -32768);
        // round half away from zero
        assert_eq!(quantize(0.5 / 32768.0), 1);
        assert_eq!(quantize(-0.5 / 32768.0), -1);
        assert_eq!(quantize(1.49 / 32768.0), 1);
        assert_eq!(quantize(1.5 / 32768.0), 2);
    }

    #[test]
    fn roundtrip_error_is_within_half_step() {
        let n = 4001;
        let samples: Vec<f64> =
            (0..n).map(|k| 0.999 * (k as f64 * 0.01).sin() * (k as f64 * 0.0003).cos()).collect();
        let p = tmp("roundtrip.wav");
        wav_write(&p, &Waveform::new(samples.clone(), 8000)).unwrap();
        let back = wav_read(&p).unwrap();
        assert_eq!(back.sample_rate, 8000);
        assert_eq!(back.samples.len(), n);
        for (a, b) in samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0, "a={a} b={b}");
        }
    }

    #[test]
    fn endpoints_and_header_roundtrip() {
        let p = tmp("endpoints.wav");
        wav_write(&p, &Waveform::new(vec![-1.0, 1.0, 0.0], 8000)).unwrap();
        let back = wav_read(&p).unwrap();
        assert_eq!(back.sample_rate, 8000);
        assert_eq!(back.samples[0], -1.0);
        assert_eq!(back.samples[1], 32767.0 / 32768.0);
        assert_eq!(back.samples[2], 0.0);
    }

    #[test]
    fn writes_are_byte_identical() {
        let w = Waveform::new((0..100).map(|k| (k as f64 * 0.21).sin()).collect(), 8000);
        let p1 = tmp("det1.wav");
        let p2 = tmp("det2.wav");
        wav_write(&p1, &w).unwrap();
        wav_write(&p2, &w).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn skips_unknown_chunks() {
        // RIFF with a LIST chunk (odd-sized, to exercise padding) before fmt/data
        let mut b: Vec<u8> = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&0u32.to_le_bytes()); // size field unused by reader
        b.extend_from_slice(b"WAVE");
        b.extend_from_slice(b"LIST");
        b.extend_from_slice(&3u32.to_le_bytes());
        b.extend_from_slice(&[1, 2, 3, 0]); // 3 bytes + pad
        b.extend_from_slice(b"fmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&8000u32.to_le_bytes());
        b.extend_from_slice(&16000u32.to_le_bytes());
        b.extend_from_slice(&2u16.to_le_bytes());
        b.extend_from_slice(&16u16.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&4u32.to_le_bytes());
        b.extend_from_slice(&(-32768i16).to_le_bytes());
        b.extend_from_slice(&16384i16.to_le_bytes());
        let p = tmp("chunks.wav");
        fs::write(&p, &b).unwrap();
        let w = wav_read(&p).unwrap();
        assert_eq!(w.samples, vec![-1.0, 0.5]);
    }

    #[test]
    fn rejects_non_conforming_files() {
        let cases: Vec<(&str, Vec<u8>, &str)> = vec![
            ("magic.wav", b"JUNKxxxxxxxx".to_vec(), "RIFF"),
            ("short.wav", b"RI".to_vec(), "truncated"),
        ];
        for (name, bytes, needle) in cases {
            let p = tmp(name);
            fs::write(&p, &bytes).unwrap();
            let err = wav_read(&p).unwrap_err().to_string();
            assert!(err.contains(needle), "{err}");
        }

        // stereo
        let mut b: Vec<u8> = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&0u32.to_le_bytes());
        b.extend_from_slice(b"WAVE");
        b.extend_from_slice(b"fmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&2u16.to_le_bytes()); // 2 channels
        b.extend_from_slice(&8000u32.to_le_bytes());
        b.extend_from_slice(&32000u32.to_le_bytes());
        b.extend_from_slice(&4u16.to_le_bytes());
        b.extend_from_slice(&16u16.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&0u32.to_le_bytes());
        let p = tmp("stereo.wav");
        fs::write(&p, &b).unwrap();
        let err = wav_read(&p).unwrap_err().to_string();
        assert!(err.contains("2 channels"), "{err}");

        // float format code
        let mut f = b.clone();
        f[20] = 3; // format code
        f[22] = 1; // back to mono
        let p = tmp("float.wav");
        fs::write(&p, &f).unwrap();
        let err = wav_read(&p).unwrap_err().to_string();
        assert!(err.contains("not PCM"), "{err}");
    }
}
