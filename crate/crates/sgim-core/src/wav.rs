//! RIFF/WAVE reading and writing, PCM 16-bit little-endian only.

use crate::audio::Waveform;
use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

/// Load a PCM 16-bit mono or stereo WAV file. Stereo is averaged to mono,
/// samples are scaled by 1/32768, and the sample rate is preserved.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.len() < 44 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::UnsupportedFormat(format!(
            "{}: not a RIFF/WAVE file",
            path.as_ref().display()
        )));
    }

    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (tag, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let chunk_id = &bytes[pos..pos + 4];
        let size = read_u32(&bytes, pos + 4) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(Error::UnsupportedFormat(format!(
                "chunk {} overruns file",
                String::from_utf8_lossy(chunk_id)
            )));
        }
        match chunk_id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::UnsupportedFormat("fmt chunk too short".into()));
                }
                fmt = Some((
                    read_u16(&bytes, body),
                    read_u16(&bytes, body + 2),
                    read_u32(&bytes, body + 4),
                    read_u16(&bytes, body + 14),
                ));
            }
            b"data" => data = Some(&bytes[body..body + size]),
            _ => {}
        }
        // chunks are word-aligned
        pos = body + size + (size & 1);
    }

    let (tag, channels, rate, bits) =
        fmt.ok_or_else(|| Error::UnsupportedFormat("missing fmt chunk".into()))?;
    if tag != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "fmt chunk: format tag {tag} (only PCM = 1 supported)"
        )));
    }
    if bits != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "fmt chunk: {bits}-bit samples (only 16-bit supported)"
        )));
    }
    if channels == 0 || channels > 2 {
        return Err(Error::UnsupportedFormat(format!(
            "fmt chunk: {channels} channels (mono or stereo supported)"
        )));
    }
    let data = data.ok_or_else(|| Error::UnsupportedFormat("missing data chunk".into()))?;

    let ch = channels as usize;
    let frames = data.len() / (2 * ch);
    let mut samples = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut acc = 0.0f32;
        for c in 0..ch {
            let at = (f * ch + c) * 2;
            let v = i16::from_le_bytes([data[at], data[at + 1]]);
            acc += v as f32 / 32768.0;
        }
        samples.push(acc / ch as f32);
    }
    Ok(Waveform::new(samples, rate))
}

/// Write a mono PCM 16-bit WAV. Samples are clamped to [−1, 1] and
/// quantized with round-half-away-from-zero.
pub fn save_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let n = w.samples.len();
    let data_size = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&out)?;
    Ok(())
}
