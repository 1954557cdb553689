//! Binary PPM (P6) image output and input.
//!
//! Pixel values in [−1, 1] map to bytes by round((x+1)·127.5); reading maps
//! back with v/127.5 − 1.

use crate::error::{Error, Result};
use crate::generator::ImageTensor;
use std::fs;
use std::io::Write;
use std::path::Path;

pub fn save_ppm(path: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
    let (h, w) = (img.height, img.width);
    let mut out = Vec::with_capacity(h * w * 3 + 32);
    out.extend_from_slice(format!("P6\n{} {}\n255\n", w, h).as_bytes());
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = img.get(c, y, x).clamp(-1.0, 1.0);
                out.push(((v + 1.0) * 127.5).round() as u8);
            }
        }
    }
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let bytes = fs::read(path.as_ref())?;
    let header_err = |m: &str| Error::UnsupportedFormat(format!("{}: {m}", path.as_ref().display()));
    if !bytes.starts_with(b"P6") {
        return Err(header_err("not a binary PPM (P6)"));
    }
    // header: magic, width, height, maxval — whitespace separated, # comments
    let mut fields = Vec::new();
    let mut pos = 2;
    while fields.len() < 3 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| header_err("bad header"))?
                .parse::<usize>()
                .map_err(|_| header_err("bad header"))?,
        );
    }
    if fields.len() != 3 {
        return Err(header_err("truncated header"));
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(header_err("only maxval 255 supported"));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + w * h * 3 {
        return Err(header_err("truncated pixel data"));
    }
    let mut img = ImageTensor::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = bytes[pos + (y * w + x) * 3 + c] as f32 / 127.5 - 1.0;
                img.set(c, y, x, v);
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_level_round_trip() {
        let dir = std::env::temp_dir().join("sgim-ppm-tests");
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("rt.ppm");

        let mut img = ImageTensor::zeros(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    img.set(c, y, x, ((y * 4 + x + c) as f32 / 24.0) * 2.0 - 1.0);
                }
            }
        }
        save_ppm(&p, &img).unwrap();
        let back = load_ppm(&p).unwrap();
        save_ppm(dir.join("rt2.ppm"), &back).unwrap();
        // second write reproduces the first byte-for-byte
        assert_eq!(fs::read(&p).unwrap(), fs::read(dir.join("rt2.ppm")).unwrap());
    }

    #[test]
    fn extreme_values_map_to_0_and_255() {
        let dir = std::env::temp_dir().join("sgim-ppm-tests");
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("extremes.ppm");
        let mut img = ImageTensor::zeros(1, 2);
        for c in 0..3 {
            img.set(c, 0, 0, -1.0);
            img.set(c, 0, 1, 1.0);
        }
        save_ppm(&p, &img).unwrap();
        let bytes = fs::read(&p).unwrap();
        let px = &bytes[bytes.len() - 6..];
        assert_eq!(px, &[0, 0, 0, 255, 255, 255]);
    }
}
