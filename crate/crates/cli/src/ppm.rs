//! Binary PPM (P6, maxval 255) image I/O.
//!
//! Pixel bytes map linearly onto [-1, 1] reals: b -> b / 127.5 - 1 on
//! load, v -> round((v + 1) / 2 * 255) clamped to 0..=255 on save, so a
//! load/save round trip reproduces the file byte for byte.

use std::io::Write as _;
use std::path::Path;

use rdvq_core::error::{Error, Result};
use rdvq_core::tensor::Tensor;

// ---------------------------------------------------------------------------
// Reading
// ---------------------------------------------------------------------------

/// Pull the next whitespace-delimited token, skipping `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("ppm: truncated header"));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Parse a P6 image into a [3, H, W] tensor with values in [-1, 1].
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)?;
    if magic != "P6" {
        return Err(Error::format(format!(
            "ppm: expected magic P6, found {magic:?}"
        )));
    }
    let w: usize = next_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::format("ppm: bad width"))?;
    let h: usize = next_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::format("ppm: bad height"))?;
    let maxval: usize = next_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::format("ppm: bad maxval"))?;
    if maxval != 255 {
        return Err(Error::format(format!(
            "ppm: only maxval 255 is supported, found {maxval}"
        )));
    }
    if w == 0 || h == 0 {
        return Err(Error::format("ppm: zero dimension"));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format("ppm: missing raster separator"));
    }
    pos += 1;
    let need = 3 * w * h;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::format(format!(
            "ppm: raster holds {} bytes, expected {need}",
            raster.len()
        )));
    }
    let mut data = vec![0.0f64; need];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let b = raster[(r * w + c) * 3 + ch];
                data[ch * h * w + r * w + c] = b as f64 / 127.5 - 1.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn read(path: &Path) -> Result<Tensor> {
    decode(&std::fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

/// Serialize a [3, H, W] tensor as a P6 file.
pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("ppm: image must be [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = Vec::with_capacity(32 + 3 * h * w);
    write!(out, "P6\n{w} {h}\n255\n").expect("vec write");
    let data = image.data();
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let v = data[ch * h * w + r * w + c];
                let b = ((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8;
                out.push(b);
            }
        }
    }
    Ok(out)
}

pub fn write(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode(image)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_bytes_survive_a_load_save_round_trip() {
        let mut raster = Vec::new();
        for i in 0..4 * 2 * 3 {
            raster.push((i * 37 % 256) as u8);
        }
        let mut file = b"P6\n4 2\n255\n".to_vec();
        file.extend_from_slice(&raster);
        let img = decode(&file).unwrap();
        assert_eq!(img.shape(), &[3, 2, 4]);
        assert_eq!(encode(&img).unwrap(), file);
    }

    #[test]
    fn values_map_to_the_signed_unit_range() {
        let file = [b"P6\n2 1\n255\n".as_slice(), &[0, 0, 0, 255, 255, 255]].concat();
        let img = decode(&file).unwrap();
        assert_eq!(img.data()[0], -1.0);
        assert!((img.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn comments_and_odd_whitespace_parse() {
        let file = [
            b"P6 # comment\n# another\n 4\t2 # dims\n255 ".as_slice(),
            &[7u8; 24],
        ]
        .concat();
        let img = decode(&file).unwrap();
        assert_eq!(img.shape(), &[3, 2, 4]);
    }

    #[test]
    fn malformed_headers_are_rejected() {
        assert!(decode(b"P5\n2 2\n255\n....").is_err());
        assert!(decode(b"P6\n2 2\n65535\n").is_err());
        let short = b"P6\n4 4\n255\nabc".to_vec();
        assert!(decode(&short).is_err());
    }

    #[test]
    fn out_of_range_values_clamp_on_save() {
        let img = Tensor::new(vec![3, 1, 1], vec![-2.0, 0.0, 2.0]).unwrap();
        let bytes = encode(&img).unwrap();
        let raster = &bytes[bytes.len() - 3..];
        assert_eq!(raster, &[0, 128, 255]);
    }
}
