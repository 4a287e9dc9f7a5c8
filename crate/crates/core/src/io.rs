//! Binary PPM (P6) and PGM (P5) images, maxval 255. Pixels map to `[0, 1]`
//! as `byte / 255`; writing rounds half up.

use std::path::Path;

use exemplar_tensor::Tensor;

use crate::error::{Error, Result};
use crate::mat::GrayMap;

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Encodes `[3, H, W]` as P6 or `[1, H, W]` as P5.
pub fn encode_image(img: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = *img.shape() else {
        return Err(Error::Format(format!("image must be [C, H, W], got {:?}", img.shape())));
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::Format(format!("images need 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for p in 0..h * w {
        for ch in 0..c {
            out.push(to_byte(d[ch * h * w + p]));
        }
    }
    Ok(out)
}

pub fn encode_gray(map: &GrayMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend_from_slice(&map.pixels);
    out
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
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
        return Err(Error::Format("malformed header: unexpected end of file".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| Error::Format(format!("malformed header: bad {what} {tok:?}")))
}

/// Decodes P5 or P6 into `[C, H, W]` with values `byte / 255`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let c = match header_token(bytes, &mut pos)?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported format {other:?}"))),
    };
    let w = header_number(bytes, &mut pos, "width")?;
    let h = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("malformed header: zero dimension".into()));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("malformed header: missing separator".into()));
    }
    let payload = &bytes[pos + 1..];
    let n = c * h * w;
    if payload.len() < n {
        return Err(Error::Format(format!("truncated payload: {} of {n} bytes", payload.len())));
    }
    let mut data = vec![0.0; n];
    for p in 0..h * w {
        for ch in 0..c {
            data[ch * h * w + p] = f64::from(payload[p * c + ch]) / 255.0;
        }
    }
    Ok(Tensor::new(data, &[c, h, w])?)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    decode_image(&std::fs::read(path)?)
}

pub fn write_image(img: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode_image(img)?)?;
    Ok(())
}

pub fn write_gray(map: &GrayMap, path: &Path) -> Result<()> {
    std::fs::write(path, encode_gray(map))?;
    Ok(())
}
