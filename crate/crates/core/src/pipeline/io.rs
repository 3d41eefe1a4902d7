use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::Array3;

use crate::error::{Error, Result};

/// Writes a 1- or 3-channel PFM: little-endian floats, bottom row first.
pub fn write_pfm(path: &Path, img: &Array3<f64>) -> Result<()> {
    fs::write(path, encode_pfm(img)?)?;
    Ok(())
}

pub fn encode_pfm(img: &Array3<f64>) -> Result<Vec<u8>> {
    let (c, h, w) = img.dim();
    let tag = match c {
        1 => "Pf",
        3 => "PF",
        _ => {
            return Err(Error::contract(format!(
                "PFM needs 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(c * h * w * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                out.extend_from_slice(&(img[[ch, y, x]] as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn read_pfm(path: &Path) -> Result<Array3<f64>> {
    decode_pfm(&fs::read(path)?)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::contract("truncated PFM header"));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::contract("PFM header is not ASCII"))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Array3<f64>> {
    let mut pos = 0;
    let c = match next_token(bytes, &mut pos)? {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::contract(format!("not a PFM file (tag {other:?})"))),
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::contract(format!("bad PFM size {s:?}")))
    };
    let w = parse(next_token(bytes, &mut pos)?)?;
    let h = parse(next_token(bytes, &mut pos)?)?;
    let scale: f64 = next_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::contract("bad PFM scale"))?;
    // exactly one whitespace byte separates the header from the data
    pos += 1;
    let need = c * h * w * 4;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::contract(format!("PFM data short: need {need} bytes")))?;
    let little = scale < 0.0;
    let mut img = Array3::zeros((c, h, w));
    let mut it = data.chunks_exact(4);
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                let b: [u8; 4] = it
                    .next()
                    .expect("length checked")
                    .try_into()
                    .expect("chunk of 4");
                let v = if little {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
                img[[ch, y, x]] = v as f64;
            }
        }
    }
    Ok(img)
}

/// 8-bit RGB PNG of a `(3, h, w)` or `(1, h, w)` image in `[0, 1]`.
pub fn write_png(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 1 && c != 3 {
        return Err(Error::contract(format!(
            "PNG needs 1 or 3 channels, got {c}"
        )));
    }
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let px = |ch: usize| q(img[[if c == 1 { 0 } else { ch }, y, x]]);
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Reads PNG or PFM by extension.
pub fn read_image(path: &Path) -> Result<Array3<f64>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => read_pfm(path),
        _ => read_png(path),
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}
