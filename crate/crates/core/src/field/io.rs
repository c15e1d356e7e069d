//! Image and field files.
//!
//! * PGM (`P5` binary, 8 or 16 bit; `P2` ASCII on read). Intensities are
//!   normalized to `[0,1]` on load.
//! * Raw float64: a single text line `dims d n0 n1 [n2]` followed by
//!   little-endian `f64` values in row-major order. Multi-channel files
//!   (vector fields, label stacks) append ` channels c` to the header line
//!   and store the channels one after the other.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Grid, ScalarField, VectorField};
use crate::error::{Error, Result};

pub fn read_pgm(path: impl AsRef<Path>) -> Result<ScalarField> {
    let bytes = fs::read(path.as_ref())?;
    parse_pgm(&bytes)
}

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
        return Err(Error::Format("truncated PGM header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_num(tok: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::Format(format!("bad PGM number '{tok}'")))
}

pub fn parse_pgm(bytes: &[u8]) -> Result<ScalarField> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    let width = parse_num(&next_token(bytes, &mut pos)?)?;
    let height = parse_num(&next_token(bytes, &mut pos)?)?;
    let maxval = parse_num(&next_token(bytes, &mut pos)?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("PGM maxval {maxval}")));
    }
    let grid = Grid::new(&[height, width])?;
    let n = grid.len();
    let scale = 1.0 / maxval as f64;
    let values: Vec<f64> = match magic.as_str() {
        "P5" => {
            pos += 1;
            let wide = maxval > 255;
            let need = n * if wide { 2 } else { 1 };
            let data = bytes
                .get(pos..pos + need)
                .ok_or_else(|| Error::Format("truncated PGM raster".into()))?;
            if wide {
                data.chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
                    .collect()
            } else {
                data.iter().map(|&b| b as f64 * scale).collect()
            }
        }
        "P2" => (0..n)
            .map(|_| Ok(parse_num(&next_token(bytes, &mut pos)?)? as f64 * scale))
            .collect::<Result<_>>()?,
        other => return Err(Error::Format(format!("unsupported PGM magic '{other}'"))),
    };
    ScalarField::new(grid, values)
}

/// Writes a 2D field as binary PGM, clamping values to `[0,1]`.
pub fn write_pgm(path: impl AsRef<Path>, f: &ScalarField, sixteen_bit: bool) -> Result<()> {
    fs::write(path, encode_pgm(f, sixteen_bit)?)?;
    Ok(())
}

pub fn encode_pgm(f: &ScalarField, sixteen_bit: bool) -> Result<Vec<u8>> {
    if f.grid.ndim() != 2 {
        return Err(Error::param("PGM output needs a 2D field"));
    }
    let (h, w) = (f.grid.dims()[0], f.grid.dims()[1]);
    let maxval: u32 = if sixteen_bit { 65535 } else { 255 };
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    for &v in &f.values {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        if sixteen_bit {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
    Ok(out)
}

/// Min-max normalized heatmap of an arbitrary scalar field.
pub fn write_heatmap(path: impl AsRef<Path>, f: &ScalarField) -> Result<()> {
    let lo = f.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = f.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let scaled = ScalarField {
        grid: f.grid,
        values: f.values.iter().map(|v| (v - lo) / span).collect(),
    };
    write_pgm(path, &scaled, false)
}

pub fn encode_raw(grid: &Grid, channels: usize, values: &[f64]) -> Vec<u8> {
    let mut header = format!("dims {}", grid.ndim());
    for n in grid.dims() {
        header.push_str(&format!(" {n}"));
    }
    if channels != 1 {
        header.push_str(&format!(" channels {channels}"));
    }
    header.push('\n');
    let mut out = header.into_bytes();
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<(Grid, usize, Vec<f64>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("raw field without header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::Format("raw header is not text".into()))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.first() != Some(&"dims") || toks.len() < 2 {
        return Err(Error::Format(format!("bad raw header '{header}'")));
    }
    let num = |t: &str| {
        t.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad raw header '{header}'")))
    };
    let d = num(toks[1])?;
    if toks.len() < 2 + d {
        return Err(Error::Format(format!("bad raw header '{header}'")));
    }
    let dims: Vec<usize> = toks[2..2 + d].iter().map(|t| num(t)).collect::<Result<_>>()?;
    let channels = match &toks[2 + d..] {
        [] => 1,
        ["channels", c] => num(c)?,
        _ => return Err(Error::Format(format!("bad raw header '{header}'"))),
    };
    let grid = Grid::new(&dims)?;
    let body = &bytes[nl + 1..];
    if body.len() != grid.len() * channels * 8 {
        return Err(Error::Format(format!(
            "raw body has {} bytes, expected {}",
            body.len(),
            grid.len() * channels * 8
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((grid, channels, values))
}

pub fn write_raw(path: impl AsRef<Path>, grid: &Grid, channels: usize, values: &[f64]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_raw(grid, channels, values))?;
    Ok(())
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<(Grid, usize, Vec<f64>)> {
    decode_raw(&fs::read(path)?)
}

pub fn write_scalar_raw(path: impl AsRef<Path>, f: &ScalarField) -> Result<()> {
    write_raw(path, &f.grid, 1, &f.values)
}

pub fn read_scalar_raw(path: impl AsRef<Path>) -> Result<ScalarField> {
    let (grid, c, values) = read_raw(path)?;
    if c != 1 {
        return Err(Error::Format(format!("expected a scalar field, found {c} channels")));
    }
    ScalarField::new(grid, values)
}

pub fn write_vector_raw(path: impl AsRef<Path>, f: &VectorField) -> Result<()> {
    write_raw(path, &f.grid, f.grid.ndim(), &f.values)
}

pub fn read_vector_raw(path: impl AsRef<Path>) -> Result<VectorField> {
    let (grid, c, values) = read_raw(path)?;
    if c != grid.ndim() {
        return Err(Error::Format(format!(
            "expected a {}-component field, found {c} channels",
            grid.ndim()
        )));
    }
    VectorField::new(grid, values)
}

/// Reads an image by extension: `.pgm` or raw float64 otherwise.
pub fn read_image(path: impl AsRef<Path>) -> Result<ScalarField> {
    let p = path.as_ref();
    match p.extension().and_then(|e| e.to_str()) {
        Some("pgm") | Some("PGM") => read_pgm(p),
        _ => read_scalar_raw(p),
    }
}
