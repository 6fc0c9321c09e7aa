//! Grayscale image input and output.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use mgi_core::correlation::ObjectImage;
use mgi_core::optics::Grid;

use crate::error::{HarnessError, Result};

/// The bundled 64x64 binary glyph.
pub const GLYPH_PGM: &[u8] = include_bytes!("../assets/glyph64.pgm");

/// A decoded grayscale raster, values already divided by the maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub grid: Grid,
    pub values: Vec<f64>,
}

fn header_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'#' {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    Some((tokens, i))
}

/// Decodes an 8- or 16-bit PGM, ASCII (P2) or binary (P5).
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Raster> {
    let err = |r: &str| HarnessError::image(path, r);
    let (tok, end) = header_tokens(bytes, 4).ok_or_else(|| err("truncated PGM header"))?;
    let binary = match tok[0].as_str() {
        "P2" => false,
        "P5" => true,
        _ => return Err(err("not a grayscale PGM (P2/P5)")),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| err("bad PGM header"));
    let (cols, rows, maxval) = (parse(&tok[1])?, parse(&tok[2])?, parse(&tok[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(err("PGM maxval must be in 1..=65535"));
    }
    let grid = Grid::new(rows, cols).map_err(|e| err(&e.to_string()))?;
    let n = grid.n_pixels();
    let raw: Vec<usize> = if binary {
        let data = bytes.get(end + 1..).ok_or_else(|| err("missing pixel data"))?;
        let width = if maxval < 256 { 1 } else { 2 };
        if data.len() < n * width {
            return Err(err("truncated pixel data"));
        }
        if width == 1 {
            data[..n].iter().map(|&b| b as usize).collect()
        } else {
            data[..2 * n]
                .chunks(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as usize)
                .collect()
        }
    } else {
        let text = std::str::from_utf8(&bytes[end..]).map_err(|_| err("non-ASCII P2 data"))?;
        let vals: Vec<usize> = text
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| err("bad P2 value")))
            .collect::<Result<_>>()?;
        if vals.len() < n {
            return Err(err("truncated pixel data"));
        }
        vals[..n].to_vec()
    };
    if raw.iter().any(|&v| v > maxval) {
        return Err(err("pixel value exceeds maxval"));
    }
    Ok(Raster {
        grid,
        values: raw.iter().map(|&v| v as f64 / maxval as f64).collect(),
    })
}

/// Comma-separated rows of transparencies.
pub fn decode_csv(text: &str, path: &Path) -> Result<Raster> {
    let err = |r: String| HarnessError::image(path, r);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| err(format!("line {}: bad number {t:?}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let cols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(err("rows have different lengths".into()));
    }
    let grid = Grid::new(rows.len(), cols).map_err(|e| err(e.to_string()))?;
    Ok(Raster {
        grid,
        values: rows.into_iter().flatten().collect(),
    })
}

fn to_object(raster: Raster, path: &Path) -> Result<ObjectImage> {
    if let Some(v) = raster.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(HarnessError::image(path, format!("transparency {v} outside [0, 1]")));
    }
    ObjectImage::new(raster.grid, raster.values).map_err(|e| HarnessError::image(path, e.to_string()))
}

/// Reads a PGM or CSV object; `expected` enforces the grid.
pub fn load_object(path: &Path, expected: Option<Grid>) -> Result<ObjectImage> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let raster = if is_csv {
        let text = String::from_utf8(bytes).map_err(|_| HarnessError::image(path, "CSV is not UTF-8"))?;
        decode_csv(&text, path)?
    } else {
        decode_pgm(&bytes, path)?
    };
    if let Some(g) = expected {
        if g != raster.grid {
            return Err(HarnessError::image(
                path,
                format!("object is {} but the configured grid is {g}", raster.grid),
            ));
        }
    }
    to_object(raster, path)
}

/// Nearest-neighbour resampling.
pub fn resample(raster: &Raster, grid: Grid) -> Raster {
    let src = raster.grid;
    let values = (0..grid.n_pixels())
        .map(|p| {
            let (r, c) = (p / grid.cols, p % grid.cols);
            let sr = ((2 * r + 1) * src.rows / (2 * grid.rows)).min(src.rows - 1);
            let sc = ((2 * c + 1) * src.cols / (2 * grid.cols)).min(src.cols - 1);
            raster.values[sr * src.cols + sc]
        })
        .collect();
    Raster { grid, values }
}

/// The bundled glyph on any grid.
pub fn builtin_object(grid: Grid) -> Result<ObjectImage> {
    let path = Path::new("<builtin glyph>");
    let raster = decode_pgm(GLYPH_PGM, path)?;
    to_object(resample(&raster, grid), path)
}

/// Linear map of `[min, max]` onto `0..=top`; constant images go to 0 or `top`.
fn quantize(values: &[f64], top: f64) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * top).round()
            } else if v > 0.0 {
                top
            } else {
                0.0
            }
        })
        .collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

pub fn encode_pgm16(grid: Grid, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", grid.cols, grid.rows).into_bytes();
    for v in quantize(values, 65535.0) {
        out.extend_from_slice(&(v as u16).to_be_bytes());
    }
    out
}

pub fn write_pgm16(path: &Path, grid: Grid, values: &[f64]) -> Result<()> {
    write(path, &encode_pgm16(grid, values))
}

pub fn write_png8(path: &Path, grid: Grid, values: &[f64]) -> Result<()> {
    let data: Vec<u8> = quantize(values, 255.0).into_iter().map(|v| v as u8).collect();
    let file = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let out_err = |e: png::EncodingError| HarnessError::Output {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut enc = png::Encoder::new(BufWriter::new(file), grid.cols as u32, grid.rows as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(out_err)?;
    w.write_image_data(&data).map_err(out_err)?;
    w.finish().map_err(out_err)
}

/// Full-precision values, one grid row per line.
pub fn encode_csv(grid: Grid, values: &[f64]) -> String {
    let mut s = String::new();
    for row in values.chunks(grid.cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn write_csv(path: &Path, grid: Grid, values: &[f64]) -> Result<()> {
    write(path, encode_csv(grid, values).as_bytes())
}
