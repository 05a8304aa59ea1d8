//! Binary greyscale PGM (`P5`, maxval 255) for masks and heatmaps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};

fn io_err(source: std::io::Error) -> Error {
    Error::Io { offset: 0, source }
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
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
        return Err(Error::Format("truncated PGM header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    tok.parse::<usize>()
        .map_err(|_| Error::Format(format!("PGM {what} is not a number: {tok:?}")))
}

/// Reads a `P5` image and thresholds it: values >= 128 become foreground.
pub fn read_mask_pgm<R: Read>(mut source: R) -> Result<Mask> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes).map_err(io_err)?;
    let mut pos = 0;
    let magic = header_token(&bytes, &mut pos)?;
    if magic != "P5" {
        return Err(Error::Format(format!(
            "expected binary PGM \"P5\", got {magic:?}"
        )));
    }
    let width = header_number(&bytes, &mut pos, "width")?;
    let height = header_number(&bytes, &mut pos, "height")?;
    let maxval = header_number(&bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "PGM maxval must be 255, got {maxval}"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("empty PGM {width}x{height}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = width * height;
    let available = bytes.len().saturating_sub(pos);
    if available < n {
        return Err(Error::Truncated {
            what: "PGM raster",
            expected: n as u64,
            available: available as u64,
        });
    }
    let values = bytes[pos..pos + n]
        .iter()
        .map(|&v| u8::from(v >= 128))
        .collect();
    Mask::from_values(Grid::new(height, width), values)
}

pub fn write_gray_pgm<W: Write>(grid: Grid, pixels: &[u8], mut sink: W) -> Result<()> {
    if pixels.len() != grid.len() {
        return Err(Error::shape("PGM raster", grid.len(), pixels.len()));
    }
    write!(sink, "P5\n{} {}\n255\n", grid.width, grid.height).map_err(io_err)?;
    sink.write_all(pixels).map_err(io_err)?;
    sink.flush().map_err(io_err)
}

/// Writes 1 as 255 and 0 as 0.
pub fn write_mask_pgm<W: Write>(mask: &Mask, sink: W) -> Result<()> {
    let pixels: Vec<u8> = mask.values().iter().map(|&v| v * 255).collect();
    write_gray_pgm(mask.grid(), &pixels, sink)
}

pub fn read_mask_pgm_file(path: impl AsRef<Path>, expected: Option<Grid>) -> Result<Mask> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    let mask = read_mask_pgm(BufReader::new(f))?;
    if let Some(expected) = expected {
        if mask.grid() != expected {
            return Err(Error::Validation(format!(
                "mask {} is {} but the manifest says {}",
                path.display(),
                mask.grid(),
                expected
            )));
        }
    }
    Ok(mask)
}

pub fn write_mask_pgm_file(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::file(path, e))?;
    write_mask_pgm(mask, BufWriter::new(f))
}
