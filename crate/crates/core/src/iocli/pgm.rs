//! Binary (P5) PGM masks.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::Mask;

pub fn encode(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.data().iter().map(|&m| if m { 255u8 } else { 0 }));
    out
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Pgm("truncated header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let t = token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Pgm(format!("bad {what} {:?}", String::from_utf8_lossy(t))))
}

/// Parses a P5 image; pixels above 127 are foreground.
pub fn decode(bytes: &[u8]) -> Result<Mask> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::Pgm(format!(
            "expected P5 magic, found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let w = number(bytes, &mut pos, "width")?;
    let h = number(bytes, &mut pos, "height")?;
    let maxval = number(bytes, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Pgm(format!("maxval {maxval} outside 1..=255")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = w * h;
    if bytes.len() < pos + n {
        return Err(Error::Pgm(format!(
            "raster needs {n} bytes, found {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    Mask::new(h, w, bytes[pos..pos + n].iter().map(|&b| b > 127).collect())
}

pub fn write_pgm(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(mask)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.context(path.display().to_string()))
}
