//! Grayscale PFM depth I/O: `Pf` header, 32-bit floats, bottom-up rows, and
//! a scale field whose sign encodes endianness (negative = little-endian).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::{Error, Result};

pub fn read_pfm(path: &Path) -> Result<Array2<f64>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::ingestion(path, format!("cannot open: {e}")))?;
    let mut reader = BufReader::new(file);

    let mut token = |what: &str| -> Result<String> {
        let mut out = Vec::new();
        let mut byte = [0u8; 1];
        // Skip leading whitespace, then read a whitespace-terminated token.
        loop {
            reader
                .read_exact(&mut byte)
                .map_err(|_| Error::ingestion(path, format!("truncated header reading {what}")))?;
            if !byte[0].is_ascii_whitespace() {
                break;
            }
        }
        out.push(byte[0]);
        loop {
            reader
                .read_exact(&mut byte)
                .map_err(|_| Error::ingestion(path, format!("truncated header reading {what}")))?;
            if byte[0].is_ascii_whitespace() {
                break;
            }
            out.push(byte[0]);
        }
        Ok(String::from_utf8_lossy(&out).to_string())
    };

    let magic = token("magic")?;
    if magic != "Pf" {
        return Err(Error::ingestion(
            path,
            format!("expected grayscale PFM magic `Pf`, got `{magic}`"),
        ));
    }
    let width: usize = token("width")?
        .parse()
        .map_err(|e| Error::ingestion(path, format!("bad width: {e}")))?;
    let height: usize = token("height")?
        .parse()
        .map_err(|e| Error::ingestion(path, format!("bad height: {e}")))?;
    let scale: f64 = token("scale")?
        .parse()
        .map_err(|e| Error::ingestion(path, format!("bad scale: {e}")))?;
    if scale == 0.0 {
        return Err(Error::ingestion(path, "scale must be non-zero"));
    }
    let little_endian = scale < 0.0;

    let mut raw = vec![0u8; width * height * 4];
    reader
        .read_exact(&mut raw)
        .map_err(|_| Error::ingestion(path, "truncated pixel data"))?;

    let mut out = Array2::zeros((height, width));
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let bytes: [u8; 4] = chunk.try_into().unwrap();
        let v = if little_endian {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        };
        // PFM rows run bottom-up.
        let row = height - 1 - i / width;
        let col = i % width;
        out[[row, col]] = v as f64;
    }
    Ok(out)
}

pub fn write_pfm(path: &Path, values: &Array2<f64>) -> Result<()> {
    let (height, width) = values.dim();
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    write!(out, "Pf\n{width} {height}\n-1.0\n")?;
    for row in (0..height).rev() {
        for col in 0..width {
            out.write_all(&(values[[row, col]] as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Consume any remaining buffered bytes check helper for tests.
#[allow(dead_code)]
fn _silence(_: &dyn BufRead) {}
