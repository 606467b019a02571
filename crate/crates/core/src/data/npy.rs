//! Minimal NPY (NumPy array file) reader/writer for C-order float arrays.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::{Error, Result};

const MAGIC: &[u8] = b"\x93NUMPY";

pub fn read_npy(path: &Path) -> Result<ArrayD<f64>> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::ingestion(path, format!("cannot open: {e}")))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::ingestion(path, "truncated magic"))?;
    if &magic[..6] != MAGIC {
        return Err(Error::ingestion(path, "not an NPY file"));
    }
    let (major, _minor) = (magic[6], magic[7]);
    let header_len = match major {
        1 => {
            let mut b = [0u8; 2];
            file.read_exact(&mut b)
                .map_err(|_| Error::ingestion(path, "truncated header length"))?;
            u16::from_le_bytes(b) as usize
        }
        2 | 3 => {
            let mut b = [0u8; 4];
            file.read_exact(&mut b)
                .map_err(|_| Error::ingestion(path, "truncated header length"))?;
            u32::from_le_bytes(b) as usize
        }
        v => return Err(Error::ingestion(path, format!("unsupported NPY version {v}"))),
    };
    let mut header = vec![0u8; header_len];
    file.read_exact(&mut header)
        .map_err(|_| Error::ingestion(path, "truncated header"))?;
    let header = String::from_utf8_lossy(&header);

    let descr = extract_field(&header, "descr")
        .ok_or_else(|| Error::ingestion(path, "header missing descr"))?;
    let fortran = extract_field(&header, "fortran_order")
        .ok_or_else(|| Error::ingestion(path, "header missing fortran_order"))?;
    if fortran.contains("True") {
        return Err(Error::ingestion(path, "fortran-order arrays are not supported"));
    }
    let shape = parse_shape(&header)
        .ok_or_else(|| Error::ingestion(path, "header missing shape"))?;

    let count: usize = shape.iter().product();
    let mut buffer = Vec::new();
    file.read_to_end(&mut buffer)?;
    let data: Vec<f64> = match descr.trim_matches(|c| c == '\'' || c == '"') {
        "<f8" => {
            if buffer.len() < count * 8 {
                return Err(Error::ingestion(path, "truncated f8 payload"));
            }
            buffer[..count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
        "<f4" => {
            if buffer.len() < count * 4 {
                return Err(Error::ingestion(path, "truncated f4 payload"));
            }
            buffer[..count * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        }
        other => {
            return Err(Error::ingestion(
                path,
                format!("unsupported dtype {other} (expected <f4 or <f8)"),
            ))
        }
    };
    ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::ingestion(path, format!("shape error: {e}")))
}

fn extract_field<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let start = header.find(&format!("'{key}'"))?;
    let rest = &header[start..];
    let colon = rest.find(':')?;
    let value = rest[colon + 1..].trim_start();
    let end = value.find([',', '}'])?;
    Some(value[..end].trim())
}

fn parse_shape(header: &str) -> Option<Vec<usize>> {
    let start = header.find("'shape'")?;
    let rest = &header[start..];
    let open = rest.find('(')?;
    let close = rest.find(')')?;
    let inner = &rest[open + 1..close];
    let mut out = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(part.parse().ok()?);
    }
    Some(out)
}

pub fn write_npy(path: &Path, array: &ArrayD<f64>) -> Result<()> {
    let shape = array
        .shape()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    let shape_tuple = if array.ndim() == 1 {
        format!("({shape},)")
    } else {
        format!("({shape})")
    };
    let mut header = format!(
        "{{'descr': '<f8', 'fortran_order': False, 'shape': {shape_tuple}, }}"
    );
    // Pad so magic + length + header is a multiple of 64, newline-terminated.
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.push_str(&" ".repeat(pad));
    header.push('\n');

    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    out.write_all(MAGIC)?;
    out.write_all(&[1, 0])?;
    out.write_all(&(header.len() as u16).to_le_bytes())?;
    out.write_all(header.as_bytes())?;
    let standard = array.as_standard_layout();
    for &v in standard.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.npy");
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let a = ArrayD::from_shape_fn(IxDyn(&[4, 17]), |_| rng.gen_range(-2.0..2.0));
        write_npy(&path, &a).unwrap();
        let b = read_npy(&path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.npy");
        std::fs::write(&path, b"not numpy").unwrap();
        assert!(read_npy(&path).is_err());
    }
}
