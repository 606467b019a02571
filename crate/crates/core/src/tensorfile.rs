//! Minimal reader/writer for the safetensors container format: an 8-byte
//! little-endian header length, a JSON header mapping tensor names to dtype,
//! shape, and byte ranges, then the raw buffer. F32 payloads are widened to
//! f64 on read; we always write F64.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

#[derive(Debug, Default)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, ArrayD<f64>>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorFile {
    pub fn require(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors.get(name).ok_or_else(|| {
            let mut available: Vec<&str> = self.tensors.keys().map(|s| s.as_str()).collect();
            available.truncate(12);
            Error::Validation(format!(
                "missing tensor `{name}`; file starts with {available:?}"
            ))
        })
    }
}

pub fn write_tensors(
    path: &Path,
    tensors: &[(String, &ArrayD<f64>)],
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let mut header = serde_json::Map::new();
    if !metadata.is_empty() {
        header.insert(
            "__metadata__".to_string(),
            serde_json::to_value(metadata).unwrap(),
        );
    }
    let mut offset = 0usize;
    for (name, tensor) in tensors {
        let bytes = tensor.len() * 8;
        header.insert(
            name.clone(),
            serde_json::to_value(TensorHeader {
                dtype: "F64".to_string(),
                shape: tensor.shape().to_vec(),
                data_offsets: [offset, offset + bytes],
            })
            .unwrap(),
        );
        offset += bytes;
    }
    let header_bytes = serde_json::to_vec(&serde_json::Value::Object(header)).unwrap();

    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    for (_, tensor) in tensors {
        let standard = tensor.as_standard_layout();
        for &v in standard.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<TensorFile> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::ingestion(path, format!("cannot open: {e}")))?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|e| Error::ingestion(path, format!("truncated header length: {e}")))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 100 * 1024 * 1024 {
        return Err(Error::ingestion(path, format!("implausible header length {header_len}")));
    }
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|e| Error::ingestion(path, format!("truncated header: {e}")))?;
    let header: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::ingestion(path, format!("bad JSON header: {e}")))?;
    let mut buffer = Vec::new();
    file.read_to_end(&mut buffer)?;

    let mut out = TensorFile::default();
    for (name, value) in header {
        if name == "__metadata__" {
            out.metadata = serde_json::from_value(value)
                .map_err(|e| Error::ingestion(path, format!("bad metadata: {e}")))?;
            continue;
        }
        let th: TensorHeader = serde_json::from_value(value)
            .map_err(|e| Error::ingestion(path, format!("bad entry for `{name}`: {e}")))?;
        let [start, end] = th.data_offsets;
        if end > buffer.len() || start > end {
            return Err(Error::ingestion(
                path,
                format!("tensor `{name}` range {start}..{end} outside buffer"),
            ));
        }
        let raw = &buffer[start..end];
        let expected: usize = th.shape.iter().product();
        let data: Vec<f64> = match th.dtype.as_str() {
            "F64" => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            "F32" => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            other => {
                return Err(Error::ingestion(
                    path,
                    format!("tensor `{name}` has unsupported dtype {other} (want F32/F64)"),
                ))
            }
        };
        if data.len() != expected {
            return Err(Error::ingestion(
                path,
                format!(
                    "tensor `{name}` has {} values for shape {:?}",
                    data.len(),
                    th.shape
                ),
            ));
        }
        let array = ArrayD::from_shape_vec(IxDyn(&th.shape), data)
            .map_err(|e| Error::ingestion(path, format!("tensor `{name}`: {e}")))?;
        out.tensors.insert(name, array);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.safetensors");
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let a = ArrayD::from_shape_fn(IxDyn(&[3, 4]), |_| rng.gen_range(-1.0..1.0));
        let b = ArrayD::from_shape_fn(IxDyn(&[2, 2, 5]), |_| rng.gen_range(-1.0..1.0));
        let mut metadata = BTreeMap::new();
        metadata.insert("format".to_string(), "test".to_string());
        write_tensors(
            &path,
            &[("alpha".to_string(), &a), ("beta".to_string(), &b)],
            &metadata,
        )
        .unwrap();

        let file = read_tensors(&path).unwrap();
        assert_eq!(file.metadata.get("format").map(String::as_str), Some("test"));
        for (orig, name) in [(&a, "alpha"), (&b, "beta")] {
            let loaded = file.require(name).unwrap();
            assert_eq!(loaded.shape(), orig.shape());
            for (x, y) in loaded.iter().zip(orig.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert!(file.require("gamma").is_err());
    }

    #[test]
    fn reads_f32_payloads() {
        // Hand-build a single-tensor F32 file.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f32.safetensors");
        let header = br#"{"x":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.25f32).to_le_bytes());
        std::fs::write(&path, bytes).unwrap();

        let file = read_tensors(&path).unwrap();
        let x = file.require("x").unwrap();
        assert_eq!(x.as_slice().unwrap(), &[1.5, -2.25]);
    }

    #[test]
    fn malformed_files_are_ingestion_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        std::fs::write(&path, b"abc").unwrap();
        assert!(matches!(
            read_tensors(&path),
            Err(Error::Ingestion { .. })
        ));
    }
}
