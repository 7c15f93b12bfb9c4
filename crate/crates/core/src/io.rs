//! Small file-format helpers shared across modules: JSONL readers, the
//! "ASCII header line + little-endian f32 payload" matrix container, and
//! atomic writes (temp file + rename).

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Read one JSON value per line, reporting 1-based line numbers on failure.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: T = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path.display().to_string(), idx + 1, e.to_string()))?;
        out.push(value);
    }
    Ok(out)
}

/// Serialize records one JSON object per line. Atomic.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for record in records {
        serde_json::to_writer(&mut buf, record)
            .map_err(|e| Error::Config(format!("jsonl serialization: {e}")))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Write `bytes` to `path` via a temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let tmp: PathBuf = {
        let mut name = path
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_else(|| "artifact".into());
        name.push(format!(".tmp.{}", std::process::id()));
        dir.join(name)
    };
    {
        let file = File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        let mut writer = BufWriter::new(file);
        writer
            .write_all(bytes)
            .and_then(|_| writer.flush())
            .map_err(|e| Error::io(tmp.display().to_string(), e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Matrix container: one ASCII header line, then `rows * cols` 32-bit
/// little-endian floats, row-major.
pub fn write_matrix_payload(path: &Path, header: &str, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(header.len() + 1 + data.len() * 4);
    bytes.extend_from_slice(header.as_bytes());
    bytes.push(b'\n');
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

/// Read back a header + f32 payload file. Returns (header, floats).
pub fn read_matrix_payload(path: &Path) -> Result<(String, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(path.display().to_string(), 1, "missing header line"))?;
    let header = String::from_utf8(bytes[..newline].to_vec())
        .map_err(|_| Error::parse(path.display().to_string(), 1, "header is not utf-8"))?;
    let payload = &bytes[newline + 1..];
    if payload.len() % 4 != 0 {
        return Err(Error::parse(
            path.display().to_string(),
            1,
            format!("payload length {} is not a multiple of 4", payload.len()),
        ));
    }
    let mut data = Vec::with_capacity(payload.len() / 4);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Ok((header, data))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(s)
}

/// FNV-1a over bytes; used where a stable, dependency-free hash of a short
/// string is needed (per-token RNG streams). Not for security.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// SplitMix64 step; used to derive independent seed streams from one seed.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_payload_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let data = vec![1.0f32, -2.5, 0.0, 3.25];
        write_matrix_payload(&path, "2 2", &data).unwrap();
        let (header, back) = read_matrix_payload(&path).unwrap();
        assert_eq!(header, "2 2");
        assert_eq!(back, data);
    }

    #[test]
    fn jsonl_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        fs::write(&path, "{\"a\":1}\nnot json\n").unwrap();
        #[derive(Debug, serde::Deserialize)]
        struct Row {
            #[allow(dead_code)]
            a: i32,
        }
        let err = read_jsonl::<Row>(&path).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn fnv1a_is_stable() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
