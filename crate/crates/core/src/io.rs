//! Versioned binary container shared by every persisted artifact.
//!
//! Datasets, trained policies, and trajectories all serialize to the same
//! layout: an 8-byte magic, a format version, a JSON metadata header, and a
//! little-endian `f64` payload. The JSON header carries an artifact `kind`
//! tag so a reader can reject a file of the wrong flavor with a clear error
//! instead of misinterpreting the payload. Writers are deterministic: the
//! same in-memory value always produces byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{de::DeserializeOwned, Serialize};
use thiserror::Error;

/// Leading bytes of every container file.
pub const MAGIC: &[u8; 8] = b"GCNETBIN";
/// Current container layout version.
pub const FORMAT_VERSION: u32 = 1;

/// Errors raised while reading or writing container files.
#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a container file (bad magic)")]
    BadMagic,
    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed metadata header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("artifact kind mismatch: expected {expected:?}, found {found:?}")]
    Kind { expected: String, found: String },
}

/// Metadata headers declare which artifact flavor the payload encodes.
pub trait ArtifactHeader: Serialize + DeserializeOwned {
    /// Stable tag stored in the file, e.g. `"dataset"` or `"policy"`.
    const KIND: &'static str;
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Envelope<H> {
    kind: String,
    #[serde(flatten)]
    header: H,
}

/// Writes `header` and `payload` as one container file.
pub fn write_container<H: ArtifactHeader>(
    path: &Path,
    header: &H,
    payload: &[f64],
) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    let envelope = Envelope { kind: H::KIND.to_string(), header };
    // Round-trip through a serde_json::Value would reorder nothing, but
    // serializing the envelope directly keeps field order fixed by the
    // struct definitions, which is what makes reruns byte-identical.
    let json = serde_json::to_vec(&envelope)?;
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(json.len() as u32)?;
    w.write_all(&json)?;
    w.write_u64::<LittleEndian>(payload.len() as u64)?;
    for &v in payload {
        w.write_f64::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a container file, validating magic, version, and artifact kind.
pub fn read_container<H: ArtifactHeader>(path: &Path) -> Result<(H, Vec<f64>), IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(IoError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(IoError::Version { found: version, expected: FORMAT_VERSION });
    }
    let header_len = r.read_u32::<LittleEndian>()? as usize;
    let mut json = vec![0u8; header_len];
    r.read_exact(&mut json)?;
    let envelope: Envelope<H> = serde_json::from_slice(&json)?;
    if envelope.kind != H::KIND {
        return Err(IoError::Kind { expected: H::KIND.to_string(), found: envelope.kind });
    }
    let n = r.read_u64::<LittleEndian>()? as usize;
    let mut payload = Vec::with_capacity(n);
    for _ in 0..n {
        payload.push(r.read_f64::<LittleEndian>()?);
    }
    Ok((envelope.header, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::{Deserialize, Serialize};

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct ToyHeader {
        name: String,
        rows: usize,
    }
    impl ArtifactHeader for ToyHeader {
        const KIND: &'static str = "toy";
    }

    #[derive(Debug, Serialize, Deserialize)]
    struct OtherHeader {
        name: String,
    }
    impl ArtifactHeader for OtherHeader {
        const KIND: &'static str = "other";
    }

    #[test]
    fn round_trip_preserves_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.bin");
        let header = ToyHeader { name: "alpha".into(), rows: 3 };
        let payload = vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.0, -0.0];
        write_container(&path, &header, &payload).unwrap();
        let (back, data): (ToyHeader, _) = read_container(&path).unwrap();
        assert_eq!(back, header);
        assert_eq!(data.len(), payload.len());
        for (a, b) in data.iter().zip(payload.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        let header = ToyHeader { name: "det".into(), rows: 2 };
        let payload = vec![0.1, 0.2, 0.3];
        write_container(&a, &header, &payload).unwrap();
        write_container(&b, &header, &payload).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.bin");
        write_container(&path, &ToyHeader { name: "x".into(), rows: 1 }, &[1.0]).unwrap();
        match read_container::<OtherHeader>(&path) {
            Err(IoError::Kind { expected, found }) => {
                assert_eq!(expected, "other");
                assert_eq!(found, "toy");
            }
            other => panic!("expected kind mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_and_corrupted_files_error_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.bin");
        write_container(&path, &ToyHeader { name: "x".into(), rows: 1 }, &[1.0, 2.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let truncated = dir.path().join("trunc.bin");
        std::fs::write(&truncated, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_container::<ToyHeader>(&truncated).is_err());

        let mut corrupt = bytes.clone();
        corrupt[0] ^= 0xFF;
        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, &corrupt).unwrap();
        assert!(matches!(read_container::<ToyHeader>(&bad), Err(IoError::BadMagic)));
    }
}
