//! Shared binary container used by every artifact file.
//!
//! Layout: 4-byte magic, little-endian `u64` header length, UTF-8 JSON
//! header, then a payload of little-endian IEEE-754 `f64` values.

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"KFD1";
pub const MODEL_MAGIC: &[u8; 4] = b"KFM1";
pub const SIDECAR_MAGIC: &[u8; 4] = b"KFS1";
pub const POLICY_MAGIC: &[u8; 4] = b"KFP1";

/// Upper bound on header size; anything larger is treated as corruption.
const MAX_HEADER_BYTES: u64 = 64 << 20;

pub fn header_bytes<H: Serialize>(header: &H) -> Result<Vec<u8>> {
    serde_json::to_vec(header).map_err(|e| Error::Header(e.to_string()))
}

/// Writes magic and header; returns the number of bytes written.
pub fn write_preamble<W: Write, H: Serialize>(
    w: &mut W,
    magic: &[u8; 4],
    header: &H,
) -> Result<u64> {
    let json = header_bytes(header)?;
    w.write_all(magic)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    Ok(12 + json.len() as u64)
}

pub fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_container<W: Write, H: Serialize>(
    w: &mut W,
    magic: &[u8; 4],
    header: &H,
    blocks: &[&[f64]],
) -> Result<()> {
    write_preamble(w, magic, header)?;
    for b in blocks {
        write_f64s(w, b)?;
    }
    Ok(())
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(what.to_string())
        } else {
            Error::Io(e)
        }
    })
}

/// Reads magic and header, leaving the reader at the start of the payload.
/// Returns the parsed header and the preamble length in bytes.
pub fn read_preamble<R: Read, H: DeserializeOwned>(r: &mut R, magic: &[u8; 4]) -> Result<(H, u64)> {
    let mut m = [0u8; 4];
    read_exact_or_truncated(r, &mut m, "missing magic")?;
    if &m != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&m).into_owned(),
        });
    }
    let mut len = [0u8; 8];
    read_exact_or_truncated(r, &mut len, "missing header length")?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER_BYTES {
        return Err(Error::Header(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    read_exact_or_truncated(r, &mut json, "header shorter than declared length")?;
    let header = serde_json::from_slice(&json).map_err(|e| Error::Header(e.to_string()))?;
    Ok((header, 12 + len))
}

/// Reads exactly `count` values, rejecting a short payload.
pub fn read_f64s<R: Read>(r: &mut R, count: usize, what: &str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    read_exact_or_truncated(r, &mut buf, &format!("payload block {what} is short"))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Fails if the reader still has bytes.
pub fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Header("trailing bytes after payload".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, Debug, PartialEq)]
    struct H {
        n: usize,
    }

    #[test]
    fn roundtrip() {
        let mut buf = Vec::new();
        write_container(&mut buf, MODEL_MAGIC, &H { n: 3 }, &[&[1.0, -2.5], &[f64::MIN_POSITIVE]])
            .unwrap();
        let mut r = buf.as_slice();
        let (h, _): (H, u64) = read_preamble(&mut r, MODEL_MAGIC).unwrap();
        assert_eq!(h, H { n: 3 });
        assert_eq!(read_f64s(&mut r, 3, "x").unwrap(), vec![1.0, -2.5, f64::MIN_POSITIVE]);
        expect_eof(&mut r).unwrap();
    }

    #[test]
    fn distinct_errors() {
        let mut buf = Vec::new();
        write_container(&mut buf, MODEL_MAGIC, &H { n: 1 }, &[&[1.0]]).unwrap();

        let err = read_preamble::<_, H>(&mut buf.as_slice(), DATASET_MAGIC).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));

        let short = &buf[..buf.len() - 3];
        let mut r = short;
        read_preamble::<_, H>(&mut r, MODEL_MAGIC).unwrap();
        assert!(matches!(read_f64s(&mut r, 1, "x"), Err(Error::Truncated(_))));

        let cut = &buf[..14];
        assert!(matches!(
            read_preamble::<_, H>(&mut &cut[..], MODEL_MAGIC),
            Err(Error::Truncated(_))
        ));
    }
}
