//! Token files and ingest.
//!
//! Layout of a token file, all little-endian:
//!
//! | offset | size | field                  |
//! |--------|------|------------------------|
//! | 0      | 4    | magic `UTOK`           |
//! | 4      | 4    | version, always 1      |
//! | 8      | 4    | vocab                  |
//! | 12     | 4    | bytes per id (2 or 4)  |
//! | 16     | 8    | count                  |
//! | 24     | …    | ids                    |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use uscale_core::train::TokenStream;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UTOK";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestMode {
    /// One token per byte, vocab 256.
    #[default]
    Text,
    /// A token file.
    Binary,
}

/// Encodes ids in the token file format. Ids are written with 2 bytes when
/// the vocab fits, else 4.
pub fn encode(ids: &[u32], vocab: u32) -> Result<Vec<u8>> {
    if let Some((i, &t)) = ids.iter().enumerate().find(|(_, &t)| t >= vocab) {
        return Err(Error::Invalid(format!("id {t} at index {i} is not below vocab {vocab}")));
    }
    let width: u32 = if vocab <= 1 << 16 { 2 } else { 4 };
    let mut out = Vec::with_capacity(HEADER_LEN + ids.len() * width as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&vocab.to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&(ids.len() as u64).to_le_bytes());
    for &t in ids {
        if width == 2 {
            out.extend_from_slice(&(t as u16).to_le_bytes());
        } else {
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a token file. `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<TokenStream> {
    let err = |offset: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(err(bytes.len(), format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(err(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let vocab = u32_at(8);
    if vocab == 0 {
        return Err(err(8, String::from("vocab is zero")));
    }
    let width = u32_at(12) as usize;
    if width != 2 && width != 4 {
        return Err(err(12, format!("bytes per id must be 2 or 4, got {width}")));
    }
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let body = bytes.len() - HEADER_LEN;
    if (body as u64) != count.saturating_mul(width as u64) {
        return Err(err(16, format!("count {count} × {width} bytes does not match the {body} bytes that follow")));
    }
    let mut ids = Vec::with_capacity(count as usize);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(width).enumerate() {
        let t = if width == 2 {
            u16::from_le_bytes([chunk[0], chunk[1]]) as u32
        } else {
            u32::from_le_bytes(chunk.try_into().unwrap())
        };
        if t >= vocab {
            return Err(err(HEADER_LEN + i * width, format!("id {t} is not below vocab {vocab}")));
        }
        ids.push(t);
    }
    Ok(TokenStream::new(ids, vocab, path.display().to_string())?)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn ingest(path: &Path, mode: IngestMode) -> Result<TokenStream> {
    let bytes = read_file(path)?;
    Ok(match mode {
        IngestMode::Text => TokenStream::from_bytes(&bytes, path.display().to_string()),
        IngestMode::Binary => decode(&bytes, path)?,
    })
}

pub fn write_tokens(path: &Path, stream: &TokenStream) -> Result<()> {
    write_file(path, &encode(stream.ids(), stream.vocab())?)
}

/// Bytes of a byte-level stream.
pub fn to_text(stream: &TokenStream) -> Result<Vec<u8>> {
    if stream.vocab() > 256 {
        return Err(Error::Invalid(format!("vocab {} is not byte-level", stream.vocab())));
    }
    Ok(stream.ids().iter().map(|&t| t as u8).collect())
}
