//! Little-endian helpers shared by the binary file formats.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },
    #[error("truncated payload")]
    Truncated,
    #[error("trailing bytes after payload")]
    Trailing,
    #[error("non-finite float at entry {entry}, coordinate {coord}")]
    NonFinite { entry: u64, coord: u32 },
    #[error("invalid UTF-8 in vocabulary entry {0}")]
    Utf8(u32),
    #[error("invalid content: {0}")]
    Invalid(String),
}

pub(crate) type Result<T> = std::result::Result<T, FormatError>;

fn eof(e: io::Error) -> FormatError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        FormatError::Truncated
    } else {
        FormatError::Io(e)
    }
}

pub(crate) struct Decoder<R> {
    inner: R,
}

impl<R: Read> Decoder<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let mut found = [0u8; 4];
        self.inner.read_exact(&mut found).map_err(eof)?;
        if &found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(&found).into_owned(),
            });
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(FormatError::Version { expected, found });
        }
        Ok(())
    }

    pub fn u16(&mut self) -> Result<u16> {
        self.inner.read_u16::<LittleEndian>().map_err(eof)
    }

    pub fn u32(&mut self) -> Result<u32> {
        self.inner.read_u32::<LittleEndian>().map_err(eof)
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.inner.read_u64::<LittleEndian>().map_err(eof)
    }

    pub fn f32(&mut self) -> Result<f32> {
        self.inner.read_f32::<LittleEndian>().map_err(eof)
    }

    /// Reads `out.len()` floats, rejecting anything non-finite.
    pub fn finite_f32s(&mut self, out: &mut [f32], entry: u64) -> Result<()> {
        self.inner.read_f32_into::<LittleEndian>(out).map_err(eof)?;
        if let Some(coord) = out.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite {
                entry,
                coord: coord as u32,
            });
        }
        Ok(())
    }

    pub fn bytes(&mut self, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf).map_err(eof)?;
        Ok(buf)
    }

    pub fn finish(mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(FormatError::Trailing),
        }
    }
}

pub(crate) struct Encoder<W> {
    inner: W,
}

impl<W: Write> Encoder<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn raw(&mut self, bytes: &[u8]) -> Result<()> {
        Ok(self.inner.write_all(bytes)?)
    }

    pub fn u16(&mut self, v: u16) -> Result<()> {
        Ok(self.inner.write_u16::<LittleEndian>(v)?)
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.inner.write_u32::<LittleEndian>(v)?)
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.inner.write_u64::<LittleEndian>(v)?)
    }

    pub fn f32(&mut self, v: f32) -> Result<()> {
        Ok(self.inner.write_f32::<LittleEndian>(v)?)
    }

    pub fn f32s(&mut self, vs: &[f32]) -> Result<()> {
        for &v in vs {
            self.f32(v)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}
