//! Little-endian helpers shared by the store, checkpoint and interchange formats.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{F2aError, Result};

pub(crate) struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut buf = Vec::with_capacity(1 << 12);
        buf.extend_from_slice(magic);
        buf.write_u32::<LittleEndian>(version).unwrap();
        Encoder { buf }
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.write_u16::<LittleEndian>(v).unwrap();
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.write_u32::<LittleEndian>(v).unwrap();
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.write_u64::<LittleEndian>(v).unwrap();
    }

    pub fn f64s<'a>(&mut self, vals: impl IntoIterator<Item = &'a f64>) {
        for v in vals {
            self.buf.write_f64::<LittleEndian>(*v).unwrap();
        }
    }

    /// u16 length prefix followed by UTF-8 bytes.
    pub fn name(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len()).map_err(|_| F2aError::InvalidArgument {
            arg: "series name",
            reason: format!("{} bytes exceeds u16 length prefix", s.len()),
        })?;
        self.u16(len);
        self.buf.write_all(s.as_bytes()).unwrap();
        Ok(())
    }

    pub fn bytes(&self) -> &[u8] {
        &self.buf
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Decoder<'a> {
    path: PathBuf,
    cur: Cursor<&'a [u8]>,
}

impl<'a> Decoder<'a> {
    /// Checks magic and version, leaving the cursor just past the version field.
    pub fn open(path: &Path, data: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self> {
        let mut dec = Decoder {
            path: path.to_path_buf(),
            cur: Cursor::new(data),
        };
        let mut found = [0u8; 4];
        dec.cur
            .read_exact(&mut found)
            .map_err(|_| dec.corrupt("missing magic"))?;
        if &found != magic {
            return Err(F2aError::BadMagic {
                path: dec.path.clone(),
                expected: *magic,
                found,
            });
        }
        let v = dec.u32("version")?;
        if v != version {
            return Err(F2aError::BadVersion {
                path: dec.path.clone(),
                expected: version,
                found: v,
            });
        }
        Ok(dec)
    }

    pub fn corrupt(&self, detail: impl Into<String>) -> F2aError {
        F2aError::Corrupt {
            path: self.path.clone(),
            detail: detail.into(),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        self.cur
            .read_u16::<LittleEndian>()
            .map_err(|_| self.corrupt(format!("eof reading {what}")))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        self.cur
            .read_u32::<LittleEndian>()
            .map_err(|_| self.corrupt(format!("eof reading {what}")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        self.cur
            .read_u64::<LittleEndian>()
            .map_err(|_| self.corrupt(format!("eof reading {what}")))
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        if self.remaining() < n.saturating_mul(8) {
            return Err(self.corrupt(format!("eof reading {what} ({n} floats)")));
        }
        let mut out = vec![0.0; n];
        self.cur
            .read_f64_into::<LittleEndian>(&mut out)
            .map_err(|_| self.corrupt(format!("eof reading {what}")))?;
        Ok(out)
    }

    pub fn name(&mut self) -> Result<String> {
        let len = self.u16("name length")? as usize;
        if self.remaining() < len {
            return Err(self.corrupt("eof reading name"));
        }
        let mut bytes = vec![0u8; len];
        self.cur.read_exact(&mut bytes).unwrap();
        String::from_utf8(bytes).map_err(|_| self.corrupt("name is not valid UTF-8"))
    }

    pub fn position(&self) -> usize {
        self.cur.position() as usize
    }

    pub fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.position()
    }

    pub fn finish(&self) -> Result<()> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(self.corrupt(format!("{n} trailing bytes"))),
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    if path.as_os_str().is_empty() {
        return Err(F2aError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty path"),
        ));
    }
    fs::read(path).map_err(|e| F2aError::io(path, e))
}

/// Writes to a sibling temp file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(F2aError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty path"),
        ));
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| F2aError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| F2aError::io(&tmp, e))?;
    f.sync_all().map_err(|e| F2aError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| F2aError::io(path, e))
}

pub(crate) fn check_dim(dec: &Decoder, dim: &'static str, found: usize, expected: Option<usize>) -> Result<()> {
    match expected {
        Some(e) if e != found => Err(F2aError::DimMismatch {
            path: dec.path().to_path_buf(),
            dim,
            expected: e,
            found,
        }),
        _ => Ok(()),
    }
}
