//! Little-endian helpers shared by the binary mesh, frame and matrix files.

use crate::error::{Result, TomoError};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Self { buf: magic.to_vec() };
        w.u32(version);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    kind: &'static str,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks the magic and version and positions the cursor after them.
    pub fn open(kind: &'static str, data: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self> {
        if data.len() < 8 || &data[..4] != magic {
            return Err(TomoError::Format {
                kind,
                reason: format!("missing magic {:?}", String::from_utf8_lossy(magic)),
            });
        }
        let mut r = Self { kind, data, pos: 4 };
        let found = r.u32()?;
        if found != version {
            return Err(r.err(format!("unsupported version {found} (expected {version})")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        match end {
            Some(end) => {
                let s = &self.data[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("truncated at byte {}", self.pos))),
        }
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.err(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }

    pub fn err(&self, reason: String) -> TomoError {
        TomoError::Format {
            kind: self.kind,
            reason,
        }
    }
}
