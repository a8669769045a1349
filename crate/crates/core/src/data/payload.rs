//! Binary visual payloads.
//!
//! Layout: `"UVLM"`, version `u16`, rank `u8`, each dim as `u32`, then the
//! values as `f32`; all little-endian, row-major. Images are `H×W×C`,
//! videos `T×H×W×C`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::vision::{Frame, VisualInput};

pub const PAYLOAD_MAGIC: &[u8; 4] = b"UVLM";
pub const PAYLOAD_VERSION: u16 = 1;

pub fn encode_payload(input: &VisualInput) -> Vec<u8> {
    let frames = input.frames();
    let f = &frames[0];
    let dims: Vec<u32> = match input {
        VisualInput::Image(_) => vec![f.height as u32, f.width as u32, f.channels as u32],
        VisualInput::Video(fs) => vec![
            fs.len() as u32,
            f.height as u32,
            f.width as u32,
            f.channels as u32,
        ],
    };
    let values: usize = frames.iter().map(|f| f.data.len()).sum();
    let mut out = Vec::with_capacity(7 + 4 * dims.len() + 4 * values);
    out.extend_from_slice(PAYLOAD_MAGIC);
    out.extend_from_slice(&PAYLOAD_VERSION.to_le_bytes());
    out.push(dims.len() as u8);
    for d in &dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for f in frames {
        for v in &f.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Little-endian reader that reports byte offsets on failure.
pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                detail: format!("truncated: wanted {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.fail("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        if self.take(4)? != magic {
            return Err(Error::Format {
                offset: at,
                detail: format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
            });
        }
        Ok(())
    }

    pub fn fail(&self, detail: &str) -> Error {
        Error::Format {
            offset: self.pos,
            detail: detail.to_string(),
        }
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail("trailing bytes"));
        }
        Ok(())
    }
}

pub fn decode_payload(buf: &[u8]) -> Result<VisualInput> {
    let mut r = Reader::new(buf);
    r.magic(PAYLOAD_MAGIC)?;
    let at = r.pos;
    let version = r.u16()?;
    if version != PAYLOAD_VERSION {
        return Err(Error::Format {
            offset: at,
            detail: format!("unsupported payload version {version}"),
        });
    }
    let at = r.pos;
    let rank = r.u8()?;
    if rank != 3 && rank != 4 {
        return Err(Error::Format {
            offset: at,
            detail: format!("rank {rank}, expected 3 (image) or 4 (video)"),
        });
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let at = r.pos;
        let d = r.u32()? as usize;
        if d == 0 {
            return Err(Error::Format {
                offset: at,
                detail: "zero dimension".into(),
            });
        }
        dims.push(d);
    }
    let (t, h, w, c) = match dims.as_slice() {
        [h, w, c] => (1, *h, *w, *c),
        [t, h, w, c] => (*t, *h, *w, *c),
        _ => unreachable!("rank checked above"),
    };
    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        let at = r.pos;
        let data = r.f32s(h * w * c)?;
        frames.push(Frame::new(h, w, c, data).map_err(|e| Error::Format {
            offset: at,
            detail: e.to_string(),
        })?);
    }
    r.finish()?;
    if rank == 3 {
        VisualInput::image(frames.remove(0))
    } else {
        VisualInput::video(frames)
    }
}

pub fn write_payload(path: &Path, input: &VisualInput) -> Result<()> {
    std::fs::write(path, encode_payload(input)).map_err(|e| Error::io(path, e))
}

pub fn read_payload(path: &Path) -> Result<VisualInput> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_payload(&buf)
}
