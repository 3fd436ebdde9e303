//! Versioned binary container for all persisted artifacts.
//!
//! Layout: magic "UCAN", version u8, section count u32 LE, then per section a
//! length-prefixed name, tensor count u32, and tensors as (rank u8, dims u32
//! LE, f32 LE payload). A CRC32 of everything before it trails the file.
//! Values are stored at f32 precision; in-memory math stays f64.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Result, UcanError};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"UCAN";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<Tensor>,
}

impl Section {
    pub fn new(name: impl Into<String>, tensors: Vec<Tensor>) -> Self {
        Self { name: name.into(), tensors }
    }
}

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

pub fn write_container(path: &Path, sections: &[Section]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.push(FORMAT_VERSION);
    buf.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for section in sections {
        let name = section.name.as_bytes();
        if name.len() > u8::MAX as usize {
            return Err(UcanError::Format(format!("section name too long: {}", section.name)));
        }
        buf.push(name.len() as u8);
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(section.tensors.len() as u32).to_le_bytes());
        for t in &section.tensors {
            if t.shape.len() > u8::MAX as usize {
                return Err(UcanError::Format("tensor rank exceeds u8".into()));
            }
            buf.push(t.shape.len() as u8);
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(UcanError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_container(path: &Path) -> Result<Vec<Section>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 1 + 4 + 4 {
        return Err(UcanError::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if crc32(body) != stored_crc {
        return Err(UcanError::CrcMismatch);
    }

    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(UcanError::BadMagic);
    }
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(UcanError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let section_count = r.u32()? as usize;
    let mut sections = Vec::with_capacity(section_count);
    for _ in 0..section_count {
        let name_len = r.u8()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| UcanError::Format("section name is not UTF-8".into()))?;
        let tensor_count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(tensor_count);
        for _ in 0..tensor_count {
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f32()? as f64);
            }
            tensors.push(Tensor::new(shape, data)?);
        }
        sections.push(Section { name, tensors });
    }
    if r.pos != body.len() {
        return Err(UcanError::Format("trailing bytes after last section".into()));
    }
    Ok(sections)
}

/// Finds a section by name.
pub fn section<'a>(sections: &'a [Section], name: &str) -> Result<&'a Section> {
    sections
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| UcanError::Format(format!("missing section '{name}'")))
}
