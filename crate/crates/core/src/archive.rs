//! Minimal zip archive support: stored and deflated entries, no zip64, no
//! encryption. Enough for course exports and instructor uploads.

use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::{Compression, Crc};

use crate::error::{Error, Result};

const LOCAL_SIG: u32 = 0x0403_4b50;
const CENTRAL_SIG: u32 = 0x0201_4b50;
const END_SIG: u32 = 0x0605_4b50;
const METHOD_STORED: u16 = 0;
const METHOD_DEFLATE: u16 = 8;
const FLAG_UTF8: u16 = 0x0800;
const FLAG_ENCRYPTED: u16 = 0x0001;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub data: Vec<u8>,
}

impl Entry {
    /// The last path component, so nested layouts match like flat ones.
    pub fn base_name(&self) -> &str {
        self.name.rsplit('/').next().unwrap_or(&self.name)
    }
}

fn crc32(data: &[u8]) -> u32 {
    let mut crc = Crc::new();
    crc.update(data);
    crc.sum()
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedArchive(msg.into())
}

#[derive(Default)]
pub struct ZipWriter {
    body: Vec<u8>,
    central: Vec<u8>,
    count: u16,
}

impl ZipWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, data: &[u8]) -> Result<()> {
        if self.count == u16::MAX {
            return Err(malformed("too many entries"));
        }
        let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
        enc.write_all(data)?;
        let deflated = enc.finish()?;
        let (method, payload) = if deflated.len() < data.len() {
            (METHOD_DEFLATE, deflated)
        } else {
            (METHOD_STORED, data.to_vec())
        };
        let size = u32::try_from(data.len()).map_err(|_| malformed("entry too large"))?;
        let csize = u32::try_from(payload.len()).map_err(|_| malformed("entry too large"))?;
        let offset = u32::try_from(self.body.len()).map_err(|_| malformed("archive too large"))?;
        let crc = crc32(data);
        let name_len = u16::try_from(name.len()).map_err(|_| malformed("entry name too long"))?;

        let b = &mut self.body;
        b.extend_from_slice(&LOCAL_SIG.to_le_bytes());
        b.extend_from_slice(&20u16.to_le_bytes());
        b.extend_from_slice(&FLAG_UTF8.to_le_bytes());
        b.extend_from_slice(&method.to_le_bytes());
        b.extend_from_slice(&0u16.to_le_bytes()); // time
        b.extend_from_slice(&0x21u16.to_le_bytes()); // 1980-01-01
        b.extend_from_slice(&crc.to_le_bytes());
        b.extend_from_slice(&csize.to_le_bytes());
        b.extend_from_slice(&size.to_le_bytes());
        b.extend_from_slice(&name_len.to_le_bytes());
        b.extend_from_slice(&0u16.to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&payload);

        let c = &mut self.central;
        c.extend_from_slice(&CENTRAL_SIG.to_le_bytes());
        c.extend_from_slice(&20u16.to_le_bytes());
        c.extend_from_slice(&20u16.to_le_bytes());
        c.extend_from_slice(&FLAG_UTF8.to_le_bytes());
        c.extend_from_slice(&method.to_le_bytes());
        c.extend_from_slice(&0u16.to_le_bytes());
        c.extend_from_slice(&0x21u16.to_le_bytes());
        c.extend_from_slice(&crc.to_le_bytes());
        c.extend_from_slice(&csize.to_le_bytes());
        c.extend_from_slice(&size.to_le_bytes());
        c.extend_from_slice(&name_len.to_le_bytes());
        c.extend_from_slice(&[0; 8]); // extra len, comment len, disk, internal attrs
        c.extend_from_slice(&0u32.to_le_bytes());
        c.extend_from_slice(&offset.to_le_bytes());
        c.extend_from_slice(name.as_bytes());
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<Vec<u8>> {
        let cd_offset = u32::try_from(self.body.len()).map_err(|_| malformed("archive too large"))?;
        let cd_size = u32::try_from(self.central.len()).map_err(|_| malformed("archive too large"))?;
        self.body.extend_from_slice(&self.central);
        let b = &mut self.body;
        b.extend_from_slice(&END_SIG.to_le_bytes());
        b.extend_from_slice(&[0; 4]);
        b.extend_from_slice(&self.count.to_le_bytes());
        b.extend_from_slice(&self.count.to_le_bytes());
        b.extend_from_slice(&cd_size.to_le_bytes());
        b.extend_from_slice(&cd_offset.to_le_bytes());
        b.extend_from_slice(&0u16.to_le_bytes());
        Ok(self.body)
    }
}

pub fn write_zip<'a>(entries: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> Result<Vec<u8>> {
    let mut w = ZipWriter::new();
    for (name, data) in entries {
        w.add(name, data)?;
    }
    w.finish()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn at(buf: &'a [u8], pos: usize) -> Self {
        Self { buf, pos }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| malformed("unexpected end of archive"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads every file entry. Directory entries are skipped.
pub fn read_zip(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < 22 {
        return Err(malformed("too short to be a zip archive"));
    }
    // The end record sits at the tail, followed by a comment of up to 64 KiB.
    let lowest = bytes.len().saturating_sub(22 + u16::MAX as usize);
    let end = (lowest..=bytes.len() - 22)
        .rev()
        .find(|&i| bytes[i..i + 4] == END_SIG.to_le_bytes())
        .ok_or_else(|| malformed("end of central directory not found"))?;
    let mut c = Cursor::at(bytes, end + 10);
    let total = c.u16()? as usize;
    let _cd_size = c.u32()?;
    let cd_offset = c.u32()? as usize;

    let mut entries = Vec::with_capacity(total);
    let mut cd = Cursor::at(bytes, cd_offset);
    for _ in 0..total {
        if cd.u32()? != CENTRAL_SIG {
            return Err(malformed("bad central directory signature"));
        }
        cd.take(4)?; // versions
        let flags = cd.u16()?;
        let method = cd.u16()?;
        cd.take(4)?; // time, date
        let crc = cd.u32()?;
        let csize = cd.u32()?;
        let size = cd.u32()?;
        let name_len = cd.u16()? as usize;
        let extra_len = cd.u16()? as usize;
        let comment_len = cd.u16()? as usize;
        cd.take(8)?; // disk, internal and external attrs
        let local_offset = cd.u32()? as usize;
        let name = String::from_utf8_lossy(cd.take(name_len)?).into_owned();
        cd.take(extra_len + comment_len)?;

        if flags & FLAG_ENCRYPTED != 0 {
            return Err(malformed(format!("{name}: encrypted entries are not supported")));
        }
        if csize == u32::MAX || size == u32::MAX {
            return Err(malformed(format!("{name}: zip64 entries are not supported")));
        }
        if name.ends_with('/') {
            continue;
        }

        let mut local = Cursor::at(bytes, local_offset);
        if local.u32()? != LOCAL_SIG {
            return Err(malformed(format!("{name}: bad local header signature")));
        }
        local.take(22)?;
        let local_name_len = local.u16()? as usize;
        let local_extra_len = local.u16()? as usize;
        local.take(local_name_len + local_extra_len)?;
        let raw = local.take(csize as usize)?;

        let data = match method {
            METHOD_STORED => raw.to_vec(),
            METHOD_DEFLATE => {
                let mut out = Vec::with_capacity(size as usize);
                DeflateDecoder::new(raw)
                    .take(size as u64 + 1)
                    .read_to_end(&mut out)
                    .map_err(|e| malformed(format!("{name}: {e}")))?;
                out
            }
            m => return Err(malformed(format!("{name}: unsupported compression method {m}"))),
        };
        if data.len() != size as usize {
            return Err(malformed(format!("{name}: size mismatch")));
        }
        if crc32(&data) != crc {
            return Err(malformed(format!("{name}: checksum mismatch")));
        }
        entries.push(Entry { name, data });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let big = "lorem ipsum ".repeat(500);
        let bytes = write_zip([
            ("alice.pdf", b"%PDF-1.4 tiny".as_slice()),
            ("nested/dir/bob.txt", big.as_bytes()),
            ("empty.txt", b"".as_slice()),
        ])
        .unwrap();
        let entries = read_zip(&bytes).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[0].data, b"%PDF-1.4 tiny");
        assert_eq!(entries[1].data, big.as_bytes());
        assert_eq!(entries[1].base_name(), "bob.txt");
        assert!(entries[2].data.is_empty());
        // the repetitive entry should actually be compressed
        assert!(bytes.len() < big.len());
    }

    #[test]
    fn empty_archive() {
        let bytes = ZipWriter::new().finish().unwrap();
        assert!(read_zip(&bytes).unwrap().is_empty());
    }

    #[test]
    fn rejects_garbage_and_corruption() {
        assert!(matches!(read_zip(b"not a zip"), Err(Error::MalformedArchive(_))));
        let mut bytes = write_zip([("a.txt", b"hello hello hello".as_slice())]).unwrap();
        // flip a byte inside the stored/deflated payload
        bytes[35] ^= 0xff;
        assert!(read_zip(&bytes).is_err());
        let bytes = write_zip([("a.txt", b"x".as_slice())]).unwrap();
        assert!(read_zip(&bytes[..bytes.len() - 5]).is_err());
    }
}
