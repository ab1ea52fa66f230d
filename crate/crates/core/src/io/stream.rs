//! Length-prefixed binary records carrying training pairs to external
//! consumers.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "SVP1"  u64 sample_index  u32 nx  u32 ny  u32 nz
//! f32[nx*ny*nz] image  u16[nx*ny*nz] target
//! u32 json_len  json_len bytes of UTF-8 parameter-record JSON
//! ```

use std::io::{ErrorKind, Read, Write};

use crate::error::{Error, Result};
use crate::generator::{ParameterRecord, TrainingPair};
use crate::volume::{Dims, LabelMap, Volume};

pub const STREAM_MAGIC: [u8; 4] = *b"SVP1";
/// Bytes before the image payload.
pub const PREFIX_LEN: usize = 4 + 8 + 12;
/// Largest voxel count a record may declare (a 1024³ volume).
pub const MAX_VOXELS: u64 = 1 << 30;
/// Largest parameter-record blob a record may declare.
pub const MAX_JSON_LEN: u32 = 64 << 20;

/// Parsed fixed prefix of a record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Prefix {
    index: u64,
    dims: Dims,
}

impl Prefix {
    fn payload_len(&self) -> usize {
        self.dims.len() * 6
    }
}

fn parse_prefix(b: &[u8; PREFIX_LEN]) -> Result<Prefix> {
    let magic: [u8; 4] = b[0..4].try_into().unwrap();
    if magic != STREAM_MAGIC {
        return Err(Error::StreamMagic(magic));
    }
    let index = u64::from_le_bytes(b[4..12].try_into().unwrap());
    let n: [u32; 3] = std::array::from_fn(|a| u32::from_le_bytes(b[12 + 4 * a..16 + 4 * a].try_into().unwrap()));
    if n.contains(&0) {
        return Err(Error::StreamLength(format!("zero dimension {}x{}x{}", n[0], n[1], n[2])));
    }
    let voxels = n.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
    match voxels {
        Some(v) if v <= MAX_VOXELS => {}
        _ => {
            return Err(Error::StreamLength(format!(
                "{}x{}x{} exceeds {MAX_VOXELS} voxels",
                n[0], n[1], n[2]
            )))
        }
    }
    Ok(Prefix {
        index,
        dims: Dims::new(n[0] as usize, n[1] as usize, n[2] as usize),
    })
}

fn parse_json_len(b: [u8; 4]) -> Result<usize> {
    let len = u32::from_le_bytes(b);
    if len > MAX_JSON_LEN {
        return Err(Error::StreamLength(format!("parameter record of {len} bytes")));
    }
    Ok(len as usize)
}

fn build_pair(prefix: Prefix, payload: &[u8], json: &[u8]) -> Result<TrainingPair> {
    let n = prefix.dims.len();
    let (img, tgt) = payload.split_at(4 * n);
    let image = img
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let target = tgt.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    let text = std::str::from_utf8(json).map_err(|e| Error::StreamRecord(e.to_string()))?;
    let record = ParameterRecord::from_json(text)?;
    if record.sample_index != prefix.index {
        return Err(Error::StreamRecord(format!(
            "header index {} but record index {}",
            prefix.index, record.sample_index
        )));
    }
    Ok(TrainingPair {
        image: Volume::new(prefix.dims, image)?,
        target: LabelMap::new(prefix.dims, target)?,
        record,
    })
}

/// Serializes one pair.
pub fn encode_record(pair: &TrainingPair) -> Result<Vec<u8>> {
    let dims = pair.image.dims();
    dims.ensure_same(pair.target.dims())?;
    let json = pair.record.to_json();
    let n: Vec<u32> = dims
        .as_array()
        .iter()
        .map(|&d| u32::try_from(d).map_err(|_| Error::StreamLength(format!("axis length {d}"))))
        .collect::<Result<_>>()?;
    if dims.len() as u64 > MAX_VOXELS || json.len() > MAX_JSON_LEN as usize {
        return Err(Error::StreamLength(format!("{dims} pair too large to encode")));
    }
    let mut out = Vec::with_capacity(PREFIX_LEN + 6 * dims.len() + 4 + json.len());
    out.extend_from_slice(&STREAM_MAGIC);
    out.extend_from_slice(&pair.record.sample_index.to_le_bytes());
    for d in n {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in pair.image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in pair.target.labels() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    Ok(out)
}

/// Decodes the record at the start of `bytes`; returns the pair and the
/// number of bytes consumed.
pub fn decode_record(bytes: &[u8]) -> Result<(TrainingPair, usize)> {
    let truncated = |need: usize| Error::StreamTruncated { got: bytes.len(), need };
    if bytes.len() < 4 {
        return Err(truncated(PREFIX_LEN));
    }
    if bytes[..4] != STREAM_MAGIC {
        return Err(Error::StreamMagic(bytes[..4].try_into().unwrap()));
    }
    let prefix_bytes: &[u8; PREFIX_LEN] = bytes
        .get(..PREFIX_LEN)
        .ok_or_else(|| truncated(PREFIX_LEN))?
        .try_into()
        .unwrap();
    let prefix = parse_prefix(prefix_bytes)?;
    let payload_end = PREFIX_LEN + prefix.payload_len();
    let len_end = payload_end + 4;
    let len_bytes = bytes.get(payload_end..len_end).ok_or_else(|| truncated(len_end))?;
    let json_len = parse_json_len(len_bytes.try_into().unwrap())?;
    let end = len_end + json_len;
    let json = bytes.get(len_end..end).ok_or_else(|| truncated(end))?;
    let pair = build_pair(prefix, &bytes[PREFIX_LEN..payload_end], json)?;
    Ok((pair, end))
}

pub fn write_record<W: Write>(w: &mut W, pair: &TrainingPair) -> Result<()> {
    w.write_all(&encode_record(pair)?)?;
    Ok(())
}

/// Fills `buf` or reports how many bytes arrived before EOF.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(got)
}

/// Reads exactly `len` bytes, growing the buffer only as data arrives so a
/// lying header cannot force a large allocation.
fn read_exact_vec<R: Read>(r: &mut R, len: usize, base: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(len.min(1 << 20));
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() < len {
        return Err(Error::StreamTruncated { got: base + buf.len(), need: base + len });
    }
    Ok(buf)
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], base: usize) -> Result<()> {
    let got = read_full(r, buf)?;
    if got < buf.len() {
        return Err(Error::StreamTruncated { got: base + got, need: base + buf.len() });
    }
    Ok(())
}

/// Reads the next record; `None` on a clean end of stream.
///
/// Lengths are validated against the caps before any payload buffer is
/// allocated.
pub fn read_record<R: Read>(r: &mut R) -> Result<Option<TrainingPair>> {
    let mut prefix = [0u8; PREFIX_LEN];
    let got = read_full(r, &mut prefix[..4])?;
    if got == 0 {
        return Ok(None);
    }
    if got < 4 {
        return Err(Error::StreamTruncated { got, need: PREFIX_LEN });
    }
    if prefix[..4] != STREAM_MAGIC {
        return Err(Error::StreamMagic(prefix[..4].try_into().unwrap()));
    }
    read_exact_or_truncated(r, &mut prefix[4..], 4)?;
    let head = parse_prefix(&prefix)?;
    let payload = read_exact_vec(r, head.payload_len(), PREFIX_LEN)?;
    let base = PREFIX_LEN + payload.len();
    let mut len = [0u8; 4];
    read_exact_or_truncated(r, &mut len, base)?;
    let json = read_exact_vec(r, parse_json_len(len)?, base + 4)?;
    build_pair(head, &payload, &json).map(Some)
}

/// Iterates records until end of stream or the first error.
pub struct RecordReader<R> {
    inner: R,
    done: bool,
}

impl<R: Read> RecordReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, done: false }
    }
}

impl<R: Read> Iterator for RecordReader<R> {
    type Item = Result<TrainingPair>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match read_record(&mut self.inner) {
            Ok(Some(p)) => Some(Ok(p)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}
