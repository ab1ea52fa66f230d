//! Single-file NIfTI-1 (`.nii`, `.nii.gz`), little-endian, 3D scalar and
//! label volumes plus a 4D layout for atlases.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::bayes::Atlas;
use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMap, Volume};

pub const HEADER_SIZE: usize = 348;
/// Header plus the four extension-flag bytes.
pub const DATA_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const DT_UINT16: i16 = 512;

const MAGIC: [u8; 4] = *b"n+1\0";
const ECODE_COMMENT: i32 = 6;
const LABELS_KEY: &str = "labels=";
/// Refuse to allocate more voxels than this from a header.
const MAX_VOXELS: usize = 1 << 31;

/// The header fields this module reads and writes.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
}

impl NiftiHeader {
    fn bytes_per_voxel(&self) -> Result<usize> {
        match self.datatype {
            DT_UINT8 => Ok(1),
            DT_INT16 | DT_UINT16 => Ok(2),
            DT_FLOAT32 => Ok(4),
            d => Err(Error::NiftiDatatype(d)),
        }
    }

    /// Spatial dims from `dim[1..=3]`.
    fn dims(&self) -> Result<Dims> {
        let mut n = [0usize; 3];
        for a in 0..3 {
            let d = self.dim[a + 1];
            if d < 1 {
                return Err(Error::NiftiFormat(format!("dim[{}] = {d}", a + 1)));
            }
            n[a] = d as usize;
        }
        Ok(Dims::new(n[0], n[1], n[2]))
    }

    fn voxel_size(&self) -> [f32; 3] {
        std::array::from_fn(|a| {
            let p = self.pixdim[a + 1];
            if p.is_finite() && p > 0.0 { p } else { 1.0 }
        })
    }

    /// Slope 0 means "no scaling" in NIfTI-1.
    fn scaling(&self) -> Option<(f64, f64)> {
        let (s, i) = (self.scl_slope, self.scl_inter);
        if s == 0.0 || !s.is_finite() || !i.is_finite() || (s == 1.0 && i == 0.0) {
            None
        } else {
            Some((s as f64, i as f64))
        }
    }
}

/// A decoded 3D file: integer data with trivial scaling loads as labels.
#[derive(Clone, Debug, PartialEq)]
pub enum Image {
    Scalar(Volume),
    Labels(LabelMap),
}

impl Image {
    pub fn dims(&self) -> Dims {
        match self {
            Image::Scalar(v) => v.dims(),
            Image::Labels(l) => l.dims(),
        }
    }

    /// Intensities, converting labels to floats.
    pub fn into_volume(self) -> Volume {
        match self {
            Image::Scalar(v) => v,
            Image::Labels(l) => {
                let vs = l.voxel_size;
                let dims = l.dims();
                Volume::from_raw(dims, l.into_labels().into_iter().map(f32::from).collect())
                    .with_voxel_size(vs)
            }
        }
    }

    pub fn into_labels(self) -> Result<LabelMap> {
        match self {
            Image::Labels(l) => Ok(l),
            Image::Scalar(_) => Err(Error::NiftiFormat(
                "expected an integer label volume, found scalar data".into(),
            )),
        }
    }
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

/// Parses and validates the fixed 348-byte header.
pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < 4 {
        return Err(Error::NiftiTruncated { got: bytes.len(), need: HEADER_SIZE });
    }
    let size = i32_at(bytes, 0);
    if size != HEADER_SIZE as i32 {
        return Err(Error::NiftiHeaderSize(size));
    }
    if bytes.len() < HEADER_SIZE {
        return Err(Error::NiftiTruncated { got: bytes.len(), need: HEADER_SIZE });
    }
    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::NiftiMagic(magic));
    }
    let hdr = NiftiHeader {
        dim: std::array::from_fn(|i| i16_at(bytes, 40 + 2 * i)),
        datatype: i16_at(bytes, 70),
        bitpix: i16_at(bytes, 72),
        pixdim: std::array::from_fn(|i| f32_at(bytes, 76 + 4 * i)),
        vox_offset: f32_at(bytes, 108),
        scl_slope: f32_at(bytes, 112),
        scl_inter: f32_at(bytes, 116),
    };
    let bpv = hdr.bytes_per_voxel()?;
    if hdr.bitpix as usize != 8 * bpv {
        return Err(Error::NiftiFormat(format!(
            "bitpix {} does not match datatype {}",
            hdr.bitpix, hdr.datatype
        )));
    }
    if !(hdr.vox_offset >= DATA_OFFSET as f32) || hdr.vox_offset.fract() != 0.0 {
        return Err(Error::NiftiFormat(format!("vox_offset {}", hdr.vox_offset)));
    }
    Ok(hdr)
}

/// Voxel bytes of a validated header, bounds-checked against the buffer.
fn payload<'a>(bytes: &'a [u8], hdr: &NiftiHeader, voxels: usize) -> Result<&'a [u8]> {
    if voxels > MAX_VOXELS {
        return Err(Error::NiftiFormat(format!("{voxels} voxels exceeds the size limit")));
    }
    let start = hdr.vox_offset as usize;
    let need = start + voxels * hdr.bytes_per_voxel()?;
    if bytes.len() < need {
        return Err(Error::NiftiTruncated { got: bytes.len(), need });
    }
    Ok(&bytes[start..need])
}

fn decode_scalars(raw: &[u8], datatype: i16) -> Vec<f64> {
    match datatype {
        DT_UINT8 => raw.iter().map(|&b| b as f64).collect(),
        DT_INT16 => raw.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        DT_UINT16 => raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        _ => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    }
}

/// Decodes an in-memory (already decompressed) 3D file.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    let hdr = parse_header(bytes)?;
    if hdr.dim[0] != 3 {
        return Err(Error::NiftiDimCount { expected: 3, found: hdr.dim[0] });
    }
    let dims = hdr.dims()?;
    let raw = payload(bytes, &hdr, dims.len())?;
    let vs = hdr.voxel_size();
    let scaling = hdr.scaling();
    if hdr.datatype != DT_FLOAT32 && scaling.is_none() {
        let labels = match hdr.datatype {
            DT_UINT8 => raw.iter().map(|&b| b as u16).collect(),
            DT_UINT16 => raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect(),
            _ => raw
                .chunks_exact(2)
                .map(|c| {
                    let v = i16::from_le_bytes([c[0], c[1]]);
                    u16::try_from(v).map_err(|_| Error::NiftiFormat(format!("negative label {v}")))
                })
                .collect::<Result<Vec<u16>>>()?,
        };
        return Ok(Image::Labels(LabelMap::from_raw(dims, labels).with_voxel_size(vs)));
    }
    if hdr.datatype == DT_FLOAT32 && scaling.is_none() {
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        return Ok(Image::Scalar(Volume::new(dims, data)?.with_voxel_size(vs)));
    }
    let (s, i) = scaling.unwrap_or((1.0, 0.0));
    let data = decode_scalars(raw, hdr.datatype)
        .into_iter()
        .map(|v| (s * v + i) as f32)
        .collect();
    Ok(Image::Scalar(Volume::new(dims, data)?.with_voxel_size(vs)))
}

fn header_bytes(dim: [i16; 8], datatype: i16, bitpix: i16, vs: [f32; 3], vox_offset: usize) -> Vec<u8> {
    let mut h = vec![0u8; HEADER_SIZE];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    for (i, d) in dim.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    let mut pixdim = [1.0f32; 8];
    pixdim[1..4].copy_from_slice(&vs);
    for (i, p) in pixdim.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(vox_offset as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    // scl_inter stays 0; xyzt_units = mm
    h[123] = 2;
    // qform_code 1 with a zero quaternion: identity orientation
    h[252..254].copy_from_slice(&1i16.to_le_bytes());
    h[344..348].copy_from_slice(&MAGIC);
    h
}

fn dim_field(dims: Dims, extra: Option<usize>) -> Result<[i16; 8]> {
    let mut dim = [1i16; 8];
    dim[0] = if extra.is_some() { 4 } else { 3 };
    let mut axes = dims.as_array().to_vec();
    axes.extend(extra);
    for (a, &n) in axes.iter().enumerate() {
        dim[a + 1] = i16::try_from(n)
            .map_err(|_| Error::NiftiFormat(format!("axis length {n} exceeds the NIfTI-1 limit")))?;
    }
    Ok(dim)
}

/// Serializes a scalar volume as float32.
pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    let dim = dim_field(v.dims(), None)?;
    let mut out = header_bytes(dim, DT_FLOAT32, 32, v.voxel_size, DATA_OFFSET);
    out.extend_from_slice(&[0; 4]);
    out.reserve(4 * v.data().len());
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

/// Serializes a label map as uint16.
pub fn encode_labels(m: &LabelMap) -> Result<Vec<u8>> {
    let dim = dim_field(m.dims(), None)?;
    let mut out = header_bytes(dim, DT_UINT16, 16, m.voxel_size, DATA_OFFSET);
    out.extend_from_slice(&[0; 4]);
    out.reserve(2 * m.labels().len());
    for x in m.labels() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

/// Serializes an atlas as a 4D float32 file, channel `k` at `dim[4]` index k.
/// The label ordering travels in a comment extension.
pub fn encode_atlas(atlas: &Atlas) -> Result<Vec<u8>> {
    let dims = atlas.dims();
    let dim = dim_field(dims, Some(atlas.len()))?;
    let text = atlas
        .ordering()
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let mut ext = format!("{LABELS_KEY}{text}").into_bytes();
    ext.push(0);
    let esize = (8 + ext.len()).div_ceil(16) * 16;
    ext.resize(esize - 8, 0);
    let offset = DATA_OFFSET + esize;
    let mut out = header_bytes(dim, DT_FLOAT32, 32, atlas.channels()[0].voxel_size, offset);
    out.extend_from_slice(&[1, 0, 0, 0]);
    out.extend_from_slice(&(esize as i32).to_le_bytes());
    out.extend_from_slice(&ECODE_COMMENT.to_le_bytes());
    out.extend_from_slice(&ext);
    for c in atlas.channels() {
        for x in c.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Label ordering from the comment extension, if present.
fn atlas_labels(bytes: &[u8], vox_offset: usize) -> Result<Option<Vec<u16>>> {
    if bytes.len() < DATA_OFFSET || bytes[HEADER_SIZE] == 0 {
        return Ok(None);
    }
    let mut pos = DATA_OFFSET;
    while pos + 8 <= vox_offset.min(bytes.len()) {
        let esize = i32_at(bytes, pos);
        let ecode = i32_at(bytes, pos + 4);
        if esize < 16 || esize % 16 != 0 || pos + esize as usize > vox_offset.min(bytes.len()) {
            return Err(Error::NiftiFormat(format!("bad extension size {esize}")));
        }
        let body = &bytes[pos + 8..pos + esize as usize];
        if ecode == ECODE_COMMENT {
            let end = body.iter().position(|&b| b == 0).unwrap_or(body.len());
            let text = std::str::from_utf8(&body[..end])
                .map_err(|_| Error::NiftiFormat("extension is not UTF-8".into()))?;
            if let Some(list) = text.strip_prefix(LABELS_KEY) {
                let labels = list
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<u16>()
                            .map_err(|_| Error::NiftiFormat(format!("bad atlas label `{s}`")))
                    })
                    .collect::<Result<Vec<u16>>>()?;
                return Ok(Some(labels));
            }
        }
        pos += esize as usize;
    }
    Ok(None)
}

/// Decodes a 4D float32 atlas. Without a label extension the channels are
/// labelled `0..K`.
pub fn decode_atlas(bytes: &[u8]) -> Result<Atlas> {
    let hdr = parse_header(bytes)?;
    if hdr.dim[0] != 4 {
        return Err(Error::NiftiDimCount { expected: 4, found: hdr.dim[0] });
    }
    let dims = hdr.dims()?;
    let k = hdr.dim[4];
    if k < 1 {
        return Err(Error::NiftiFormat(format!("dim[4] = {k}")));
    }
    let k = k as usize;
    let raw = payload(bytes, &hdr, dims.len().saturating_mul(k))?;
    let (s, i) = hdr.scaling().unwrap_or((1.0, 0.0));
    let values = decode_scalars(raw, hdr.datatype);
    let vs = hdr.voxel_size();
    let channels = values
        .chunks_exact(dims.len())
        .map(|c| {
            let data = c.iter().map(|&v| (s * v + i) as f32).collect();
            Volume::new(dims, data).map(|v| v.with_voxel_size(vs))
        })
        .collect::<Result<Vec<_>>>()?;
    let ordering = match atlas_labels(bytes, hdr.vox_offset as usize)? {
        Some(o) => o,
        None => (0..k as u16).collect(),
    };
    Atlas::new(ordering, channels)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    if gz {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = GzEncoder::new(file, Compression::fast());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
        Ok(())
    } else {
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Reads a 3D file, gzip-compressed or not.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Image> {
    decode(&read_bytes(path.as_ref())?)
}

/// Reads a file that must hold integer labels.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    read_volume(path)?.into_labels()
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume(v)?)
}

pub fn write_labels(path: impl AsRef<Path>, m: &LabelMap) -> Result<()> {
    write_bytes(path.as_ref(), &encode_labels(m)?)
}

pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    match img {
        Image::Scalar(v) => write_volume(path, v),
        Image::Labels(m) => write_labels(path, m),
    }
}

pub fn read_atlas(path: impl AsRef<Path>) -> Result<Atlas> {
    decode_atlas(&read_bytes(path.as_ref())?)
}

pub fn write_atlas(path: impl AsRef<Path>, atlas: &Atlas) -> Result<()> {
    write_bytes(path.as_ref(), &encode_atlas(atlas)?)
}
