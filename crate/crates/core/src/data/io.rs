//! `IMVOL1` volume files.
//!
//! Layout (little-endian): the 6 magic bytes `IMVOL1`, three `u32` extents
//! `(W, H, D)`, three `f32` spacings in mm, one kind byte (0 = `f32` image,
//! 1 = `u8` labels), then the x-fastest payload.

use std::fs;
use std::path::Path;

use super::volume::{ImageVolume, LabelVolume, Volume, VolumeKind, Voxel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"IMVOL1";
pub const HEADER_BYTES: usize = 6 + 12 + 12 + 1;

pub fn encode_volume<V: Voxel>(volume: &Volume<V>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + volume.len() * V::BYTES);
    out.extend_from_slice(MAGIC);
    for d in volume.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in volume.spacing() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(V::KIND as u8);
    for &v in volume.data() {
        v.write_le(&mut out);
    }
    out
}

struct Header {
    dims: [usize; 3],
    spacing: [f32; 3],
    kind: VolumeKind,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::format(path, format!("file is {} bytes, shorter than the {HEADER_BYTES}-byte header", bytes.len())));
    }
    if &bytes[..6] != MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}, expected \"IMVOL1\"", String::from_utf8_lossy(&bytes[..6]))));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dims = [u32_at(6), u32_at(10), u32_at(14)];
    let spacing = [f32_at(18), f32_at(22), f32_at(26)];
    let kind = VolumeKind::from_byte(bytes[30])
        .ok_or_else(|| Error::format(path, format!("unknown volume kind byte {}", bytes[30])))?;
    Ok(Header { dims, spacing, kind })
}

fn decode_payload<V: Voxel>(bytes: &[u8], header: &Header, path: &Path) -> Result<Volume<V>> {
    let payload = &bytes[HEADER_BYTES..];
    let voxels: usize = header.dims.iter().product();
    let expected = voxels * V::BYTES;
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "payload length mismatch: header dims {:?} need {expected} bytes, payload has {} bytes",
                header.dims,
                payload.len()
            ),
        ));
    }
    let data = payload.chunks_exact(V::BYTES).map(V::read_le).collect();
    Volume::new(header.dims, header.spacing, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn decode_volume<V: Voxel>(bytes: &[u8], path: &Path) -> Result<Volume<V>> {
    let header = parse_header(bytes, path)?;
    if header.kind != V::KIND {
        return Err(Error::format(path, format!("volume holds {:?}, expected {:?}", header.kind, V::KIND)));
    }
    decode_payload(bytes, &header, path)
}

pub fn write_volume<V: Voxel>(path: impl AsRef<Path>, volume: &Volume<V>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_volume(volume)).map_err(|e| Error::io(path, e))
}

pub fn read_volume<V: Voxel>(path: impl AsRef<Path>) -> Result<Volume<V>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}

/// A volume of either kind, as found on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyVolume {
    Image(ImageVolume),
    Labels(LabelVolume),
}

pub fn read_any_volume(path: impl AsRef<Path>) -> Result<AnyVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(&bytes, path)?;
    Ok(match header.kind {
        VolumeKind::Image => AnyVolume::Image(decode_payload(&bytes, &header, path)?),
        VolumeKind::Labels => AnyVolume::Labels(decode_payload(&bytes, &header, path)?),
    })
}
