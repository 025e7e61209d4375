//! On-disk format for nested models (`.mqpt`).
//!
//! Little-endian throughout, every variable-length section preceded by its
//! length. Layers with 2–4-bit codes are stored as canonical bit-planes,
//! wider codes as one byte each. See `docs/format.md` for the byte layout.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{BitWidthSet, QuantGrid};
use crate::pack::{pack, unpack, PackLayout, PackedTensor};
use crate::slice::{NestedLayer, NestedModel};

pub const MAGIC: [u8; 4] = *b"MQPT";
pub const VERSION: u16 = 1;

const ENCODING_RAW: u8 = 0;
const ENCODING_PLANES: u8 = 1;

/// Fixed bytes of a layer record besides its name, scales and payload:
/// name length, dims, bits, source bits, encoding, scale count, payload length.
pub const LAYER_RECORD_OVERHEAD: usize = 2 + 4 + 4 + 1 + 1 + 1 + 4 + 8;

fn header_len(n_targets: usize) -> usize {
    4 + 2 + 1 + 1 + n_targets + 8 * n_targets + 4 + 8 + 4
}

fn is_packable(bits: u8) -> bool {
    (2..=4).contains(&bits)
}

/// Bytes used for the codes of one layer.
pub fn code_payload_bytes(layer: &NestedLayer) -> usize {
    if is_packable(layer.bits()) {
        usize::from(layer.bits()) * layer.rows() * layer.cols().div_ceil(32) * 32 / 8
    } else {
        layer.rows() * layer.cols()
    }
}

/// Total serialized size, computed from the model without encoding it.
pub fn encoded_len(model: &NestedModel) -> usize {
    header_len(model.bits.len())
        + model
            .layers
            .iter()
            .map(|l| LAYER_RECORD_OVERHEAD + l.name.len() + 4 * l.grid().scales().len() + code_payload_bytes(l))
            .sum::<usize>()
}

pub fn encode(model: &NestedModel) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(encoded_len(model));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(model.master());
    out.push(model.bits.len() as u8);
    out.extend_from_slice(model.bits.targets());
    for w in model.bits.weights() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out.extend_from_slice(&u32_of(model.group_size, "group size")?.to_le_bytes());
    out.extend_from_slice(&model.damp_rel.to_le_bytes());
    out.extend_from_slice(&u32_of(model.layers.len(), "layer count")?.to_le_bytes());

    for layer in &model.layers {
        if layer.grid().group_size() != model.group_size {
            return Err(Error::InvalidArgument(format!(
                "layer {} uses group size {}, model declares {}",
                layer.name,
                layer.grid().group_size(),
                model.group_size
            )));
        }
        let name = layer.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument("layer name too long".into()))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&u32_of(layer.rows(), "rows")?.to_le_bytes());
        out.extend_from_slice(&u32_of(layer.cols(), "cols")?.to_le_bytes());
        out.push(layer.bits());
        out.push(layer.source_bits());
        let scales = layer.grid().scales();
        if is_packable(layer.bits()) {
            out.push(ENCODING_PLANES);
        } else {
            out.push(ENCODING_RAW);
        }
        out.extend_from_slice(&u32_of(scales.len(), "scale count")?.to_le_bytes());
        for s in scales {
            out.extend_from_slice(&s.to_le_bytes());
        }
        if is_packable(layer.bits()) {
            let p = pack(layer.codes(), layer.rows(), layer.cols(), layer.bits())?;
            out.extend_from_slice(&(p.payload_bytes() as u64).to_le_bytes());
            for w in p.base() {
                out.extend_from_slice(&w.to_le_bytes());
            }
            for w in p.plane_b2().iter().chain(p.plane_b3()) {
                out.extend_from_slice(&w.to_le_bytes());
            }
        } else {
            out.extend_from_slice(&(layer.codes().len() as u64).to_le_bytes());
            out.extend_from_slice(layer.codes());
        }
    }
    Ok(out)
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn corrupt(e: Error) -> Error {
    match e {
        Error::CorruptCheckpoint(_) | Error::NotACheckpoint | Error::UnsupportedVersion(_) => e,
        other => Error::CorruptCheckpoint(other.to_string()),
    }
}

pub fn decode(buf: &[u8]) -> Result<NestedModel> {
    let mut rd = Reader { buf, pos: 0 };
    if rd.take(4, "magic")? != MAGIC {
        return Err(Error::NotACheckpoint);
    }
    let version = rd.u16("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let master = rd.u8("master bits")?;
    let n_targets = rd.u8("target count")? as usize;
    let targets = rd.take(n_targets, "targets")?.to_vec();
    let mut weights = Vec::with_capacity(n_targets);
    for _ in 0..n_targets {
        weights.push(rd.f64("lambda")?);
    }
    let bits = BitWidthSet::new(&targets, &weights).map_err(corrupt)?;
    if bits.master() != master {
        return Err(Error::CorruptCheckpoint(format!(
            "header master {master} disagrees with targets {targets:?}"
        )));
    }
    let group_size = rd.u32("group size")? as usize;
    let damp_rel = rd.f64("dampening")?;
    let n_layers = rd.u32("layer count")? as usize;

    let mut layers = Vec::with_capacity(n_layers.min(1 << 16));
    for i in 0..n_layers {
        let ctx = |what: &str| format!("layer {i} {what}");
        let name_len = rd.u16(&ctx("name length"))? as usize;
        let name = String::from_utf8(rd.take(name_len, &ctx("name"))?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint(ctx("name is not utf-8")))?;
        let rows = rd.u32(&ctx("rows"))? as usize;
        let cols = rd.u32(&ctx("cols"))? as usize;
        let layer_bits = rd.u8(&ctx("bits"))?;
        let source_bits = rd.u8(&ctx("source bits"))?;
        let encoding = rd.u8(&ctx("encoding"))?;
        let n_scales = rd.u32(&ctx("scale count"))? as usize;
        let raw = rd.take(n_scales.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint(ctx("scale count")))?, &ctx("scales"))?;
        let scales: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let grid = QuantGrid::new(layer_bits, group_size, rows, cols, scales).map_err(corrupt)?;
        let payload_len = rd.u64(&ctx("payload length"))? as usize;
        let payload = rd.take(payload_len, &ctx("payload"))?;
        let codes = match encoding {
            ENCODING_RAW => {
                if payload_len != rows * cols {
                    return Err(Error::CorruptCheckpoint(ctx("raw payload length")));
                }
                payload.to_vec()
            }
            ENCODING_PLANES => decode_planes(payload, layer_bits, rows, cols).map_err(corrupt)?,
            other => return Err(Error::CorruptCheckpoint(format!("layer {i} has unknown encoding {other}"))),
        };
        layers.push(NestedLayer::with_source(name, codes, grid, source_bits).map_err(corrupt)?);
    }
    if rd.pos != buf.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes after {n_layers} layers",
            buf.len() - rd.pos
        )));
    }
    Ok(NestedModel {
        bits,
        group_size,
        damp_rel,
        layers,
    })
}

fn decode_planes(payload: &[u8], bits: u8, rows: usize, cols: usize) -> Result<Vec<u8>> {
    let units = rows * cols.div_ceil(32);
    let extra = usize::from(bits.saturating_sub(2));
    if payload.len() != units * 8 + units * 4 * extra {
        return Err(Error::CorruptPlanes(format!("{} payload bytes for {units} units", payload.len())));
    }
    let (base_bytes, rest) = payload.split_at(units * 8);
    let base = base_bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let words: Vec<u32> = rest.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let (b2, b3) = if bits >= 3 { words.split_at(units) } else { (&[][..], &[][..]) };
    let p = PackedTensor::from_parts(bits, rows, cols, PackLayout::Canonical, base, b2.to_vec(), b3.to_vec())?;
    unpack(&p)
}

pub fn write_checkpoint(model: &NestedModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<NestedModel> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(name: &str, bits: u8, rows: usize, cols: usize, group: usize) -> NestedLayer {
        let top = (1u32 << bits) - 1;
        let codes = (0..rows * cols).map(|i| ((i as u32).wrapping_mul(2_654_435_761) >> 7) % (top + 1)).map(|q| q as u8).collect();
        let scales = (0..rows * cols.div_ceil(group)).map(|i| 0.001 + i as f32 * 1e-4).collect();
        NestedLayer::new(name, codes, QuantGrid::new(bits, group, rows, cols, scales).unwrap()).unwrap()
    }

    fn model(bits: u8) -> NestedModel {
        let set = if bits == 8 { BitWidthSet::default() } else { BitWidthSet::uniform(&[2, bits]).unwrap() };
        NestedModel {
            bits: set,
            group_size: 32,
            damp_rel: 0.01,
            layers: vec![layer("block0.attn_in", bits, 8, 40, 32), layer("block0.mlp_up", bits, 16, 64, 32)],
        }
    }

    #[test]
    fn roundtrip_raw_and_packed() {
        for bits in [3u8, 4, 8] {
            let m = model(bits);
            let bytes = encode(&m).unwrap();
            assert_eq!(bytes.len(), encoded_len(&m));
            assert_eq!(decode(&bytes).unwrap(), m);
            assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
        }
    }

    #[test]
    fn packed_payload_is_exact() {
        let m = model(3);
        let payload: usize = m.layers.iter().map(code_payload_bytes).sum();
        assert_eq!(payload, 3 * (8 * 64 + 16 * 64) / 8);
    }

    #[test]
    fn error_taxonomy() {
        let m = model(4);
        let bytes = encode(&m).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[..4].fill(0);
        assert!(matches!(decode(&bad_magic), Err(Error::NotACheckpoint)));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(decode(&bad_version), Err(Error::UnsupportedVersion(9))));

        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(err.to_string().contains("corrupt checkpoint"), "cut {cut}: {err}");
        }

        // Header claims three layers, only two follow.
        let mut more = bytes.clone();
        let off = header_len(m.bits.len()) - 4;
        more[off..off + 4].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(decode(&more), Err(Error::CorruptCheckpoint(_))));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(decode(&trailing), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mqpt");
        let m = model(8);
        write_checkpoint(&m, &path).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), m);
    }
}
