//! `FLNT1` checkpoints.
//!
//! Layout: the magic line `FLNT1\n`, a single-line JSON header terminated by
//! `\n`, then one blob per parameter tensor in layer order. Each blob is a
//! little-endian `u64` byte length followed by that many bytes of
//! little-endian binary32 values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HeadDims, HeadKind, Layer, LayerSpec, ModelGraph, ModelMeta};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8] = b"FLNT1\n";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: String,
    input_shape: Vec<usize>,
    head: HeadKind,
    dims: HeadDims,
    layers: Vec<LayerSpec>,
    seed: u64,
    epoch: usize,
}

pub fn write_checkpoint(model: &ModelGraph, mut out: impl Write) -> Result<()> {
    let header = Header {
        arch: model.arch().to_string(),
        input_shape: model.input_shape().to_vec(),
        head: model.head(),
        dims: model.dims(),
        layers: model.layer_specs(),
        seed: model.meta.seed,
        epoch: model.meta.epoch,
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    serde_json::to_writer(&mut buf, &header)?;
    buf.push(b'\n');
    for t in model.params() {
        buf.extend_from_slice(&((t.len() * 4) as u64).to_le_bytes());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(|e| Error::io("<checkpoint>", e))
}

pub fn read_checkpoint(mut input: impl Read) -> Result<ModelGraph> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<checkpoint>", e))?;
    parse(&bytes)
}

pub fn save_checkpoint(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes)
}

fn parse(bytes: &[u8]) -> Result<ModelGraph> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Format("missing FLNT1 magic".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("unterminated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(&rest[..nl])
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    let mut blobs = &rest[nl + 1..];

    let mut layers = Vec::with_capacity(header.layers.len());
    for spec in &header.layers {
        let mut params = Vec::with_capacity(spec.params.len());
        for shape in &spec.params {
            let (len_bytes, tail) = blobs
                .split_first_chunk::<8>()
                .ok_or_else(|| Error::Format("truncated parameter blob length".into()))?;
            let len = u64::from_le_bytes(*len_bytes) as usize;
            let want = numel(shape) * 4;
            if len != want {
                return Err(Error::Format(format!(
                    "parameter blob of {len} bytes for shape {shape:?} ({want} bytes)"
                )));
            }
            if tail.len() < len {
                return Err(Error::Format("truncated parameter blob".into()));
            }
            let data = tail[..len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push(Tensor::new(shape.clone(), data)?);
            blobs = &tail[len..];
        }
        layers.push(Layer::from_spec(spec, params)?);
    }
    if !blobs.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last parameter blob",
            blobs.len()
        )));
    }
    let mut model = ModelGraph::new(header.arch, header.input_shape, layers, header.head)
        .map_err(|e| Error::Format(format!("checkpoint describes an invalid model: {e}")))?;
    if model.dims() != header.dims {
        return Err(Error::Format("header dims disagree with the layer list".into()));
    }
    model.meta = ModelMeta {
        seed: header.seed,
        epoch: header.epoch,
    };
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadSpec;
    use crate::tensor::SeededRng;

    fn model() -> ModelGraph {
        let mut rng = SeededRng::new(4, 0);
        let mut m = ModelGraph::cnn_s(&[1, 10, 10], 3, HeadSpec::Split { latent: 5 }, &mut rng).unwrap();
        m.meta = ModelMeta { seed: 4, epoch: 2 };
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, m);
        let x = Tensor::full(&[1, 1, 10, 10], 0.3);
        assert!(m.forward(&x).unwrap().bits_eq(&back.forward(&x).unwrap()));
    }

    #[test]
    fn truncated_file_is_format_error() {
        let mut buf = Vec::new();
        write_checkpoint(&model(), &mut buf).unwrap();
        for cut in [3, 20, buf.len() - 1] {
            assert!(matches!(read_checkpoint(&buf[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut buf = Vec::new();
        write_checkpoint(&model(), &mut buf).unwrap();
        buf[4] = b'2';
        assert!(matches!(read_checkpoint(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn epoch_edit_leaves_parameters() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let text = String::from_utf8_lossy(&buf).into_owned();
        assert!(text.contains("\"epoch\":2"));
        let edited: Vec<u8> = {
            let pos = buf.windows(9).position(|w| w == b"\"epoch\":2").unwrap();
            let mut e = buf[..pos].to_vec();
            e.extend_from_slice(b"\"epoch\":117");
            e.extend_from_slice(&buf[pos + 9..]);
            e
        };
        let back = read_checkpoint(&edited[..]).unwrap();
        assert_eq!(back.meta.epoch, 117);
        assert!(back.params().zip(m.params()).all(|(a, b)| a.bits_eq(b)));
    }
}
