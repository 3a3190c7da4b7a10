//! Binary checkpoints for models and compressed models, JSON for everything
//! else. The byte layout is described in `docs/checkpoint-format.md`.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::compression::{ClusterLayer, CompressedModel, CompressionConstraint, CompressionKind};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{FcnModel, Layer};

pub const MAGIC: &[u8; 8] = b"CAUDCKPT";
pub const FORMAT_VERSION: u16 = 1;

const PAYLOAD_MODEL: u8 = 0;
const PAYLOAD_COMPRESSED: u8 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Default)]
struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Checks magic, version and digest; returns the payload kind and a decoder
/// positioned after the header.
fn open(bytes: &[u8]) -> Result<(u8, Decoder<'_>)> {
    if bytes.len() < MAGIC.len() + 3 + DIGEST_LEN {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("digest mismatch".into()));
    }
    let mut d = Decoder { bytes: body, pos: 0 };
    if d.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = d.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let kind = d.u8()?;
    Ok((kind, d))
}

fn header(e: &mut Encoder, payload: u8) {
    e.buf.extend_from_slice(MAGIC);
    e.u16(FORMAT_VERSION);
    e.u8(payload);
}

fn put_model(e: &mut Encoder, model: &FcnModel) -> Result<()> {
    let sizes = model.layer_sizes();
    e.u32(model.layers().len())?;
    for s in sizes {
        e.u32(s)?;
    }
    e.f64s(model.dropout_rates());
    for layer in model.layers() {
        e.f64s(layer.weights.as_slice());
        e.f64s(&layer.bias);
    }
    Ok(())
}

fn get_model(d: &mut Decoder<'_>) -> Result<FcnModel> {
    let n = d.u32()?;
    if n == 0 {
        return Err(Error::Checkpoint("model with no layers".into()));
    }
    let sizes = (0..=n).map(|_| d.u32()).collect::<Result<Vec<_>>>()?;
    let dropout = d.f64s(n - 1)?;
    let mut layers = Vec::with_capacity(n);
    for w in sizes.windows(2) {
        let weights = Matrix::from_vec(w[1], w[0], d.f64s(w[0] * w[1])?)?;
        let bias = d.f64s(w[1])?;
        layers.push(Layer { weights, bias });
    }
    FcnModel::from_layers(layers, dropout).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn encode_model(model: &FcnModel) -> Result<Vec<u8>> {
    let mut e = Encoder::default();
    header(&mut e, PAYLOAD_MODEL);
    put_model(&mut e, model)?;
    Ok(e.finish())
}

pub fn decode_model(bytes: &[u8]) -> Result<FcnModel> {
    let (kind, mut d) = open(bytes)?;
    if kind != PAYLOAD_MODEL {
        return Err(Error::Checkpoint("not a plain model checkpoint".into()));
    }
    let model = get_model(&mut d)?;
    trailing(&d)?;
    Ok(model)
}

fn trailing(d: &Decoder<'_>) -> Result<()> {
    if d.pos != d.bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected trailing bytes",
            d.bytes.len() - d.pos
        )));
    }
    Ok(())
}

pub fn encode_compressed(cm: &CompressedModel) -> Result<Vec<u8>> {
    cm.constraint.check_shape(&cm.model)?;
    let mut e = Encoder::default();
    header(&mut e, PAYLOAD_COMPRESSED);
    put_model(&mut e, &cm.model)?;
    match cm.kind {
        CompressionKind::Prune { sparsity } => {
            e.u8(0);
            e.f64s(&[sparsity]);
        }
        CompressionKind::Int8 => e.u8(1),
        CompressionKind::Cluster { clusters } => {
            e.u8(2);
            e.u32(clusters)?;
        }
    }
    e.i64(cm.degree_tag());
    match &cm.constraint {
        CompressionConstraint::PruneMask(masks) => {
            e.u8(0);
            for mask in masks {
                let mut packed = vec![0u8; mask.len().div_ceil(8)];
                for (i, _) in mask.iter().enumerate().filter(|(_, &keep)| keep) {
                    packed[i / 8] |= 1 << (i % 8);
                }
                e.buf.extend_from_slice(&packed);
            }
        }
        CompressionConstraint::Cluster(layers) => {
            e.u8(1);
            for layer in layers {
                match layer {
                    None => e.u8(0),
                    Some(cl) => {
                        e.u8(1);
                        e.u32(cl.centroids.len())?;
                        e.f64s(&cl.centroids);
                        for &a in &cl.assignments {
                            e.u16(a);
                        }
                    }
                }
            }
        }
        CompressionConstraint::FakeQuant(scales) => {
            e.u8(2);
            e.f64s(scales);
        }
    }
    Ok(e.finish())
}

/// Decodes a compressed model and checks that its weights satisfy the
/// stored constraint exactly.
pub fn decode_compressed(bytes: &[u8]) -> Result<CompressedModel> {
    let (kind, mut d) = open(bytes)?;
    if kind != PAYLOAD_COMPRESSED {
        return Err(Error::Checkpoint("not a compressed model checkpoint".into()));
    }
    let model = get_model(&mut d)?;
    let kind = match d.u8()? {
        0 => CompressionKind::Prune { sparsity: d.f64()? },
        1 => CompressionKind::Int8,
        2 => CompressionKind::Cluster { clusters: d.u32()? },
        op => return Err(Error::Checkpoint(format!("unknown compression op {op}"))),
    };
    let degree = d.i64()?;
    if degree != kind.degree_tag() {
        return Err(Error::Checkpoint(format!(
            "degree tag {degree} does not match {}",
            kind.tag()
        )));
    }
    let sizes: Vec<usize> = model.layers().iter().map(|l| l.weights.as_slice().len()).collect();
    let constraint = match d.u8()? {
        0 => CompressionConstraint::PruneMask(
            sizes
                .iter()
                .map(|&n| {
                    let packed = d.take(n.div_ceil(8))?;
                    Ok((0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect())
                })
                .collect::<Result<_>>()?,
        ),
        1 => CompressionConstraint::Cluster(
            sizes
                .iter()
                .map(|&n| {
                    Ok(match d.u8()? {
                        0 => None,
                        _ => {
                            let k = d.u32()?;
                            let centroids = d.f64s(k)?;
                            let assignments = (0..n).map(|_| d.u16()).collect::<Result<_>>()?;
                            Some(ClusterLayer {
                                assignments,
                                centroids,
                            })
                        }
                    })
                })
                .collect::<Result<_>>()?,
        ),
        2 => CompressionConstraint::FakeQuant(d.f64s(sizes.len())?),
        t => return Err(Error::Checkpoint(format!("unknown constraint tag {t}"))),
    };
    trailing(&d)?;
    let cm = CompressedModel {
        model,
        constraint,
        kind,
    };
    cm.verify().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(cm)
}

pub fn write_model(path: impl AsRef<Path>, model: &FcnModel) -> Result<()> {
    fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<FcnModel> {
    decode_model(&fs::read(path)?)
}

pub fn write_compressed(path: impl AsRef<Path>, cm: &CompressedModel) -> Result<()> {
    fs::write(path, encode_compressed(cm)?)?;
    Ok(())
}

pub fn read_compressed(path: impl AsRef<Path>) -> Result<CompressedModel> {
    decode_compressed(&fs::read(path)?)
}

/// Pretty JSON, used for meta-classifiers, splits and reports.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
