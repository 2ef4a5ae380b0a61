//! Bit-exact weight file format.
//!
//! Layout:
//!
//! ```text
//! bytes 0..8    magic "FBANETWT"
//! bytes 8..12   format version, u32 little-endian
//! bytes 12..20  header length in bytes, u64 little-endian
//! ...           UTF-8 header text (layer list, tensor table, meta lines)
//! ...           payload: tensor data, 32-bit little-endian floats,
//!               in tensor-table order
//! ```
//!
//! The header is line oriented:
//!
//! ```text
//! input 3 32 32
//! layer 0 conv in=3 out=8 kh=3 kw=3 stride=1 pad=1
//! layer 1 relu
//! ...
//! tensor layer0.weight dims=8,3,3,3 offset=0 len=216
//! tensor layer0.bias dims=8 offset=216 len=8
//! meta seed=42
//! end
//! ```
//!
//! Offsets and lengths are in elements relative to the payload start. Saving
//! then loading reproduces every tensor bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{LayerParams, LayerSpec, NetworkSpec, Weights};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FBANETWT";
const VERSION: u32 = 1;

fn layer_line(i: usize, layer: &LayerSpec) -> String {
    match layer {
        LayerSpec::Conv { in_channels, out_channels, kernel, stride, pad } => format!(
            "layer {i} conv in={in_channels} out={out_channels} kh={} kw={} stride={stride} pad={pad}",
            kernel.0, kernel.1
        ),
        LayerSpec::Relu => format!("layer {i} relu"),
        LayerSpec::MaxPool { k, stride } => format!("layer {i} maxpool k={k} stride={stride}"),
        LayerSpec::Fc { in_dim, out_dim } => format!("layer {i} fc in={in_dim} out={out_dim}"),
        LayerSpec::Softmax => format!("layer {i} softmax"),
    }
}

/// Serializes a network and its weights, plus free-form provenance metadata.
pub fn save_weights(
    path: &Path,
    spec: &NetworkSpec,
    weights: &Weights,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    spec.validate()?;
    weights.validate_against(spec)?;

    let mut header = String::new();
    header.push_str(&format!(
        "input {} {} {}\n",
        spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]
    ));
    for (i, layer) in spec.layers.iter().enumerate() {
        header.push_str(&layer_line(i, layer));
        header.push('\n');
    }
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (i, params) in weights.params.iter().enumerate() {
        if let Some(p) = params {
            tensors.push((format!("layer{i}.weight"), &p.weight));
            tensors.push((format!("layer{i}.bias"), &p.bias));
        }
    }
    let mut offset = 0usize;
    for (name, t) in &tensors {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!(
            "tensor {name} dims={} offset={offset} len={}\n",
            dims.join(","),
            t.len()
        ));
        offset += t.len();
    }
    for (k, v) in meta {
        header.push_str(&format!("meta {k}={v}\n"));
    }
    header.push_str("end\n");

    let mut buf = Vec::with_capacity(20 + header.len() + offset * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    for (_, t) in &tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

struct TensorEntry {
    name: String,
    dims: Vec<usize>,
    offset: usize,
    len: usize,
}

fn parse_kv<'a>(part: Option<&'a str>, key: &str, path: &str) -> Result<&'a str> {
    part.and_then(|p| p.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| Error::FormatInconsistency {
            path: path.to_string(),
            detail: format!("expected '{key}=...'"),
        })
}

fn parse_usize(s: &str, path: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::FormatInconsistency {
        path: path.to_string(),
        detail: format!("bad integer '{s}'"),
    })
}

/// Loads a weight file, verifying magic, version, header consistency and
/// payload completeness. Returns the spec, the weights and the meta lines.
pub fn load_weights(path: &Path) -> Result<(NetworkSpec, Weights, BTreeMap<String, String>)> {
    let pstr = path.display().to_string();
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(pstr.clone(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(pstr.clone(), e))?;

    if bytes.len() < 20 || &bytes[0..8] != MAGIC {
        return Err(Error::BadMagic { path: pstr });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch { path: pstr, found: version, expected: VERSION });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + header_len {
        return Err(Error::TruncatedPayload { path: pstr, tensor: "header".into() });
    }
    let header = std::str::from_utf8(&bytes[20..20 + header_len]).map_err(|_| {
        Error::FormatInconsistency { path: pstr.clone(), detail: "header is not UTF-8".into() }
    })?;
    let payload = &bytes[20 + header_len..];

    let mut input_shape: Option<[usize; 3]> = None;
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut entries: Vec<TensorEntry> = Vec::new();
    let mut meta = BTreeMap::new();
    let mut saw_end = false;
    let inconsistent = |detail: String| Error::FormatInconsistency { path: pstr.clone(), detail };

    for line in header.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("input") => {
                let dims: Vec<usize> = parts
                    .map(|p| parse_usize(p, &pstr))
                    .collect::<Result<_>>()?;
                if dims.len() != 3 {
                    return Err(inconsistent(format!("input line has {} dims, expected 3", dims.len())));
                }
                input_shape = Some([dims[0], dims[1], dims[2]]);
            }
            Some("layer") => {
                let idx = parse_usize(
                    parts.next().ok_or_else(|| inconsistent("layer line without index".into()))?,
                    &pstr,
                )?;
                if idx != layers.len() {
                    return Err(inconsistent(format!(
                        "layer index {idx} out of order, expected {}",
                        layers.len()
                    )));
                }
                let kind = parts.next().ok_or_else(|| inconsistent("layer line without kind".into()))?;
                let layer = match kind {
                    "conv" => LayerSpec::Conv {
                        in_channels: parse_usize(parse_kv(parts.next(), "in", &pstr)?, &pstr)?,
                        out_channels: parse_usize(parse_kv(parts.next(), "out", &pstr)?, &pstr)?,
                        kernel: (
                            parse_usize(parse_kv(parts.next(), "kh", &pstr)?, &pstr)?,
                            parse_usize(parse_kv(parts.next(), "kw", &pstr)?, &pstr)?,
                        ),
                        stride: parse_usize(parse_kv(parts.next(), "stride", &pstr)?, &pstr)?,
                        pad: parse_usize(parse_kv(parts.next(), "pad", &pstr)?, &pstr)?,
                    },
                    "relu" => LayerSpec::Relu,
                    "maxpool" => LayerSpec::MaxPool {
                        k: parse_usize(parse_kv(parts.next(), "k", &pstr)?, &pstr)?,
                        stride: parse_usize(parse_kv(parts.next(), "stride", &pstr)?, &pstr)?,
                    },
                    "fc" => LayerSpec::Fc {
                        in_dim: parse_usize(parse_kv(parts.next(), "in", &pstr)?, &pstr)?,
                        out_dim: parse_usize(parse_kv(parts.next(), "out", &pstr)?, &pstr)?,
                    },
                    "softmax" => LayerSpec::Softmax,
                    other => return Err(inconsistent(format!("unknown layer kind '{other}'"))),
                };
                layers.push(layer);
            }
            Some("tensor") => {
                let name = parts
                    .next()
                    .ok_or_else(|| inconsistent("tensor line without name".into()))?
                    .to_string();
                let dims: Vec<usize> = parse_kv(parts.next(), "dims", &pstr)?
                    .split(',')
                    .map(|d| parse_usize(d, &pstr))
                    .collect::<Result<_>>()?;
                let offset = parse_usize(parse_kv(parts.next(), "offset", &pstr)?, &pstr)?;
                let len = parse_usize(parse_kv(parts.next(), "len", &pstr)?, &pstr)?;
                if dims.iter().product::<usize>() != len {
                    return Err(inconsistent(format!(
                        "tensor {name}: dims {dims:?} disagree with len {len}"
                    )));
                }
                entries.push(TensorEntry { name, dims, offset, len });
            }
            Some("meta") => {
                let rest = line.trim_start_matches("meta").trim_start();
                if let Some((k, v)) = rest.split_once('=') {
                    meta.insert(k.to_string(), v.to_string());
                }
            }
            Some("end") => {
                saw_end = true;
                break;
            }
            Some(other) => return Err(inconsistent(format!("unknown header line '{other}'"))),
            None => {}
        }
    }
    if !saw_end {
        return Err(inconsistent("header missing 'end' line".into()));
    }
    let input_shape = input_shape.ok_or_else(|| inconsistent("header missing 'input' line".into()))?;
    let spec = NetworkSpec { input_shape, layers };

    // Read the payload tensor by tensor, naming the victim on truncation.
    let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut expected_total = 0usize;
    for e in &entries {
        let start = e.offset * 4;
        let stop = start + e.len * 4;
        expected_total = expected_total.max(stop);
        if stop > payload.len() {
            return Err(Error::TruncatedPayload { path: pstr, tensor: e.name.clone() });
        }
        let mut data = Vec::with_capacity(e.len);
        for chunk in payload[start..stop].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let t = Tensor::new(e.dims.clone(), data)
            .map_err(|err| inconsistent(format!("tensor {}: {err}", e.name)))?;
        by_name.insert(e.name.clone(), t);
    }
    if payload.len() != expected_total {
        return Err(inconsistent(format!(
            "payload is {} bytes, tensor table describes {expected_total}",
            payload.len()
        )));
    }

    let mut params: Vec<Option<LayerParams>> = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv { .. } | LayerSpec::Fc { .. } => {
                let weight = by_name
                    .remove(&format!("layer{i}.weight"))
                    .ok_or_else(|| inconsistent(format!("missing tensor layer{i}.weight")))?;
                let bias = by_name
                    .remove(&format!("layer{i}.bias"))
                    .ok_or_else(|| inconsistent(format!("missing tensor layer{i}.bias")))?;
                params.push(Some(LayerParams { weight, bias }));
            }
            _ => params.push(None),
        }
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(inconsistent(format!("tensor '{extra}' does not belong to any layer")));
    }

    let weights = Weights { params };
    spec.validate()
        .and_then(|_| weights.validate_against(&spec))
        .map_err(|e| inconsistent(format!("loaded network is inconsistent: {e}")))?;
    Ok((spec, weights, meta))
}
