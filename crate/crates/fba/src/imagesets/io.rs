//! Image file I/O: binary PNM (P5 graymap, P6 pixmap) for interoperability
//! and a raw little-endian tensor format for lossless storage.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TENSOR_MAGIC: &[u8; 6] = b"FBTEN\0";
const TENSOR_VERSION: u32 = 1;

/// Writes a tensor as magic + version + rank + dims + f32 LE payload.
pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + t.len() * 4);
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    buf.push(t.rank() as u8);
    for d in t.shape() {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let pstr = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(pstr.clone(), e))?;
    if bytes.len() < 11 || &bytes[0..6] != TENSOR_MAGIC {
        return Err(Error::BadMagic { path: pstr });
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(Error::VersionMismatch { path: pstr, found: version, expected: TENSOR_VERSION });
    }
    let rank = bytes[10] as usize;
    let dims_end = 11 + rank * 4;
    if bytes.len() < dims_end {
        return Err(Error::TruncatedPayload { path: pstr, tensor: "shape".into() });
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(u32::from_le_bytes(bytes[11 + i * 4..15 + i * 4].try_into().unwrap()) as usize);
    }
    let n: usize = shape.iter().product();
    if bytes.len() != dims_end + n * 4 {
        return Err(Error::TruncatedPayload { path: pstr, tensor: "data".into() });
    }
    let mut data = Vec::with_capacity(n);
    for chunk in bytes[dims_end..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Tensor::new(shape, data)
}

/// Writes `[1,H,W]` tensors as binary P5 and `[3,H,W]` as binary P6, with
/// values scaled from [0,1] to 8-bit.
pub fn save_pnm(path: &Path, image: &Tensor) -> Result<()> {
    let pstr = path.display().to_string();
    if image.rank() != 3 {
        return Err(Error::InvalidArgument {
            op: "save_pnm",
            detail: format!("image must be rank 3, got {:?}", image.shape()),
        });
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let tag = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::InvalidArgument {
                op: "save_pnm",
                detail: format!("PNM supports 1 or 3 channels, got {c}"),
            })
        }
    };
    let mut buf = format!("{tag}\n{w} {h}\n255\n").into_bytes();
    // PNM is pixel-interleaved; the tensor is channel-major.
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = (image.at3(ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                buf.push(v);
            }
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(pstr.clone(), e))?;
    file.write_all(&buf).map_err(|e| Error::io(pstr, e))
}

pub fn load_pnm(path: &Path) -> Result<Tensor> {
    let pstr = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(pstr.clone(), e))?;
    let channels = match bytes.get(0..2) {
        Some(b"P5") => 1usize,
        Some(b"P6") => 3usize,
        _ => return Err(Error::BadMagic { path: pstr }),
    };

    // Header tokens (width, height, maxval) separated by whitespace, with
    // '#' comments allowed.
    let mut pos = 2usize;
    let mut tokens = Vec::with_capacity(3);
    while tokens.len() < 3 && pos < bytes.len() {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        tokens.push(
            std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| Error::FormatInconsistency {
                    path: pstr.clone(),
                    detail: "bad header token".into(),
                })?,
        );
    }
    if tokens.len() < 3 {
        return Err(Error::TruncatedPayload { path: pstr, tensor: "header".into() });
    }
    let (w, h, maxval) = (tokens[0], tokens[1], tokens[2]);
    if maxval != 255 {
        return Err(Error::FormatInconsistency {
            path: pstr,
            detail: format!("only maxval 255 supported, got {maxval}"),
        });
    }
    pos += 1; // single whitespace byte after maxval
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(Error::TruncatedPayload { path: pstr, tensor: "pixels".into() });
    }
    let mut out = Tensor::zeros(vec![channels, h, w]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..channels {
                let v = bytes[pos + (y * w + x) * channels + ch] as f32 / 255.0;
                out.set3(ch, y, x, v);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn raw_tensor_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = Tensor::new(
            vec![3, 5, 4],
            (0..60).map(|_| rng.random_range(-2.0f32..2.0)).collect(),
        )
        .unwrap();
        let path = dir.path().join("t.ft");
        save_tensor(&path, &t).unwrap();
        let back = load_tensor(&path).unwrap();
        assert!(t.bits_eq(&back));
    }

    #[test]
    fn raw_tensor_truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::filled(vec![2, 2], 1.0);
        let path = dir.path().join("t.ft");
        save_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load_tensor(&path), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn pnm_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for c in [1usize, 3] {
            let t = Tensor::new(
                vec![c, 6, 7],
                (0..c * 42).map(|_| rng.random_range(0.0f32..1.0)).collect(),
            )
            .unwrap();
            let path = dir.path().join(format!("img{c}.pnm"));
            save_pnm(&path, &t).unwrap();
            let back = load_pnm(&path).unwrap();
            assert_eq!(back.shape(), t.shape());
            for (a, b) in t.data().iter().zip(back.data().iter()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn pnm_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pnm");
        std::fs::write(&path, b"P9\n2 2\n255\nxxxx").unwrap();
        assert!(matches!(load_pnm(&path), Err(Error::BadMagic { .. })));
    }
}
