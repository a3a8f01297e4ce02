//! NPY array files holding little-endian `f32` latents of shape
//! `(K, C, H, W)` in C order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::latent::{LatentShape, LatentVideo};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), message: message.into() }
}

/// Serializes `z` as a version 1.0 NPY document.
pub fn encode_npy(z: &LatentVideo) -> Vec<u8> {
    let [k, c, h, w] = z.shape().as_array();
    let dict = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({k}, {c}, {h}, {w}), }}");
    // magic + version + u16 length + dict + padding + '\n'
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let header_len = dict.len() + 1 + (ALIGN - unpadded % ALIGN) % ALIGN;
    let mut out = Vec::with_capacity(10 + header_len + z.data().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.resize(10 + header_len - 1, b' ');
    out.push(b'\n');
    for v in z.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses an NPY document. `path` is only used in error messages.
pub fn decode_npy(bytes: &[u8], path: &Path) -> Result<LatentVideo> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(format_err(path, "missing NPY magic bytes"));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(format_err(path, "truncated NPY header"));
            }
            (u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, 12)
        }
        _ => return Err(format_err(path, format!("unsupported NPY version {major}.{minor}"))),
    };
    let header = bytes.get(start..start + header_len).ok_or_else(|| format_err(path, "truncated NPY header"))?;
    let header = std::str::from_utf8(header).map_err(|_| format_err(path, "NPY header is not text"))?;
    let dict = parse_header(header).map_err(|m| format_err(path, m))?;

    match dict.descr.as_str() {
        "<f4" => {}
        ">f4" => return Err(format_err(path, "big-endian float32 ('>f4') is not supported; store the array as '<f4'")),
        other => return Err(format_err(path, format!("unsupported dtype '{other}', expected '<f4'"))),
    }
    if dict.fortran_order {
        return Err(format_err(path, "Fortran-ordered arrays are not supported"));
    }
    let [k, c, h, w]: [usize; 4] = dict
        .shape
        .as_slice()
        .try_into()
        .map_err(|_| format_err(path, format!("expected a 4-d (K, C, H, W) array, got shape {:?}", dict.shape)))?;
    let shape = LatentShape::new(k, c, h, w).map_err(|e| format_err(path, e.to_string()))?;
    let body = &bytes[start + header_len..];
    if body.len() != shape.len() * 4 {
        return Err(format_err(
            path,
            format!("data holds {} bytes, shape {:?} needs {}", body.len(), shape.as_array(), shape.len() * 4),
        ));
    }
    let data = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    LatentVideo::new(shape, data).map_err(|e| format_err(path, e.to_string()))
}

pub fn save_latent(path: impl AsRef<Path>, z: &LatentVideo) -> Result<()> {
    std::fs::write(path, encode_npy(z))?;
    Ok(())
}

pub fn load_latent(path: impl AsRef<Path>) -> Result<LatentVideo> {
    let path = path.as_ref();
    decode_npy(&std::fs::read(path)?, path)
}

#[derive(Debug, Default)]
struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

/// Reads the three keys of the Python-literal header dictionary.
fn parse_header(text: &str) -> std::result::Result<Header, String> {
    let body =
        text.trim().strip_prefix('{').and_then(|s| s.strip_suffix('}')).ok_or("NPY header is not a dictionary")?;
    let mut header = Header::default();
    let (mut seen_descr, mut seen_order, mut seen_shape) = (false, false, false);
    let mut rest = body.trim_start();
    while !rest.is_empty() {
        let (key, after) = take_quoted(rest).ok_or("malformed key in NPY header")?;
        let after = after.trim_start().strip_prefix(':').ok_or("expected ':' in NPY header")?.trim_start();
        rest = match key {
            "descr" => {
                let (v, r) = take_quoted(after).ok_or("descr must be a string")?;
                header.descr = v.to_string();
                seen_descr = true;
                r
            }
            "fortran_order" => {
                let (v, r) = if let Some(r) = after.strip_prefix("True") {
                    (true, r)
                } else if let Some(r) = after.strip_prefix("False") {
                    (false, r)
                } else {
                    return Err("fortran_order must be True or False".into());
                };
                header.fortran_order = v;
                seen_order = true;
                r
            }
            "shape" => {
                let inner = after.strip_prefix('(').ok_or("shape must be a tuple")?;
                let close = inner.find(')').ok_or("unterminated shape tuple")?;
                header.shape = inner[..close]
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<usize>().map_err(|_| format!("bad shape entry '{s}'")))
                    .collect::<std::result::Result<_, _>>()?;
                seen_shape = true;
                &inner[close + 1..]
            }
            other => return Err(format!("unexpected key '{other}' in NPY header")),
        };
        rest = rest.trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }
    if !(seen_descr && seen_order && seen_shape) {
        return Err("NPY header lacks descr, fortran_order or shape".into());
    }
    Ok(header)
}

fn take_quoted(s: &str) -> Option<(&str, &str)> {
    let quote = s.chars().next().filter(|c| *c == '\'' || *c == '"')?;
    let inner = &s[1..];
    let end = inner.find(quote)?;
    Some((&inner[..end], &inner[end + 1..]))
}
