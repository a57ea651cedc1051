//! Binary netpbm images (P5/P6, maxval 255) and the PLSW weight container.
//!
//! PLSW layout, all integers `u32` little-endian:
//!
//! ```text
//! "PLSW" version
//! { name_len name[name_len] rank dims[rank] f32_le[prod(dims)] }*
//! ```
//!
//! The first entry is `meta`, a rank-1 tensor
//! `[d, k, r0, channels, slope, widths...]`; the rest are the generator
//! weights under their canonical names.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorSpec};
use crate::image::Image;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"PLSW";
pub const WEIGHTS_VERSION: u32 = 1;
const META_ENTRY: &str = "meta";
const META_FIXED: usize = 5;
const MAX_RANK: u32 = 8;

fn format_error(kind: &'static str, message: impl Into<String>) -> Error {
    Error::Format {
        kind,
        message: message.into(),
    }
}

// ---------------------------------------------------------------- netpbm

/// Parses a P5 (grayscale) or P6 (RGB) file with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let err = |m: String| format_error("netpbm", m);
    let mut cur = 0usize;
    let magic = bytes.get(0..2).ok_or_else(|| err("file shorter than magic number".into()))?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => return Err(err(format!("unsupported magic {:?}", String::from_utf8_lossy(other)))),
    };
    cur += 2;
    let mut fields = [0usize; 3];
    for (slot, what) in fields.iter_mut().zip(["width", "height", "maxval"]) {
        skip_space_and_comments(bytes, &mut cur);
        let start = cur;
        while cur < bytes.len() && bytes[cur].is_ascii_digit() {
            cur += 1;
        }
        if start == cur {
            return Err(err(format!("missing {what} in header")));
        }
        let text = std::str::from_utf8(&bytes[start..cur]).expect("ascii digits");
        *slot = text.parse().map_err(|_| err(format!("{what} `{text}` out of range")))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(err(format!("zero-sized image {width}x{height}")));
    }
    if maxval != 255 {
        return Err(err(format!("unsupported maxval {maxval}, only 255 is accepted")));
    }
    match bytes.get(cur) {
        Some(b) if b.is_ascii_whitespace() => cur += 1,
        _ => return Err(err("header must end with one whitespace byte".into())),
    }
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| err("image dimensions overflow".into()))?;
    let payload = &bytes[cur..];
    if payload.len() < count {
        return Err(err(format!(
            "truncated payload: expected {count} bytes, found {}",
            payload.len()
        )));
    }
    let plane = width * height;
    let mut data = vec![0.0; count];
    for (p, px) in payload[..count].chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * plane + p] = f64::from(v) / 255.0;
        }
    }
    Image::from_planes(height, width, channels, data)
}

fn skip_space_and_comments(bytes: &[u8], cur: &mut usize) {
    while *cur < bytes.len() {
        match bytes[*cur] {
            b'#' => {
                while *cur < bytes.len() && bytes[*cur] != b'\n' {
                    *cur += 1;
                }
            }
            b if b.is_ascii_whitespace() => *cur += 1,
            _ => return,
        }
    }
}

/// `v ∈ [0,1]` to a byte: clamp, then round half up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode_pnm(image: &Image) -> Vec<u8> {
    let (h, w) = image.dims();
    let channels = image.channels();
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let data = image.data();
    out.reserve(plane * channels);
    for p in 0..plane {
        for c in 0..channels {
            out.push(quantize(data[c * plane + p]));
        }
    }
    out
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Format { kind, message } => format_error(kind, format!("{}: {message}", path.display())),
        other => other,
    })
}

pub fn write_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(image)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- weights

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit the u32 weight format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn push_entry(out: &mut Vec<u8>, name: &str, dims: &[usize], values: impl Iterator<Item = f64>) -> Result<()> {
    push_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    push_u32(out, dims.len())?;
    for &d in dims {
        push_u32(out, d)?;
    }
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

pub fn encode_weights(spec: &GeneratorSpec) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    let c = spec.config();
    let mut meta = vec![
        c.latent_dim as f64,
        c.styles as f64,
        c.base_resolution as f64,
        c.image_channels as f64,
        c.leaky_slope,
    ];
    meta.extend(c.widths.iter().map(|&w| w as f64));
    push_entry(&mut out, META_ENTRY, &[meta.len()], meta.into_iter())?;
    for (name, t) in spec.named_tensors() {
        push_entry(&mut out, &name, t.dims(), t.data().iter().copied())?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    cur: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str, entry: &str) -> Result<&'a [u8]> {
        let end = self.cur.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format_error(
                "weights",
                format!(
                    "entry `{entry}`: truncated {what} (need {n} bytes at offset {}, file has {})",
                    self.cur,
                    self.bytes.len()
                ),
            )
        })?;
        let s = &self.bytes[self.cur..end];
        self.cur = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str, entry: &str) -> Result<usize> {
        let b = self.take(4, what, entry)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn done(&self) -> bool {
        self.cur == self.bytes.len()
    }
}

/// Raw `(name, tensor)` entries of a PLSW file, in file order.
pub fn decode_weight_entries(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, cur: 0 };
    if r.take(4, "magic", "<header>")? != WEIGHTS_MAGIC {
        return Err(format_error("weights", "bad magic, expected `PLSW`"));
    }
    let version = r.u32("version", "<header>")?;
    if version != WEIGHTS_VERSION as usize {
        return Err(format_error(
            "weights",
            format!("version mismatch: file has {version}, reader supports {WEIGHTS_VERSION}"),
        ));
    }
    let mut entries = Vec::new();
    while !r.done() {
        let placeholder = format!("#{}", entries.len());
        let name_len = r.u32("name length", &placeholder)?;
        let name = std::str::from_utf8(r.take(name_len, "name", &placeholder)?)
            .map_err(|_| format_error("weights", format!("entry {placeholder}: name is not UTF-8")))?
            .to_owned();
        let rank = r.u32("rank", &name)?;
        if rank as u32 > MAX_RANK {
            return Err(format_error("weights", format!("entry `{name}`: rank {rank} exceeds {MAX_RANK}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims", &name)?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| format_error("weights", format!("entry `{name}`: dims {dims:?} overflow")))?;
        let payload = r.take(count, "payload", &name)?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        let tensor = Tensor::new(dims, data)
            .map_err(|e| format_error("weights", format!("entry `{name}`: {e}")))?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

fn config_from_meta(meta: &Tensor) -> Result<GeneratorConfig> {
    let v = meta.data();
    let bad = |m: String| format_error("weights", format!("entry `{META_ENTRY}`: {m}"));
    if meta.dims().len() != 1 || v.len() < META_FIXED + 1 {
        return Err(bad(format!("expected a vector of at least {} values", META_FIXED + 1)));
    }
    let count = |x: f64, what: &str| -> Result<usize> {
        if x >= 0.0 && x.fract() == 0.0 && x < f64::from(u32::MAX) {
            Ok(x as usize)
        } else {
            Err(bad(format!("{what} {x} is not a count")))
        }
    };
    let config = GeneratorConfig {
        latent_dim: count(v[0], "latent dim")?,
        styles: count(v[1], "style count")?,
        base_resolution: count(v[2], "base resolution")?,
        image_channels: count(v[3], "channels")?,
        leaky_slope: v[4],
        widths: v[META_FIXED..]
            .iter()
            .map(|&w| count(w, "width"))
            .collect::<Result<_>>()?,
    };
    config.validate().map_err(|e| bad(e.to_string()))?;
    Ok(config)
}

/// Parses a PLSW file into a generator; checks every shape and the
/// conditioning of the mapping matrix.
pub fn decode_weights(bytes: &[u8]) -> Result<GeneratorSpec> {
    let mut entries = decode_weight_entries(bytes)?;
    if entries.is_empty() {
        return Err(format_error(
            "weights",
            "no tensors: a generator needs mapping and synthesis weights",
        ));
    }
    let meta_pos = entries
        .iter()
        .position(|(n, _)| n == META_ENTRY)
        .ok_or_else(|| format_error("weights", format!("missing `{META_ENTRY}` entry")))?;
    let (_, meta) = entries.remove(meta_pos);
    let config = config_from_meta(&meta)?;
    GeneratorSpec::from_named(config, entries)
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<GeneratorSpec> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

pub fn write_weights(path: impl AsRef<Path>, spec: &GeneratorSpec) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(spec)?).map_err(|e| Error::io(path, e))
}
