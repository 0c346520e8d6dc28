//! Cube file formats.
//!
//! The native format is one line of JSON followed by the raw payload:
//!
//! ```text
//! {"height":H,"width":W,"bands":C,"dtype":"f32le","layout":"bsq",...}\n
//! <H·W·C little-endian f32 values, band-sequential>
//! ```
//!
//! Raw band-sequential files are read through an ENVI-style `.hdr` sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::cube::{HsiCube, META_NORM_MAX, META_NORM_MIN};
use crate::error::{Error, Result};

pub const META_SOURCE: &str = "source";
pub const META_DTYPE: &str = "dtype";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CubeFormat {
    Native,
    RawBsq,
}

impl std::str::FromStr for CubeFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" => Ok(CubeFormat::Native),
            "raw-bsq" | "raw" | "bsq" => Ok(CubeFormat::RawBsq),
            other => Err(Error::Config(format!("unknown cube format `{other}`"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NativeHeader {
    height: usize,
    width: usize,
    bands: usize,
    dtype: String,
    layout: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
}

pub fn load_cube(path: impl AsRef<Path>, format: CubeFormat) -> Result<HsiCube> {
    match format {
        CubeFormat::Native => load_native(path.as_ref()),
        CubeFormat::RawBsq => load_raw_bsq(path.as_ref()),
    }
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let (h, w, c) = cube.dims();
    let parse = |k: &str| cube.meta.get(k).and_then(|v| v.parse::<f64>().ok());
    let header = NativeHeader {
        height: h,
        width: w,
        bands: c,
        dtype: "f32le".into(),
        layout: "bsq".into(),
        min: parse(META_NORM_MIN),
        max: parse(META_NORM_MAX),
        meta: cube.meta.clone(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    buf.reserve(h * w * c * 4);
    for b in 0..c {
        for v in cube.band(b).iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedHeader { path: path.to_path_buf(), reason: reason.into() }
}

fn load_native(path: &Path) -> Result<HsiCube> {
    let bytes = fs::read(path)?;
    let split = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| malformed(path, "no header line"))?;
    let header: NativeHeader =
        serde_json::from_slice(&bytes[..split]).map_err(|e| malformed(path, e.to_string()))?;
    if header.dtype != "f32le" || header.layout != "bsq" {
        return Err(malformed(path, format!("unsupported dtype/layout {}/{}", header.dtype, header.layout)));
    }
    let values = decode_bsq(&bytes[split + 1..], header.height, header.width, header.bands, RawType::F32, false)?;
    let mut cube = HsiCube::new(values)?;
    cube.meta = header.meta;
    if let Some(v) = header.min {
        cube.meta.entry(META_NORM_MIN.into()).or_insert_with(|| v.to_string());
    }
    if let Some(v) = header.max {
        cube.meta.entry(META_NORM_MAX.into()).or_insert_with(|| v.to_string());
    }
    cube.meta.entry(META_SOURCE.into()).or_insert_with(|| path.display().to_string());
    Ok(cube)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RawType {
    U8,
    I16,
    U16,
    F32,
    F64,
}

impl RawType {
    fn from_envi(code: u32) -> Option<Self> {
        Some(match code {
            1 => RawType::U8,
            2 => RawType::I16,
            4 => RawType::F32,
            5 => RawType::F64,
            12 => RawType::U16,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            RawType::U8 => 1,
            RawType::I16 | RawType::U16 => 2,
            RawType::F32 => 4,
            RawType::F64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            RawType::U8 => "u8",
            RawType::I16 => "i16",
            RawType::U16 => "u16",
            RawType::F32 => "f32",
            RawType::F64 => "f64",
        }
    }

    fn decode(self, b: &[u8], big_endian: bool) -> f32 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let mut arr = [0u8; $n];
                arr.copy_from_slice(b);
                if big_endian {
                    <$t>::from_be_bytes(arr)
                } else {
                    <$t>::from_le_bytes(arr)
                }
            }};
        }
        match self {
            RawType::U8 => b[0] as f32,
            RawType::I16 => num!(i16, 2) as f32,
            RawType::U16 => num!(u16, 2) as f32,
            RawType::F32 => num!(f32, 4),
            RawType::F64 => num!(f64, 8) as f32,
        }
    }
}

fn decode_bsq(payload: &[u8], h: usize, w: usize, c: usize, ty: RawType, big_endian: bool) -> Result<Array3<f32>> {
    let expected = h * w * c;
    if payload.len() != expected * ty.size() {
        return Err(Error::PayloadSize { expected, actual: payload.len() });
    }
    let mut out = Array3::zeros((h, w, c));
    for (i, chunk) in payload.chunks_exact(ty.size()).enumerate() {
        let (b, rest) = (i / (h * w), i % (h * w));
        let (y, x) = (rest / w, rest % w);
        let value = ty.decode(chunk, big_endian);
        if !value.is_finite() {
            return Err(Error::NonFinite { row: y, col: x, band: b, value });
        }
        out[[y, x, b]] = value;
    }
    Ok(out)
}

/// Locates the ENVI header next to a raw payload: `<file>.hdr`, then the
/// file name with its extension replaced by `.hdr`.
pub fn sidecar_path(path: &Path) -> Option<PathBuf> {
    let mut appended = path.as_os_str().to_owned();
    appended.push(".hdr");
    let appended = PathBuf::from(appended);
    if appended.exists() {
        return Some(appended);
    }
    let replaced = path.with_extension("hdr");
    (replaced != path && replaced.exists()).then_some(replaced)
}

struct EnviHeader {
    lines: usize,
    samples: usize,
    bands: usize,
    ty: RawType,
    big_endian: bool,
    offset: usize,
}

fn parse_envi(text: &str, path: &Path) -> Result<EnviHeader> {
    let mut fields = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.eq_ignore_ascii_case("envi") {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
    }
    let num = |key: &str, default: Option<usize>| -> Result<usize> {
        match fields.get(key) {
            Some(v) => v.parse().map_err(|_| malformed(path, format!("`{key}` is not an integer: {v}"))),
            None => default.ok_or_else(|| malformed(path, format!("missing `{key}`"))),
        }
    };
    let (lines, samples, bands) = (num("lines", None)?, num("samples", None)?, num("bands", None)?);
    if lines == 0 || samples == 0 || bands == 0 {
        return Err(malformed(path, "zero-sized dimension"));
    }
    let code = num("data type", Some(4))?;
    let ty = RawType::from_envi(code as u32).ok_or_else(|| malformed(path, format!("unsupported data type {code}")))?;
    if let Some(il) = fields.get("interleave") {
        if !il.eq_ignore_ascii_case("bsq") {
            return Err(malformed(path, format!("interleave `{il}` is not bsq")));
        }
    }
    Ok(EnviHeader {
        lines,
        samples,
        bands,
        ty,
        big_endian: num("byte order", Some(0))? == 1,
        offset: num("header offset", Some(0))?,
    })
}

fn load_raw_bsq(path: &Path) -> Result<HsiCube> {
    let hdr_path = sidecar_path(path).ok_or_else(|| malformed(path, "no .hdr sidecar found"))?;
    let header = parse_envi(&fs::read_to_string(&hdr_path)?, &hdr_path)?;
    let bytes = fs::read(path)?;
    if bytes.len() < header.offset {
        return Err(Error::PayloadSize { expected: header.lines * header.samples * header.bands, actual: bytes.len() });
    }
    let data = decode_bsq(
        &bytes[header.offset..],
        header.lines,
        header.samples,
        header.bands,
        header.ty,
        header.big_endian,
    )?;
    let mut cube = HsiCube::new(data)?;
    cube.meta.insert(META_SOURCE.into(), path.display().to_string());
    cube.meta.insert(META_DTYPE.into(), header.ty.name().into());
    Ok(cube)
}

/// Writes a little-endian f32 band-sequential payload plus its `.hdr` sidecar.
pub fn save_raw_bsq(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = cube.dims();
    let mut buf = Vec::with_capacity(h * w * c * 4);
    for b in 0..c {
        for v in cube.band(b).iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    let mut hdr = path.as_os_str().to_owned();
    hdr.push(".hdr");
    fs::write(
        hdr,
        format!("ENVI\nsamples = {w}\nlines = {h}\nbands = {c}\nheader offset = 0\ndata type = 4\ninterleave = bsq\nbyte order = 0\n"),
    )?;
    Ok(())
}

/// RGB composite of three bands, values clamped from `[0, 1]` to 8 bits.
pub fn false_color(cube: &HsiCube, rgb: [usize; 3]) -> Result<RgbImage> {
    if let Some(&b) = rgb.iter().find(|&&b| b >= cube.bands()) {
        return Err(Error::Image(format!("band {b} out of range for {} bands", cube.bands())));
    }
    let (h, w) = cube.spatial();
    let to8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb(rgb.map(|b| to8(cube.get(y, x, b))))
    }))
}

pub fn save_false_color_png(cube: &HsiCube, rgb: [usize; 3], path: impl AsRef<Path>) -> Result<()> {
    false_color(cube, rgb)?.save(path).map_err(|e| Error::Image(e.to_string()))
}
