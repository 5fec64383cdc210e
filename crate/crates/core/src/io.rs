//! On-disk formats.
//!
//! * instance maps: 16-bit grayscale PNG (8-bit PNGs are accepted on read)
//! * binary masks: 8-bit grayscale PNG, 0 / 255 (any non-zero reads as foreground)
//! * real rasters: `DWNR`, magic `b"DWNR"`, little-endian `u32` width, height,
//!   channels, then row-major little-endian `f32` samples
//! * points: CSV with header `x,y`
//! * JSON: canonical form with sorted object keys

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use serde::{de::DeserializeOwned, Serialize};

use crate::error::{DawnError, Result};
use crate::raster::{BinaryMask, InstanceMap, Point, PointSet, Raster, RealRaster};

pub const DWNR_MAGIC: &[u8; 4] = b"DWNR";

/// Decoded DWNR payload, possibly multi-channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Dwnr {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

pub fn encode_dwnr(d: &Dwnr) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * d.data.len());
    out.extend_from_slice(DWNR_MAGIC);
    out.extend_from_slice(&d.width.to_le_bytes());
    out.extend_from_slice(&d.height.to_le_bytes());
    out.extend_from_slice(&d.channels.to_le_bytes());
    for v in &d.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_dwnr(bytes: &[u8], path: &Path) -> Result<Dwnr> {
    let bad = |m: &str| DawnError::format("DWNR", path, m);
    if bytes.len() < 16 || &bytes[..4] != DWNR_MAGIC {
        return Err(bad("missing DWNR header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice"));
    let (width, height, channels) = (word(4), word(8), word(12));
    let n = width as u64 * height as u64 * channels as u64;
    if n == 0 {
        return Err(bad("zero-sized raster"));
    }
    if (bytes.len() as u64 - 16) != 4 * n {
        return Err(bad(&format!(
            "header says {width}x{height}x{channels} but payload holds {} bytes",
            bytes.len() - 16
        )));
    }
    let data = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect();
    Ok(Dwnr { width, height, channels, data })
}

pub fn write_dwnr(path: &Path, d: &Dwnr) -> Result<()> {
    write_bytes(path, &encode_dwnr(d))
}

pub fn read_dwnr(path: &Path) -> Result<Dwnr> {
    let bytes = fs::read(path).map_err(|e| DawnError::io(path, e))?;
    decode_dwnr(&bytes, path)
}

/// Writes a single-channel raster, narrowing to `f32`.
pub fn write_real_raster(path: &Path, r: &RealRaster) -> Result<()> {
    write_dwnr(
        path,
        &Dwnr { width: r.width(), height: r.height(), channels: 1, data: r.data().iter().map(|&v| v as f32).collect() },
    )
}

pub fn read_real_raster(path: &Path) -> Result<RealRaster> {
    let d = read_dwnr(path)?;
    if d.channels != 1 {
        return Err(DawnError::format("DWNR", path, format!("expected 1 channel, found {}", d.channels)));
    }
    Raster::from_vec(d.width, d.height, d.data.into_iter().map(f64::from).collect())
}

/// Embeddings travel as `1 x dim x 1` DWNR rasters.
pub fn write_embedding(path: &Path, v: &[f64]) -> Result<()> {
    write_dwnr(
        path,
        &Dwnr { width: 1, height: v.len() as u32, channels: 1, data: v.iter().map(|&x| x as f32).collect() },
    )
}

/// Reads an embedding; any DWNR shape is flattened.
pub fn read_embedding(path: &Path) -> Result<Vec<f64>> {
    Ok(read_dwnr(path)?.data.into_iter().map(f64::from).collect())
}

pub fn write_instance_png(path: &Path, inst: &InstanceMap) -> Result<()> {
    let max = inst.max_id();
    if max > u16::MAX as u32 {
        return Err(DawnError::format("PNG", path, format!("instance id {max} does not fit 16 bits")));
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(inst.width(), inst.height(), inst.data().iter().map(|&v| v as u16).collect())
            .expect("buffer sized from raster");
    save_png(path, &DynamicImage::ImageLuma16(buf))
}

pub fn read_instance_png(path: &Path) -> Result<InstanceMap> {
    let img = open_image(path)?;
    let (w, h) = (img.width(), img.height());
    let data: Vec<u32> = match img {
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
        other => {
            return Err(DawnError::format(
                "PNG",
                path,
                format!("instance maps must be single-channel, found {:?}", other.color()),
            ))
        }
    };
    Raster::from_vec(w, h, data)
}

pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        mask.width(),
        mask.height(),
        mask.data().iter().map(|&v| if v { 255 } else { 0 }).collect(),
    )
    .expect("buffer sized from raster");
    save_png(path, &DynamicImage::ImageLuma8(buf))
}

pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let img = open_image(path)?;
    let (w, h) = (img.width(), img.height());
    let data: Vec<bool> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v > 0).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v > 0).collect(),
        other => {
            return Err(DawnError::format(
                "PNG",
                path,
                format!("masks must be single-channel, found {:?}", other.color()),
            ))
        }
    };
    Raster::from_vec(w, h, data)
}

/// 8-bit grayscale rendering of a `[0, 1]` raster (values are clamped).
pub fn write_gray_png(path: &Path, r: &RealRaster) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        r.width(),
        r.height(),
        r.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
    )
    .expect("buffer sized from raster");
    save_png(path, &DynamicImage::ImageLuma8(buf))
}

pub(crate) fn save_png(path: &Path, img: &DynamicImage) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| DawnError::format("PNG", path, e))?;
    write_bytes(path, &bytes)
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(DawnError::MissingArtifact(path.to_path_buf()));
    }
    image::open(path).map_err(|e| DawnError::format("PNG", path, e))
}

/// Reads `x,y` rows into a point set bounded by `width x height`.
pub fn read_points_csv(path: &Path, width: u32, height: u32) -> Result<PointSet> {
    let points = read_point_rows(path)?;
    PointSet::new(width, height, points)
}

/// Reads `x,y` rows without bounds information.
pub fn read_point_rows(path: &Path) -> Result<Vec<Point>> {
    if !path.exists() {
        return Err(DawnError::MissingArtifact(path.to_path_buf()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DawnError::format("CSV", path, e))?;
    let headers = rdr.headers().map_err(|e| DawnError::format("CSV", path, e))?;
    if headers.len() < 2 || &headers[0] != "x" || &headers[1] != "y" {
        return Err(DawnError::format("CSV", path, "header must be `x,y`"));
    }
    rdr.deserialize::<Point>().map(|row| row.map_err(|e| DawnError::format("CSV", path, e))).collect()
}

pub fn write_points_csv(path: &Path, points: &PointSet) -> Result<()> {
    let mut out = String::from("x,y\n");
    for p in points.points() {
        out.push_str(&format!("{},{}\n", p.x, p.y));
    }
    write_bytes(path, out.as_bytes())
}

/// Serializes with sorted object keys and a trailing newline.
pub fn to_canonical_json<T: Serialize>(value: &T) -> std::result::Result<String, serde_json::Error> {
    // serde_json::Value keeps object keys in a BTreeMap (no `preserve_order`).
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = to_canonical_json(value).map_err(|e| DawnError::Json { path: path.to_path_buf(), source: e })?;
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(DawnError::MissingArtifact(path.to_path_buf()));
    }
    let s = fs::read_to_string(path).map_err(|e| DawnError::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| DawnError::Json { path: path.to_path_buf(), source: e })
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| DawnError::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| DawnError::io(path, e))?;
    f.write_all(bytes).map_err(|e| DawnError::io(path, e))
}
