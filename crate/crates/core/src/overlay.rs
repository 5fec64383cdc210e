//! Audit images: label maps coloured by id with annotation points on top.

use std::path::Path;

use image::{DynamicImage, Rgb, RgbImage};

use crate::error::Result;
use crate::io::save_png;
use crate::raster::{BinaryMask, InstanceMap, PointSet, RealRaster};

const MARKER: [u8; 3] = [255, 255, 255];

/// Deterministic colour for an instance id (splitmix64 of the id, channels kept above 48).
pub fn instance_color(id: u32) -> [u8; 3] {
    let mut z = u64::from(id).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    let ch = |shift: u32| 48 + ((z >> shift) & 0xff) as u8 % 208;
    [ch(0), ch(16), ch(32)]
}

pub fn render_overlay(background: Option<&RealRaster>, labels: &InstanceMap, points: &PointSet) -> RgbImage {
    let (w, h) = (labels.width(), labels.height());
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (ux, uy) = (x as usize, y as usize);
            let base = background.map_or(0.0, |b| b.get(ux, uy).clamp(0.0, 1.0) * 255.0);
            let id = *labels.get(ux, uy);
            let px = if id == 0 {
                [base as u8; 3]
            } else {
                let c = instance_color(id);
                let mix = |c: u8| if background.is_some() { ((c as f64 + base) / 2.0) as u8 } else { c };
                [mix(c[0]), mix(c[1]), mix(c[2])]
            };
            img.put_pixel(x, y, Rgb(px));
        }
    }
    for p in points.points() {
        for (dx, dy) in [(0i64, 0i64), (-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (x, y) = (p.x as i64 + dx, p.y as i64 + dy);
            if x >= 0 && y >= 0 && x < w as i64 && y < h as i64 {
                img.put_pixel(x as u32, y as u32, Rgb(MARKER));
            }
        }
    }
    img
}

/// Writes an RGB PNG of `labels` (coloured by id) with `points` as small crosses.
pub fn emit_overlay(
    background: Option<&RealRaster>,
    labels: &InstanceMap,
    points: &PointSet,
    out: &Path,
) -> Result<()> {
    labels.check_shape(&crate::raster::Raster::filled(points.width(), points.height(), 0u8))?;
    if let Some(b) = background {
        labels.check_shape(b)?;
    }
    save_png(out, &DynamicImage::ImageRgb8(render_overlay(background, labels, points)))
}

/// Overlay of a binary mask: foreground takes the colour of id 1.
pub fn emit_mask_overlay(
    background: Option<&RealRaster>,
    mask: &BinaryMask,
    points: &PointSet,
    out: &Path,
) -> Result<()> {
    emit_overlay(background, &mask.map(|&v| u32::from(v)), points, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{Point, Raster};
    use std::collections::HashSet;

    #[test]
    fn colors_distinct_for_256_ids() {
        let colors: HashSet<[u8; 3]> = (1..=256).map(instance_color).collect();
        assert_eq!(colors.len(), 256);
        assert!(!colors.contains(&MARKER));
    }

    #[test]
    fn empty_mask_shows_only_markers() {
        let labels = Raster::filled(20, 20, 0u32);
        let pts = PointSet::new(20, 20, vec![Point::new(3, 3), Point::new(10, 10), Point::new(16, 5)]).unwrap();
        let img = render_overlay(None, &labels, &pts);
        let white = img.pixels().filter(|p| p.0 == MARKER).count();
        assert_eq!(white, 15);
        assert_eq!(img.pixels().filter(|p| p.0 == [0, 0, 0]).count(), 400 - 15);
    }

    #[test]
    fn overlay_bytes_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let labels = Raster::from_fn(16, 16, |x, y| ((x / 4) + (y / 4) * 4) as u32);
        let pts = PointSet::new(16, 16, vec![Point::new(5, 5)]).unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        emit_overlay(None, &labels, &pts, &a).unwrap();
        emit_overlay(None, &labels, &pts, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
