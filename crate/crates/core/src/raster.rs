//! Raster containers and the geometry kernels shared by every stage:
//! connected components, exact Euclidean distance transforms, per-instance
//! hover maps and Sobel stencils.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{DawnError, Result};

/// Row-major 2-D grid of values.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    width: u32,
    height: u32,
    data: Vec<T>,
}

/// Integer label raster. 0 is background, k > 0 is an instance id.
pub type InstanceMap = Raster<u32>;
/// Binary raster; `true` is foreground.
pub type BinaryMask = Raster<bool>;
/// Real-valued raster (probabilities, hover maps, encodings, weights).
pub type RealRaster = Raster<f64>;
/// Euclidean distance (pixels) to the nearest seed.
pub type DistanceField = Raster<f64>;

impl<T> Raster<T> {
    /// Wraps `data` after checking that it holds exactly `width * height` values.
    pub fn from_vec(width: u32, height: u32, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(DawnError::InvalidRaster(format!("zero-sized raster {width}x{height}")));
        }
        if data.len() != width as usize * height as usize {
            return Err(DawnError::InvalidRaster(format!(
                "{}x{} raster needs {} values, got {}",
                width,
                height,
                width as usize * height as usize,
                data.len()
            )));
        }
        Ok(Raster { width, height, data })
    }

    /// Builds a raster by evaluating `f(x, y)` at every pixel.
    ///
    /// Panics if either dimension is zero.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(width > 0 && height > 0, "raster dimensions must be positive");
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height as usize {
            for x in 0..width as usize {
                data.push(f(x, y));
            }
        }
        Raster { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width as usize && y < self.height as usize);
        y * self.width as usize + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[self.index(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        let i = self.index(x, y);
        self.data[i] = value;
    }

    pub fn same_shape<U>(&self, other: &Raster<U>) -> bool {
        self.dims() == other.dims()
    }

    /// `Err(ShapeMismatch)` unless both rasters have identical dimensions.
    pub fn check_shape<U>(&self, other: &Raster<U>) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(DawnError::ShapeMismatch { left: self.dims(), right: other.dims() })
        }
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Raster<U> {
        Raster { width: self.width, height: self.height, data: self.data.iter().map(f).collect() }
    }
}

impl<T: Clone> Raster<T> {
    /// Panics if either dimension is zero.
    pub fn filled(width: u32, height: u32, value: T) -> Self {
        assert!(width > 0 && height > 0, "raster dimensions must be positive");
        Raster { width, height, data: vec![value; width as usize * height as usize] }
    }
}

impl Raster<f64> {
    /// `Err(NonFinite)` if any value is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(DawnError::NonFinite(what.to_string()))
        }
    }
}

impl Raster<bool> {
    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

impl Raster<u32> {
    /// Foreground indicator `id > 0`.
    pub fn foreground(&self) -> BinaryMask {
        self.map(|&id| id > 0)
    }

    /// Largest id present (0 for an all-background map).
    pub fn max_id(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Distinct positive ids, ascending.
    pub fn ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.data.iter().copied().filter(|&v| v > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Pixel coordinate of a point annotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: u32,
    pub y: u32,
}

impl Point {
    pub fn new(x: u32, y: u32) -> Self {
        Point { x, y }
    }
}

/// Point annotations inside a `width x height` image. Points are unique and in bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    width: u32,
    height: u32,
    points: Vec<Point>,
}

impl PointSet {
    pub fn new(width: u32, height: u32, points: Vec<Point>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(DawnError::InvalidRaster(format!("zero-sized bounds {width}x{height}")));
        }
        let mut seen = std::collections::HashSet::with_capacity(points.len());
        for p in &points {
            if p.x >= width || p.y >= height {
                return Err(DawnError::PointOutOfBounds { x: p.x as i64, y: p.y as i64, width, height });
            }
            if !seen.insert(*p) {
                return Err(DawnError::DuplicatePoint(p.x, p.y));
            }
        }
        Ok(PointSet { width, height, points })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        PointSet { width, height, points: Vec::new() }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn check_bounds<U>(&self, raster: &Raster<U>) -> Result<()> {
        if self.dims() == raster.dims() {
            Ok(())
        } else {
            Err(DawnError::ShapeMismatch { left: self.dims(), right: raster.dims() })
        }
    }
}

/// Gradient direction of a stencil.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new() -> Self {
        // slot 0 is unused so provisional labels start at 1
        UnionFind { parent: vec![0] }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let grand = self.parent[self.parent[a as usize] as usize];
            self.parent[a as usize] = grand;
            a = grand;
        }
        a
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
        lo
    }
}

/// 8-connected component labeling. Ids are contiguous from 1 in raster-scan
/// order of each component's first pixel.
pub fn label_components(mask: &BinaryMask) -> InstanceMap {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let mut provisional = vec![0u32; w * h];
    let mut uf = UnionFind::new();

    for y in 0..h {
        for x in 0..w {
            if !*mask.get(x, y) {
                continue;
            }
            // already-visited neighbours: W, NW, N, NE
            let mut label = 0u32;
            let mut neighbours = [0u32; 4];
            let mut n = 0;
            if x > 0 {
                neighbours[n] = provisional[y * w + x - 1];
                n += 1;
            }
            if y > 0 {
                if x > 0 {
                    neighbours[n] = provisional[(y - 1) * w + x - 1];
                    n += 1;
                }
                neighbours[n] = provisional[(y - 1) * w + x];
                n += 1;
                if x + 1 < w {
                    neighbours[n] = provisional[(y - 1) * w + x + 1];
                    n += 1;
                }
            }
            for &nb in &neighbours[..n] {
                if nb == 0 {
                    continue;
                }
                label = if label == 0 { nb } else { uf.union(label, nb) };
            }
            if label == 0 {
                label = uf.make();
            }
            provisional[y * w + x] = label;
        }
    }

    let mut final_ids = vec![0u32; uf.parent.len()];
    let mut next = 0u32;
    let data = provisional
        .iter()
        .map(|&p| {
            if p == 0 {
                return 0;
            }
            let root = uf.find(p) as usize;
            if final_ids[root] == 0 {
                next += 1;
                final_ids[root] = next;
            }
            final_ids[root]
        })
        .collect();
    Raster { width: mask.width(), height: mask.height(), data }
}

/// Renumbers ids to `1..=K` in raster-scan order of first appearance.
pub fn relabel(inst: &InstanceMap) -> InstanceMap {
    let mut mapping: HashMap<u32, u32> = HashMap::new();
    let mut next = 0u32;
    inst.map(|&id| {
        if id == 0 {
            0
        } else {
            *mapping.entry(id).or_insert_with(|| {
                next += 1;
                next
            })
        }
    })
}

const FAR: f64 = 1e20;

/// 1-D squared distance transform of a sampled function (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        let mut s;
        loop {
            let p = v[k];
            s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            // z[0] is -inf, so k never underflows
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest seed pixel.
fn squared_edt(width: usize, height: usize, seeds: &[bool]) -> Vec<f64> {
    let mut grid: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let n = width.max(height);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];

    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        edt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        let row = &mut grid[y * width..(y + 1) * width];
        f[..width].copy_from_slice(row);
        edt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        row.copy_from_slice(&out[..width]);
    }
    grid
}

/// Exact Euclidean distance to the nearest annotation point.
pub fn distance_to_points(points: &PointSet) -> Result<DistanceField> {
    if points.is_empty() {
        return Err(DawnError::EmptyPointSet);
    }
    let (w, h) = (points.width() as usize, points.height() as usize);
    let mut seeds = vec![false; w * h];
    for p in points.points() {
        seeds[p.y as usize * w + p.x as usize] = true;
    }
    let data = squared_edt(w, h, &seeds).into_iter().map(f64::sqrt).collect();
    Ok(Raster { width: points.width(), height: points.height(), data })
}

/// Exact Euclidean distance to the nearest foreground pixel of `mask`.
/// Pixels are at distance `f64::INFINITY` when the mask is empty.
pub fn distance_to_mask(mask: &BinaryMask) -> DistanceField {
    if mask.area() == 0 {
        return mask.map(|_| f64::INFINITY);
    }
    let data =
        squared_edt(mask.width() as usize, mask.height() as usize, mask.data()).into_iter().map(f64::sqrt).collect();
    Raster { width: mask.width(), height: mask.height(), data }
}

#[derive(Default, Clone, Copy)]
struct Extent {
    count: f64,
    sum_x: f64,
    sum_y: f64,
    min_dx: f64,
    max_dx: f64,
    min_dy: f64,
    max_dy: f64,
}

/// Per-instance horizontal and vertical offset maps.
///
/// Offsets are measured from the instance centroid (pixel mean) and scaled
/// separately on each side so the leftmost pixel maps to -1 and the
/// rightmost to +1 (likewise top/bottom for the vertical map). Background is 0.
pub fn instance_distance_maps(inst: &InstanceMap) -> (RealRaster, RealRaster) {
    let (w, h) = (inst.width() as usize, inst.height() as usize);
    let mut stats: HashMap<u32, Extent> = HashMap::new();
    for y in 0..h {
        for x in 0..w {
            let id = *inst.get(x, y);
            if id == 0 {
                continue;
            }
            let e = stats.entry(id).or_default();
            e.count += 1.0;
            e.sum_x += x as f64;
            e.sum_y += y as f64;
        }
    }
    let centroid = |e: &Extent| (e.sum_x / e.count, e.sum_y / e.count);
    for y in 0..h {
        for x in 0..w {
            let id = *inst.get(x, y);
            if id == 0 {
                continue;
            }
            let e = stats.get_mut(&id).expect("id seen in first pass");
            let (cx, cy) = centroid(e);
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            e.min_dx = e.min_dx.min(dx);
            e.max_dx = e.max_dx.max(dx);
            e.min_dy = e.min_dy.min(dy);
            e.max_dy = e.max_dy.max(dy);
        }
    }
    let scale = |d: f64, lo: f64, hi: f64| {
        if d < 0.0 && lo < 0.0 {
            d / -lo
        } else if d > 0.0 && hi > 0.0 {
            d / hi
        } else {
            0.0
        }
    };
    let mut hx = Raster::filled(inst.width(), inst.height(), 0.0);
    let mut hy = Raster::filled(inst.width(), inst.height(), 0.0);
    for y in 0..h {
        for x in 0..w {
            let id = *inst.get(x, y);
            if id == 0 {
                continue;
            }
            let e = &stats[&id];
            let (cx, cy) = centroid(e);
            hx.set(x, y, scale(x as f64 - cx, e.min_dx, e.max_dx));
            hy.set(x, y, scale(y as f64 - cy, e.min_dy, e.max_dy));
        }
    }
    (hx, hy)
}

// Sobel taps as (dx, dy, weight); correlation, positive for values increasing along the axis.
const SOBEL_X: [(isize, isize, f64); 6] =
    [(-1, -1, -1.0), (1, -1, 1.0), (-1, 0, -2.0), (1, 0, 2.0), (-1, 1, -1.0), (1, 1, 1.0)];
const SOBEL_Y: [(isize, isize, f64); 6] =
    [(-1, -1, -1.0), (0, -1, -2.0), (1, -1, -1.0), (-1, 1, 1.0), (0, 1, 2.0), (1, 1, 1.0)];

fn taps(axis: Axis) -> &'static [(isize, isize, f64); 6] {
    match axis {
        Axis::X => &SOBEL_X,
        Axis::Y => &SOBEL_Y,
    }
}

#[inline]
fn clamp_coord(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

fn require_3x3<T>(r: &Raster<T>) -> Result<()> {
    if r.width() < 3 || r.height() < 3 {
        return Err(DawnError::RasterTooSmall { width: r.width(), height: r.height(), min: 3 });
    }
    Ok(())
}

/// 3x3 Sobel response along one axis with replicate-padded borders.
pub fn sobel_axis(r: &RealRaster, axis: Axis) -> Result<RealRaster> {
    require_3x3(r)?;
    let (w, h) = (r.width() as usize, r.height() as usize);
    let k = taps(axis);
    Ok(Raster::from_fn(r.width(), r.height(), |x, y| {
        k.iter()
            .map(|&(dx, dy, wt)| wt * *r.get(clamp_coord(x as isize + dx, w), clamp_coord(y as isize + dy, h)))
            .sum()
    }))
}

/// Adjoint of [`sobel_axis`]: for a linear map `y = S x`, returns `S^T g`.
/// Border taps that were clamped accumulate into the replicated pixel.
pub fn sobel_axis_adjoint(g: &RealRaster, axis: Axis) -> Result<RealRaster> {
    require_3x3(g)?;
    let (w, h) = (g.width() as usize, g.height() as usize);
    let k = taps(axis);
    let mut out = Raster::filled(g.width(), g.height(), 0.0);
    for y in 0..h {
        for x in 0..w {
            let gv = *g.get(x, y);
            if gv == 0.0 {
                continue;
            }
            for &(dx, dy, wt) in k {
                let i = out.index(clamp_coord(x as isize + dx, w), clamp_coord(y as isize + dy, h));
                out.data[i] += wt * gv;
            }
        }
    }
    Ok(out)
}

/// Horizontal and vertical Sobel responses.
pub fn sobel_gradients(r: &RealRaster) -> Result<(RealRaster, RealRaster)> {
    Ok((sobel_axis(r, Axis::X)?, sobel_axis(r, Axis::Y)?))
}
