//! Instance extraction from foreground probability and hover maps by a
//! marker-controlled watershed on the hover-gradient energy.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{DawnError, Result};
use crate::raster::{label_components, relabel, sobel_axis, Axis, InstanceMap, Raster, RealRaster};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocParams {
    pub fg_threshold: f64,
    pub marker_gradient_threshold: f64,
    /// Instances smaller than this many pixels are dropped.
    pub min_instance_area: usize,
}

impl Default for PostprocParams {
    fn default() -> Self {
        PostprocParams { fg_threshold: 0.5, marker_gradient_threshold: 0.4, min_instance_area: 10 }
    }
}

impl PostprocParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("fg_threshold", self.fg_threshold), ("marker_gradient_threshold", self.marker_gradient_threshold)]
        {
            if !(v > 0.0 && v < 1.0) {
                return Err(DawnError::InvalidParams(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// `1 - minmax(r)`; a constant raster maps to 0.
fn inverted_minmax(r: &RealRaster) -> RealRaster {
    let (lo, hi) = r.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if span.is_nan() || span <= 0.0 {
        return r.map(|_| 0.0);
    }
    r.map(|&v| 1.0 - (v - lo) / span)
}

/// Boundary energy in `[0, 1]` from the hover maps.
///
/// Inside an instance the horizontal map increases left to right, so its
/// x-Sobel response is positive; between two touching instances it drops
/// from +1 to -1 and the response is strongly negative. Each signed response
/// is min-max normalised and inverted, so instance interiors sit near 0 and
/// separating ridges near 1. The energy is the larger of the two axes.
pub fn hover_energy(h_x: &RealRaster, h_y: &RealRaster) -> Result<RealRaster> {
    h_x.check_shape(h_y)?;
    if h_x.width() < 3 || h_x.height() < 3 {
        // too small for a stencil: no boundary information
        return Ok(h_x.map(|_| 0.0));
    }
    let ex = inverted_minmax(&sobel_axis(h_x, Axis::X)?);
    let ey = inverted_minmax(&sobel_axis(h_y, Axis::Y)?);
    Raster::from_vec(h_x.width(), h_x.height(), ex.data().iter().zip(ey.data()).map(|(a, b)| a.max(*b)).collect())
}

#[derive(Clone, Copy)]
struct QueueItem {
    energy: f64,
    order: u64,
    index: usize,
}

impl PartialEq for QueueItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for QueueItem {}

impl PartialOrd for QueueItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueueItem {
    // reversed: BinaryHeap is a max-heap and we pop the lowest (energy, order)
    fn cmp(&self, other: &Self) -> Ordering {
        other.energy.total_cmp(&self.energy).then_with(|| other.order.cmp(&self.order))
    }
}

/// Intermediate products of [`extract_instances`].
#[derive(Clone, Debug)]
pub struct Extraction {
    pub energy: RealRaster,
    pub markers: InstanceMap,
    pub instances: InstanceMap,
}

pub fn extract_instances(
    p_hat: &RealRaster,
    h_x: &RealRaster,
    h_y: &RealRaster,
    params: &PostprocParams,
) -> Result<InstanceMap> {
    Ok(extract_instances_detailed(p_hat, h_x, h_y, params)?.instances)
}

pub fn extract_instances_detailed(
    p_hat: &RealRaster,
    h_x: &RealRaster,
    h_y: &RealRaster,
    params: &PostprocParams,
) -> Result<Extraction> {
    params.validate()?;
    p_hat.check_shape(h_x)?;
    p_hat.check_shape(h_y)?;
    let fg = p_hat.map(|&p| p > params.fg_threshold);
    let energy = hover_energy(h_x, h_y)?;
    let marker_mask = Raster::from_vec(
        fg.width(),
        fg.height(),
        fg.data().iter().zip(energy.data()).map(|(&f, &e)| f && e < params.marker_gradient_threshold).collect(),
    )?;
    let markers = label_components(&marker_mask);

    let (w, h) = (fg.width() as usize, fg.height() as usize);
    let mut labels = markers.clone().into_vec();
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            heap.push(QueueItem { energy: energy.data()[i], order, index: i });
            order += 1;
        }
    }
    while let Some(item) = heap.pop() {
        let label = labels[item.index];
        let (x, y) = ((item.index % w) as isize, (item.index / w) as isize);
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if labels[j] == 0 && fg.data()[j] {
                    labels[j] = label;
                    heap.push(QueueItem { energy: energy.data()[j], order, index: j });
                    order += 1;
                }
            }
        }
    }

    let mut area = vec![0usize; markers.max_id() as usize + 1];
    for &l in &labels {
        area[l as usize] += 1;
    }
    for l in labels.iter_mut() {
        if *l > 0 && area[*l as usize] < params.min_instance_area {
            *l = 0;
        }
    }
    let instances = relabel(&Raster::from_vec(fg.width(), fg.height(), labels)?);
    Ok(Extraction { energy, markers, instances })
}
