//! Binary raster layers and map rasterization in the ego frame.

use super::{LaneGeometry, SceneError};
use crate::geom::{Pose, Vec2};
use crate::scalar::Scalar;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::Error as DeError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Bit-packed binary raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitRaster {
    rows: usize,
    cols: usize,
    blocks: Vec<u64>,
}

impl BitRaster {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            blocks: vec![0; (rows * cols + 63) / 64],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        debug_assert!(row < self.rows && col < self.cols);
        let bit = row * self.cols + col;
        self.blocks[bit / 64] >> (bit % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        debug_assert!(row < self.rows && col < self.cols);
        let bit = row * self.cols + col;
        if value {
            self.blocks[bit / 64] |= 1 << (bit % 64);
        } else {
            self.blocks[bit / 64] &= !(1 << (bit % 64));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.blocks.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Fraction of set cells inside the half-open cell rectangle.
    pub fn fraction_in(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
        let mut ones = 0usize;
        let mut total = 0usize;
        for r in r0..r1.min(self.rows) {
            for c in c0..c1.min(self.cols) {
                total += 1;
                ones += self.get(r, c) as usize;
            }
        }
        if total == 0 {
            0.0
        } else {
            ones as f64 / total as f64
        }
    }
}

#[derive(Serialize, Deserialize)]
struct BitRasterWire {
    rows: usize,
    cols: usize,
    bits: String,
}

impl Serialize for BitRaster {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut bytes = Vec::with_capacity(self.blocks.len() * 8);
        for b in &self.blocks {
            bytes.extend_from_slice(&b.to_le_bytes());
        }
        BitRasterWire {
            rows: self.rows,
            cols: self.cols,
            bits: B64.encode(bytes),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BitRaster {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = BitRasterWire::deserialize(deserializer)?;
        let bytes = B64
            .decode(wire.bits.as_bytes())
            .map_err(|e| D::Error::custom(format!("bad raster payload: {e}")))?;
        let expect = ((wire.rows * wire.cols + 63) / 64) * 8;
        if bytes.len() != expect {
            return Err(D::Error::custom(format!(
                "raster payload of {} bytes, expected {expect}",
                bytes.len()
            )));
        }
        let blocks = bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            rows: wire.rows,
            cols: wire.cols,
            blocks,
        })
    }
}

/// Ego-centered binary map layers at fixed resolution.
///
/// Local x runs along the ego heading spanning `extent.0` meters, local y
/// spans `extent.1` meters; cell (0,0) sits at the rear-right corner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapGrid<F> {
    /// Pixels per meter.
    pub resolution: F,
    /// (length_m, width_m).
    pub extent: (F, F),
    /// Pose whose frame the raster lives in.
    pub origin_pose: Pose<F>,
    pub drivable_area: BitRaster,
    pub lane_divider: BitRaster,
    /// Lanes dropped during rasterization because their polygon had no area.
    pub degenerate_lanes_skipped: u32,
}

impl<F: Scalar> MapGrid<F> {
    /// Raster shape implied by extent and resolution: (rows, cols).
    pub fn shape(&self) -> (usize, usize) {
        (
            (self.extent.1 * self.resolution).round().as_f64() as usize,
            (self.extent.0 * self.resolution).round().as_f64() as usize,
        )
    }

    /// Cell containing a world point, if inside the raster.
    pub fn world_to_cell(&self, p: Vec2<F>) -> Option<(usize, usize)> {
        let local = self.origin_pose.world_to_local(p);
        self.local_to_cell(local)
    }

    fn local_to_cell(&self, local: Vec2<F>) -> Option<(usize, usize)> {
        let half = F::cast(0.5);
        let (rows, cols) = self.shape();
        let cx = (local.x + self.extent.0 * half) * self.resolution;
        let cy = (local.y + self.extent.1 * half) * self.resolution;
        if cx < F::zero() || cy < F::zero() {
            return None;
        }
        let (col, row) = (cx.as_f64() as usize, cy.as_f64() as usize);
        (row < rows && col < cols).then_some((row, col))
    }

    /// World coordinates of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> Vec2<F> {
        let half = F::cast(0.5);
        let local = Vec2::new(
            (F::from_usize(col).unwrap() + half) / self.resolution - self.extent.0 * half,
            (F::from_usize(row).unwrap() + half) / self.resolution - self.extent.1 * half,
        );
        self.origin_pose.local_to_world(local)
    }

    /// True when the world point falls on a drivable cell; false outside the
    /// raster.
    pub fn is_drivable(&self, p: Vec2<F>) -> bool {
        self.world_to_cell(p)
            .map(|(r, c)| self.drivable_area.get(r, c))
            .unwrap_or(false)
    }

    /// Mean drivable occupancy over a `tiles`×`tiles` tiling, row-major.
    pub fn coarse_summary(&self, tiles: usize) -> Vec<F> {
        let (rows, cols) = self.shape();
        let mut out = Vec::with_capacity(tiles * tiles);
        for tr in 0..tiles {
            for tc in 0..tiles {
                let r0 = tr * rows / tiles;
                let r1 = (tr + 1) * rows / tiles;
                let c0 = tc * cols / tiles;
                let c1 = (tc + 1) * cols / tiles;
                out.push(F::cast(self.drivable_area.fraction_in(r0, r1, c0, c1)));
            }
        }
        out
    }
}

fn point_in_polygon<F: Scalar>(p: Vec2<F>, poly: &[Vec2<F>]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (pi, pj) = (poly[i], poly[j]);
        if (pi.y > p.y) != (pj.y > p.y)
            && p.x < (pj.x - pi.x) * (p.y - pi.y) / (pj.y - pi.y) + pi.x
        {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn polygon_area<F: Scalar>(poly: &[Vec2<F>]) -> F {
    let mut acc = F::zero();
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        acc += poly[j].cross(poly[i]);
        j = i;
    }
    (acc * F::cast(0.5)).abs()
}

/// Rasterize lanes into ego-frame binary layers.
///
/// `extent_l`/`extent_w` are the raster footprint in meters along/across the
/// ego heading; `resolution` is pixels per meter. Drivable cells are those
/// whose center lies inside any lane polygon; divider cells trace the
/// boundary polylines with a one-pixel stroke. Lanes whose polygon encloses
/// no area are skipped and counted.
pub fn rasterize_map<F: Scalar>(
    lanes: &[LaneGeometry<F>],
    ego_pose: Pose<F>,
    extent_l: F,
    extent_w: F,
    resolution: F,
) -> Result<MapGrid<F>, SceneError> {
    if lanes.is_empty() {
        return Err(SceneError::NoLanes);
    }
    if !ego_pose.is_finite() {
        return Err(SceneError::NonFinite("ego pose"));
    }
    let rows_f = (extent_w * resolution).as_f64();
    let cols_f = (extent_l * resolution).as_f64();
    let (rows, cols) = (rows_f.round() as usize, cols_f.round() as usize);
    if rows == 0 || cols == 0 || (rows_f - rows as f64).abs() > 1e-9 || (cols_f - cols as f64).abs() > 1e-9 {
        return Err(SceneError::BadRasterDims {
            rows,
            cols,
            extent_l: extent_l.as_f64(),
            extent_w: extent_w.as_f64(),
            resolution: resolution.as_f64(),
        });
    }

    let mut grid = MapGrid {
        resolution,
        extent: (extent_l, extent_w),
        origin_pose: ego_pose,
        drivable_area: BitRaster::zeros(rows, cols),
        lane_divider: BitRaster::zeros(rows, cols),
        degenerate_lanes_skipped: 0,
    };

    let half = F::cast(0.5);
    let to_local = |p: Vec2<F>| ego_pose.world_to_local(p);

    for lane in lanes {
        lane.validate()?;
        let poly: Vec<Vec2<F>> = lane.polygon().into_iter().map(to_local).collect();
        if polygon_area(&poly).as_f64() < 1e-9 {
            grid.degenerate_lanes_skipped += 1;
            continue;
        }
        // restrict the scan to the polygon's bounding box
        let (mut lo, mut hi) = (poly[0], poly[0]);
        for p in &poly[1..] {
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        let clamp_cell = |v: F, limit: usize| -> usize {
            (v.as_f64().max(0.0) as usize).min(limit.saturating_sub(1))
        };
        let r0 = clamp_cell((lo.y + extent_w * half) * resolution, rows);
        let r1 = clamp_cell((hi.y + extent_w * half) * resolution, rows) + 1;
        let c0 = clamp_cell((lo.x + extent_l * half) * resolution, cols);
        let c1 = clamp_cell((hi.x + extent_l * half) * resolution, cols) + 1;
        for r in r0..r1.min(rows) {
            for c in c0..c1.min(cols) {
                if grid.drivable_area.get(r, c) {
                    continue;
                }
                let center = Vec2::new(
                    (F::from_usize(c).unwrap() + half) / resolution - extent_l * half,
                    (F::from_usize(r).unwrap() + half) / resolution - extent_w * half,
                );
                if point_in_polygon(center, &poly) {
                    grid.drivable_area.set(r, c, true);
                }
            }
        }
        // one-pixel boundary strokes
        for boundary in [&lane.left_boundary, &lane.right_boundary] {
            stroke_polyline(&mut grid, boundary, to_local);
        }
    }
    Ok(grid)
}

fn stroke_polyline<F: Scalar>(
    grid: &mut MapGrid<F>,
    polyline: &[Vec2<F>],
    to_local: impl Fn(Vec2<F>) -> Vec2<F>,
) {
    let step = F::cast(0.25) / grid.resolution;
    for w in polyline.windows(2) {
        let (a, b) = (to_local(w[0]), to_local(w[1]));
        let len = a.distance(b);
        let n = (len / step).as_f64().ceil().max(1.0) as usize;
        for k in 0..=n {
            let t = F::from_usize(k).unwrap() / F::from_usize(n).unwrap();
            let p = a + (b - a) * t;
            if let Some((r, c)) = grid.local_to_cell(p) {
                grid.lane_divider.set(r, c, true);
            }
        }
    }
}
