//! Pillar voxelization, token embedding, masking and target sampling.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointFrame;
use crate::params::Bound;
use crate::tensor::{Tape, Tensor, Var};

/// Per-point input feature width: `(x_c, y_c, z, intensity)`.
pub const POINT_FEATURES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub pillar_size: [f64; 3],
}

impl Default for GridConfig {
    /// Desk-scale 16 m × 16 m area with 0.32 m pillars.
    fn default() -> Self {
        GridConfig {
            range_min: [-8.0, -8.0, -2.0],
            range_max: [8.0, 8.0, 4.0],
            pillar_size: [0.32, 0.32, 6.0],
        }
    }
}

impl GridConfig {
    /// The full Waymo detection range.
    pub fn waymo() -> Self {
        GridConfig {
            range_min: [-74.88, -74.88, -2.0],
            range_max: [74.88, 74.88, 4.0],
            pillar_size: [0.32, 0.32, 6.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..3 {
            if !(self.range_max[k] > self.range_min[k]) {
                return Err(Error::Config(format!(
                    "grid.range_max[{k}] = {} must exceed range_min[{k}] = {}",
                    self.range_max[k], self.range_min[k]
                )));
            }
            if !(self.pillar_size[k] > 0.0) || !self.pillar_size[k].is_finite() {
                return Err(Error::Config(format!(
                    "grid.pillar_size[{k}] must be positive, got {}",
                    self.pillar_size[k]
                )));
            }
        }
        Ok(())
    }

    /// Number of cells along x and y.
    pub fn dims(&self) -> [usize; 2] {
        [0, 1].map(|k| {
            ((self.range_max[k] - self.range_min[k]) / self.pillar_size[k] - 1e-9)
                .ceil()
                .max(1.0) as usize
        })
    }

    pub fn cell_center(&self, cell: [usize; 2]) -> [f64; 2] {
        [0, 1].map(|k| self.range_min[k] + (cell[k] as f64 + 0.5) * self.pillar_size[k])
    }

    pub fn z_mid(&self) -> f64 {
        0.5 * (self.range_min[2] + self.range_max[2])
    }

    /// Cell of a point, `None` outside the half-open range.
    pub fn cell_of(&self, p: &[f64; 3]) -> Option<[usize; 2]> {
        let inside = (0..3).all(|k| p[k] >= self.range_min[k] && p[k] < self.range_max[k]);
        if !inside {
            return None;
        }
        let dims = self.dims();
        Some([0, 1].map(|k| {
            let c = ((p[k] - self.range_min[k]) / self.pillar_size[k]).floor() as usize;
            c.min(dims[k] - 1)
        }))
    }

    /// Row-major flat index `iy · W + ix` used by dense maps.
    pub fn flat(&self, cell: [usize; 2]) -> usize {
        cell[1] * self.dims()[0] + cell[0]
    }
}

/// Occupied pillars of one frame, ordered lexicographically by `(ix, iy)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PillarSet {
    pub coords: Vec<[usize; 2]>,
    /// Ascending indices into the source frame's points.
    pub point_lists: Vec<Vec<usize>>,
    /// Points that fell outside the grid range.
    pub dropped: usize,
}

impl PillarSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Rows `ids` in the given order.
    pub fn subset(&self, ids: &[usize]) -> PillarSet {
        PillarSet {
            coords: ids.iter().map(|&i| self.coords[i]).collect(),
            point_lists: ids.iter().map(|&i| self.point_lists[i].clone()).collect(),
            dropped: 0,
        }
    }

    pub fn point_count(&self) -> usize {
        self.point_lists.iter().map(Vec::len).sum()
    }
}

pub fn assign_pillars(frame: &PointFrame, grid: &GridConfig) -> Result<PillarSet> {
    grid.validate()?;
    let mut cells: BTreeMap<[usize; 2], Vec<usize>> = BTreeMap::new();
    let mut dropped = 0;
    for (i, p) in frame.points.iter().enumerate() {
        match grid.cell_of(p) {
            Some(c) => cells.entry(c).or_default().push(i),
            None => dropped += 1,
        }
    }
    let (coords, point_lists) = cells.into_iter().unzip();
    Ok(PillarSet {
        coords,
        point_lists,
        dropped,
    })
}

/// Stacked per-point features of all pillars (pillar order, then points
/// sorted by feature value) and the row segments belonging to each pillar.
pub fn point_features(
    frame: &PointFrame,
    pillars: &PillarSet,
    grid: &GridConfig,
) -> Result<(Tensor, Vec<Vec<usize>>)> {
    let mut data = Vec::with_capacity(pillars.point_count() * POINT_FEATURES);
    let mut segments = Vec::with_capacity(pillars.len());
    let mut row = 0;
    for (cell, list) in pillars.coords.iter().zip(&pillars.point_lists) {
        if list.is_empty() {
            return Err(Error::Integrity(format!("pillar {cell:?} has no points")));
        }
        let c = grid.cell_center(*cell);
        let mut rows: Vec<[f64; POINT_FEATURES]> = list
            .iter()
            .map(|&i| {
                let p = frame.points[i];
                [p[0] - c[0], p[1] - c[1], p[2], frame.intensity[i]]
            })
            .collect();
        // value order makes pooling independent of input point order
        rows.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        rows.iter().for_each(|r| data.extend_from_slice(r));
        segments.push((row..row + list.len()).collect());
        row += list.len();
    }
    Ok((Tensor::new(vec![row, POINT_FEATURES], data)?, segments))
}

/// Tape handles of the point embedding: `4 → d/2 → d`.
#[derive(Clone, Copy, Debug)]
pub struct EmbedVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl EmbedVars {
    pub fn from_bound(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(EmbedVars {
            w1: bound.get(&format!("{prefix}.fc1.w"))?,
            b1: bound.get(&format!("{prefix}.fc1.b"))?,
            w2: bound.get(&format!("{prefix}.fc2.w"))?,
            b2: bound.get(&format!("{prefix}.fc2.b"))?,
        })
    }
}

/// One `d`-wide token per pillar: two linear layers with GELU between,
/// mean-pooled over the pillar's points. Returns a `P×d` tape value.
pub fn embed_pillars(
    tape: &mut Tape,
    embed: &EmbedVars,
    frame: &PointFrame,
    pillars: &PillarSet,
    grid: &GridConfig,
) -> Result<Var> {
    let (feats, segments) = point_features(frame, pillars, grid)?;
    let x = tape.constant(feats);
    let h = tape.linear(x, embed.w1, embed.b1)?;
    let h = tape.gelu(h);
    let h = tape.linear(h, embed.w2, embed.b2)?;
    tape.segment_mean(h, &segments)
}

/// Visible and masked pillar rows, each ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskSplit {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

/// `floor(ratio · p)`.
pub fn mask_count(p: usize, ratio: f64) -> usize {
    (ratio * p as f64).floor() as usize
}

pub fn mask_pillars<R: Rng + ?Sized>(pillars: &PillarSet, ratio: f64, rng: &mut R) -> Result<MaskSplit> {
    mask_indices(pillars.len(), ratio, rng)
}

/// Mask a uniformly drawn subset of `floor(ratio · p)` of `0..p`.
pub fn mask_indices<R: Rng + ?Sized>(p: usize, ratio: f64, rng: &mut R) -> Result<MaskSplit> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio must lie in [0, 1), got {ratio}"
        )));
    }
    let n = mask_count(p, ratio);
    let mut is_masked = vec![false; p];
    if n > 0 {
        for i in index::sample(rng, p, n) {
            is_masked[i] = true;
        }
    }
    let (masked, visible) = (0..p).partition(|&i| is_masked[i]);
    Ok(MaskSplit { visible, masked })
}

/// Map a point into the pillar-local normalized frame used by targets and
/// predictions: x and y relative to the cell center over half the pillar
/// size, z relative to the mid-height over half the pillar height.
pub fn normalize_point(p: &[f64; 3], cell: [usize; 2], grid: &GridConfig) -> [f64; 3] {
    let c = grid.cell_center(cell);
    [
        (p[0] - c[0]) / (0.5 * grid.pillar_size[0]),
        (p[1] - c[1]) / (0.5 * grid.pillar_size[1]),
        (p[2] - grid.z_mid()) / (0.5 * grid.pillar_size[2]),
    ]
}

/// Inverse of [`normalize_point`].
pub fn denormalize_point(q: &[f64; 3], cell: [usize; 2], grid: &GridConfig) -> [f64; 3] {
    let c = grid.cell_center(cell);
    [
        c[0] + q[0] * 0.5 * grid.pillar_size[0],
        c[1] + q[1] * 0.5 * grid.pillar_size[1],
        grid.z_mid() + q[2] * 0.5 * grid.pillar_size[2],
    ]
}

/// `k_gt` normalized target points per listed pillar, flat
/// `|ids| × k_gt × 3`. Sampling is without replacement when the pillar
/// holds at least `k_gt` points, with replacement otherwise.
pub fn sample_targets<R: Rng + ?Sized>(
    frame: &PointFrame,
    pillars: &PillarSet,
    ids: &[usize],
    k_gt: usize,
    grid: &GridConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if k_gt == 0 {
        return Err(Error::InvalidArgument("k_gt must be positive".into()));
    }
    let mut out = Vec::with_capacity(ids.len() * k_gt * 3);
    for &id in ids {
        let list = pillars
            .point_lists
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("pillar row {id} of {}", pillars.len())))?;
        if list.is_empty() {
            return Err(Error::Integrity(format!("pillar row {id} has no points")));
        }
        let picks: Vec<usize> = if list.len() >= k_gt {
            index::sample(rng, list.len(), k_gt).into_vec()
        } else {
            (0..k_gt).map(|_| rng.gen_range(0..list.len())).collect()
        };
        for j in picks {
            out.extend(normalize_point(&frame.points[list[j]], pillars.coords[id], grid));
        }
    }
    Ok(out)
}
