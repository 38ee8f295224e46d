//! Phase-mask roughness: mean absolute difference to the k nearest
//! neighbors (zero padded outside the mask), summed over pixels, plus the
//! intra-block variance smoothness term.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{DonnError, Result};
use crate::field::DonnModel;

/// 4- or 8-connected neighborhood.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum NeighborMode {
    Four,
    Eight,
}

const OFFSETS_4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
const OFFSETS_8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

impl NeighborMode {
    pub fn k(self) -> usize {
        match self {
            NeighborMode::Four => 4,
            NeighborMode::Eight => 8,
        }
    }

    pub fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            NeighborMode::Four => &OFFSETS_4,
            NeighborMode::Eight => &OFFSETS_8,
        }
    }

    /// One offset from each symmetric pair.
    fn half_offsets(self) -> &'static [(isize, isize)] {
        match self {
            NeighborMode::Four => &[(0, 1), (1, 0)],
            NeighborMode::Eight => &[(0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

impl Default for NeighborMode {
    fn default() -> Self {
        NeighborMode::Eight
    }
}

impl TryFrom<u8> for NeighborMode {
    type Error = String;

    fn try_from(k: u8) -> std::result::Result<Self, String> {
        match k {
            4 => Ok(NeighborMode::Four),
            8 => Ok(NeighborMode::Eight),
            other => Err(format!("neighbor count must be 4 or 8, got {other}")),
        }
    }
}

impl From<NeighborMode> for u8 {
    fn from(m: NeighborMode) -> u8 {
        m.k() as u8
    }
}

impl fmt::Display for NeighborMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.k())
    }
}

impl FromStr for NeighborMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.trim()
            .parse::<u8>()
            .map_err(|e| e.to_string())
            .and_then(NeighborMode::try_from)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Roughness of the pixel at `(i, j)`; out-of-bounds neighbors count as 0.
pub fn pixel_roughness(phase: &Array2<f64>, i: usize, j: usize, mode: NeighborMode) -> Result<f64> {
    let (rows, cols) = phase.dim();
    if i >= rows || j >= cols {
        return Err(DonnError::OutOfBounds { i, j, n: rows });
    }
    let p = phase[[i, j]];
    let total: f64 = mode
        .offsets()
        .iter()
        .map(|&(di, dj)| {
            let ni = i as isize + di;
            let nj = j as isize + dj;
            let v = if ni < 0 || nj < 0 || ni >= rows as isize || nj >= cols as isize {
                0.0
            } else {
                phase[[ni as usize, nj as usize]]
            };
            (v - p).abs()
        })
        .sum();
    Ok(total / mode.k() as f64)
}

/// Number of neighbors of `(i, j)` that fall in the zero padding.
fn padded_neighbors(i: usize, j: usize, rows: usize, cols: usize, mode: NeighborMode) -> usize {
    mode.offsets()
        .iter()
        .filter(|&&(di, dj)| {
            let ni = i as isize + di;
            let nj = j as isize + dj;
            ni < 0 || nj < 0 || ni >= rows as isize || nj >= cols as isize
        })
        .count()
}

/// Sum of per-pixel roughness over the whole mask.
///
/// Each in-bounds pair is visited once and counted for both endpoints;
/// padding terms are counted once per missing neighbor.
pub fn mask_roughness(phase: &Array2<f64>, mode: NeighborMode) -> f64 {
    let (rows, cols) = phase.dim();
    let mut pairs = 0.0;
    for &(di, dj) in mode.half_offsets() {
        for i in 0..rows {
            let ni = i as isize + di;
            if ni < 0 || ni >= rows as isize {
                continue;
            }
            for j in 0..cols {
                let nj = j as isize + dj;
                if nj < 0 || nj >= cols as isize {
                    continue;
                }
                pairs += (phase[[i, j]] - phase[[ni as usize, nj as usize]]).abs();
            }
        }
    }
    let mut boundary = 0.0;
    for ((i, j), &p) in phase.indexed_iter() {
        let missing = if i == 0 || j == 0 || i + 1 == rows || j + 1 == cols {
            padded_neighbors(i, j, rows, cols, mode)
        } else {
            0
        };
        boundary += missing as f64 * p.abs();
    }
    (2.0 * pairs + boundary) / mode.k() as f64
}

/// Subgradient of [`mask_roughness`]; zero differences contribute 0.
pub fn roughness_grad(phase: &Array2<f64>, mode: NeighborMode) -> Array2<f64> {
    let (rows, cols) = phase.dim();
    let mut grad = Array2::<f64>::zeros((rows, cols));
    let w = 2.0 / mode.k() as f64;
    for &(di, dj) in mode.half_offsets() {
        for i in 0..rows {
            let ni = i as isize + di;
            if ni < 0 || ni >= rows as isize {
                continue;
            }
            for j in 0..cols {
                let nj = j as isize + dj;
                if nj < 0 || nj >= cols as isize {
                    continue;
                }
                let (ni, nj) = (ni as usize, nj as usize);
                let g = w * sign(phase[[i, j]] - phase[[ni, nj]]);
                grad[[i, j]] += g;
                grad[[ni, nj]] -= g;
            }
        }
    }
    for ((i, j), &p) in phase.indexed_iter() {
        if i == 0 || j == 0 || i + 1 == rows || j + 1 == cols {
            let missing = padded_neighbors(i, j, rows, cols, mode);
            grad[[i, j]] += missing as f64 * sign(p) / mode.k() as f64;
        }
    }
    grad
}

fn check_partition(n: usize, block: usize) -> Result<()> {
    if block == 0 || n % block != 0 {
        return Err(DonnError::Partition { n, block });
    }
    Ok(())
}

/// Sum over `b x b` blocks of the population variance inside each block.
pub fn intra_block_variance(phase: &Array2<f64>, block: usize) -> Result<f64> {
    let n = phase.nrows();
    check_partition(n, block)?;
    let nb = n / block;
    let count = (block * block) as f64;
    let mut total = 0.0;
    for bi in 0..nb {
        for bj in 0..nb {
            let view = phase.slice(s![bi * block..(bi + 1) * block, bj * block..(bj + 1) * block]);
            let mean = view.sum() / count;
            total += view.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        }
    }
    Ok(total)
}

/// Gradient of [`intra_block_variance`]: `(2 / b^2) (p - block_mean)`.
pub fn intra_block_grad(phase: &Array2<f64>, block: usize) -> Result<Array2<f64>> {
    let n = phase.nrows();
    check_partition(n, block)?;
    let nb = n / block;
    let count = (block * block) as f64;
    let mut grad = Array2::<f64>::zeros(phase.dim());
    for bi in 0..nb {
        for bj in 0..nb {
            let rows = bi * block..(bi + 1) * block;
            let cols = bj * block..(bj + 1) * block;
            let view = phase.slice(s![rows.clone(), cols.clone()]);
            let mean = view.sum() / count;
            grad.slice_mut(s![rows, cols])
                .zip_mut_with(&view, |g, &p| *g = 2.0 / count * (p - mean));
        }
    }
    Ok(grad)
}

/// Per-layer and overall (mean) roughness of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoughnessReport {
    pub per_layer: Vec<f64>,
    pub overall: f64,
    pub mode: NeighborMode,
}

impl RoughnessReport {
    pub fn from_layers(per_layer: Vec<f64>, mode: NeighborMode) -> Self {
        let overall = if per_layer.is_empty() {
            0.0
        } else {
            per_layer.iter().sum::<f64>() / per_layer.len() as f64
        };
        Self {
            per_layer,
            overall,
            mode,
        }
    }

    /// CSV rows `layer,roughness,neighbors`, ending with an `overall` row.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows: Vec<String> = self
            .per_layer
            .iter()
            .enumerate()
            .map(|(l, r)| format!("{l},{r:e},{}", self.mode))
            .collect();
        rows.push(format!("overall,{:e},{}", self.overall, self.mode));
        rows
    }

    pub const CSV_HEADER: &'static str = "layer,roughness,neighbors";

    /// Parses the rows written by [`RoughnessReport::csv_rows`] for one mode.
    pub fn parse_csv_rows<'a>(rows: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let bad = |line: &str| DonnError::InvalidArgument(format!("malformed roughness row: {line}"));
        let mut per_layer = Vec::new();
        let mut overall = None;
        let mut mode = None;
        for line in rows {
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != 3 {
                return Err(bad(line));
            }
            let value: f64 = fields[1].parse().map_err(|_| bad(line))?;
            let m: NeighborMode = fields[2].parse().map_err(|_| bad(line))?;
            if *mode.get_or_insert(m) != m {
                return Err(bad(line));
            }
            if fields[0] == "overall" {
                overall = Some(value);
            } else {
                let l: usize = fields[0].parse().map_err(|_| bad(line))?;
                if l != per_layer.len() {
                    return Err(bad(line));
                }
                per_layer.push(value);
            }
        }
        let mode = mode.ok_or_else(|| DonnError::InvalidArgument("empty roughness table".into()))?;
        Ok(Self {
            per_layer,
            overall: overall.ok_or_else(|| DonnError::InvalidArgument("missing overall row".into()))?,
            mode,
        })
    }
}

pub fn overall_roughness(model: &DonnModel, mode: NeighborMode) -> RoughnessReport {
    RoughnessReport::from_layers(
        model.masks().iter().map(|m| mask_roughness(&m.phase, mode)).collect(),
        mode,
    )
}
