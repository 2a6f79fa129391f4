//! Similarity grid: greedy nearest-image assignment on a uniform lattice.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pca::Coords2D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
    /// Row-major; top row first.
    pub cells: Vec<Option<String>>,
    /// Row-major index into `assigned_from`, parallel to `cells`.
    pub cell_index: Vec<Option<usize>>,
    /// Lattice point of each cell in projection space.
    pub cell_coords: Vec<[f64; 2]>,
    pub assigned_from: Coords2D,
}

impl GridLayout {
    pub fn cell(&self, row: usize, col: usize) -> Option<&str> {
        self.cells[row * self.cols + col].as_deref()
    }

    pub fn filled(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }
}

/// `floor(sqrt(n))` rows and columns, at least one of each.
pub fn default_dims(n: usize) -> (usize, usize) {
    let s = (n as f64).sqrt().floor() as usize;
    let s = s.max(1);
    (s, s)
}

fn axis(lo: f64, hi: f64, steps: usize, i: usize) -> f64 {
    if steps == 1 {
        0.5 * (lo + hi)
    } else {
        lo + (hi - lo) * i as f64 / (steps - 1) as f64
    }
}

/// Uniform lattice over the bounding box of `coords`, row-major from the top
/// (maximum y) row.
pub fn lattice(coords: &Coords2D, rows: usize, cols: usize) -> Vec<[f64; 2]> {
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &coords.points {
        min_x = min_x.min(p[0]);
        max_x = max_x.max(p[0]);
        min_y = min_y.min(p[1]);
        max_y = max_y.max(p[1]);
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let y = axis(max_y, min_y, rows, r);
        for c in 0..cols {
            out.push([axis(min_x, max_x, cols, c), y]);
        }
    }
    out
}

/// Visits lattice points in row-major order and gives each the closest image
/// not yet placed (lowest index on ties). Cells past the last image stay empty.
pub fn make_grid(coords: &Coords2D, rows: usize, cols: usize) -> Result<GridLayout> {
    if coords.is_empty() {
        return Err(Error::Empty("no coordinates to grid"));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidParameter(format!(
            "grid must be at least 1x1, got {rows}x{cols}"
        )));
    }
    if coords.points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite coordinates".into()));
    }
    let cell_coords = lattice(coords, rows, cols);
    let mut used = vec![false; coords.len()];
    let mut remaining = coords.len();
    let mut cell_index = vec![None; rows * cols];

    for (cell, g) in cell_coords.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in coords.points.iter().enumerate() {
            if used[i] {
                continue;
            }
            let d = (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("remaining > 0");
        used[i] = true;
        remaining -= 1;
        cell_index[cell] = Some(i);
    }

    Ok(GridLayout {
        rows,
        cols,
        cells: cell_index
            .iter()
            .map(|c| c.map(|i| coords.ids[i].clone()))
            .collect(),
        cell_index,
        cell_coords,
        assigned_from: coords.clone(),
    })
}
