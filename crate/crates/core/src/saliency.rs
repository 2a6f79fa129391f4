//! Per-image failure probabilities and the tinted similarity-grid render.
//!
//! Each grid cell shows its image with a colour tint for the model's
//! correctness `1 - C`: purple where it fails, teal-green around 0.5 and
//! yellow where it is right. Output is binary PPM (P6).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::Scorer;
use crate::dataset::{quantize, Dataset};
use crate::error::{Error, Result};
use crate::grid::GridLayout;

/// Colormap anchors at correctness 0, 0.5 and 1.
pub const ANCHORS: [[u8; 3]; 3] = [[68, 1, 84], [33, 145, 140], [253, 231, 37]];
pub const EMPTY_CELL: [u8; 3] = [128, 128, 128];
pub const DEFAULT_ALPHA: f64 = 0.4;
pub const DEFAULT_CELL_PX: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub id: String,
    /// Sigmoid score `y_i`.
    pub prediction: f64,
    /// `C_i = |y_i - y_t|`.
    pub failure: f64,
}

/// Failure scores aligned with dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureScores {
    pub entries: Vec<FailureEntry>,
}

impl FailureScores {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn failures(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.failure).collect()
    }

    pub fn by_id(&self) -> HashMap<&str, &FailureEntry> {
        self.entries.iter().map(|e| (e.id.as_str(), e)).collect()
    }
}

/// Builds failure scores from predictions already computed for `dataset`.
pub fn failures_from_predictions(predictions: &[f64], dataset: &Dataset) -> Result<FailureScores> {
    if predictions.len() != dataset.len() {
        return Err(Error::InvalidParameter(format!(
            "{} predictions for {} records",
            predictions.len(),
            dataset.len()
        )));
    }
    let entries = dataset
        .iter()
        .zip(predictions)
        .map(|(r, &y)| {
            if !(0.0..=1.0).contains(&y) {
                return Err(Error::InvalidParameter(format!(
                    "score {y} for `{}` outside [0, 1]",
                    r.id
                )));
            }
            Ok(FailureEntry {
                id: r.id.clone(),
                prediction: y,
                failure: (y - r.label.as_f64()).abs(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(FailureScores { entries })
}

pub fn compute_failures<S: Scorer + ?Sized>(model: &S, dataset: &Dataset) -> Result<FailureScores> {
    if model.dim() != dataset.pixel_count() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: dataset.pixel_count(),
        });
    }
    failures_from_predictions(&model.predict_dataset(dataset)?, dataset)
}

/// Unrounded colour for a correctness value, clamped to `[0, 1]`.
pub fn colormap_exact(correctness: f64) -> [f64; 3] {
    let c = correctness.clamp(0.0, 1.0);
    let (lo, hi, t) = if c <= 0.5 {
        (ANCHORS[0], ANCHORS[1], c / 0.5)
    } else {
        (ANCHORS[1], ANCHORS[2], (c - 0.5) / 0.5)
    };
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = lo[k] as f64 + (hi[k] as f64 - lo[k] as f64) * t;
    }
    out
}

/// Colour for a correctness value, rounded half-to-even per channel.
pub fn colormap(correctness: f64) -> [u8; 3] {
    colormap_exact(correctness).map(|v| v.round_ties_even() as u8)
}

fn blend(gray: u8, tint: [u8; 3], alpha: f64) -> [u8; 3] {
    tint.map(|t| ((1.0 - alpha) * gray as f64 + alpha * t as f64).round_ties_even() as u8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellInfo {
    pub row: usize,
    pub col: usize,
    pub id: String,
    pub failure: f64,
    pub prediction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub rgb: Vec<u8>,
    pub anchors: [[u8; 3]; 3],
    pub cells: Vec<CellInfo>,
}

impl SaliencyImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = 3 * (y * self.width + x);
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let header = format!("P6\n{} {}\n255\n", self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.rgb.len());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode_ppm()).map_err(|e| Error::io(path, e))
    }

    /// JSON sidecar listing each filled cell with its id and scores.
    pub fn sidecar_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            anchors: &'a [[u8; 3]; 3],
            cells: &'a [CellInfo],
        }
        Ok(serde_json::to_string(&Sidecar {
            anchors: &self.anchors,
            cells: &self.cells,
        })?)
    }
}

/// Draws each cell's image at `cell_px` (nearest-neighbour) blended with its
/// correctness colour. Empty cells are flat grey.
pub fn render(
    grid: &GridLayout,
    dataset: &Dataset,
    failures: &FailureScores,
    cell_px: usize,
    alpha: f64,
) -> Result<SaliencyImage> {
    if cell_px < 8 {
        return Err(Error::InvalidParameter(format!(
            "cell_px {cell_px} below 8"
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!(
            "alpha {alpha} outside [0, 1]"
        )));
    }
    let index: HashMap<&str, usize> = dataset.ids().enumerate().map(|(i, id)| (id, i)).collect();
    let scores = failures.by_id();
    let (h, w) = (dataset.height(), dataset.width());
    let width = grid.cols * cell_px;
    let height = grid.rows * cell_px;
    let mut rgb = vec![0u8; width * height * 3];
    let mut cells = Vec::new();

    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let content = match grid.cell(row, col) {
                None => None,
                Some(id) => {
                    let entry = scores
                        .get(id)
                        .ok_or_else(|| Error::MissingScore(id.to_owned()))?;
                    let &ri = index
                        .get(id)
                        .ok_or_else(|| Error::UnknownId(id.to_owned()))?;
                    cells.push(CellInfo {
                        row,
                        col,
                        id: id.to_owned(),
                        failure: entry.failure,
                        prediction: entry.prediction,
                    });
                    Some((&dataset.records()[ri].pixels, colormap(1.0 - entry.failure)))
                }
            };
            for py in 0..cell_px {
                for px in 0..cell_px {
                    let color = match content {
                        None => EMPTY_CELL,
                        Some((pixels, tint)) => {
                            let sy = py * h / cell_px;
                            let sx = px * w / cell_px;
                            blend(quantize(pixels[sy * w + sx]), tint, alpha)
                        }
                    };
                    let o = 3 * ((row * cell_px + py) * width + col * cell_px + px);
                    rgb[o..o + 3].copy_from_slice(&color);
                }
            }
        }
    }
    Ok(SaliencyImage {
        width,
        height,
        rgb,
        anchors: ANCHORS,
        cells,
    })
}
