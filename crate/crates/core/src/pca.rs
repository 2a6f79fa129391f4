//! Rank-2 principal component basis over flattened images.
//!
//! Rows of the image matrix are mean-centred and the top two right singular
//! vectors, found through an eigendecomposition of the smaller Gram matrix,
//! become the projection basis. The coordinates of an image are its centred
//! pixel vector times that basis.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Number of retained components.
pub const RANK: usize = 2;

const FORMAT_TAG: &str = "popbias-pca";
const FORMAT_VERSION: u32 = 1;

/// Relative threshold below which the second singular value counts as zero.
pub const DEGENERATE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    /// Per-pixel mean of the fitted rows.
    pub mean: Vec<f64>,
    /// Orthonormal basis vectors, each of length P.
    pub components: [Vec<f64>; RANK],
    /// Descending singular values of the centred matrix.
    pub singular_values: [f64; RANK],
    /// Fingerprint of the data the basis was fitted on.
    pub trained_on: String,
}

/// One 2-D point per record, aligned with dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coords2D {
    pub ids: Vec<String>,
    pub points: Vec<[f64; 2]>,
}

impl Coords2D {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }
}

/// Stacks dataset records as rows of an N×P matrix.
pub fn image_matrix(dataset: &Dataset) -> DMatrix<f64> {
    let (n, p) = (dataset.len(), dataset.pixel_count());
    DMatrix::from_fn(n, p, |i, j| dataset.records()[i].pixels[j])
}

/// Subtracts the column mean from every row. Sums run sequentially in row
/// order so results are bit-stable.
pub fn mean_center_matrix(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (n, p) = x.shape();
    if n < 2 {
        return Err(Error::TooFewRows { need: 2, got: n });
    }
    let mut mean = vec![0.0; p];
    for i in 0..n {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += x[(i, j)];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, p, |i, j| x[(i, j)] - mean[j]);
    Ok((centered, mean))
}

pub fn mean_center(dataset: &Dataset) -> Result<(DMatrix<f64>, Vec<f64>)> {
    mean_center_matrix(&image_matrix(dataset))
}

/// Flips `v` so its largest-magnitude entry (earliest on ties) is positive.
pub fn normalize_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

impl PcaBasis {
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        let mut basis = Self::fit_matrix(&image_matrix(dataset))?;
        basis.trained_on = dataset_fingerprint(dataset);
        Ok(basis)
    }

    /// Fits on raw rows; the fingerprint hashes the matrix entries.
    pub fn fit_matrix(x: &DMatrix<f64>) -> Result<Self> {
        let (n, p) = x.shape();
        if n < 3 {
            return Err(Error::TooFewRows { need: 3, got: n });
        }
        if p < RANK {
            return Err(Error::InvalidParameter(format!(
                "need at least {RANK} columns, got {p}"
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite input".into()));
        }
        let (centered, mean) = mean_center_matrix(x)?;
        let (singular_values, components) = top_right_singular(centered)?;
        Ok(PcaBasis {
            mean,
            components,
            singular_values,
            trained_on: matrix_fingerprint(x),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Coordinates of one pixel vector in the basis.
    pub fn project_pixels(&self, pixels: &[f64]) -> Result<[f64; 2]> {
        if pixels.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: pixels.len(),
            });
        }
        let mut out = [0.0; 2];
        for (k, comp) in self.components.iter().enumerate() {
            out[k] = pixels
                .iter()
                .zip(&self.mean)
                .zip(comp)
                .map(|((x, m), w)| (x - m) * w)
                .sum();
        }
        Ok(out)
    }

    pub fn project(&self, dataset: &Dataset) -> Result<Coords2D> {
        if dataset.pixel_count() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: dataset.pixel_count(),
            });
        }
        let points = dataset
            .iter()
            .map(|r| self.project_pixels(&r.pixels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Coords2D {
            ids: dataset.ids().map(str::to_owned).collect(),
            points,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&BasisFile {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            basis: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: BasisFile = serde_json::from_str(text)?;
        if file.format != FORMAT_TAG || file.version != FORMAT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported basis file {} v{}",
                file.format, file.version
            )));
        }
        let p = file.basis.mean.len();
        if file.basis.components.iter().any(|c| c.len() != p) {
            return Err(Error::Serde("component length differs from mean".into()));
        }
        Ok(file.basis)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Serialize, Deserialize)]
struct BasisFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    basis: PcaBasis,
}

fn top_right_singular(centered: DMatrix<f64>) -> Result<([f64; RANK], [Vec<f64>; RANK])> {
    let (n, p) = centered.shape();
    // Eigen-decompose the smaller Gram matrix. Singular values are taken as
    // norms of the mapped vectors rather than square roots of eigenvalues so
    // that rank-deficient input stays detectable.
    let wide = n <= p;
    let gram = if wide {
        &centered * centered.transpose()
    } else {
        centered.transpose() * &centered
    };
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    // stable sort keeps the lower index first on equal eigenvalues
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut sigma = [0.0; RANK];
    let mut comps: [Vec<f64>; RANK] = [Vec::new(), Vec::new()];
    for k in 0..RANK {
        let Some(&idx) = order.get(k) else {
            return Err(Error::DegenerateSpectrum {
                sigma1: sigma[0],
                sigma2: 0.0,
            });
        };
        let e = eig.eigenvectors.column(idx);
        let mut v: Vec<f64> = if wide {
            let v = centered.tr_mul(&e);
            sigma[k] = v.norm();
            if sigma[k] > 0.0 {
                v.iter().map(|x| x / sigma[k]).collect()
            } else {
                v.iter().copied().collect()
            }
        } else {
            sigma[k] = (&centered * e).norm();
            e.iter().copied().collect()
        };
        normalize_sign(&mut v);
        comps[k] = v;
    }
    if !(sigma[0].is_finite() && sigma[1].is_finite()) {
        return Err(Error::InvalidParameter("non-finite singular values".into()));
    }
    if sigma[1] <= DEGENERATE_TOL * sigma[0].max(1.0) {
        return Err(Error::DegenerateSpectrum {
            sigma1: sigma[0],
            sigma2: sigma[1],
        });
    }
    Ok((sigma, comps))
}

/// Content hash of a dataset: dimensions, ids, labels and pixel bits.
pub fn dataset_fingerprint(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update((dataset.height() as u64).to_le_bytes());
    h.update((dataset.width() as u64).to_le_bytes());
    for r in dataset {
        h.update((r.id.len() as u64).to_le_bytes());
        h.update(r.id.as_bytes());
        h.update([r.label as u8]);
        for v in &r.pixels {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex16(&h.finalize())
}

fn matrix_fingerprint(x: &DMatrix<f64>) -> String {
    let mut h = Sha256::new();
    h.update((x.nrows() as u64).to_le_bytes());
    h.update((x.ncols() as u64).to_le_bytes());
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            h.update(x[(i, j)].to_bits().to_le_bytes());
        }
    }
    hex16(&h.finalize())
}

fn hex16(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_center_small_example() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 5.0]);
        let (c, mean) = mean_center_matrix(&x).unwrap();
        assert_eq!(mean, vec![2.0, 4.0]);
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, 1.0, 1.0]));
    }

    #[test]
    fn identical_rows_center_to_zero_and_are_degenerate() {
        let x = DMatrix::from_fn(5, 4, |_, j| j as f64 * 0.25);
        let (c, _) = mean_center_matrix(&x).unwrap();
        assert!(c.iter().all(|&v| v == 0.0));
        assert!(matches!(
            PcaBasis::fit_matrix(&x),
            Err(Error::DegenerateSpectrum { .. })
        ));
    }

    #[test]
    fn collinear_rows_are_degenerate() {
        let x = DMatrix::from_fn(6, 5, |i, j| (i as f64) * (j as f64 + 1.0) * 0.1);
        assert!(matches!(
            PcaBasis::fit_matrix(&x),
            Err(Error::DegenerateSpectrum { .. })
        ));
    }

    #[test]
    fn too_few_rows() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert!(matches!(
            mean_center_matrix(&x),
            Err(Error::TooFewRows { need: 2, got: 1 })
        ));
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(
            PcaBasis::fit_matrix(&x),
            Err(Error::TooFewRows { need: 3, got: 2 })
        ));
    }

    #[test]
    fn axis_aligned_cross() {
        let x = DMatrix::from_row_slice(4, 2, &[3.0, 0.0, -3.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let b = PcaBasis::fit_matrix(&x).unwrap();
        assert!((b.singular_values[0] - 18f64.sqrt()).abs() < 1e-12);
        assert!((b.singular_values[1] - 2f64.sqrt()).abs() < 1e-12);
        assert!((b.components[0][0] - 1.0).abs() < 1e-12 && b.components[0][1].abs() < 1e-12);
        assert!((b.components[1][1] - 1.0).abs() < 1e-12 && b.components[1][0].abs() < 1e-12);
    }

    #[test]
    fn sign_convention_breaks_ties_by_index() {
        let mut v = vec![-0.5, 0.5, 0.1];
        normalize_sign(&mut v);
        assert_eq!(v, vec![0.5, -0.5, -0.1]);
    }

    #[test]
    fn project_rejects_wrong_dimension() {
        let x = DMatrix::from_row_slice(4, 2, &[3.0, 0.0, -3.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let b = PcaBasis::fit_matrix(&x).unwrap();
        assert!(matches!(
            b.project_pixels(&[0.0; 3]),
            Err(Error::DimensionMismatch {
                expected: 2,
                got: 3
            })
        ));
        assert_eq!(b.project_pixels(&b.mean).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let x = DMatrix::from_fn(7, 5, |i, j| {
            ((i * 31 + j * 17) % 13) as f64 / 7.0 + 1e-3 * i as f64
        });
        let b = PcaBasis::fit_matrix(&x).unwrap();
        let back = PcaBasis::from_json(&b.to_json().unwrap()).unwrap();
        assert_eq!(back, b);
        assert!(PcaBasis::from_json("{\"format\":\"x\",\"version\":1}").is_err());
    }
}
