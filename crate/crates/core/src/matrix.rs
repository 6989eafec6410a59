//! Column-major feature matrices: `d` rows (feature dimension) by `n`
//! columns (samples).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A batch of feature vectors, one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(DMatrix<f64>);

impl FeatureMatrix {
    pub fn new(inner: DMatrix<f64>) -> Self {
        FeatureMatrix(inner)
    }

    pub fn zeros(d: usize, n: usize) -> Self {
        FeatureMatrix(DMatrix::zeros(d, n))
    }

    /// Builds from a row-major buffer of length `d * n`.
    pub fn from_row_major(d: usize, n: usize, data: &[f64]) -> Result<Self> {
        if data.len() != d * n {
            return Err(Error::DimensionMismatch {
                context: "feature matrix buffer",
                expected: d * n,
                actual: data.len(),
            });
        }
        Ok(FeatureMatrix(DMatrix::from_row_slice(d, n, data)))
    }

    pub fn from_columns(columns: &[DVector<f64>]) -> Self {
        FeatureMatrix(DMatrix::from_columns(columns))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn len(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.0.ncols() == 0
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn as_matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn column(&self, j: usize) -> DVector<f64> {
        self.0.column(j).into_owned()
    }

    /// Columns at `indices`, in that order.
    pub fn select_columns(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix(self.0.select_columns(indices))
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let (d, n) = self.0.shape();
        let mut out = Vec::with_capacity(d * n);
        for i in 0..d {
            for j in 0..n {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    /// Mean over all entries of the squared value.
    pub fn mean_power(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.norm_squared() / self.0.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// True when every entry is exactly zero.
    pub fn is_degenerate(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

impl From<DMatrix<f64>> for FeatureMatrix {
    fn from(m: DMatrix<f64>) -> Self {
        FeatureMatrix(m)
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixWire {
    d: usize,
    n: usize,
    data: Vec<f64>,
}

impl Serialize for FeatureMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixWire {
            d: self.dim(),
            n: self.len(),
            data: self.to_row_major(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FeatureMatrix {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let w = MatrixWire::deserialize(de)?;
        FeatureMatrix::from_row_major(w.d, w.n, &w.data).map_err(serde::de::Error::custom)
    }
}

/// Row-major serde adapter for plain `DMatrix<f64>` fields.
pub(crate) mod row_major {
    use super::*;

    pub fn serialize<S: Serializer>(
        m: &DMatrix<f64>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        FeatureMatrix(m.clone()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> std::result::Result<DMatrix<f64>, D::Error> {
        FeatureMatrix::deserialize(de).map(FeatureMatrix::into_matrix)
    }
}

/// Induced infinity norm: maximum absolute row sum.
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Ratio of largest to smallest singular value (infinite when singular).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_json_layout() {
        let m = FeatureMatrix::from_row_major(2, 3, &[1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(m.as_matrix()[(1, 0)], 4.0);
        let json = serde_json::to_value(&m).unwrap();
        assert_eq!(json["d"], 2);
        assert_eq!(json["n"], 3);
        assert_eq!(json["data"][1], 2.0);
        let back: FeatureMatrix = serde_json::from_value(json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_short_buffer() {
        assert!(FeatureMatrix::from_row_major(2, 2, &[1.0]).is_err());
    }

    #[test]
    fn inf_norm_is_max_row_sum() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 0.5]);
        assert_eq!(inf_norm(&m), 3.0);
    }
}
