//! Observations and the per-covariate affine maps onto [0, 1].

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Affine map taking a raw covariate onto [0, 1]: scaled = (raw - offset) / range.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AffineMap {
    pub offset: f64,
    pub range: f64,
}

impl AffineMap {
    pub fn to_scaled(&self, raw: f64) -> f64 {
        (raw - self.offset) / self.range
    }

    pub fn to_raw(&self, scaled: f64) -> f64 {
        self.offset + scaled * self.range
    }
}

/// A response vector with a covariate matrix. Covariates are affinely mapped to
/// [0, 1] using the observed min and max; bandwidths elsewhere in the crate are
/// in these scaled units unless stated otherwise.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: DVector<f64>,
    x_raw: DMatrix<f64>,
    x_scaled: DMatrix<f64>,
    maps: Vec<AffineMap>,
    names: Vec<String>,
}

impl Dataset {
    pub fn new(y: DVector<f64>, x_raw: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let (n, d) = x_raw.shape();
        if y.len() != n {
            return Err(Error::Input(format!(
                "response length {} does not match {} covariate rows",
                y.len(),
                n
            )));
        }
        if d == 0 || n == 0 {
            return Err(Error::Input("empty dataset".into()));
        }
        let names = if names.is_empty() {
            (0..d).map(|j| format!("x{}", j + 1)).collect()
        } else {
            if names.len() != d {
                return Err(Error::Input("covariate name count mismatch".into()));
            }
            names
        };
        for v in y.iter().chain(x_raw.iter()) {
            if !v.is_finite() {
                return Err(Error::Input("non-finite value in dataset".into()));
            }
        }
        let mut maps = Vec::with_capacity(d);
        for j in 0..d {
            let col = x_raw.column(j);
            let min = col.min();
            let max = col.max();
            if max - min <= 0.0 {
                return Err(Error::DegenerateDesign(format!(
                    "covariate {} is constant",
                    names[j]
                )));
            }
            maps.push(AffineMap { offset: min, range: max - min });
        }
        let x_scaled = DMatrix::from_fn(n, d, |i, j| maps[j].to_scaled(x_raw[(i, j)]));
        Ok(Dataset { y, x_raw, x_scaled, maps, names })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x_raw.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x_raw(&self) -> &DMatrix<f64> {
        &self.x_raw
    }

    pub fn x_scaled(&self) -> &DMatrix<f64> {
        &self.x_scaled
    }

    pub fn scaled_col(&self, j: usize) -> DVector<f64> {
        self.x_scaled.column(j).into_owned()
    }

    pub fn map(&self, j: usize) -> AffineMap {
        self.maps[j]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Convert a bandwidth in scaled units to raw covariate units.
    pub fn bandwidth_to_raw(&self, j: usize, h_scaled: f64) -> f64 {
        h_scaled * self.maps[j].range
    }

    /// Convert a bandwidth in raw covariate units to scaled units.
    pub fn bandwidth_to_scaled(&self, j: usize, h_raw: f64) -> f64 {
        h_raw / self.maps[j].range
    }

    /// Replace the response, keeping covariates and scaling fixed.
    pub fn with_response(&self, y: DVector<f64>) -> Self {
        let mut out = self.clone();
        assert_eq!(y.len(), out.n());
        out.y = y;
        out
    }

    /// Retain only the rows for which `keep` is true.
    pub fn filter_rows(&self, keep: &[bool]) -> Result<Self> {
        assert_eq!(keep.len(), self.n());
        let idx: Vec<usize> = (0..self.n()).filter(|&i| keep[i]).collect();
        let y = DVector::from_fn(idx.len(), |i, _| self.y[idx[i]]);
        let x = DMatrix::from_fn(idx.len(), self.dim(), |i, j| self.x_raw[(idx[i], j)]);
        Dataset::new(y, x, self.names.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_maps_to_unit_interval() {
        let x = DMatrix::from_row_slice(4, 2, &[-1.0, 10.0, 0.0, 20.0, 1.0, 30.0, 0.5, 25.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let ds = Dataset::new(y, x, vec![]).unwrap();
        let s = ds.x_scaled();
        for v in s.iter() {
            assert!((0.0..=1.0).contains(v));
        }
        assert_eq!(s[(0, 0)], 0.0);
        assert_eq!(s[(2, 0)], 1.0);
        assert!((ds.bandwidth_to_raw(0, 0.5) - 1.0).abs() < 1e-15);
        assert!((ds.bandwidth_to_scaled(1, 10.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_covariate_rejected() {
        let x = DMatrix::from_row_slice(3, 1, &[2.0, 2.0, 2.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(Dataset::new(y, x, vec![]), Err(Error::DegenerateDesign(_))));
    }
}
