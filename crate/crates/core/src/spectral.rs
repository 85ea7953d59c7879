//! Orthonormal DCT-II over length-`L` sequences.
//!
//! The plan stores the dense `L × L` basis. Row `u`, column `i` holds
//! `c_u · cos(π/L · (i + ½) · u)` with `c_0 = √(1/L)` and `c_u = √(2/L)`
//! otherwise, so the basis is orthogonal and the inverse is its transpose.
//! Transforms are `O(L²)`, which is fine for the horizons used here.

use ndarray::{Array2, ArrayView2};

use crate::error::{check_dim, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DctPlan {
    length: usize,
    basis: Array2<f64>,
}

impl DctPlan {
    /// Build a plan for sequences of `length` samples. Panics on `length == 0`.
    pub fn new(length: usize) -> Self {
        assert!(length > 0, "DCT length must be positive");
        let l = length as f64;
        let c0 = (1.0 / l).sqrt();
        let cu = (2.0 / l).sqrt();
        let basis = Array2::from_shape_fn((length, length), |(u, i)| {
            let c = if u == 0 { c0 } else { cu };
            c * (std::f64::consts::PI / l * (i as f64 + 0.5) * u as f64).cos()
        });
        Self { length, basis }
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn basis(&self) -> ArrayView2<'_, f64> {
        self.basis.view()
    }

    /// Coefficients `C[u] = c_u Σ_i x[i] cos(π/L (i+½) u)`.
    pub fn forward(&self, signal: &[f64]) -> Result<Vec<f64>> {
        check_dim("dct_forward signal length", self.length, signal.len())?;
        Ok(self
            .basis
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(signal).map(|(b, x)| b * x).sum())
            .collect())
    }

    /// `basisᵀ · coeffs`.
    pub fn inverse(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        check_dim("dct_inverse coefficient length", self.length, coeffs.len())?;
        let mut out = vec![0.0; self.length];
        for (u, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (o, b) in out.iter_mut().zip(self.basis.row(u)) {
                *o += b * c;
            }
        }
        Ok(out)
    }

    /// Transform each column of an `L × d` array independently.
    pub fn forward_columns(&self, traj: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("dct_trajectory row count", self.length, traj.nrows())?;
        Ok(self.basis.dot(&traj))
    }

    /// Inverse transform of each column of an `L × d` coefficient array.
    pub fn inverse_columns(&self, coeffs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("dct_inverse row count", self.length, coeffs.nrows())?;
        Ok(self.basis.t().dot(&coeffs))
    }
}
