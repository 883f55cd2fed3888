//! Cubic (order-4) B-spline bases on uniform knots over `[0, h_max]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GeoWarpError, Result};

const DEGREE: usize = 3;
const DOMAIN_TOL: f64 = 1e-9;

/// Uniform cubic B-spline basis.
///
/// With boundary knots the basis has one function centred at every multiple of
/// `spacing` from `-3Δ` to `h_max + 3Δ`, giving `h_max/Δ + 7` functions that
/// form a partition of unity on `[0, h_max]`. Without them the knot vector is
/// clamped to `[0, h_max]` and there are `h_max/Δ + 3` functions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    spacing: f64,
    h_max: f64,
    boundary_knots: bool,
    knots: Vec<f64>,
}

impl BSplineBasis {
    pub fn new(h_max: f64, spacing: f64, boundary_knots: bool) -> Result<Self> {
        if !(spacing > 0.0 && h_max > 0.0 && spacing.is_finite() && h_max.is_finite()) {
            return Err(GeoWarpError::config(format!(
                "invalid B-spline domain: h_max={h_max}, spacing={spacing}"
            )));
        }
        let ratio = h_max / spacing;
        let intervals = ratio.round();
        if (ratio - intervals).abs() > 1e-8 * ratio.max(1.0) || intervals < 1.0 {
            return Err(GeoWarpError::config(format!(
                "h_max={h_max} is not a multiple of the knot spacing {spacing}"
            )));
        }
        let n = intervals as usize;
        let knots = if boundary_knots {
            (0..n + 11).map(|i| (i as f64 - 5.0) * spacing).collect()
        } else {
            let mut k = vec![0.0; DEGREE];
            k.extend((0..=n).map(|i| i as f64 * spacing));
            k.extend(std::iter::repeat(n as f64 * spacing).take(DEGREE));
            k
        };
        Ok(Self { spacing, h_max, boundary_knots, knots })
    }

    pub fn with_boundary_knots(h_max: f64, spacing: f64) -> Result<Self> {
        Self::new(h_max, spacing, true)
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn h_max(&self) -> f64 {
        self.h_max
    }

    pub fn has_boundary_knots(&self) -> bool {
        self.boundary_knots
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions `K`.
    pub fn len(&self) -> usize {
        self.knots.len() - DEGREE - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, h: f64) -> Result<f64> {
        if !h.is_finite() || h < -DOMAIN_TOL || h > self.h_max + DOMAIN_TOL {
            return Err(GeoWarpError::domain(format!(
                "depth {h} outside [0, {}]",
                self.h_max
            )));
        }
        Ok(h.clamp(0.0, self.h_max))
    }

    /// Index of the first non-zero function at `h` and the four values
    /// starting there.
    pub fn eval_nonzero(&self, h: f64) -> Result<(usize, [f64; 4])> {
        let h = self.check(h)?;
        let t = &self.knots;
        let mut span = t.partition_point(|&k| k <= h) - 1;
        // Keep the right end inside the last non-degenerate interval.
        let last = t.len() - DEGREE - 2;
        if span > last {
            span = last;
        }
        while t[span + 1] <= t[span] {
            span -= 1;
        }
        let mut n = [0.0; 4];
        let mut left = [0.0; 4];
        let mut right = [0.0; 4];
        n[0] = 1.0;
        for j in 1..=DEGREE {
            left[j] = h - t[span + 1 - j];
            right[j] = t[span + j] - h;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        Ok((span - DEGREE, n))
    }

    /// Full row `φ_1(h), .., φ_K(h)`.
    pub fn basis_row(&self, h: f64) -> Result<Vec<f64>> {
        let (first, vals) = self.eval_nonzero(h)?;
        let mut row = vec![0.0; self.len()];
        row[first..first + 4].copy_from_slice(&vals);
        Ok(row)
    }

    pub fn basis_matrix(&self, depths: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(depths.len(), self.len());
        for (i, &h) in depths.iter().enumerate() {
            let (first, vals) = self.eval_nonzero(h)?;
            for (k, v) in vals.iter().enumerate() {
                m[(i, first + k)] = *v;
            }
        }
        Ok(m)
    }

    /// Mean design matrix with columns `1, h, φ_1(h), .., φ_K(h)`.
    pub fn design_matrix_mean(&self, depths: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(depths.len(), self.len() + 2);
        for (i, &h) in depths.iter().enumerate() {
            let (first, vals) = self.eval_nonzero(h)?;
            m[(i, 0)] = 1.0;
            m[(i, 1)] = h;
            for (k, v) in vals.iter().enumerate() {
                m[(i, 2 + first + k)] = *v;
            }
        }
        Ok(m)
    }

    /// `Σ_k φ_k(h) c_k`.
    pub fn evaluate(&self, coefficients: &[f64], h: f64) -> Result<f64> {
        crate::error::check_len(self.len(), coefficients.len())?;
        let (first, vals) = self.eval_nonzero(h)?;
        Ok(vals.iter().zip(&coefficients[first..first + 4]).map(|(a, b)| a * b).sum())
    }
}
