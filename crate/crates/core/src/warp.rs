//! Axial (Bernstein) and geometric warping units.

use serde::{Deserialize, Serialize};

use crate::error::{GeoWarpError, Result};

const BOUNDS_TOL: f64 = 1e-9;

/// Bernstein basis `ψ_{0,L}(x), .., ψ_{L,L}(x)` by repeated convex
/// combination, which stays accurate for orders in the tens.
pub(crate) fn bernstein(order: usize, x: f64) -> Vec<f64> {
    let mut b = vec![0.0; order + 1];
    b[0] = 1.0;
    for k in 1..=order {
        for i in (1..=k).rev() {
            b[i] = (1.0 - x) * b[i] + x * b[i - 1];
        }
        b[0] *= 1.0 - x;
    }
    b
}

/// `T_j = Σ_{l ≥ j} ψ_{l,L}(x)` for `j = 1..L`, so that `u* = Σ_j γ_j T_j`
/// and `∂u*/∂γ_j = T_j`.
pub(crate) fn bernstein_tails(order: usize, x: f64) -> Vec<f64> {
    let b = bernstein(order, x);
    let mut tails = vec![0.0; order];
    let mut acc = 0.0;
    for j in (1..=order).rev() {
        acc += b[j];
        tails[j - 1] = acc;
    }
    tails
}

/// Monotone warping of one coordinate axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxialWarping {
    increments: Vec<f64>,
    lower: f64,
    upper: f64,
}

impl AxialWarping {
    pub fn new(increments: Vec<f64>, lower: f64, upper: f64) -> Result<Self> {
        if increments.is_empty() {
            return Err(GeoWarpError::config("an AWU needs at least one increment"));
        }
        if increments.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(GeoWarpError::domain("AWU increments must be positive"));
        }
        if !(lower.is_finite() && upper.is_finite() && upper > lower) {
            return Err(GeoWarpError::domain(format!(
                "invalid AWU bounds [{lower}, {upper}]"
            )));
        }
        Ok(Self { increments, lower, upper })
    }

    pub fn order(&self) -> usize {
        self.increments.len()
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    /// Cumulative coefficients `λ_l = Σ_{l' ≤ l} γ_{l'}`.
    pub fn coefficients(&self) -> Vec<f64> {
        self.increments
            .iter()
            .scan(0.0, |acc, g| {
                *acc += g;
                Some(*acc)
            })
            .collect()
    }

    /// Position of `u` on the unit interval.
    pub fn unit(&self, u: f64) -> Result<f64> {
        if !u.is_finite() || u < self.lower - BOUNDS_TOL || u > self.upper + BOUNDS_TOL {
            return Err(GeoWarpError::domain(format!(
                "coordinate {u} outside [{}, {}]",
                self.lower, self.upper
            )));
        }
        Ok(((u - self.lower) / (self.upper - self.lower)).clamp(0.0, 1.0))
    }

    pub fn warp(&self, u: f64) -> Result<f64> {
        let x = self.unit(u)?;
        Ok(bernstein_tails(self.order(), x)
            .iter()
            .zip(&self.increments)
            .map(|(t, g)| t * g)
            .sum())
    }

    /// `du*/du`, always positive.
    pub fn derivative(&self, u: f64) -> Result<f64> {
        let x = self.unit(u)?;
        let l = self.order();
        let b = bernstein(l - 1, x);
        let s: f64 = b.iter().zip(&self.increments).map(|(p, g)| p * g).sum();
        Ok(l as f64 * s / (self.upper - self.lower))
    }
}

/// Linear map `x = R u*` by the upper-triangular Cholesky factor of a
/// correlation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricWarping {
    r: Vec<Vec<f64>>,
}

impl GeometricWarping {
    pub fn new(r: Vec<Vec<f64>>) -> Result<Self> {
        let k = r.len();
        if k == 0 || r.iter().any(|row| row.len() != k) {
            return Err(GeoWarpError::config("R must be a non-empty square matrix"));
        }
        for (i, row) in r.iter().enumerate() {
            if row[..i].iter().any(|v| *v != 0.0) {
                return Err(GeoWarpError::domain("R must be upper triangular"));
            }
            if !(row[i] > 0.0) {
                return Err(GeoWarpError::domain("R must have a positive diagonal"));
            }
        }
        for j in 0..k {
            let norm: f64 = (0..=j).map(|i| r[i][j] * r[i][j]).sum();
            if (norm - 1.0).abs() > 1e-12 {
                return Err(GeoWarpError::domain(format!(
                    "column {j} of R has squared norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self { r })
    }

    pub fn identity(k: usize) -> Self {
        let r = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { r }
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.r
    }

    pub fn dim(&self) -> usize {
        self.r.len()
    }

    /// `A = R'R`.
    pub fn correlation(&self) -> Vec<Vec<f64>> {
        let k = self.dim();
        let mut a = vec![vec![0.0; k]; k];
        for (i, row) in a.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..k).map(|l| self.r[l][i] * self.r[l][j]).sum();
            }
        }
        a
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        self.r
            .iter()
            .enumerate()
            .map(|(i, row)| (i..row.len()).map(|j| row[j] * u[j]).sum())
            .collect()
    }
}

/// The full warping: one AWU per axis followed by the geometric unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Warping {
    pub axes: Vec<AxialWarping>,
    pub geometric: GeometricWarping,
}

impl Warping {
    pub fn new(axes: Vec<AxialWarping>, geometric: GeometricWarping) -> Result<Self> {
        crate::error::check_len(axes.len(), geometric.dim())?;
        Ok(Self { axes, geometric })
    }

    /// Axial stage only: `(u_1*(u_1), .., u_{D+1}*(u_{D+1}))`.
    pub fn axial(&self, u: &[f64]) -> Result<Vec<f64>> {
        crate::error::check_len(self.axes.len(), u.len())?;
        self.axes.iter().zip(u).map(|(a, v)| a.warp(*v)).collect()
    }

    pub fn warp_point(&self, u: &[f64]) -> Result<Vec<f64>> {
        Ok(self.geometric.apply(&self.axial(u)?))
    }

    pub fn distance(&self, u1: &[f64], u2: &[f64]) -> Result<f64> {
        let a = self.warp_point(u1)?;
        let b = self.warp_point(u2)?;
        Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binom(n: usize, k: usize) -> f64 {
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }

    fn naive(gammas: &[f64], x: f64) -> f64 {
        let l = gammas.len();
        let mut lambda = 0.0;
        let mut total = 0.0;
        for (i, g) in gammas.iter().enumerate() {
            lambda += g;
            let k = i + 1;
            total += binom(l, k) * x.powi(k as i32) * (1.0 - x).powi((l - k) as i32) * lambda;
        }
        total
    }

    #[test]
    fn endpoints() {
        let aw = AxialWarping::new(vec![0.3, 1.2, 0.5], 2.0, 6.0).unwrap();
        assert_eq!(aw.warp(2.0).unwrap(), 0.0);
        assert!((aw.warp(6.0).unwrap() - 2.0).abs() < 1e-15);
        assert!(aw.warp(6.1).is_err());
    }

    #[test]
    fn equal_increments_are_linear() {
        for l in [1, 2, 5, 20] {
            let aw = AxialWarping::new(vec![0.7; l], 0.0, 4.0).unwrap();
            for i in 0..=40 {
                let u = i as f64 * 0.1;
                let expected = 0.7 * l as f64 * u / 4.0;
                assert!((aw.warp(u).unwrap() - expected).abs() < 1e-12);
                let d = aw.derivative(u).unwrap();
                assert!((d - 0.7 * l as f64 / 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn derivative_peaks_under_dominant_increment() {
        let mut g = vec![0.01; 20];
        g[9] = 5.0;
        let aw = AxialWarping::new(g, 0.0, 1.0).unwrap();
        let (mut best, mut arg) = (0.0, 0.0);
        for i in 0..=1000 {
            let u = i as f64 / 1000.0;
            let d = aw.derivative(u).unwrap();
            if d > best {
                best = d;
                arg = u;
            }
        }
        // ψ_{9,19} dominates the derivative and peaks at 9/19.
        assert!((arg - 9.0 / 19.0).abs() < 0.05, "peak at {arg}");
    }

    #[test]
    fn distance_is_quadratic_form() {
        let s = (0.5f64).sqrt();
        let r = vec![vec![1.0, 0.6, s * 0.2], vec![0.0, 0.8, 0.3], vec![0.0, 0.0, 0.0]];
        let mut r = r;
        r[2][2] = (1.0 - r[0][2] * r[0][2] - r[1][2] * r[1][2]).sqrt();
        let geo = GeometricWarping::new(r).unwrap();
        let axes = vec![
            AxialWarping::new(vec![0.4, 0.9], 0.0, 10.0).unwrap(),
            AxialWarping::new(vec![1.1, 0.2], 0.0, 10.0).unwrap(),
            AxialWarping::new(vec![0.3; 20], 0.0, 5.0).unwrap(),
        ];
        let w = Warping::new(axes, geo.clone()).unwrap();
        let u1 = [1.0, 7.0, 2.5];
        let u2 = [4.0, 3.0, 0.5];
        let a = geo.correlation();
        let du: Vec<f64> = w
            .axial(&u1)
            .unwrap()
            .iter()
            .zip(w.axial(&u2).unwrap())
            .map(|(x, y)| x - y)
            .collect();
        let q: f64 = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| du[i] * a[i][j] * du[j]).sum();
        let d = w.distance(&u1, &u2).unwrap();
        assert!((d * d - q).abs() < 1e-12);
        for i in 0..3 {
            assert!((a[i][i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_warp() {
        let axes = vec![
            AxialWarping::new(vec![5.0, 5.0], 0.0, 10.0).unwrap(),
            AxialWarping::new(vec![2.0; 20], 0.0, 40.0).unwrap(),
        ];
        let w = Warping::new(axes, GeometricWarping::identity(2)).unwrap();
        let p = w.warp_point(&[3.0, 17.0]).unwrap();
        assert!((p[0] - 3.0).abs() < 1e-12 && (p[1] - 17.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_r() {
        assert!(GeometricWarping::new(vec![vec![1.0, 0.5], vec![0.0, 0.5]]).is_err());
        assert!(GeometricWarping::new(vec![vec![1.0, 0.0], vec![0.1, 1.0]]).is_err());
    }

    proptest! {
        #[test]
        fn matches_naive_sum(g in proptest::collection::vec(0.01f64..3.0, 1..21), x in 0.0f64..=1.0) {
            let aw = AxialWarping::new(g.clone(), 0.0, 1.0).unwrap();
            let v = aw.warp(x).unwrap();
            prop_assert!((v - naive(&g, x)).abs() < 1e-12 * (1.0 + v.abs()));
        }

        #[test]
        fn monotone(g in proptest::collection::vec(0.01f64..3.0, 1..21), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            prop_assume!(a < b);
            let aw = AxialWarping::new(g, 0.0, 1.0).unwrap();
            prop_assert!(aw.warp(a).unwrap() < aw.warp(b).unwrap());
        }

        #[test]
        fn derivative_matches_differences(g in proptest::collection::vec(0.05f64..3.0, 1..21), x in 0.01f64..0.99) {
            let aw = AxialWarping::new(g, 0.0, 3.0).unwrap();
            let u = 3.0 * x;
            let step = 1e-6;
            let fd = (aw.warp(u + step).unwrap() - aw.warp(u - step).unwrap()) / (2.0 * step);
            let d = aw.derivative(u).unwrap();
            prop_assert!(d > 0.0);
            prop_assert!((fd - d).abs() < 1e-6 * d.max(1e-3));
        }
    }
}
