//! Parameter containers and the partial-correlation chart for `R`.

use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// The non-marginalised unknowns `θ = (κ, γ, R, σ_ε², σ_β², ℓ_ζ, σ_ζ²)`.
///
/// The shape is the same for every variant; blocks a variant does not use
/// hold fixed placeholder values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    /// `(η, ζ_1, .., ζ_{K_ζ})`.
    pub kappa: Vec<f64>,
    /// AWU increments, one vector per axis (vertical last).
    pub gamma: Vec<Vec<f64>>,
    /// Upper-triangular geometric factor, row-major.
    pub r: Vec<Vec<f64>>,
    pub sigma_eps_sq: f64,
    pub sigma_beta_sq: f64,
    pub ell_zeta: f64,
    pub sigma_zeta_sq: f64,
}

impl ParameterVector {
    pub fn eta(&self) -> f64 {
        self.kappa[0]
    }

    pub fn zeta(&self) -> &[f64] {
        &self.kappa[1..]
    }
}

/// Gradient with the same layout as [`ParameterVector`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterGradient {
    pub kappa: Vec<f64>,
    pub gamma: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub sigma_eps_sq: f64,
    pub sigma_beta_sq: f64,
    pub ell_zeta: f64,
    pub sigma_zeta_sq: f64,
}

impl ParameterGradient {
    pub fn zeros_like(theta: &ParameterVector) -> Self {
        Self {
            kappa: vec![0.0; theta.kappa.len()],
            gamma: theta.gamma.iter().map(|g| vec![0.0; g.len()]).collect(),
            r: theta.r.iter().map(|row| vec![0.0; row.len()]).collect(),
            sigma_eps_sq: 0.0,
            sigma_beta_sq: 0.0,
            ell_zeta: 0.0,
            sigma_zeta_sq: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &ParameterGradient) {
        for (a, b) in self.kappa.iter_mut().zip(&other.kappa) {
            *a += b;
        }
        for (ga, gb) in self.gamma.iter_mut().zip(&other.gamma) {
            for (a, b) in ga.iter_mut().zip(gb) {
                *a += b;
            }
        }
        for (ra, rb) in self.r.iter_mut().zip(&other.r) {
            for (a, b) in ra.iter_mut().zip(rb) {
                *a += b;
            }
        }
        self.sigma_eps_sq += other.sigma_eps_sq;
        self.sigma_beta_sq += other.sigma_beta_sq;
        self.ell_zeta += other.ell_zeta;
        self.sigma_zeta_sq += other.sigma_zeta_sq;
    }
}

/// Mean-profile coefficients `ω = (α_0, α_1, β_1, .., β_{K_β})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCoefficients {
    pub alpha: [f64; 2],
    pub beta: Vec<f64>,
}

impl MeanCoefficients {
    pub fn from_vector(omega: &[f64]) -> Self {
        Self { alpha: [omega[0], omega[1]], beta: omega[2..].to_vec() }
    }

    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.alpha.to_vec();
        v.extend_from_slice(&self.beta);
        v
    }

    pub fn zeros(k_beta: usize) -> Self {
        Self { alpha: [0.0; 2], beta: vec![0.0; k_beta] }
    }
}

/// Forward-mode dual number for differentiating the `R` chart.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Dual {
    pub v: f64,
    pub d: f64,
}

pub(crate) trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn ln(self) -> Self;
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: self.d + o.d }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: self.d - o.d }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual { v: self.v * o.v, d: self.d * o.v + self.v * o.d }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual { v: self.v / o.v, d: (self.d * o.v - self.v * o.d) / (o.v * o.v) }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual { v: -self.v, d: -self.d }
    }
}

impl Real for Dual {
    fn cst(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Dual { v: s, d: self.d / (2.0 * s) }
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Dual { v: t, d: self.d * (1.0 - t * t) }
    }
    fn ln(self) -> Self {
        Dual { v: self.v.ln(), d: self.d / self.v }
    }
}

/// Maps `k(k-1)/2` unconstrained values to the upper factor `R` of a `k × k`
/// correlation matrix through canonical partial correlations `z = tanh(y)`,
/// returning `R` and the log-Jacobian of the map onto the free entries.
pub(crate) fn cpc_to_factor<T: Real>(y: &[T], k: usize) -> (Vec<Vec<T>>, T) {
    let mut l = vec![vec![T::cst(0.0); k]; k];
    let mut log_jac = T::cst(0.0);
    let mut next = 0;
    l[0][0] = T::cst(1.0);
    for i in 1..k {
        let mut sum_sq = T::cst(0.0);
        for j in 0..i {
            let z = y[next].tanh();
            next += 1;
            log_jac = log_jac + (T::cst(1.0) - z * z).ln();
            let remaining = T::cst(1.0) - sum_sq;
            if j > 0 {
                log_jac = log_jac + T::cst(0.5) * remaining.ln();
            }
            l[i][j] = z * remaining.sqrt();
            sum_sq = sum_sq + l[i][j] * l[i][j];
        }
        l[i][i] = (T::cst(1.0) - sum_sq).sqrt();
    }
    let mut r = vec![vec![T::cst(0.0); k]; k];
    for i in 0..k {
        for j in 0..=i {
            r[j][i] = l[i][j];
        }
    }
    (r, log_jac)
}

/// Inverse of [`cpc_to_factor`].
pub(crate) fn factor_to_cpc(r: &[Vec<f64>]) -> Vec<f64> {
    let k = r.len();
    let mut y = Vec::with_capacity(k * (k - 1) / 2);
    for i in 1..k {
        let mut sum_sq = 0.0;
        for j in 0..i {
            let lij = r[j][i];
            let z = (lij / (1.0 - sum_sq).sqrt()).clamp(-1.0, 1.0);
            y.push(z.atanh());
            sum_sq += lij * lij;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cpc_round_trip_and_unit_columns() {
        let y = [0.3, -1.2, 0.8];
        let (r, _) = cpc_to_factor(&y, 3);
        for j in 0..3 {
            let norm: f64 = (0..3).map(|i| r[i][j] * r[i][j]).sum();
            assert!((norm - 1.0).abs() < 1e-14);
        }
        let back = factor_to_cpc(&r);
        for (a, b) in y.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_has_zero_coordinates() {
        let r = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(factor_to_cpc(&r), vec![0.0]);
    }

    #[test]
    fn dual_derivatives_match_differences() {
        let y = [0.4, 0.1, -0.7];
        for k in 0..3 {
            let dy: Vec<Dual> = y
                .iter()
                .enumerate()
                .map(|(i, v)| Dual { v: *v, d: if i == k { 1.0 } else { 0.0 } })
                .collect();
            let (r, lj) = cpc_to_factor(&dy, 3);
            let step = 1e-6;
            let mut yp = y;
            yp[k] += step;
            let mut ym = y;
            ym[k] -= step;
            let (rp, ljp) = cpc_to_factor(&yp, 3);
            let (rm, ljm) = cpc_to_factor(&ym, 3);
            for i in 0..3 {
                for j in 0..3 {
                    let fd = (rp[i][j] - rm[i][j]) / (2.0 * step);
                    assert!((fd - r[i][j].d).abs() < 1e-8);
                }
            }
            assert!(((ljp - ljm) / (2.0 * step) - lj.d).abs() < 1e-8);
        }
    }

    #[test]
    fn log_jacobian_matches_determinant() {
        // Free entries of R for k = 3: R01, R02, R12.
        let y = [0.2, -0.5, 0.9];
        let free = |y: &[f64]| {
            let (r, _) = cpc_to_factor(y, 3);
            [r[0][1], r[0][2], r[1][2]]
        };
        let step = 1e-6;
        let mut jac = [[0.0; 3]; 3];
        for k in 0..3 {
            let mut yp = y;
            yp[k] += step;
            let mut ym = y;
            ym[k] -= step;
            let (fp, fm) = (free(&yp), free(&ym));
            for i in 0..3 {
                jac[i][k] = (fp[i] - fm[i]) / (2.0 * step);
            }
        }
        let det = jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
            - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
            + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0]);
        let (_, lj) = cpc_to_factor(&y, 3);
        assert!((det.abs().ln() - lj).abs() < 1e-7);
    }
}
