//! Prior log-densities and their gradients.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::config::WarpMode;
use crate::error::{GeoWarpError, Result};
use crate::model::Model;
use crate::params::{ParameterGradient, ParameterVector};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Inverse-gamma log-density (shape `a`, scale `b`) and its derivative.
pub fn inv_gamma_log_pdf(x: f64, a: f64, b: f64) -> (f64, f64) {
    if !(x > 0.0) {
        return (f64::NEG_INFINITY, 0.0);
    }
    let v = a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x;
    (v, -(a + 1.0) / x + b / (x * x))
}

/// Gamma log-density (shape `a`, rate `b`) and its derivative.
pub fn gamma_log_pdf(x: f64, a: f64, b: f64) -> (f64, f64) {
    if !(x > 0.0) {
        return (f64::NEG_INFINITY, 0.0);
    }
    let v = a * b.ln() - ln_gamma(a) + (a - 1.0) * x.ln() - b * x;
    (v, (a - 1.0) / x - b)
}

/// Half-normal log-density with variance parameter `s2` and its derivative.
pub fn half_normal_log_pdf(x: f64, s2: f64) -> (f64, f64) {
    if !(x >= 0.0) {
        return (f64::NEG_INFINITY, 0.0);
    }
    let v = std::f64::consts::LN_2 - 0.5 * (LN_2PI + s2.ln()) - x * x / (2.0 * s2);
    (v, -x / s2)
}

/// Density of `x` when `1/x` is uniform on `[1/hi, 1/lo]`, and its
/// derivative.
pub fn inverse_uniform_log_pdf(x: f64, lo: f64, hi: f64) -> (f64, f64) {
    if !(x >= lo && x <= hi) {
        return (f64::NEG_INFINITY, 0.0);
    }
    (-2.0 * x.ln() - (1.0 / lo - 1.0 / hi).ln(), -2.0 / x)
}

/// LKJ prior on `A = R'R` expressed through `R`, up to a constant:
/// `Σ_d (K - d + 2ρ - 2) log R_dd` with 1-based `d`.
pub fn lkj_r_log_density(r: &[Vec<f64>], rho: f64) -> f64 {
    let k = r.len();
    (0..k).map(|i| (k as f64 - (i + 1) as f64 + 2.0 * rho - 2.0) * r[i][i].ln()).sum()
}

/// Correlation structure for a vector of spline coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplineCoefficientPrior {
    /// `c_ij = min(i, j)` (1-based).
    RandomWalk,
    /// `c_ij = exp(-|i - j| / ℓ)`.
    ExponentialDecay { length: f64 },
}

impl SplineCoefficientPrior {
    pub fn correlation_matrix(&self, k: usize) -> DMatrix<f64> {
        match *self {
            Self::RandomWalk => DMatrix::from_fn(k, k, |i, j| (i.min(j) + 1) as f64),
            Self::ExponentialDecay { length } => {
                DMatrix::from_fn(k, k, |i, j| (-(i.abs_diff(j) as f64) / length).exp())
            }
        }
    }

    /// Tridiagonal inverse of the correlation matrix as `(diag, off_diag)`.
    pub fn precision_tridiagonal(&self, k: usize) -> (Vec<f64>, Vec<f64>) {
        match *self {
            Self::RandomWalk => {
                let mut diag = vec![2.0; k];
                diag[k - 1] = 1.0;
                (diag, vec![-1.0; k.saturating_sub(1)])
            }
            Self::ExponentialDecay { length } => {
                if k == 1 {
                    return (vec![1.0], vec![]);
                }
                let rho = (-1.0 / length).exp();
                let s = 1.0 - rho * rho;
                let mut diag = vec![(1.0 + rho * rho) / s; k];
                diag[0] = 1.0 / s;
                diag[k - 1] = 1.0 / s;
                (diag, vec![-rho / s; k - 1])
            }
        }
    }

    pub fn log_det_correlation(&self, k: usize) -> f64 {
        match *self {
            Self::RandomWalk => 0.0,
            Self::ExponentialDecay { length } => {
                let rho = (-1.0 / length).exp();
                (k as f64 - 1.0) * (1.0 - rho * rho).ln()
            }
        }
    }
}

/// Mean-coefficient prior covariance `bdiag(σ_α² I_2, σ_β² C_β)` with the
/// random-walk `C_β`.
pub fn mean_prior_covariance(model: &Model, sigma_beta_sq: f64) -> Result<DMatrix<f64>> {
    if !(sigma_beta_sq > 0.0) {
        return Err(GeoWarpError::domain("σ_β² must be positive"));
    }
    let k = model.k_beta();
    let c = SplineCoefficientPrior::RandomWalk.correlation_matrix(k);
    let mut m = DMatrix::zeros(k + 2, k + 2);
    m[(0, 0)] = model.cfg().hyper.sigma_alpha_sq;
    m[(1, 1)] = model.cfg().hyper.sigma_alpha_sq;
    m.view_mut((2, 2), (k, k)).copy_from(&(c * sigma_beta_sq));
    Ok(m)
}

/// Log-density of `ζ ~ N(0, σ² C(ℓ))` with exponential-decay `C`, and its
/// derivatives in `ζ`, `ℓ` and `σ²`.
fn zeta_log_density(zeta: &[f64], ell: f64, s2: f64) -> (f64, Vec<f64>, f64, f64) {
    let k = zeta.len();
    let kf = k as f64;
    if k == 1 {
        let q = zeta[0] * zeta[0];
        let v = -0.5 * (LN_2PI + s2.ln() + q / s2);
        return (v, vec![-zeta[0] / s2], 0.0, -0.5 / s2 + 0.5 * q / (s2 * s2));
    }
    let rho = (-1.0 / ell).exp();
    let s = 1.0 - rho * rho;
    let all: f64 = zeta.iter().map(|z| z * z).sum();
    let interior: f64 = zeta[1..k - 1].iter().map(|z| z * z).sum();
    let cross: f64 = zeta.windows(2).map(|w| w[0] * w[1]).sum();
    let numer = all + rho * rho * interior - 2.0 * rho * cross;
    let q = numer / s;
    let log_det_c = (kf - 1.0) * s.ln();
    let v = -0.5 * (kf * LN_2PI + kf * s2.ln() + log_det_c + q / s2);

    let (diag, off) = SplineCoefficientPrior::ExponentialDecay { length: ell }.precision_tridiagonal(k);
    let g_zeta: Vec<f64> = (0..k)
        .map(|i| {
            let mut cz = diag[i] * zeta[i];
            if i > 0 {
                cz += off[i - 1] * zeta[i - 1];
            }
            if i + 1 < k {
                cz += off[i] * zeta[i + 1];
            }
            -cz / s2
        })
        .collect();
    let dq_drho = ((2.0 * rho * interior - 2.0 * cross) * s + 2.0 * rho * numer) / (s * s);
    let dv_drho = (kf - 1.0) * rho / s - 0.5 * dq_drho / s2;
    let g_ell = dv_drho * rho / (ell * ell);
    let g_s2 = -0.5 * kf / s2 + 0.5 * q / (s2 * s2);
    (v, g_zeta, g_ell, g_s2)
}

/// Log prior density of `θ`; `-∞` outside the support.
pub fn log_prior(model: &Model, theta: &ParameterVector) -> f64 {
    log_prior_with_gradient(model, theta).0
}

/// Log prior density and its gradient with respect to `θ`.
///
/// Where a variant ties several entries of `θ` to one free value, the
/// derivative is reported on the first entry only.
pub fn log_prior_with_gradient(model: &Model, theta: &ParameterVector) -> (f64, ParameterGradient) {
    let mut g = ParameterGradient::zeros_like(theta);
    if model.validate(theta).is_err() {
        return (f64::NEG_INFINITY, g);
    }
    let h = &model.cfg().hyper;
    let d = model.dim();
    let mode = model.variant().warp_mode();
    let tied = model.cfg().tie_horizontal_awus && d == 2;
    let mut lp = 0.0;

    let eta = theta.eta();
    lp += -0.5 * (LN_2PI + h.sigma_eta_sq.ln() + eta * eta / h.sigma_eta_sq);
    g.kappa[0] = -eta / h.sigma_eta_sq;

    if model.variant().varying_variance() {
        let (v, gz, g_ell, g_s2) = zeta_log_density(theta.zeta(), theta.ell_zeta, theta.sigma_zeta_sq);
        lp += v;
        g.kappa[1..].copy_from_slice(&gz);
        g.ell_zeta += g_ell;
        g.sigma_zeta_sq += g_s2;
        let (v, dv) = half_normal_log_pdf(theta.ell_zeta, h.sigma_ell_sq);
        lp += v;
        g.ell_zeta += dv;
        let (v, dv) = inv_gamma_log_pdf(theta.sigma_zeta_sq, h.a_zeta, h.b_zeta);
        lp += v;
        g.sigma_zeta_sq += dv;
    }

    for axis in 0..d {
        if axis == 1 && tied {
            continue;
        }
        let n = match mode {
            WarpMode::Full => theta.gamma[axis].len(),
            WarpMode::Linear => 1,
            _ => 0,
        };
        let (lo, hi) = model.gamma_bounds(axis);
        for j in 0..n {
            let (v, dv) = inverse_uniform_log_pdf(theta.gamma[axis][j], lo, hi);
            lp += v;
            g.gamma[axis][j] += dv;
        }
    }
    let nv = match mode {
        WarpMode::Full | WarpMode::VerticalOnly => theta.gamma[d].len(),
        WarpMode::Linear => 1,
        WarpMode::None => 0,
    };
    for j in 0..nv {
        let (v, dv) = gamma_log_pdf(theta.gamma[d][j], h.a_gamma_vert, h.b_gamma_vert);
        lp += v;
        g.gamma[d][j] += dv;
    }

    if mode == WarpMode::Full {
        lp += lkj_r_log_density(&theta.r, h.rho_r);
        let k = d + 1;
        for i in 0..k {
            g.r[i][i] += (k as f64 - (i + 1) as f64 + 2.0 * h.rho_r - 2.0) / theta.r[i][i];
        }
    }

    let (v, dv) = inv_gamma_log_pdf(theta.sigma_eps_sq, h.a_eps, h.b_eps);
    lp += v;
    g.sigma_eps_sq += dv;
    let (v, dv) = inv_gamma_log_pdf(theta.sigma_beta_sq, h.a_beta, h.b_beta);
    lp += v;
    g.sigma_beta_sq += dv;
    (lp, g)
}
