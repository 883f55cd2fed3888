//! Matérn correlation, the depth-varying variance profile, and assembly of the
//! deviation covariance.

use nalgebra::DMatrix;
use rayon::prelude::*;
use statrs::function::gamma::gamma;

use crate::config::KernelKind;
use crate::error::{GeoWarpError, Result};
use crate::model::Model;
use crate::params::ParameterVector;
use crate::site::Coordinate;
use crate::special::bessel_k;

/// Largest matrix [`data_covariance`] will build.
pub const DENSE_CAP: usize = 2000;

/// Two points closer than this (in metres) count as the same location.
pub const SAME_LOCATION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
enum MaternForm {
    Half,
    ThreeHalves,
    FiveHalves,
    SevenHalves,
    General { scale: f64, norm: f64 },
}

/// Matérn correlation `M_ν(d)` with the `√(2ν)` distance scaling, so that
/// `ν = 1/2` is `exp(-d)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Matern {
    nu: f64,
    form: MaternForm,
}

impl Matern {
    pub fn new(nu: f64) -> Result<Self> {
        if !(nu.is_finite() && nu > 0.0) {
            return Err(GeoWarpError::numeric(format!("Matérn smoothness must be positive, got {nu}")));
        }
        Ok(Self { nu, form: Self::form_for(nu, true) })
    }

    /// Always uses the Bessel-function path, even for half-integer `ν`.
    pub fn general(nu: f64) -> Result<Self> {
        Self::new(nu)?;
        Ok(Self { nu, form: Self::form_for(nu, false) })
    }

    fn form_for(nu: f64, closed: bool) -> MaternForm {
        if closed {
            if nu == 0.5 {
                return MaternForm::Half;
            } else if nu == 1.5 {
                return MaternForm::ThreeHalves;
            } else if nu == 2.5 {
                return MaternForm::FiveHalves;
            } else if nu == 3.5 {
                return MaternForm::SevenHalves;
            }
        }
        MaternForm::General { scale: (2.0 * nu).sqrt(), norm: 2f64.powf(1.0 - nu) / gamma(nu) }
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn value(&self, d: f64) -> f64 {
        if d <= 0.0 {
            return 1.0;
        }
        match self.form {
            MaternForm::Half => (-d).exp(),
            MaternForm::ThreeHalves => {
                let x = 3f64.sqrt() * d;
                (1.0 + x) * (-x).exp()
            }
            MaternForm::FiveHalves => {
                let x = 5f64.sqrt() * d;
                (1.0 + x + x * x / 3.0) * (-x).exp()
            }
            MaternForm::SevenHalves => {
                let x = 7f64.sqrt() * d;
                (1.0 + x + 0.4 * x * x + x * x * x / 15.0) * (-x).exp()
            }
            MaternForm::General { scale, norm } => {
                let x = scale * d;
                if x > 700.0 {
                    return 0.0;
                }
                (norm * x.powf(self.nu) * bessel_k(self.nu, x)).min(1.0)
            }
        }
    }

    /// `M(d)` and `M'(d)/d`; the latter has a finite limit at `d = 0` for
    /// `ν > 1` and is set to zero there otherwise.
    pub fn value_and_slope(&self, d: f64) -> (f64, f64) {
        let value = self.value(d);
        let slope = match self.form {
            MaternForm::Half => {
                if d > 0.0 {
                    -(-d).exp() / d
                } else {
                    0.0
                }
            }
            MaternForm::ThreeHalves => -3.0 * (-(3f64.sqrt() * d)).exp(),
            MaternForm::FiveHalves => {
                let x = 5f64.sqrt() * d;
                -(5.0 / 3.0) * (1.0 + x) * (-x).exp()
            }
            MaternForm::SevenHalves => {
                let x = 7f64.sqrt() * d;
                -(7.0 / 15.0) * (3.0 + 3.0 * x + x * x) * (-x).exp()
            }
            MaternForm::General { scale, norm } => {
                let x = scale * d;
                if d <= 0.0 {
                    if self.nu > 1.0 {
                        -self.nu / (self.nu - 1.0)
                    } else {
                        0.0
                    }
                } else if x > 700.0 {
                    0.0
                } else {
                    -norm * scale * scale * x.powf(self.nu - 1.0) * bessel_k(self.nu - 1.0, x)
                }
            }
        };
        (value, slope)
    }
}

/// `M_ν(d)` as a free function.
pub fn matern(nu: f64, d: f64) -> Result<f64> {
    if !d.is_finite() || d < 0.0 {
        return Err(GeoWarpError::numeric(format!("invalid Matérn distance {d}")));
    }
    Ok(Matern::new(nu)?.value(d))
}

/// Per-point quantities for one parameter vector: warped coordinates and
/// deviation standard deviations. Covariances between prepared points are
/// then cheap to evaluate.
#[derive(Clone, Debug)]
pub struct PreparedPoints {
    pub(crate) raw: Vec<[f64; 3]>,
    pub(crate) warped: Vec<[f64; 3]>,
    pub(crate) sd: Vec<f64>,
    pub(crate) kernel: KernelKind,
    pub(crate) matern: Matern,
    pub(crate) dim: usize,
}

impl PreparedPoints {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.sd[i] * self.sd[i]
    }

    pub(crate) fn same_column(&self, i: usize, j: usize) -> bool {
        (0..self.dim).map(|d| (self.raw[i][d] - self.raw[j][d]).powi(2)).sum::<f64>().sqrt()
            < SAME_LOCATION_TOL
    }

    pub(crate) fn warped_distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (&self.warped[i], &self.warped[j]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    /// Correlation of the deviation process between points `i` and `j`.
    pub fn correlation(&self, i: usize, j: usize) -> f64 {
        match self.kernel {
            KernelKind::Warped => self.matern.value(self.warped_distance(i, j)),
            KernelKind::VerticalOnly => {
                if self.same_column(i, j) {
                    self.matern.value(self.warped_distance(i, j))
                } else {
                    0.0
                }
            }
            KernelKind::WhiteNoise => {
                if self.same_column(i, j) && (self.raw[i][self.dim] - self.raw[j][self.dim]).abs() < SAME_LOCATION_TOL {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Deviation covariance between points `i` and `j`.
    pub fn covariance(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.variance(i);
        }
        self.sd[i] * self.sd[j] * self.correlation(i, j)
    }
}

/// The deviation covariance for a fixed parameter vector.
pub struct CovarianceModel<'a> {
    model: &'a Model,
    theta: &'a ParameterVector,
    warping: crate::warp::Warping,
    matern: Matern,
}

impl<'a> CovarianceModel<'a> {
    pub fn new(model: &'a Model, theta: &'a ParameterVector) -> Result<Self> {
        model.validate(theta)?;
        let warping = model.warping(theta)?;
        let matern = Matern::new(model.cfg().nu)?;
        Ok(Self { model, theta, warping, matern })
    }

    pub fn matern(&self) -> &Matern {
        &self.matern
    }

    /// Warps and evaluates variances at internal `[s, h]` points.
    pub fn prepare(&self, points: &[[f64; 3]]) -> Result<PreparedPoints> {
        let dim = self.model.dim();
        let kernel = self.model.variant().kernel();
        let per_point: Vec<([f64; 3], f64)> = points
            .par_iter()
            .map(|u| -> Result<([f64; 3], f64)> {
                let mut warped = [0.0; 3];
                match kernel {
                    KernelKind::Warped => {
                        let w = self.warping.warp_point(&u[..=dim])?;
                        warped[..=dim].copy_from_slice(&w);
                    }
                    KernelKind::VerticalOnly => {
                        for d in 0..dim {
                            self.warping.axes[d].unit(u[d])?;
                        }
                        warped[dim] = self.warping.axes[dim].warp(u[dim])?;
                    }
                    KernelKind::WhiteNoise => {
                        for d in 0..=dim {
                            self.warping.axes[d].unit(u[d])?;
                        }
                    }
                }
                Ok((warped, self.model.log_variance_at(self.theta, u[dim])?))
            })
            .collect::<Result<_>>()?;
        let log_var: Vec<f64> = per_point.iter().map(|p| p.1).collect();
        Ok(PreparedPoints {
            raw: points.to_vec(),
            warped: per_point.iter().map(|p| p.0).collect(),
            sd: log_var.iter().map(|l| (0.5 * l).exp()).collect(),
            kernel,
            matern: self.matern,
            dim,
        })
    }

    pub fn prepare_coords(&self, coords: &[Coordinate]) -> Result<PreparedPoints> {
        for c in coords {
            if c.dim() != self.model.dim() {
                return Err(GeoWarpError::Dimension { expected: self.model.dim(), got: c.dim() });
            }
            self.model.domain().check(c)?;
        }
        let points: Vec<[f64; 3]> = coords.iter().map(Coordinate::to_u).collect();
        self.prepare(&points)
    }
}

/// Deviation covariance `Cov(δ(u1), δ(u2))`.
pub fn deviation_covariance(
    model: &Model,
    theta: &ParameterVector,
    u1: &Coordinate,
    u2: &Coordinate,
) -> Result<f64> {
    let cm = CovarianceModel::new(model, theta)?;
    let p = cm.prepare_coords(&[u1.clone(), u2.clone()])?;
    Ok(p.covariance(0, 1))
}

/// Dense deviation covariance matrix `Σ_δ`.
pub fn deviation_matrix(model: &Model, theta: &ParameterVector, coords: &[Coordinate]) -> Result<DMatrix<f64>> {
    if coords.len() > DENSE_CAP {
        return Err(GeoWarpError::Size(format!(
            "{} points exceed the dense limit of {DENSE_CAP}; use the Vecchia path",
            coords.len()
        )));
    }
    let cm = CovarianceModel::new(model, theta)?;
    let p = cm.prepare_coords(coords)?;
    let n = coords.len();
    Ok(DMatrix::from_fn(n, n, |i, j| p.covariance(i, j)))
}

/// Dense data covariance `Σ_Z = Σ_δ + σ_ε² I`.
pub fn data_covariance(model: &Model, theta: &ParameterVector, coords: &[Coordinate]) -> Result<DMatrix<f64>> {
    let mut m = deviation_matrix(model, theta, coords)?;
    for i in 0..coords.len() {
        m[(i, i)] += theta.sigma_eps_sq;
    }
    Ok(m)
}
