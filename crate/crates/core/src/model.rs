//! Site domain, the assembled model structure, and the unconstrained chart.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::bspline::BSplineBasis;
use crate::config::{ModelConfig, Variant, WarpMode};
use crate::error::{check_len, GeoWarpError, Result};
use crate::params::{cpc_to_factor, factor_to_cpc, Dual, MeanCoefficients, ParameterGradient, ParameterVector};
use crate::site::{Coordinate, SiteDataset};
use crate::warp::{AxialWarping, GeometricWarping, Warping};

const BOUNDS_TOL: f64 = 1e-9;

/// Per-axis bounds of the modelled volume. The last axis is depth with
/// bounds `[0, h_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Smallest multiple of both knot spacings at or above `depth`, computed in
/// whole micrometres.
pub fn rounded_h_max(depth: f64, delta_mu: f64, delta_sigma: f64) -> f64 {
    let a = (delta_mu * 1e6).round() as u64;
    let b = (delta_sigma * 1e6).round() as u64;
    let step = a / gcd(a, b) * b;
    let units = (depth * 1e6 / step as f64 - 1e-9).ceil().max(1.0);
    units * step as f64 / 1e6
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_len(lower.len(), upper.len())?;
        if !(2..=3).contains(&lower.len()) {
            return Err(GeoWarpError::domain("domain must have 2 or 3 axes"));
        }
        for (l, u) in lower.iter().zip(&upper) {
            if !(l.is_finite() && u.is_finite() && u > l) {
                return Err(GeoWarpError::domain(format!("invalid axis bounds [{l}, {u}]")));
            }
        }
        if *lower.last().unwrap() != 0.0 {
            return Err(GeoWarpError::domain("depth axis must start at 0"));
        }
        Ok(Self { lower, upper })
    }

    /// Bounding box of the sounding locations and depth range `[0, h_max]`
    /// with `h_max` rounded up to a whole number of knot intervals.
    /// Degenerate horizontal extents are widened by half a metre either
    /// side; tied horizontal AWUs share a common extent.
    pub fn from_dataset(ds: &SiteDataset, cfg: &ModelConfig) -> Result<Self> {
        let dim = ds.dim();
        let mut lower = Vec::with_capacity(dim + 1);
        let mut upper = Vec::with_capacity(dim + 1);
        for d in 0..dim {
            let (mut lo, mut hi) = ds
                .soundings()
                .iter()
                .map(|s| s.location[d])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if hi - lo < 1e-9 {
                lo -= 0.5;
                hi += 0.5;
            }
            lower.push(lo);
            upper.push(hi);
        }
        if cfg.tie_horizontal_awus && dim == 2 {
            let ext = (upper[0] - lower[0]).max(upper[1] - lower[1]);
            for d in 0..2 {
                let pad = 0.5 * (ext - (upper[d] - lower[d]));
                lower[d] -= pad;
                upper[d] += pad;
            }
        }
        let h_obs = ds.h_max();
        let h_max = rounded_h_max(h_obs, cfg.delta_mu, cfg.delta_sigma);
        if (h_max - h_obs).abs() > 1e-9 {
            warn!("maximum depth {h_obs} m rounded up to {h_max} m to fit whole knot intervals");
        }
        lower.push(0.0);
        upper.push(h_max);
        Self::new(lower, upper)
    }

    /// Number of horizontal dimensions.
    pub fn dim(&self) -> usize {
        self.lower.len() - 1
    }

    pub fn h_max(&self) -> f64 {
        *self.upper.last().unwrap()
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn contains(&self, c: &Coordinate) -> bool {
        c.dim() == self.dim()
            && c.s.iter().chain(std::iter::once(&c.h)).enumerate().all(|(d, v)| {
                v.is_finite() && *v >= self.lower[d] - BOUNDS_TOL && *v <= self.upper[d] + BOUNDS_TOL
            })
    }

    pub fn check(&self, c: &Coordinate) -> Result<()> {
        if self.contains(c) {
            Ok(())
        } else {
            Err(GeoWarpError::domain(format!(
                "coordinate {:?} at depth {} lies outside the model domain",
                c.s, c.h
            )))
        }
    }
}

fn log_sigmoid(y: f64) -> f64 {
    -softplus(-y)
}

fn softplus(y: f64) -> f64 {
    if y > 0.0 {
        y + (-y).exp().ln_1p()
    } else {
        y.exp().ln_1p()
    }
}

fn sigmoid(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

/// Model structure for one site: configuration, domain and spline bases.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    domain: Domain,
    mean_basis: BSplineBasis,
    variance_basis: BSplineBasis,
}

impl Model {
    pub fn new(cfg: ModelConfig, domain: Domain) -> Result<Self> {
        cfg.validate()?;
        if cfg.dim() != domain.dim() {
            return Err(GeoWarpError::config(format!(
                "configuration has {} horizontal axes but the domain has {}",
                cfg.dim(),
                domain.dim()
            )));
        }
        let h_max = domain.h_max();
        let mean_basis = BSplineBasis::new(h_max, cfg.delta_mu, true)?;
        let variance_basis =
            BSplineBasis::new(h_max, cfg.delta_sigma, cfg.include_variance_boundary_knots)?;
        Ok(Self { cfg, domain, mean_basis, variance_basis })
    }

    /// Model for a dataset, adapting the configuration to its dimension and
    /// deriving the domain from its extents.
    pub fn for_dataset(cfg: ModelConfig, ds: &SiteDataset) -> Result<Self> {
        let cfg = cfg.with_dim(ds.dim())?;
        let domain = Domain::from_dataset(ds, &cfg)?;
        Self::new(cfg, domain)
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn mean_basis(&self) -> &BSplineBasis {
        &self.mean_basis
    }

    pub fn variance_basis(&self) -> &BSplineBasis {
        &self.variance_basis
    }

    pub fn k_beta(&self) -> usize {
        self.mean_basis.len()
    }

    /// Number of log-variance spline coefficients (0 for constant variance).
    pub fn k_zeta(&self) -> usize {
        if self.cfg.variant.varying_variance() {
            self.variance_basis.len()
        } else {
            0
        }
    }

    pub fn n_omega(&self) -> usize {
        self.k_beta() + 2
    }

    fn warp_mode(&self) -> WarpMode {
        self.cfg.variant.warp_mode()
    }

    fn tied(&self) -> bool {
        self.cfg.tie_horizontal_awus && self.dim() == 2
    }

    /// Bounds on each horizontal increment. The inverse length-scale bounds
    /// apply to the slope of the linear warping, `γ L / extent`.
    pub fn gamma_bounds(&self, axis: usize) -> (f64, f64) {
        let scale = self.domain.extent(axis) / self.cfg.awu_orders[axis] as f64;
        (self.cfg.hyper.gamma_minus[axis] * scale, self.cfg.hyper.gamma_plus[axis] * scale)
    }

    fn placeholder_gamma(&self, axis: usize) -> f64 {
        if axis < self.dim() {
            let (lo, hi) = self.gamma_bounds(axis);
            (lo * hi).sqrt()
        } else {
            1.0
        }
    }

    fn horizontal_free(&self, axis: usize) -> usize {
        if axis == 1 && self.tied() {
            return 0;
        }
        match self.warp_mode() {
            WarpMode::Full => self.cfg.awu_orders[axis],
            WarpMode::Linear => 1,
            _ => 0,
        }
    }

    fn vertical_free(&self) -> usize {
        match self.warp_mode() {
            WarpMode::Full | WarpMode::VerticalOnly => self.cfg.awu_orders[self.dim()],
            WarpMode::Linear => 1,
            WarpMode::None => 0,
        }
    }

    fn r_free(&self) -> usize {
        let k = self.dim() + 1;
        if self.warp_mode() == WarpMode::Full {
            k * (k - 1) / 2
        } else {
            0
        }
    }

    /// Dimension of the unconstrained chart.
    pub fn chart_dim(&self) -> usize {
        let horiz: usize = (0..self.dim()).map(|d| self.horizontal_free(d)).sum();
        let scalars = if self.cfg.variant.varying_variance() { 4 } else { 2 };
        1 + self.k_zeta() + horiz + self.vertical_free() + self.r_free() + scalars
    }

    /// Published parameter count `K_ζ + D(D+1)/2 + Σ L_d + 11`, reduced by
    /// the number of free coordinates the variant or tying removes relative
    /// to the untied full model.
    pub fn parameter_count(&self) -> usize {
        let d = self.dim();
        let sum_l: usize = self.cfg.awu_orders.iter().sum();
        let k_zeta_full = self.variance_basis.len();
        let formula = k_zeta_full + d * (d + 1) / 2 + sum_l + 11;
        let full_chart = 1 + k_zeta_full + sum_l + d * (d + 1) / 2 + 4;
        formula - (full_chart - self.chart_dim())
    }

    /// Checks every invariant of `θ` for this model.
    pub fn validate(&self, theta: &ParameterVector) -> Result<()> {
        let d = self.dim();
        check_len(1 + self.k_zeta(), theta.kappa.len())?;
        check_len(d + 1, theta.gamma.len())?;
        check_len(d + 1, theta.r.len())?;
        if theta.kappa.iter().any(|v| !v.is_finite()) {
            return Err(GeoWarpError::domain("κ must be finite"));
        }
        for (axis, g) in theta.gamma.iter().enumerate() {
            check_len(self.cfg.awu_orders[axis], g.len())?;
            if g.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(GeoWarpError::domain(format!("γ on axis {axis} must be positive")));
            }
            if axis < d && matches!(self.warp_mode(), WarpMode::Full | WarpMode::Linear) {
                let (lo, hi) = self.gamma_bounds(axis);
                if g.iter().any(|v| *v < lo || *v > hi) {
                    return Err(GeoWarpError::domain(format!(
                        "horizontal γ on axis {axis} outside [{lo}, {hi}]"
                    )));
                }
            }
            if self.warp_mode() == WarpMode::Linear && g.iter().any(|v| *v != g[0]) {
                return Err(GeoWarpError::domain("linear warping needs equal increments"));
            }
        }
        if self.tied() && theta.gamma[0] != theta.gamma[1] {
            return Err(GeoWarpError::domain("tied horizontal AWUs must be identical"));
        }
        GeometricWarping::new(theta.r.clone())?;
        if self.warp_mode() != WarpMode::Full {
            let id = GeometricWarping::identity(d + 1);
            if theta.r != id.matrix() {
                return Err(GeoWarpError::domain("this variant fixes R to the identity"));
            }
        }
        for (name, v) in [
            ("sigma_eps_sq", theta.sigma_eps_sq),
            ("sigma_beta_sq", theta.sigma_beta_sq),
            ("ell_zeta", theta.ell_zeta),
            ("sigma_zeta_sq", theta.sigma_zeta_sq),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(GeoWarpError::domain(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Maps `θ` to the unconstrained chart.
    pub fn encode(&self, theta: &ParameterVector) -> Result<Vec<f64>> {
        self.validate(theta)?;
        let d = self.dim();
        let mut x = Vec::with_capacity(self.chart_dim());
        x.extend_from_slice(&theta.kappa);
        for axis in 0..d {
            let n = self.horizontal_free(axis);
            let (lo, hi) = self.gamma_bounds(axis);
            for g in &theta.gamma[axis][..n] {
                x.push(((g - lo) / (hi - g)).ln());
            }
        }
        let nv = self.vertical_free();
        x.extend(theta.gamma[d][..nv].iter().map(|g| g.ln()));
        if self.r_free() > 0 {
            x.extend(factor_to_cpc(&theta.r));
        }
        x.push(theta.sigma_eps_sq.ln());
        x.push(theta.sigma_beta_sq.ln());
        if self.cfg.variant.varying_variance() {
            x.push(theta.ell_zeta.ln());
            x.push(theta.sigma_zeta_sq.ln());
        }
        Ok(x)
    }

    /// Maps a chart point to `θ` and the log-Jacobian of the inverse map.
    pub fn decode(&self, x: &[f64]) -> Result<(ParameterVector, f64)> {
        check_len(self.chart_dim(), x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GeoWarpError::numeric("non-finite chart coordinate"));
        }
        let d = self.dim();
        let mut log_jac = 0.0;
        let nk = 1 + self.k_zeta();
        let kappa = x[..nk].to_vec();
        let mut it = nk;
        let mut gamma: Vec<Vec<f64>> = Vec::with_capacity(d + 1);
        for axis in 0..d {
            let l = self.cfg.awu_orders[axis];
            let n = self.horizontal_free(axis);
            if axis == 1 && self.tied() {
                let first: Vec<f64> = gamma[0].clone();
                gamma.push(first);
                continue;
            }
            if n == 0 {
                gamma.push(vec![self.placeholder_gamma(axis); l]);
                continue;
            }
            let (lo, hi) = self.gamma_bounds(axis);
            let mut g = Vec::with_capacity(l);
            for &y in &x[it..it + n] {
                g.push(lo + (hi - lo) * sigmoid(y));
                log_jac += (hi - lo).ln() + log_sigmoid(y) + log_sigmoid(-y);
            }
            it += n;
            if n == 1 {
                g = vec![g[0]; l];
            }
            gamma.push(g);
        }
        let lv = self.cfg.awu_orders[d];
        let nv = self.vertical_free();
        if nv == 0 {
            gamma.push(vec![self.placeholder_gamma(d); lv]);
        } else {
            let mut g: Vec<f64> = x[it..it + nv].iter().map(|y| y.exp()).collect();
            log_jac += x[it..it + nv].iter().sum::<f64>();
            it += nv;
            if nv == 1 {
                g = vec![g[0]; lv];
            }
            gamma.push(g);
        }
        let r = if self.r_free() > 0 {
            let nr = self.r_free();
            let (r, lj) = cpc_to_factor(&x[it..it + nr], d + 1);
            it += nr;
            log_jac += lj;
            r
        } else {
            GeometricWarping::identity(d + 1).matrix().to_vec()
        };
        let mut scalar = |it: &mut usize| {
            let y = x[*it];
            *it += 1;
            log_jac += y;
            y.exp()
        };
        let sigma_eps_sq = scalar(&mut it);
        let sigma_beta_sq = scalar(&mut it);
        let (ell_zeta, sigma_zeta_sq) = if self.cfg.variant.varying_variance() {
            (scalar(&mut it), scalar(&mut it))
        } else {
            (1.0, 1.0)
        };
        let theta = ParameterVector {
            kappa,
            gamma,
            r,
            sigma_eps_sq,
            sigma_beta_sq,
            ell_zeta,
            sigma_zeta_sq,
        };
        Ok((theta, log_jac))
    }

    /// Chain rule through the chart: given `∂f/∂θ` at `θ(x)`, returns
    /// `∂/∂x [f(θ(x)) + log J(x)]`.
    pub fn pullback(&self, x: &[f64], grad: &ParameterGradient) -> Result<Vec<f64>> {
        check_len(self.chart_dim(), x.len())?;
        let d = self.dim();
        let nk = 1 + self.k_zeta();
        let mut out = Vec::with_capacity(x.len());
        out.extend_from_slice(&grad.kappa[..nk]);
        let mut it = nk;
        for axis in 0..d {
            let n = self.horizontal_free(axis);
            if n == 0 {
                continue;
            }
            let (lo, hi) = self.gamma_bounds(axis);
            let mut g_axis = grad.gamma[axis].clone();
            if axis == 0 && self.tied() {
                for (a, b) in g_axis.iter_mut().zip(&grad.gamma[1]) {
                    *a += b;
                }
            }
            for j in 0..n {
                let y = x[it + j];
                let s = sigmoid(y);
                let g = if n == 1 { g_axis.iter().sum::<f64>() } else { g_axis[j] };
                out.push(g * (hi - lo) * s * (1.0 - s) + 1.0 - 2.0 * s);
            }
            it += n;
        }
        let nv = self.vertical_free();
        for j in 0..nv {
            let value = x[it + j].exp();
            let g = if nv == 1 { grad.gamma[d].iter().sum::<f64>() } else { grad.gamma[d][j] };
            out.push(g * value + 1.0);
        }
        it += nv;
        let nr = self.r_free();
        if nr > 0 {
            let y = &x[it..it + nr];
            for k in 0..nr {
                let dual: Vec<Dual> = y
                    .iter()
                    .enumerate()
                    .map(|(i, v)| Dual { v: *v, d: if i == k { 1.0 } else { 0.0 } })
                    .collect();
                let (r, lj) = cpc_to_factor(&dual, d + 1);
                let mut g = lj.d;
                for (i, row) in r.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        g += grad.r[i][j] * v.d;
                    }
                }
                out.push(g);
            }
            it += nr;
        }
        let mut scalars = vec![grad.sigma_eps_sq, grad.sigma_beta_sq];
        if self.cfg.variant.varying_variance() {
            scalars.extend([grad.ell_zeta, grad.sigma_zeta_sq]);
        }
        for g in scalars {
            out.push(g * x[it].exp() + 1.0);
            it += 1;
        }
        Ok(out)
    }

    /// A valid mid-range parameter vector, useful as a starting point.
    pub fn default_theta(&self) -> ParameterVector {
        let d = self.dim();
        let mut gamma = Vec::with_capacity(d + 1);
        for axis in 0..d {
            gamma.push(vec![self.placeholder_gamma(axis); self.cfg.awu_orders[axis]]);
        }
        // Vertical: unit slope on the depth axis.
        let lv = self.cfg.awu_orders[d];
        gamma.push(vec![self.domain.h_max() / lv as f64; lv]);
        ParameterVector {
            kappa: vec![0.0; 1 + self.k_zeta()],
            gamma,
            r: GeometricWarping::identity(d + 1).matrix().to_vec(),
            sigma_eps_sq: 0.1,
            sigma_beta_sq: 1.0,
            ell_zeta: 1.0,
            sigma_zeta_sq: 1.0,
        }
    }

    /// Warping implied by `θ`.
    pub fn warping(&self, theta: &ParameterVector) -> Result<Warping> {
        let axes = theta
            .gamma
            .iter()
            .enumerate()
            .map(|(axis, g)| {
                AxialWarping::new(g.clone(), self.domain.lower[axis], self.domain.upper[axis])
            })
            .collect::<Result<Vec<_>>>()?;
        Warping::new(axes, GeometricWarping::new(theta.r.clone())?)
    }

    /// Mean profile `μ(h) = α_0 + α_1 h + Σ φ_k(h) β_k`.
    pub fn mean_at(&self, omega: &MeanCoefficients, h: f64) -> Result<f64> {
        Ok(omega.alpha[0] + omega.alpha[1] * h + self.mean_basis.evaluate(&omega.beta, h)?)
    }

    /// `log σ_δ²(h) = η + Σ φ_k(h) ζ_k`.
    pub fn log_variance_at(&self, theta: &ParameterVector, h: f64) -> Result<f64> {
        if self.k_zeta() == 0 {
            return Ok(theta.eta());
        }
        Ok(theta.eta() + self.variance_basis.evaluate(theta.zeta(), h)?)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::site::Sounding;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_site(dim: usize) -> SiteDataset {
        let locs: Vec<Vec<f64>> = if dim == 1 {
            vec![vec![0.0], vec![7.0], vec![20.0]]
        } else {
            vec![vec![0.0, 0.0], vec![7.0, 3.0], vec![20.0, 12.0]]
        };
        let soundings = locs
            .into_iter()
            .enumerate()
            .map(|(i, loc)| {
                let depths: Vec<f64> = (0..10).map(|j| 0.25 + 0.35 * j as f64 + 0.05 * i as f64).collect();
                let values = depths.iter().map(|h| 0.1 * h + (i as f64).sin()).collect();
                Sounding::new(format!("c{i}"), loc, depths, values).unwrap()
            })
            .collect();
        SiteDataset::new(soundings).unwrap()
    }

    pub(crate) fn random_chart_point(model: &Model, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..model.chart_dim()).map(|_| rng.gen_range(-1.5..1.5)).collect()
    }

    fn model(variant: Variant, tie: bool) -> Model {
        let cfg = ModelConfig {
            variant,
            tie_horizontal_awus: tie,
            delta_sigma: 1.0,
            ..ModelConfig::default()
        };
        Model::for_dataset(cfg, &small_site(2)).unwrap()
    }

    #[test]
    fn h_max_rounding() {
        assert!((rounded_h_max(40.97, 0.1, 1.0) - 41.0).abs() < 1e-12);
        assert!((rounded_h_max(41.0, 0.1, 1.0) - 41.0).abs() < 1e-12);
        assert!((rounded_h_max(3.21, 0.1, 0.25) - 3.5).abs() < 1e-12);
        assert!((rounded_h_max(2.0, 0.3, 0.2) - 2.4).abs() < 1e-12);
    }

    #[test]
    fn domain_from_dataset() {
        let m = model(Variant::Full, false);
        assert_eq!(m.domain().lower, vec![0.0, 0.0, 0.0]);
        assert_eq!(m.domain().upper, vec![20.0, 12.0, 4.0]);
        let t = model(Variant::Full, true);
        assert_eq!(t.domain().lower, vec![0.0, -4.0, 0.0]);
        assert_eq!(t.domain().upper, vec![20.0, 16.0, 4.0]);
    }

    #[test]
    fn published_parameter_count() {
        let cfg = ModelConfig::default();
        let domain = Domain::new(vec![0.0, 0.0, 0.0], vec![100.0, 100.0, 41.0]).unwrap();
        let m = Model::new(cfg, domain).unwrap();
        assert_eq!(m.k_zeta(), 48);
        assert_eq!(m.k_beta(), 417);
        assert_eq!(m.parameter_count(), 86);
    }

    #[test]
    fn parameter_count_for_reduced_variant() {
        let cfg = ModelConfig { variant: Variant::NoWarpCv, ..ModelConfig::default() }
            .with_dim(1)
            .unwrap();
        let domain = Domain::new(vec![0.0, 0.0], vec![50.0, 10.0]).unwrap();
        let m = Model::new(cfg, domain).unwrap();
        // Retained: η, one horizontal and one vertical increment, σ_ε², σ_β².
        // The formula's constant exceeds the free scalars of the full model by
        // six, which carries over to every variant.
        assert_eq!(m.chart_dim(), 5);
        assert_eq!(m.parameter_count(), 5 + 6);
    }

    #[test]
    fn chart_dims_per_variant() {
        let k_zeta = model(Variant::Full, false).k_zeta();
        let expect = [
            (Variant::Full, k_zeta + 1 + 24 + 3 + 4),
            (Variant::NoWarp, k_zeta + 1 + 3 + 4),
            (Variant::Cv, 1 + 24 + 3 + 2),
            (Variant::NoWarpCv, 1 + 3 + 2),
            (Variant::VertCv, 1 + 20 + 2),
            (Variant::WhiteNoiseCv, 1 + 2),
        ];
        for (v, n) in expect {
            assert_eq!(model(v, false).chart_dim(), n, "{v:?}");
        }
        assert_eq!(model(Variant::Full, true).chart_dim(), k_zeta + 1 + 22 + 3 + 4);
    }

    #[test]
    fn unit_values_encode_to_zero() {
        let m = model(Variant::Full, false);
        let theta = ParameterVector { sigma_eps_sq: 1.0, ..m.default_theta() };
        let x = m.encode(&theta).unwrap();
        let n = x.len();
        assert_eq!(x[n - 4], 0.0);
        // Identity R: partial correlations all zero.
        let nr = 3;
        assert!(x[n - 4 - nr..n - 4].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn round_trip_all_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for v in Variant::ALL {
            for tie in [false, true] {
                let m = model(v, tie);
                for _ in 0..100 {
                    let x = random_chart_point(&m, &mut rng);
                    let (theta, _) = m.decode(&x).unwrap();
                    m.validate(&theta).unwrap();
                    let x2 = m.encode(&theta).unwrap();
                    let (theta2, _) = m.decode(&x2).unwrap();
                    for (a, b) in x.iter().zip(&x2) {
                        assert!((a - b).abs() < 1e-8, "{v:?}");
                    }
                    let flat = |t: &ParameterVector| {
                        let mut f = t.kappa.clone();
                        f.extend(t.gamma.iter().flatten());
                        f.extend(t.r.iter().flatten());
                        f.extend([t.sigma_eps_sq, t.sigma_beta_sq, t.ell_zeta, t.sigma_zeta_sq]);
                        f
                    };
                    for (a, b) in flat(&theta).iter().zip(flat(&theta2).iter()) {
                        assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{v:?} {a} {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn pullback_matches_differences() {
        // f(θ) = Σ c_i θ_i over every entry, so ∂f/∂θ = c.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in Variant::ALL {
            let m = model(v, v == Variant::Cv);
            let x = random_chart_point(&m, &mut rng);
            let (theta, _) = m.decode(&x).unwrap();
            let mut grad = ParameterGradient::zeros_like(&theta);
            let mut coef = || rng.gen_range(-1.0..1.0);
            grad.kappa.iter_mut().for_each(|g| *g = coef());
            grad.gamma.iter_mut().flatten().for_each(|g| *g = coef());
            for (i, row) in grad.r.iter_mut().enumerate() {
                for (j, g) in row.iter_mut().enumerate() {
                    if j >= i {
                        *g = coef();
                    }
                }
            }
            grad.sigma_eps_sq = coef();
            grad.sigma_beta_sq = coef();
            grad.ell_zeta = coef();
            grad.sigma_zeta_sq = coef();
            let f = |x: &[f64]| {
                let (t, lj) = m.decode(x).unwrap();
                let mut s = lj + t.sigma_eps_sq * grad.sigma_eps_sq + t.sigma_beta_sq * grad.sigma_beta_sq;
                if m.variant().varying_variance() {
                    s += t.ell_zeta * grad.ell_zeta + t.sigma_zeta_sq * grad.sigma_zeta_sq;
                }
                s += t.kappa.iter().zip(&grad.kappa).map(|(a, b)| a * b).sum::<f64>();
                for (ga, gb) in t.gamma.iter().zip(&grad.gamma) {
                    s += ga.iter().zip(gb).map(|(a, b)| a * b).sum::<f64>();
                }
                for (ra, rb) in t.r.iter().zip(&grad.r) {
                    s += ra.iter().zip(rb).map(|(a, b)| a * b).sum::<f64>();
                }
                s
            };
            let analytic = m.pullback(&x, &grad).unwrap();
            for k in 0..x.len() {
                let step = 1e-6;
                let mut xp = x.clone();
                xp[k] += step;
                let mut xm = x.clone();
                xm[k] -= step;
                let fd = (f(&xp) - f(&xm)) / (2.0 * step);
                // Blocks a variant freezes contribute nothing through the chart.
                assert!((fd - analytic[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{v:?} k={k} fd={fd} an={}", analytic[k]);
            }
        }
    }

    #[test]
    fn rejects_out_of_bounds_gamma() {
        let m = model(Variant::Full, false);
        let mut theta = m.default_theta();
        theta.gamma[0][0] = m.gamma_bounds(0).1 * 1.01;
        assert!(m.validate(&theta).is_err());
        assert!(m.encode(&theta).is_err());
    }
}
