//! The mean-marginalized approximate likelihood and log posterior.
//!
//! With `Q̃` the Vecchia precision of `Σ_Z` and `O = Σ_ω⁻¹ + XᵀQ̃X`,
//!
//! `log p(Z | θ) = -½[N log 2π + log|O| + log|Σ_ω| - log|Q̃| + ZᵀQ̃Z - vᵀO⁻¹v]`
//!
//! where `v = XᵀQ̃Z`. Gradients are accumulated row by row through the
//! conditional regressions of the factor.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::{GradientMode, KernelKind};
use crate::cov::{CovarianceModel, PreparedPoints};
use crate::error::{GeoWarpError, Result};
use crate::model::Model;
use crate::params::{MeanCoefficients, ParameterGradient, ParameterVector};
use crate::prior::{log_prior_with_gradient, SplineCoefficientPrior};
use crate::site::SiteDataset;
use crate::vecchia::{build_plan, factorize, solve_row, VecchiaFactor, VecchiaPlan};
use crate::warp::bernstein_tails;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Rows are reduced in this many fixed chunks so sums do not depend on the
/// thread count.
const CHUNKS: usize = 32;

/// Non-zero entries of one row of `X = [1, h, φ(h)]`.
#[derive(Clone, Copy, Debug)]
struct DesignRow {
    h: f64,
    first: usize,
    spline: [f64; 4],
}

impl DesignRow {
    fn entries(&self) -> [(usize, f64); 6] {
        let s = &self.spline;
        let f = self.first + 2;
        [(0, 1.0), (1, self.h), (f, s[0]), (f + 1, s[1]), (f + 2, s[2]), (f + 3, s[3])]
    }
}

/// Everything needed to evaluate the posterior for one dataset and plan.
#[derive(Clone, Debug)]
pub struct PosteriorContext {
    model: Model,
    dataset: SiteDataset,
    plan: VecchiaPlan,
    points: Vec<[f64; 3]>,
    z: Vec<f64>,
    design: Vec<DesignRow>,
    variance_rows: Vec<(usize, [f64; 4])>,
}

/// Gaussian full conditional of `ω` given `θ`: mean `O⁻¹XᵀQ̃Z`, precision
/// `O`.
#[derive(Clone, Debug)]
pub struct OmegaConditional {
    pub mean: DVector<f64>,
    precision: Cholesky<f64, Dyn>,
}

impl OmegaConditional {
    pub fn covariance(&self) -> DMatrix<f64> {
        self.precision.inverse()
    }

    pub fn mean_coefficients(&self) -> MeanCoefficients {
        MeanCoefficients::from_vector(self.mean.as_slice())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> MeanCoefficients {
        let n = self.mean.len();
        let e = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let l = self.precision.l();
        let x = l.transpose().solve_upper_triangular(&e).expect("triangular factor is non-singular");
        MeanCoefficients::from_vector((&self.mean + x).as_slice())
    }
}

/// Intermediate results of one likelihood evaluation.
struct Evaluation {
    ll: f64,
    factor: VecchiaFactor,
    prepared: PreparedPoints,
    o_chol: Cholesky<f64, Dyn>,
    omega: DVector<f64>,
}

/// Per-chunk gradient accumulators.
struct Accum {
    log_var: Vec<f64>,
    warped: Vec<[f64; 3]>,
    nugget: f64,
}

impl Accum {
    fn new(n: usize) -> Self {
        Self { log_var: vec![0.0; n], warped: vec![[0.0; 3]; n], nugget: 0.0 }
    }

    /// Adds `weight · ∂k(i, j)` for an off-diagonal entry.
    fn cross(&mut self, pp: &PreparedPoints, i: usize, j: usize, weight: f64) {
        let corr = pp.correlation(i, j);
        if corr == 0.0 && pp.kernel != KernelKind::Warped {
            return;
        }
        let s = pp.sd[i] * pp.sd[j];
        let half = 0.5 * weight * s * corr;
        self.log_var[i] += half;
        self.log_var[j] += half;
        if pp.kernel == KernelKind::WhiteNoise {
            return;
        }
        let d = pp.warped_distance(i, j);
        if d == 0.0 {
            return;
        }
        let (_, slope) = pp.matern.value_and_slope(d);
        let t = weight * s * slope;
        for a in 0..3 {
            let delta = t * (pp.warped[i][a] - pp.warped[j][a]);
            self.warped[i][a] += delta;
            self.warped[j][a] -= delta;
        }
    }

    /// Adds `weight · ∂k(i, i)` for a diagonal entry of `Σ_Z`.
    fn diagonal(&mut self, pp: &PreparedPoints, i: usize, weight: f64) {
        self.log_var[i] += weight * pp.variance(i);
        self.nugget += weight;
    }

    fn merge(&mut self, other: &Accum) {
        for (a, b) in self.log_var.iter_mut().zip(&other.log_var) {
            *a += b;
        }
        for (a, b) in self.warped.iter_mut().zip(&other.warped) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
        self.nugget += other.nugget;
    }
}

/// `ũ = X_c - Σ b_j X_{p_j}` as sorted `(column, value)` pairs over the
/// union of supports.
fn whitened_design(design: &[DesignRow], child: usize, parents: &[usize], weights: &[f64]) -> Vec<(usize, f64)> {
    let mut e: Vec<(usize, f64)> = Vec::with_capacity(6 * (parents.len() + 1));
    e.extend(design[child].entries());
    for (&p, b) in parents.iter().zip(weights) {
        e.extend(design[p].entries().iter().map(|&(c, v)| (c, -b * v)));
    }
    e.sort_unstable_by_key(|x| x.0);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(e.len());
    for (c, v) in e {
        match out.last_mut() {
            Some(last) if last.0 == c => last.1 += v,
            _ => out.push((c, v)),
        }
    }
    out
}

fn chunk_bounds(n: usize) -> Vec<(usize, usize)> {
    (0..CHUNKS).map(|c| (c * n / CHUNKS, (c + 1) * n / CHUNKS)).filter(|(a, b)| b > a).collect()
}

impl PosteriorContext {
    /// Context with a fresh plan of `m` parents drawn with `seed`.
    pub fn new(model: Model, dataset: SiteDataset, m: usize, seed: u64) -> Result<Self> {
        let plan = build_plan(&dataset, m, seed)?;
        Self::with_plan(model, dataset, plan)
    }

    pub fn with_plan(model: Model, dataset: SiteDataset, plan: VecchiaPlan) -> Result<Self> {
        if dataset.dim() != model.dim() {
            return Err(GeoWarpError::Dimension { expected: model.dim(), got: dataset.dim() });
        }
        crate::error::check_len(dataset.n_points(), plan.len())?;
        for c in dataset.coordinates() {
            model.domain().check(&c)?;
        }
        let points = dataset.u_points();
        let dim = model.dim();
        let design = points
            .iter()
            .map(|u| {
                let (first, spline) = model.mean_basis().eval_nonzero(u[dim])?;
                Ok(DesignRow { h: u[dim], first, spline })
            })
            .collect::<Result<_>>()?;
        let variance_rows = if model.k_zeta() > 0 {
            points.iter().map(|u| model.variance_basis().eval_nonzero(u[dim])).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let z = dataset.values();
        Ok(Self { model, dataset, plan, points, z, design, variance_rows })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn dataset(&self) -> &SiteDataset {
        &self.dataset
    }

    pub fn plan(&self) -> &VecchiaPlan {
        &self.plan
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    /// Dense mean design matrix `X` (`N × (K_β + 2)`).
    pub fn design_matrix(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.n(), self.model.n_omega());
        for (i, row) in self.design.iter().enumerate() {
            for (c, v) in row.entries() {
                x[(i, c)] = v;
            }
        }
        x
    }

    /// `Σ_ω⁻¹` as a dense matrix together with `log|Σ_ω|`.
    fn omega_prior_precision(&self, theta: &ParameterVector) -> (DMatrix<f64>, f64) {
        let k = self.model.k_beta();
        let sa = self.model.cfg().hyper.sigma_alpha_sq;
        let sb = theta.sigma_beta_sq;
        let mut p = DMatrix::zeros(k + 2, k + 2);
        p[(0, 0)] = 1.0 / sa;
        p[(1, 1)] = 1.0 / sa;
        let (diag, off) = SplineCoefficientPrior::RandomWalk.precision_tridiagonal(k);
        for i in 0..k {
            p[(i + 2, i + 2)] = diag[i] / sb;
            if i + 1 < k {
                p[(i + 2, i + 3)] = off[i] / sb;
                p[(i + 3, i + 2)] = off[i] / sb;
            }
        }
        let log_det = 2.0 * sa.ln() + k as f64 * sb.ln() + SplineCoefficientPrior::RandomWalk.log_det_correlation(k);
        (p, log_det)
    }

    fn evaluate(&self, theta: &ParameterVector) -> Result<Evaluation> {
        let cm = CovarianceModel::new(&self.model, theta)?;
        let prepared = cm.prepare(&self.points)?;
        let nugget = theta.sigma_eps_sq;
        let factor = factorize(&self.plan, |i, j| {
            let c = prepared.covariance(i, j);
            if i == j {
                c + nugget
            } else {
                c
            }
        })
        .map_err(|e| GeoWarpError::numeric(format!("likelihood evaluation failed: {e}")))?;

        let p = self.model.n_omega();
        let rows = factor.rows();
        let parts: Vec<(DMatrix<f64>, DVector<f64>, f64)> = chunk_bounds(rows.len())
            .into_par_iter()
            .map(|(lo, hi)| {
                let mut xtx = DMatrix::zeros(p, p);
                let mut xtz = DVector::zeros(p);
                let mut ztz = 0.0;
                for r in &rows[lo..hi] {
                    let u = whitened_design(&self.design, r.index, &r.parents, &r.weights);
                    let rho = self.z[r.index]
                        - r.parents.iter().zip(&r.weights).map(|(&q, b)| b * self.z[q]).sum::<f64>();
                    let inv_d = 1.0 / r.cond_var;
                    for &(a, va) in &u {
                        xtz[a] += va * rho * inv_d;
                        for &(b, vb) in &u {
                            if b >= a {
                                xtx[(a, b)] += va * vb * inv_d;
                            }
                        }
                    }
                    ztz += rho * rho * inv_d;
                }
                (xtx, xtz, ztz)
            })
            .collect();
        let mut xtx = DMatrix::zeros(p, p);
        let mut xtz = DVector::zeros(p);
        let mut ztz = 0.0;
        for (a, b, c) in &parts {
            xtx += a;
            xtz += b;
            ztz += c;
        }
        for a in 0..p {
            for b in 0..a {
                xtx[(a, b)] = xtx[(b, a)];
            }
        }
        let (prior_prec, log_det_sigma_omega) = self.omega_prior_precision(theta);
        let o = prior_prec + xtx;
        let o_chol = o
            .cholesky()
            .ok_or_else(|| GeoWarpError::numeric("mean-coefficient precision is not positive definite"))?;
        let log_det_o: f64 = o_chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let omega = o_chol.solve(&xtz);
        let quad = ztz - xtz.dot(&omega);
        let n = self.n() as f64;
        let ll = -0.5 * (n * LN_2PI + log_det_o + log_det_sigma_omega - factor.log_det_precision() + quad);
        if !ll.is_finite() {
            return Err(GeoWarpError::numeric("non-finite log-likelihood"));
        }
        Ok(Evaluation { ll, factor, prepared, o_chol, omega })
    }

    /// Approximate log-likelihood with `ω` integrated out.
    pub fn marginal_log_likelihood(&self, theta: &ParameterVector) -> Result<f64> {
        Ok(self.evaluate(theta)?.ll)
    }

    /// Marginal log-likelihood plus log prior; `-∞` outside the support.
    pub fn log_posterior(&self, theta: &ParameterVector) -> Result<f64> {
        if self.model.validate(theta).is_err() {
            return Ok(f64::NEG_INFINITY);
        }
        let (lp, _) = log_prior_with_gradient(&self.model, theta);
        if !lp.is_finite() {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(self.marginal_log_likelihood(theta)? + lp)
    }

    /// Full conditional of the mean coefficients.
    pub fn mean_coefficients_full_conditional(&self, theta: &ParameterVector) -> Result<OmegaConditional> {
        let ev = self.evaluate(theta)?;
        Ok(OmegaConditional { mean: ev.omega, precision: ev.o_chol })
    }

    /// Marginal log-likelihood and its gradient with respect to `θ`.
    pub fn marginal_log_likelihood_gradient(&self, theta: &ParameterVector) -> Result<(f64, ParameterGradient)> {
        let ev = self.evaluate(theta)?;
        let grad = self.gradient(theta, &ev)?;
        Ok((ev.ll, grad))
    }

    fn gradient(&self, theta: &ParameterVector, ev: &Evaluation) -> Result<ParameterGradient> {
        let n = self.n();
        let pp = &ev.prepared;
        let o_inv = ev.o_chol.inverse();
        let resid: Vec<f64> = (0..n)
            .map(|i| {
                let fit: f64 = self.design[i].entries().iter().map(|&(c, v)| v * ev.omega[c]).sum();
                self.z[i] - fit
            })
            .collect();
        let nugget = theta.sigma_eps_sq;
        let cov = |i: usize, j: usize| {
            let c = pp.covariance(i, j);
            if i == j {
                c + nugget
            } else {
                c
            }
        };
        let plan_rows = ev.factor.rows();
        let chunks: Vec<Accum> = chunk_bounds(plan_rows.len())
            .into_par_iter()
            .map(|(lo, hi)| -> Result<Accum> {
                let mut acc = Accum::new(n);
                for row in &plan_rows[lo..hi] {
                    let c = row.index;
                    let ps = &row.parents;
                    let (chol, b, d) = solve_row(c, ps, &cov)?;
                    let u = whitened_design(&self.design, c, ps, &b);
                    let q: Vec<f64> = u
                        .iter()
                        .map(|&(a, _)| u.iter().map(|&(s, v)| o_inv[(a, s)] * v).sum())
                        .collect();
                    let t: f64 = u.iter().zip(&q).map(|(e, qv)| e.1 * qv).sum();
                    let rho = resid[c] - ps.iter().zip(&b).map(|(&p, bj)| bj * resid[p]).sum::<f64>();
                    let gd = -0.5 * (1.0 / d - (rho * rho + t) / (d * d));
                    acc.diagonal(pp, c, gd);
                    if ps.is_empty() {
                        continue;
                    }
                    let gb: Vec<f64> = ps
                        .iter()
                        .map(|&p| {
                            let xq: f64 = self.design[p]
                                .entries()
                                .iter()
                                .map(|&(col, v)| {
                                    let k = u.binary_search_by_key(&col, |e| e.0).expect("parent column in support");
                                    v * q[k]
                                })
                                .sum();
                            (rho * resid[p] + xq) / d
                        })
                        .collect();
                    let w = chol.expect("rows with parents have a factor").solve(&DVector::from_vec(gb));
                    for (j, &p) in ps.iter().enumerate() {
                        acc.cross(pp, p, c, w[j] - 2.0 * gd * b[j]);
                        acc.diagonal(pp, p, gd * b[j] * b[j] - w[j] * b[j]);
                        for k in 0..j {
                            let weight = 2.0 * gd * b[j] * b[k] - w[j] * b[k] - w[k] * b[j];
                            acc.cross(pp, ps[k], p, weight);
                        }
                    }
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        let mut total = Accum::new(n);
        for c in &chunks {
            total.merge(c);
        }
        let mut g = self.map_point_gradient(theta, pp, &total)?;
        g.sigma_eps_sq += total.nugget;

        // Σ_ω enters through σ_β².
        let k = self.model.k_beta();
        let sb = theta.sigma_beta_sq;
        let (diag, off) = SplineCoefficientPrior::RandomWalk.precision_tridiagonal(k);
        let mut tr = 0.0;
        let mut quad = 0.0;
        for i in 0..k {
            tr += diag[i] * o_inv[(i + 2, i + 2)];
            quad += diag[i] * ev.omega[i + 2] * ev.omega[i + 2];
            if i + 1 < k {
                tr += 2.0 * off[i] * o_inv[(i + 2, i + 3)];
                quad += 2.0 * off[i] * ev.omega[i + 2] * ev.omega[i + 3];
            }
        }
        g.sigma_beta_sq += -0.5 * (-tr / (sb * sb) + k as f64 / sb - quad / (sb * sb));
        Ok(g)
    }

    /// Chains per-point sensitivities (log-variance and warped coordinates)
    /// back to `θ`.
    fn map_point_gradient(&self, theta: &ParameterVector, pp: &PreparedPoints, acc: &Accum) -> Result<ParameterGradient> {
        let mut g = ParameterGradient::zeros_like(theta);
        let dim = self.model.dim();
        g.kappa[0] = acc.log_var.iter().sum();
        if self.model.k_zeta() > 0 {
            for (i, &(first, vals)) in self.variance_rows.iter().enumerate() {
                for (k, v) in vals.iter().enumerate() {
                    g.kappa[1 + first + k] += acc.log_var[i] * v;
                }
            }
        }
        if pp.kernel == KernelKind::WhiteNoise {
            return Ok(g);
        }
        let warping = self.model.warping(theta)?;
        let r = &theta.r;
        for (i, u) in self.points.iter().enumerate() {
            let gw = &acc.warped[i];
            let mut ga = [0.0; 3];
            match pp.kernel {
                KernelKind::Warped => {
                    let a = warping.axial(&u[..=dim])?;
                    for row in 0..=dim {
                        for col in row..=dim {
                            g.r[row][col] += gw[row] * a[col];
                            ga[col] += r[row][col] * gw[row];
                        }
                    }
                }
                _ => ga[dim] = gw[dim],
            }
            let axes = if pp.kernel == KernelKind::Warped { 0..=dim } else { dim..=dim };
            for axis in axes {
                let x = warping.axes[axis].unit(u[axis])?;
                let tails = bernstein_tails(theta.gamma[axis].len(), x);
                for (gj, tj) in g.gamma[axis].iter_mut().zip(&tails) {
                    *gj += ga[axis] * tj;
                }
            }
        }
        Ok(g)
    }

    /// Log posterior and its gradient with respect to `θ`.
    pub fn log_posterior_with_gradient(&self, theta: &ParameterVector) -> Result<(f64, ParameterGradient)> {
        let (lp, gp) = log_prior_with_gradient(&self.model, theta);
        if !lp.is_finite() {
            return Ok((f64::NEG_INFINITY, gp));
        }
        let (ll, mut g) = self.marginal_log_likelihood_gradient(theta)?;
        g.add_assign(&gp);
        Ok((ll + lp, g))
    }

    /// Log posterior at a chart point, optionally including the log-Jacobian
    /// of the chart.
    pub fn chart_value(&self, x: &[f64], jacobian: bool) -> Result<f64> {
        let (theta, log_jac) = self.model.decode(x)?;
        let v = self.log_posterior(&theta)?;
        Ok(if jacobian { v + log_jac } else { v })
    }

    /// Log posterior and its gradient at a chart point. With `jacobian` the
    /// target is the density of the chart coordinates (used for sampling);
    /// without it the maximizer is the MAP estimate of `θ`.
    pub fn chart_value_and_gradient(&self, x: &[f64], jacobian: bool) -> Result<(f64, Vec<f64>)> {
        if self.model.cfg().gradient == GradientMode::FiniteDifference {
            return self.chart_finite_difference(x, jacobian);
        }
        let (theta, log_jac) = self.model.decode(x)?;
        let (v, g) = self.log_posterior_with_gradient(&theta)?;
        let mut gx = self.model.pullback(x, &g)?;
        if !jacobian {
            let jac = self.model.pullback(x, &ParameterGradient::zeros_like(&theta))?;
            for (a, b) in gx.iter_mut().zip(jac) {
                *a -= b;
            }
        }
        Ok((if jacobian { v + log_jac } else { v }, gx))
    }

    /// Unconstrained log-posterior gradient including the chart
    /// log-Jacobian.
    pub fn log_posterior_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.chart_value_and_gradient(x, true)?.1)
    }

    fn chart_finite_difference(&self, x: &[f64], jacobian: bool) -> Result<(f64, Vec<f64>)> {
        let v = self.chart_value(x, jacobian)?;
        let step = 1e-5;
        let mut g = Vec::with_capacity(x.len());
        for k in 0..x.len() {
            let mut xp = x.to_vec();
            xp[k] += step;
            let mut xm = x.to_vec();
            xm[k] -= step;
            g.push((self.chart_value(&xp, jacobian)? - self.chart_value(&xm, jacobian)?) / (2.0 * step));
        }
        Ok((v, g))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::{ModelConfig, Variant};
    use crate::cov::data_covariance;
    use crate::model::tests::{random_chart_point, small_site};
    use crate::prior::{log_prior, mean_prior_covariance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn dense_log_density(sigma: &DMatrix<f64>, z: &DVector<f64>) -> f64 {
        let chol = sigma.clone().cholesky().unwrap();
        let ld: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        -0.5 * (z.len() as f64 * LN_2PI + ld + z.dot(&chol.solve(z)))
    }

    fn context(variant: Variant, m: usize) -> PosteriorContext {
        let ds = small_site(2);
        let cfg = ModelConfig { variant, delta_mu: 0.5, delta_sigma: 1.0, ..ModelConfig::default() };
        let model = Model::for_dataset(cfg, &ds).unwrap();
        PosteriorContext::new(model, ds, m, 3).unwrap()
    }

    fn dense_marginal(ctx: &PosteriorContext, theta: &ParameterVector) -> f64 {
        let x = ctx.design_matrix();
        let s_omega = mean_prior_covariance(ctx.model(), theta.sigma_beta_sq).unwrap();
        let s_z = data_covariance(ctx.model(), theta, &ctx.dataset().coordinates()).unwrap();
        let total = &x * s_omega * x.transpose() + s_z;
        dense_log_density(&total, &DVector::from_vec(ctx.dataset().values()))
    }

    #[test]
    fn full_parents_match_dense_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in Variant::ALL {
            let ctx = context(v, 30);
            for _ in 0..4 {
                let (theta, _) = ctx.model().decode(&random_chart_point(ctx.model(), &mut rng)).unwrap();
                let a = ctx.marginal_log_likelihood(&theta).unwrap();
                let b = dense_marginal(&ctx, &theta);
                assert!((a - b).abs() < 1e-7, "{v:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn omega_conditional_matches_gls() {
        let ctx = context(Variant::Full, 30);
        let theta = ctx.model().default_theta();
        let cond = ctx.mean_coefficients_full_conditional(&theta).unwrap();
        let x = ctx.design_matrix();
        let s_omega = mean_prior_covariance(ctx.model(), theta.sigma_beta_sq).unwrap();
        let s_z = data_covariance(ctx.model(), &theta, &ctx.dataset().coordinates()).unwrap();
        let z_inv = s_z.try_inverse().unwrap();
        let o = s_omega.try_inverse().unwrap() + x.transpose() * &z_inv * &x;
        let mean = o.clone().cholesky().unwrap().solve(&(x.transpose() * &z_inv * DVector::from_vec(ctx.dataset().values())));
        assert!((&cond.mean - &mean).amax() < 1e-7);
        assert!((cond.covariance() - o.try_inverse().unwrap()).amax() < 1e-7);
    }

    #[test]
    fn posterior_is_likelihood_plus_prior() {
        let ctx = context(Variant::Full, 10);
        let theta = ctx.model().default_theta();
        let lp = ctx.log_posterior(&theta).unwrap();
        let ll = ctx.marginal_log_likelihood(&theta).unwrap();
        assert!((lp - ll - log_prior(ctx.model(), &theta)).abs() < 1e-9 * lp.abs());
        let mut bad = theta.clone();
        bad.sigma_eps_sq = -1.0;
        assert_eq!(ctx.log_posterior(&bad).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn chart_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in Variant::ALL {
            let ctx = context(v, 8);
            for _ in 0..3 {
                let x = random_chart_point(ctx.model(), &mut rng);
                let (_, g) = ctx.chart_value_and_gradient(&x, true).unwrap();
                for k in 0..x.len() {
                    let step = 1e-5;
                    let mut xp = x.clone();
                    xp[k] += step;
                    let mut xm = x.clone();
                    xm[k] -= step;
                    let fd = (ctx.chart_value(&xp, true).unwrap() - ctx.chart_value(&xm, true).unwrap()) / (2.0 * step);
                    let ok = if g[k].abs() < 1e-8 { (fd - g[k]).abs() < 1e-6 } else { (fd - g[k]).abs() < 1e-4 * g[k].abs().max(fd.abs()) };
                    assert!(ok, "{v:?} k={k} fd={fd} analytic={}", g[k]);
                }
            }
        }
    }

    #[test]
    fn gradient_without_jacobian_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ctx = context(Variant::NoWarp, 8);
        let x = random_chart_point(ctx.model(), &mut rng);
        let (_, g) = ctx.chart_value_and_gradient(&x, false).unwrap();
        for k in 0..x.len() {
            let step = 1e-5;
            let mut xp = x.clone();
            xp[k] += step;
            let mut xm = x.clone();
            xm[k] -= step;
            let fd = (ctx.chart_value(&xp, false).unwrap() - ctx.chart_value(&xm, false).unwrap()) / (2.0 * step);
            assert!((fd - g[k]).abs() < 1e-4 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let ctx = context(Variant::Full, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_chart_point(ctx.model(), &mut rng);
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| ctx.chart_value_and_gradient(&x, true).unwrap())
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
