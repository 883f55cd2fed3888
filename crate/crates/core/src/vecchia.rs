//! Vecchia approximation: orderings, parent sets and the sparse factor of the
//! approximate precision.
//!
//! Parents for observed points follow the CPT-aware rule: half are the
//! nearest predecessors in raw `(s, h)` space and half are predecessors from
//! other soundings that are nearest in depth. Prediction points always come
//! after the data in a joint plan.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GeoWarpError, Result};
use crate::site::{Coordinate, SiteDataset};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const JITTER: f64 = 1e-10;
const VARIANCE_FLOOR: f64 = 1e-12;

/// How prediction points are arranged, which selects their within-prediction
/// parent rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionLayout {
    /// Vertical columns at a few horizontal locations (CPT-aware rule).
    Columnar,
    /// Scattered or gridded points (nearest predecessors).
    Gridded,
}

/// Ordering and parent sets over `n_data` observed points followed by any
/// prediction points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VecchiaPlan {
    /// Point indices in the order they are conditioned.
    pub ordering: Vec<usize>,
    /// Parents of each point, by point index.
    pub parents: Vec<Vec<usize>>,
    pub m: usize,
    pub seed: u64,
    pub n_data: usize,
}

impl VecchiaPlan {
    pub fn len(&self) -> usize {
        self.ordering.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordering.is_empty()
    }

    /// Position of every point in the ordering.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.ordering.len()];
        for (t, &i) in self.ordering.iter().enumerate() {
            pos[i] = t;
        }
        pos
    }

    /// Checks that parents precede their children and are distinct.
    pub fn check(&self) -> Result<()> {
        let pos = self.positions();
        for (i, ps) in self.parents.iter().enumerate() {
            let mut seen = ps.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != ps.len() || ps.len() > self.m {
                return Err(GeoWarpError::numeric(format!("invalid parent set for point {i}")));
            }
            if ps.iter().any(|&p| pos[p] >= pos[i]) {
                return Err(GeoWarpError::numeric(format!("parent of point {i} does not precede it")));
            }
        }
        Ok(())
    }
}

fn check_m(m: usize) -> Result<()> {
    if m < 2 || m % 2 != 0 {
        return Err(GeoWarpError::config(format!("number of parents must be even and at least 2, got {m}")));
    }
    Ok(())
}

fn cmp_key(a: (f64, usize), b: (f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Incrementally filled candidate pool for parent selection.
struct Pool<'a> {
    points: &'a [[f64; 3]],
    group: &'a [usize],
    depth_axis: usize,
    members: Vec<usize>,
    /// Per group, members sorted by `(depth, index)`.
    by_group: Vec<Vec<(f64, usize)>>,
}

impl<'a> Pool<'a> {
    fn new(points: &'a [[f64; 3]], group: &'a [usize], depth_axis: usize) -> Self {
        let n_groups = group.iter().max().map_or(0, |g| g + 1);
        Self { points, group, depth_axis, members: Vec::new(), by_group: vec![Vec::new(); n_groups] }
    }

    fn insert(&mut self, i: usize) {
        self.members.push(i);
        let key = (self.points[i][self.depth_axis], i);
        let list = &mut self.by_group[self.group[i]];
        let at = list.partition_point(|&e| cmp_key(e, key) == Ordering::Less);
        list.insert(at, key);
    }

    /// Up to `k` members nearest to `u`, closest first.
    fn nearest(&self, u: &[f64; 3], k: usize) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = self
            .members
            .iter()
            .map(|&j| {
                let p = &self.points[j];
                ((p[0] - u[0]).powi(2) + (p[1] - u[1]).powi(2) + (p[2] - u[2]).powi(2), j)
            })
            .collect();
        let k = k.min(d.len());
        if k == 0 {
            return Vec::new();
        }
        if k < d.len() {
            d.select_nth_unstable_by(k - 1, |a, b| cmp_key(*a, *b));
            d.truncate(k);
        }
        d.sort_unstable_by(|a, b| cmp_key(*a, *b));
        d.into_iter().map(|e| e.1).collect()
    }

    /// Up to `k` members of group `g` nearest in depth to `h` as
    /// `(|Δh|, index)`, closest first.
    fn depth_nearest_in_group(&self, g: usize, h: f64, k: usize) -> Vec<(f64, usize)> {
        let list = &self.by_group[g];
        let mut hi = list.partition_point(|e| e.0 < h);
        let mut lo = hi;
        let mut out = Vec::with_capacity(k.min(list.len()));
        while out.len() < k && (lo > 0 || hi < list.len()) {
            let below = (lo > 0).then(|| (h - list[lo - 1].0, list[lo - 1].1));
            let above = (hi < list.len()).then(|| (list[hi].0 - h, list[hi].1));
            let take_below = match (below, above) {
                (Some(b), Some(a)) => cmp_key(b, a) != Ordering::Greater,
                (Some(_), None) => true,
                _ => false,
            };
            if take_below {
                out.push(below.unwrap());
                lo -= 1;
            } else {
                out.push(above.unwrap());
                hi += 1;
            }
        }
        out
    }

    /// Up to `k` members outside `own` nearest in depth, merged across
    /// groups by depth distance, then group, then index.
    fn depth_nearest_other(&self, own: usize, h: f64, k: usize) -> Vec<usize> {
        let mut cand: Vec<(f64, usize, usize)> = Vec::new();
        for g in 0..self.by_group.len() {
            if g == own {
                continue;
            }
            cand.extend(self.depth_nearest_in_group(g, h, k).into_iter().map(|(d, i)| (d, g, i)));
        }
        cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cand.into_iter().take(k).map(|c| c.2).collect()
    }

    /// CPT-aware selection of up to `target` parents: `n_near` nearest,
    /// `n_cross` from other groups, backfilled from the nearest pool.
    fn cpt_aware(&self, u: &[f64; 3], own: usize, n_near: usize, n_cross: usize, target: usize) -> Vec<usize> {
        let near = self.nearest(u, target.max(n_near + n_cross));
        let mut parents: Vec<usize> = near.iter().take(n_near).copied().collect();
        for p in self.depth_nearest_other(own, u[self.depth_axis], n_cross) {
            if parents.len() < target && !parents.contains(&p) {
                parents.push(p);
            }
        }
        for &p in near.iter().skip(n_near) {
            if parents.len() >= target {
                break;
            }
            if !parents.contains(&p) {
                parents.push(p);
            }
        }
        parents
    }
}

/// Rank of each sounding when sorted by id, used for tie-breaking.
fn sounding_ranks(ds: &SiteDataset) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ds.soundings().len()).collect();
    order.sort_by(|&a, &b| ds.soundings()[a].id.cmp(&ds.soundings()[b].id));
    let mut rank = vec![0; order.len()];
    for (r, &s) in order.iter().enumerate() {
        rank[s] = r;
    }
    rank
}

/// Random ordering and parents for the observed points.
fn data_plan(ds: &SiteDataset, m: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<Vec<usize>>) {
    let points = ds.u_points();
    let rank = sounding_ranks(ds);
    let group: Vec<usize> = ds.sounding_index().into_iter().map(|s| rank[s]).collect();
    let n = points.len();
    let mut ordering: Vec<usize> = (0..n).collect();
    ordering.shuffle(rng);
    let mut pool = Pool::new(&points, &group, ds.dim());
    let mut parents = vec![Vec::new(); n];
    let half = m / 2;
    for (t, &c) in ordering.iter().enumerate() {
        parents[c] = pool.cpt_aware(&points[c], group[c], half, half, t.min(m));
        pool.insert(c);
    }
    (ordering, parents)
}

/// Plan over the observed points of `dataset` with a random ordering.
pub fn build_plan(dataset: &SiteDataset, m: usize, seed: u64) -> Result<VecchiaPlan> {
    check_m(m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ordering, parents) = data_plan(dataset, m, &mut rng);
    Ok(VecchiaPlan { ordering, parents, m, seed, n_data: dataset.n_points() })
}

/// Joint plan over `W = (Z, Y*)`: the observed points in the same order as
/// [`build_plan`], then the prediction points in random order.
pub fn build_joint_plan(
    dataset: &SiteDataset,
    prediction: &[Coordinate],
    m: usize,
    seed: u64,
    layout: PredictionLayout,
) -> Result<VecchiaPlan> {
    check_m(m)?;
    let dim = dataset.dim();
    for c in prediction {
        if c.dim() != dim {
            return Err(GeoWarpError::Dimension { expected: dim, got: c.dim() });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ordering, mut parents) = data_plan(dataset, m, &mut rng);
    let n_data = dataset.n_points();
    let n_pred = prediction.len();
    let mut pred_order: Vec<usize> = (0..n_pred).collect();
    pred_order.shuffle(&mut rng);

    let data_points = dataset.u_points();
    let rank = sounding_ranks(dataset);
    let data_group: Vec<usize> = dataset.sounding_index().into_iter().map(|s| rank[s]).collect();
    let mut data_pool = Pool::new(&data_points, &data_group, dim);
    for i in 0..n_data {
        data_pool.insert(i);
    }
    // Horizontal location of each sounding, indexed by rank.
    let mut locations = vec![Vec::new(); rank.len()];
    for (s, snd) in dataset.soundings().iter().enumerate() {
        locations[rank[s]] = snd.location.clone();
    }

    let pred_points: Vec<[f64; 3]> = prediction.iter().map(Coordinate::to_u).collect();
    let pred_group = column_groups(&pred_points, dim);
    let mut pred_pool = Pool::new(&pred_points, &pred_group, dim);
    let half = m / 2;
    let mut pred_parents = vec![Vec::new(); n_pred];
    for (t, &c) in pred_order.iter().enumerate() {
        let u = &pred_points[c];
        let target = (n_data + t).min(m);
        let data_cand = round_robin_data(&data_pool, &locations, u, dim, m);
        let within = match layout {
            PredictionLayout::Columnar => {
                let n_near = half.div_ceil(2);
                pred_pool.cpt_aware(u, pred_group[c], n_near, half - n_near, half.min(t))
            }
            PredictionLayout::Gridded => pred_pool.nearest(u, half),
        };
        let mut ps: Vec<usize> = data_cand.iter().take(half).copied().collect();
        ps.extend(within.iter().map(|&j| n_data + j));
        if ps.len() < target {
            for j in pred_pool.nearest(u, m) {
                if ps.len() >= target {
                    break;
                }
                if !ps.contains(&(n_data + j)) {
                    ps.push(n_data + j);
                }
            }
        }
        for &p in data_cand.iter().skip(half) {
            if ps.len() >= target {
                break;
            }
            if !ps.contains(&p) {
                ps.push(p);
            }
        }
        pred_parents[c] = ps;
        pred_pool.insert(c);
    }
    ordering.extend(pred_order.iter().map(|&j| n_data + j));
    parents.extend(pred_parents);
    Ok(VecchiaPlan { ordering, parents, m, seed, n_data })
}

/// Groups prediction points by identical horizontal location.
fn column_groups(points: &[[f64; 3]], dim: usize) -> Vec<usize> {
    let mut keys: Vec<(Vec<f64>, usize)> = points.iter().enumerate().map(|(i, p)| (p[..dim].to_vec(), i)).collect();
    keys.sort_by(|a, b| {
        a.0.iter().zip(&b.0).map(|(x, y)| x.total_cmp(y)).find(|o| *o != Ordering::Equal).unwrap_or(Ordering::Equal)
    });
    let mut group = vec![0; points.len()];
    let mut g = 0;
    for w in 0..keys.len() {
        if w > 0 {
            let dist: f64 = keys[w].0.iter().zip(&keys[w - 1].0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if dist > crate::cov::SAME_LOCATION_TOL {
                g += 1;
            }
        }
        group[keys[w].1] = g;
    }
    group
}

/// Up to `k` observed points taken round-robin across soundings (closest
/// sounding first), each sounding contributing its points nearest in depth.
fn round_robin_data(pool: &Pool, locations: &[Vec<f64>], u: &[f64; 3], dim: usize, k: usize) -> Vec<usize> {
    let mut soundings: Vec<(f64, usize)> = locations
        .iter()
        .enumerate()
        .map(|(g, loc)| (loc.iter().zip(u).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), g))
        .collect();
    soundings.sort_unstable_by(|a, b| cmp_key(*a, *b));
    let lists: Vec<Vec<(f64, usize)>> =
        soundings.iter().map(|&(_, g)| pool.depth_nearest_in_group(g, u[dim], k)).collect();
    let mut out = Vec::with_capacity(k);
    let mut round = 0;
    while out.len() < k {
        let mut any = false;
        for list in &lists {
            if let Some(&(_, i)) = list.get(round) {
                any = true;
                out.push(i);
                if out.len() == k {
                    break;
                }
            }
        }
        if !any {
            break;
        }
        round += 1;
    }
    out
}

/// One conditional of the factorization:
/// `V_i | V_P ~ N(Σ_j b_j V_{p_j}, d_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorRow {
    pub index: usize,
    pub parents: Vec<usize>,
    pub weights: Vec<f64>,
    pub cond_var: f64,
}

/// Sparse factor of `Q̃ = Bᵀ D⁻¹ B`, where row `i` of `B` holds `1` on the
/// diagonal and `-b` on the parents.
#[derive(Clone, Debug)]
pub struct VecchiaFactor {
    rows: Vec<FactorRow>,
    log_det_precision: f64,
}

/// Parent Gram Cholesky, regression weights and conditional variance of one
/// row. Jitter is tried once before failing.
pub(crate) fn solve_row<F>(
    child: usize,
    parents: &[usize],
    cov: &F,
) -> Result<(Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>, Vec<f64>, f64)>
where
    F: Fn(usize, usize) -> f64,
{
    let c_cc = cov(child, child);
    if parents.is_empty() {
        return Ok((None, Vec::new(), c_cc));
    }
    let j = parents.len();
    let mut gram = DMatrix::from_fn(j, j, |a, b| cov(parents[a], parents[b]));
    let rhs = DVector::from_iterator(j, parents.iter().map(|&p| cov(p, child)));
    let chol = match gram.clone().cholesky() {
        Some(c) => c,
        None => {
            let jitter = JITTER * gram.diagonal().mean();
            for a in 0..j {
                gram[(a, a)] += jitter;
            }
            gram.cholesky().ok_or_else(|| {
                GeoWarpError::numeric(format!("parent covariance of point {child} is not positive definite"))
            })?
        }
    };
    let b = chol.solve(&rhs);
    let d = (c_cc - rhs.dot(&b)).max(VARIANCE_FLOOR * c_cc);
    if !(d > 0.0) || !d.is_finite() {
        return Err(GeoWarpError::numeric(format!("non-positive conditional variance at point {child}")));
    }
    Ok((Some(chol), b.as_slice().to_vec(), d))
}

/// Factorizes the plan against a covariance oracle `cov(i, j)`.
pub fn factorize<F>(plan: &VecchiaPlan, cov: F) -> Result<VecchiaFactor>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let rows: Vec<FactorRow> = plan
        .ordering
        .par_iter()
        .map(|&i| {
            let (_, weights, cond_var) = solve_row(i, &plan.parents[i], &cov)?;
            Ok(FactorRow { index: i, parents: plan.parents[i].clone(), weights, cond_var })
        })
        .collect::<Result<_>>()?;
    let log_det_precision = -rows.iter().map(|r| r.cond_var.ln()).sum::<f64>();
    Ok(VecchiaFactor { rows, log_det_precision })
}

impl VecchiaFactor {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows in conditioning order.
    pub fn rows(&self) -> &[FactorRow] {
        &self.rows
    }

    /// `log|Q̃| = -Σ log d_i`.
    pub fn log_det_precision(&self) -> f64 {
        self.log_det_precision
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        crate::error::check_len(self.rows.len(), v.len())
    }

    /// Conditional residual `y_i - Σ b_j y_{p_j}` per row, in row order.
    fn residuals(&self, y: &[f64]) -> Vec<f64> {
        self.rows
            .par_iter()
            .map(|r| y[r.index] - r.parents.iter().zip(&r.weights).map(|(&p, b)| b * y[p]).sum::<f64>())
            .collect()
    }

    /// `D^{-1/2} B y`, indexed by point.
    pub fn whiten(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check(y)?;
        let res = self.residuals(y);
        let mut out = vec![0.0; y.len()];
        for (r, e) in self.rows.iter().zip(res) {
            out[r.index] = e / r.cond_var.sqrt();
        }
        Ok(out)
    }

    /// Approximate log-density of a zero-mean vector.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        self.check(z)?;
        let res = self.residuals(z);
        let terms: Vec<f64> =
            self.rows.par_iter().zip(res.par_iter()).map(|(r, e)| r.cond_var.ln() + e * e / r.cond_var).collect();
        Ok(-0.5 * (self.rows.len() as f64 * LN_2PI + terms.iter().sum::<f64>()))
    }

    pub fn precision_quadratic(&self, y: &[f64]) -> Result<f64> {
        self.check(y)?;
        let res = self.residuals(y);
        Ok(self.rows.iter().zip(&res).map(|(r, e)| e * e / r.cond_var).sum())
    }

    /// `Q̃ y`.
    pub fn precision_apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check(y)?;
        let res = self.residuals(y);
        let mut out = vec![0.0; y.len()];
        for (r, e) in self.rows.iter().zip(res) {
            let w = e / r.cond_var;
            out[r.index] += w;
            for (&p, b) in r.parents.iter().zip(&r.weights) {
                out[p] -= b * w;
            }
        }
        Ok(out)
    }

    /// Solves `D^{-1/2} B x = e`; for white noise `e` the result has
    /// precision `Q̃`.
    pub fn half_factor_transpose_solve(&self, e: &[f64]) -> Result<Vec<f64>> {
        self.check(e)?;
        let mut x = vec![0.0; e.len()];
        for r in &self.rows {
            let mean: f64 = r.parents.iter().zip(&r.weights).map(|(&p, b)| b * x[p]).sum();
            x[r.index] = mean + r.cond_var.sqrt() * e[r.index];
        }
        Ok(x)
    }
}
