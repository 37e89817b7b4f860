//! Spin-region assignment from atom locations: a Gaussian mixture fitted by
//! expectation-maximization, highest-density cells, and per-region
//! fidelities from the overlap of the fitted densities.

mod fidelity;
mod gaussian;

pub use fidelity::{bootstrap_errors, fidelity, fidelity_grid, BootstrapErrors, FidelityOptions, FidelityReport, RegionReport};

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};
use crate::rng::{domain, stream};
use gaussian::{eigenvalues, logsumexp, Gaussian2};

/// Set of |m_F| values a region stands for, stored as 2|m_F|.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegionLabel(pub Vec<u8>);

impl RegionLabel {
    /// Largest |m_F| in the region.
    pub fn max_abs_m(&self) -> f64 {
        self.0.iter().copied().max().unwrap_or(0) as f64 / 2.0
    }

    pub fn contains(&self, m_f: f64) -> bool {
        self.0.contains(&((2.0 * m_f.abs()).round() as u8))
    }
}

impl fmt::Display for RegionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|m| format!("{m}/2")).collect();
        if parts.len() == 1 {
            write!(f, "{}", parts[0])
        } else {
            write!(f, "merged({})", parts.join(","))
        }
    }
}

/// Labels of `k` regions for spin `F = twice_f/2` ordered by decreasing
/// displacement: single |m_F| values from the top, the remainder merged into
/// the last region.
pub fn region_labels(k: usize, twice_f: u8) -> Result<Vec<RegionLabel>> {
    let values: Vec<u8> = (0..=twice_f).rev().filter(|m| m % 2 == twice_f % 2).collect();
    if k == 0 || k > values.len() {
        return Err(Error::invalid(format!("K = {k} regions cannot be labelled from {} |m_F| values", values.len())));
    }
    let mut labels: Vec<RegionLabel> = values[..k - 1].iter().map(|&m| RegionLabel(vec![m])).collect();
    labels.push(RegionLabel(values[k - 1..].to_vec()));
    Ok(labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub restarts: usize,
    /// Convergence: log-likelihood change per point below `tolerance` for
    /// `patience` consecutive iterations.
    pub tolerance: f64,
    pub patience: usize,
    pub max_iterations: usize,
    /// Unit vector along which components are ordered (largest projection
    /// first).
    pub separation_axis: [f64; 2],
    /// Minimum covariance eigenvalue, m².
    pub covariance_floor: f64,
    /// 2F of the spin whose |m_F| values label the regions.
    pub twice_f: u8,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            restarts: 10,
            tolerance: 1e-8,
            patience: 5,
            max_iterations: 10_000,
            separation_axis: [0.0, 1.0],
            covariance_floor: 1e-16,
            twice_f: 9,
        }
    }
}

/// Fitted mixture with components ordered by label (largest |m_F| first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub weights: Vec<f64>,
    /// m.
    pub means: Vec<[f64; 2]>,
    /// m², row-major.
    pub covariances: Vec<[[f64; 2]; 2]>,
    pub labels: Vec<RegionLabel>,
    pub log_likelihood: f64,
    pub points: usize,
    pub iterations: usize,
    pub separation_axis: [f64; 2],
}

impl MixtureModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub(crate) fn gaussians(&self) -> Result<Vec<Gaussian2>> {
        self.means
            .iter()
            .zip(&self.covariances)
            .map(|(m, c)| {
                Gaussian2::new(Vector2::new(m[0], m[1]), Matrix2::new(c[0][0], c[0][1], c[1][0], c[1][1]))
                    .ok_or_else(|| Error::invalid("mixture covariance is not positive-definite"))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || self.means.len() != k || self.covariances.len() != k || self.labels.len() != k {
            return Err(Error::invalid("mixture component arrays differ in length"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 || self.weights.iter().any(|w| !(*w > 0.0 && *w < 1.0 || k == 1 && *w == 1.0)) {
            return Err(Error::invalid(format!("mixture weights are not normalized (sum {total})")));
        }
        self.gaussians().map(|_| ())
    }

    /// Per-component `ln(w_k p_k(x))`.
    pub(crate) fn weighted_ln_densities(gaussians: &[Gaussian2], ln_w: &[f64], x: &Vector2<f64>, out: &mut [f64]) {
        for ((o, g), lw) in out.iter_mut().zip(gaussians).zip(ln_w) {
            *o = lw + g.ln_pdf(x);
        }
    }

    /// Sorts components by decreasing projection of their means on the
    /// separation axis; labels stay positional.
    pub fn order_components(&mut self) {
        let u = Vector2::from(self.separation_axis);
        let mut idx: Vec<usize> = (0..self.k()).collect();
        idx.sort_by(|&a, &b| {
            let pa = u.dot(&Vector2::from(self.means[a]));
            let pb = u.dot(&Vector2::from(self.means[b]));
            pb.total_cmp(&pa)
        });
        self.weights = idx.iter().map(|&i| self.weights[i]).collect();
        self.means = idx.iter().map(|&i| self.means[i]).collect();
        self.covariances = idx.iter().map(|&i| self.covariances[i]).collect();
    }

    /// Principal standard deviations of component `k`, m (major first).
    pub fn sigmas(&self, k: usize) -> [f64; 2] {
        let c = self.covariances[k];
        let [a, b] = eigenvalues(&Matrix2::new(c[0][0], c[0][1], c[1][0], c[1][1]));
        [a.max(0.0).sqrt(), b.max(0.0).sqrt()]
    }
}

/// Index of the component with the largest weighted density at `location`.
/// Ties go to the lower index, i.e. the larger |m_F|.
pub fn assign(model: &MixtureModel, location: [f64; 2]) -> Result<usize> {
    let gaussians = model.gaussians()?;
    let ln_w: Vec<f64> = model.weights.iter().map(|w| w.ln()).collect();
    Ok(assign_with(&gaussians, &ln_w, &Vector2::new(location[0], location[1])))
}

pub(crate) fn assign_with(gaussians: &[Gaussian2], ln_w: &[f64], x: &Vector2<f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (k, (g, lw)) in gaussians.iter().zip(ln_w).enumerate() {
        let v = lw + g.ln_pdf(x);
        if v > best_v {
            best = k;
            best_v = v;
        }
    }
    best
}

/// Standardized working copy of the data.
struct Scaled {
    points: Vec<Vector2<f64>>,
    center: Vector2<f64>,
    scale: Vector2<f64>,
}

fn standardize(points: &[[f64; 2]]) -> Scaled {
    let n = points.len() as f64;
    let center = points.iter().fold(Vector2::zeros(), |a, p| a + Vector2::new(p[0], p[1])) / n;
    let var = points.iter().fold(Vector2::zeros(), |a: Vector2<f64>, p| {
        let d = Vector2::new(p[0], p[1]) - center;
        a + d.component_mul(&d)
    }) / n;
    // one scale for both axes: distances, and so the seeding, keep their
    // physical geometry
    let s = (0.5 * (var.x + var.y)).sqrt();
    let s = if s > 0.0 { s } else { 1.0 };
    let scale = Vector2::new(s, s);
    let points = points.iter().map(|p| (Vector2::new(p[0], p[1]) - center).component_div(&scale)).collect();
    Scaled { points, center, scale }
}

struct EmResult {
    weights: Vec<f64>,
    gaussians: Vec<Gaussian2>,
    log_likelihood: f64,
    iterations: usize,
}

/// Weighted means and covariances of all components from the n×K
/// responsibilities; covariance eigenvalues are raised to `floor`.
fn m_step(points: &[Vector2<f64>], resp: &[f64], k: usize, floor: f64) -> Result<(Vec<f64>, Vec<Gaussian2>)> {
    let mut nk = vec![0.0; k];
    let mut sums = vec![Vector2::zeros(); k];
    for (p, row) in points.iter().zip(resp.chunks_exact(k)) {
        for j in 0..k {
            nk[j] += row[j];
            sums[j] += row[j] * p;
        }
    }
    if let Some(j) = nk.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::Fit(format!("component {j} lost all points")));
    }
    let means: Vec<Vector2<f64>> = sums.iter().zip(&nk).map(|(s, n)| s / *n).collect();
    let mut covs = vec![Matrix2::zeros(); k];
    for (p, row) in points.iter().zip(resp.chunks_exact(k)) {
        for j in 0..k {
            let d = p - means[j];
            covs[j] += row[j] * d * d.transpose();
        }
    }
    let total: f64 = nk.iter().sum();
    let mut gaussians = Vec::with_capacity(k);
    for j in 0..k {
        let mut cov = covs[j] / nk[j];
        let [_, lo] = eigenvalues(&cov);
        if lo < floor {
            cov += Matrix2::identity() * (floor - lo);
        }
        gaussians.push(Gaussian2::new(means[j], cov).ok_or_else(|| Error::Fit(format!("component {j} covariance collapsed")))?);
    }
    Ok((nk.iter().map(|v| v / total).collect(), gaussians))
}

/// E-step: responsibilities into `resp` (row-major n×K) and the total
/// log-likelihood.
fn e_step(points: &[Vector2<f64>], weights: &[f64], gaussians: &[Gaussian2], resp: &mut [f64]) -> f64 {
    let k = weights.len();
    let ln_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    resp.par_chunks_mut(k)
        .zip(points.par_iter())
        .with_min_len(4096)
        .map(|(row, p)| {
            MixtureModel::weighted_ln_densities(gaussians, &ln_w, p, row);
            let lse = logsumexp(row);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
            lse
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum()
}

fn em(data: &Scaled, k: usize, cfg: &GmmConfig, restart: u64, seed: u64) -> Result<EmResult> {
    let pts = &data.points;
    let n = pts.len();
    let floor = cfg.covariance_floor / data.scale.max().powi(2);
    // greedy D²-weighted seeding (k-means++ with local trials): each new
    // seed is the best of a few D²-sampled candidates, which keeps isolated
    // mislocalized points from becoming seeds
    let mut rng = stream(seed, domain::GMM_INIT, restart);
    let mut centers = vec![pts[rng.random_range(0..n)]];
    let mut dist: Vec<f64> = pts.iter().map(|p| (p - centers[0]).norm_squared()).collect();
    let trials = 2 + (k as f64).ln().floor() as usize;
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let mut best: Option<(f64, Vector2<f64>, Vec<f64>)> = None;
        for _ in 0..trials {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            let c = pts[pick];
            let cand: Vec<f64> = dist.iter().zip(pts).map(|(d, p)| d.min((p - c).norm_squared())).collect();
            let potential: f64 = cand.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, c, cand));
            }
        }
        let (_, c, cand) = best.expect("at least one trial");
        dist = cand;
        centers.push(c);
    }
    // Lloyd passes settle the seeds before EM
    let nearest = |p: &Vector2<f64>, centers: &[Vector2<f64>]| {
        centers.iter().enumerate().fold((0, f64::INFINITY), |b, (j, c)| {
            let d = (p - c).norm_squared();
            if d < b.1 { (j, d) } else { b }
        }).0
    };
    for _ in 0..100 {
        let mut sums = vec![(Vector2::zeros(), 0usize); k];
        for p in pts {
            let j = nearest(p, &centers);
            sums[j].0 += p;
            sums[j].1 += 1;
        }
        let mut moved = false;
        for (c, (s, m)) in centers.iter_mut().zip(&sums) {
            if *m > 0 {
                let next = s / *m as f64;
                moved |= next != *c;
                *c = next;
            }
        }
        if !moved {
            break;
        }
    }
    let mut resp = vec![0.0; n * k];
    for (i, p) in pts.iter().enumerate() {
        resp[i * k + nearest(p, &centers)] = 1.0;
    }
    let (weights, gaussians) = m_step(pts, &resp, k, floor.max(1e-6))?;
    iterate(data, weights, gaussians, cfg)
}

/// EM iterations from the given parameters until convergence.
fn iterate(data: &Scaled, mut weights: Vec<f64>, mut gaussians: Vec<Gaussian2>, cfg: &GmmConfig) -> Result<EmResult> {
    let pts = &data.points;
    let (n, k) = (pts.len(), weights.len());
    let floor = cfg.covariance_floor / data.scale.max().powi(2);
    let mut resp = vec![0.0; n * k];
    let mut prev = e_step(pts, &weights, &gaussians, &mut resp);
    let mut quiet = 0;
    for it in 1..=cfg.max_iterations {
        (weights, gaussians) = m_step(pts, &resp, k, floor)?;
        let ll = e_step(pts, &weights, &gaussians, &mut resp);
        let slack = 1e-12 * prev.abs() + 1e-9;
        if ll < prev - slack {
            return Err(Error::Fit(format!("log-likelihood decreased at iteration {it}: {prev} -> {ll}")));
        }
        if ((ll - prev) / n as f64).abs() < cfg.tolerance {
            quiet += 1;
            if quiet >= cfg.patience {
                return Ok(EmResult { weights, gaussians, log_likelihood: ll, iterations: it });
            }
        } else {
            quiet = 0;
        }
        prev = ll;
    }
    Err(Error::Fit(format!("EM did not converge within {} iterations", cfg.max_iterations)))
}

/// Expectation-maximization fit of a `k`-component full-covariance Gaussian
/// mixture to 2-D locations, best of `cfg.restarts` seeded restarts.
pub fn fit_gmm(points: &[[f64; 2]], k: usize, cfg: &GmmConfig, seed: u64) -> Result<MixtureModel> {
    let (labels, axis) = check_inputs(points, k, cfg)?;
    let data = standardize(points);
    let labels_ref = &labels;
    let runs: Vec<Result<MixtureModel>> = (0..cfg.restarts as u64)
        .into_par_iter()
        .map(|r| em(&data, k, cfg, r, seed).and_then(|run| to_model(run, &data, labels_ref.clone(), axis, cfg)))
        .collect();
    let mut failures = Vec::new();
    let mut best: Option<MixtureModel> = None;
    for run in runs {
        match run {
            Ok(m) => {
                if best.as_ref().is_none_or(|b| m.log_likelihood > b.log_likelihood) {
                    best = Some(m);
                }
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    best.ok_or_else(|| Error::Fit(format!("all {} EM restarts failed: {}", cfg.restarts, failures.join("; "))))
}

/// Single EM run on `points` started from the parameters of `start`.
pub fn refit_gmm(points: &[[f64; 2]], start: &MixtureModel, cfg: &GmmConfig) -> Result<MixtureModel> {
    start.validate()?;
    let (_, axis) = check_inputs(points, start.k(), cfg)?;
    let data = standardize(points);
    let inv = Matrix2::from_diagonal(&data.scale.map(|v| 1.0 / v));
    let gaussians = start
        .gaussians()?
        .into_iter()
        .map(|g| Gaussian2::new(inv * (g.mean - data.center), inv * g.cov * inv))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Fit("starting covariance not positive-definite after scaling".into()))?;
    let run = iterate(&data, start.weights.clone(), gaussians, cfg)?;
    to_model(run, &data, start.labels.clone(), axis, cfg)
}

fn check_inputs(points: &[[f64; 2]], k: usize, cfg: &GmmConfig) -> Result<(Vec<RegionLabel>, Vector2<f64>)> {
    let labels = region_labels(k, cfg.twice_f)?;
    if k > points.len() {
        return Err(Error::invalid(format!("K = {k} exceeds the {} points", points.len())));
    }
    if points.len() < 50 * k {
        return Err(Error::invalid(format!("need at least {} points for K = {k}, got {}", 50 * k, points.len())));
    }
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::invalid("non-finite location"));
    }
    let axis = Vector2::from(cfg.separation_axis);
    if !(axis.norm() > 0.0) {
        return Err(Error::invalid("separation axis must be nonzero"));
    }
    if cfg.restarts == 0 || cfg.patience == 0 || !(cfg.tolerance > 0.0) || !(cfg.covariance_floor > 0.0) {
        return Err(Error::invalid("restarts, patience, tolerance and covariance floor must be positive"));
    }
    Ok((labels, axis))
}

/// Physical-unit model from a standardized EM run, ordered along the
/// separation axis; degenerate components are an error.
fn to_model(run: EmResult, data: &Scaled, labels: Vec<RegionLabel>, axis: Vector2<f64>, cfg: &GmmConfig) -> Result<MixtureModel> {
    let s = Matrix2::from_diagonal(&data.scale);
    let ln_jacobian = data.scale.iter().map(|v| v.ln()).sum::<f64>() * data.points.len() as f64;
    let total: f64 = run.weights.iter().sum();
    let u = axis.normalize();
    let mut model = MixtureModel {
        weights: run.weights.iter().map(|w| w / total).collect(),
        means: run.gaussians.iter().map(|g| {
            let m = data.center + s * g.mean;
            [m.x, m.y]
        }).collect(),
        covariances: run.gaussians.iter().map(|g| {
            let c = s * g.cov * s;
            [[c[(0, 0)], c[(0, 1)]], [c[(1, 0)], c[(1, 1)]]]
        }).collect(),
        labels,
        log_likelihood: run.log_likelihood - ln_jacobian,
        points: data.points.len(),
        iterations: run.iterations,
        separation_axis: [u.x, u.y],
    };
    model.order_components();
    for j in 0..model.k() {
        if model.weights[j] < 1e-3 {
            return Err(Error::Fit(format!("degenerate component {}: weight {:e}", model.labels[j], model.weights[j])));
        }
        if model.sigmas(j)[1].powi(2) <= cfg.covariance_floor * (1.0 + 1e-6) {
            return Err(Error::Fit(format!("degenerate component {}: covariance at the floor", model.labels[j])));
        }
    }
    Ok(model)
}
