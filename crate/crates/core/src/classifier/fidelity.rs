use nalgebra::Vector2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gaussian::{logsumexp, Gaussian2};
use super::{refit_gmm, GmmConfig, MixtureModel, RegionLabel};
use crate::error::{Error, Result};
use crate::rng::{domain, stream};

const CHUNK: usize = 1 << 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityOptions {
    /// Monte Carlo samples in the first pass.
    pub min_samples: usize,
    /// Sample count is doubled until every region's standard error is below
    /// `target_se` or this cap is reached.
    pub max_samples: usize,
    pub target_se: f64,
    /// Tweezer position the region centres are measured from, m.
    pub origin: [f64; 2],
    pub seed: u64,
}

impl Default for FidelityOptions {
    fn default() -> Self {
        FidelityOptions { min_samples: 1_000_000, max_samples: 64_000_000, target_se: 1e-4, origin: [0.0, 0.0], seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub label: RegionLabel,
    pub weight: f64,
    /// m.
    pub center: [f64; 2],
    /// Distance of the centre from the tweezer, m.
    pub center_distance: f64,
    /// m.
    pub sigma_major: f64,
    pub sigma_minor: f64,
    /// `1 − false_positive − missed`.
    pub fidelity: f64,
    /// Mass of other components inside this region's cell, relative to the
    /// region's weight.
    pub false_positive: f64,
    /// Mass of this component outside its cell, relative to its weight.
    pub missed: f64,
    /// Standard error of the integration (0 for quadrature).
    pub integration_se: f64,
    pub bootstrap_se: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub regions: Vec<RegionReport>,
    /// Monte Carlo samples, or grid cells for quadrature.
    pub samples: usize,
    pub method: String,
}

/// Per-region sums over samples of one stratum.
#[derive(Clone, Default)]
struct Acc {
    fp: Vec<f64>,
    missed: Vec<f64>,
    sq: Vec<f64>,
}

impl Acc {
    fn new(k: usize) -> Self {
        Acc { fp: vec![0.0; k], missed: vec![0.0; k], sq: vec![0.0; k] }
    }

    fn add(&mut self, other: &Acc) {
        for k in 0..self.fp.len() {
            self.fp[k] += other.fp[k];
            self.missed[k] += other.missed[k];
            self.sq[k] += other.sq[k];
        }
    }
}

/// Conditional misassignment of one location: for the cell it falls in, the
/// probability it came from another component; for every other region, the
/// probability it came from that region's component.
fn score(gaussians: &[Gaussian2], ln_w: &[f64], x: &Vector2<f64>, row: &mut [f64], acc: &mut Acc) {
    MixtureModel::weighted_ln_densities(gaussians, ln_w, x, row);
    let cell = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b }).0;
    let lse = logsumexp(row);
    for (k, &v) in row.iter().enumerate() {
        let r = (v - lse).exp();
        let f = if k == cell {
            let f = 1.0 - r;
            acc.fp[k] += f;
            f
        } else {
            acc.missed[k] += r;
            r
        };
        acc.sq[k] += f * f;
    }
}

fn report(model: &MixtureModel, origin: [f64; 2], fp: &[f64], missed: &[f64], se: &[f64]) -> Vec<RegionReport> {
    (0..model.k())
        .map(|k| {
            let w = model.weights[k];
            let [sigma_major, sigma_minor] = model.sigmas(k);
            let c = model.means[k];
            let fp = fp[k] / w;
            let missed = missed[k] / w;
            RegionReport {
                label: model.labels[k].clone(),
                weight: w,
                center: c,
                center_distance: (c[0] - origin[0]).hypot(c[1] - origin[1]),
                sigma_major,
                sigma_minor,
                fidelity: (1.0 - fp - missed).clamp(0.0, 1.0),
                false_positive: fp,
                missed,
                integration_se: se[k] / w,
                bootstrap_se: None,
            }
        })
        .collect()
}

/// Per-region assignment fidelity from the overlap of the fitted densities.
///
/// Region `k` is the cell where `w_k p_k` is the largest weighted density.
/// Its fidelity is `1 − (∫_cell Σ_{j≠k} w_j p_j + ∫_outside w_k p_k) / w_k`.
/// The integrals are estimated by Monte Carlo stratified over components,
/// scoring each sample with its posterior component probabilities rather
/// than with indicator counts.
pub fn fidelity(model: &MixtureModel, opts: &FidelityOptions) -> Result<FidelityReport> {
    model.validate()?;
    if opts.min_samples == 0 || opts.max_samples < opts.min_samples || !(opts.target_se > 0.0) {
        return Err(Error::invalid("fidelity sample counts or target error are invalid"));
    }
    let gaussians = model.gaussians()?;
    let ln_w: Vec<f64> = model.weights.iter().map(|w| w.ln()).collect();
    let k = model.k();
    let mut n = opts.min_samples;
    loop {
        let alloc: Vec<usize> = model.weights.iter().map(|w| ((n as f64 * w).ceil() as usize).max(CHUNK)).collect();
        let jobs: Vec<(usize, usize)> =
            alloc.iter().enumerate().flat_map(|(j, &nj)| (0..nj.div_ceil(CHUNK)).map(move |c| (j, c))).collect();
        let parts: Vec<(usize, Acc)> = jobs
            .par_iter()
            .map(|&(j, c)| {
                let mut rng = stream(opts.seed, domain::FIDELITY_MC, ((j as u64) << 40) | c as u64);
                let count = CHUNK.min(alloc[j] - c * CHUNK);
                let mut acc = Acc::new(k);
                let mut row = vec![0.0; k];
                for _ in 0..count {
                    let z = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
                    score(&gaussians, &ln_w, &gaussians[j].transform(&z), &mut row, &mut acc);
                }
                (j, acc)
            })
            .collect();
        let mut strata = vec![Acc::new(k); k];
        for (j, acc) in &parts {
            strata[*j].add(acc);
        }
        let mut fp = vec![0.0; k];
        let mut missed = vec![0.0; k];
        let mut var = vec![0.0; k];
        for (j, s) in strata.iter().enumerate() {
            let nj = alloc[j] as f64;
            let w = model.weights[j];
            for r in 0..k {
                let mean = (s.fp[r] + s.missed[r]) / nj;
                fp[r] += w * s.fp[r] / nj;
                missed[r] += w * s.missed[r] / nj;
                var[r] += w * w * (s.sq[r] / nj - mean * mean).max(0.0) / (nj - 1.0);
            }
        }
        let se: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        let regions = report(model, opts.origin, &fp, &missed, &se);
        let worst = regions.iter().map(|r| r.integration_se).fold(0.0, f64::max);
        let total = alloc.iter().sum();
        if worst < opts.target_se || n >= opts.max_samples {
            return Ok(FidelityReport { regions, samples: total, method: "monte-carlo".into() });
        }
        n = (2 * n).min(opts.max_samples);
    }
}

/// Midpoint-rule evaluation of the same integrals on an `n × n` grid over
/// ±`half_width_sigmas` major sigmas around every component.
pub fn fidelity_grid(model: &MixtureModel, origin: [f64; 2], n: usize, half_width_sigmas: f64) -> Result<FidelityReport> {
    model.validate()?;
    let gaussians = model.gaussians()?;
    let ln_w: Vec<f64> = model.weights.iter().map(|w| w.ln()).collect();
    let k = model.k();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for j in 0..k {
        let r = half_width_sigmas * model.sigmas(j)[0];
        for a in 0..2 {
            lo[a] = lo[a].min(model.means[j][a] - r);
            hi[a] = hi[a].max(model.means[j][a] + r);
        }
    }
    let h = [(hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64];
    let rows: Vec<Acc> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = Acc::new(k);
            let mut row = vec![0.0; k];
            let x = lo[0] + (i as f64 + 0.5) * h[0];
            for jy in 0..n {
                let p = Vector2::new(x, lo[1] + (jy as f64 + 0.5) * h[1]);
                MixtureModel::weighted_ln_densities(&gaussians, &ln_w, &p, &mut row);
                let cell = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b }).0;
                let total: f64 = row.iter().map(|v| v.exp()).sum();
                for (r, &v) in row.iter().enumerate() {
                    let d = v.exp();
                    if r == cell {
                        acc.fp[r] += total - d;
                    } else {
                        acc.missed[r] += d;
                    }
                }
            }
            acc
        })
        .collect();
    let mut sum = Acc::new(k);
    for r in &rows {
        sum.add(r);
    }
    let area = h[0] * h[1];
    let fp: Vec<f64> = sum.fp.iter().map(|v| v * area).collect();
    let missed: Vec<f64> = sum.missed.iter().map(|v| v * area).collect();
    Ok(FidelityReport { regions: report(model, origin, &fp, &missed, &vec![0.0; k]), samples: n * n, method: "grid".into() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapErrors {
    /// Per-region standard deviation of the fidelity across resamples.
    pub se: Vec<f64>,
    pub resamples: usize,
    pub failures: usize,
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Reorders `fit` so component `i` is the one nearest the reference's
/// component `i` (minimum total squared distance between means).
fn match_to(reference: &MixtureModel, fit: &MixtureModel) -> MixtureModel {
    let k = reference.k();
    let d = |i: usize, j: usize| {
        let (a, b) = (reference.means[i], fit.means[j]);
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
    };
    let best = permutations(k)
        .into_iter()
        .min_by(|p, q| {
            let cost = |p: &Vec<usize>| p.iter().enumerate().map(|(i, &j)| d(i, j)).sum::<f64>();
            cost(p).total_cmp(&cost(q))
        })
        .expect("at least one permutation");
    MixtureModel {
        weights: best.iter().map(|&j| fit.weights[j]).collect(),
        means: best.iter().map(|&j| fit.means[j]).collect(),
        covariances: best.iter().map(|&j| fit.covariances[j]).collect(),
        labels: reference.labels.clone(),
        ..fit.clone()
    }
}

/// Bootstrap standard errors of the region fidelities: resample locations
/// with replacement, refit by EM started from `reference`, match components
/// to `reference` by nearest means, and recompute fidelities with common
/// Monte Carlo samples.
pub fn bootstrap_errors(
    points: &[[f64; 2]],
    reference: &MixtureModel,
    cfg: &GmmConfig,
    n_resamples: usize,
    opts: &FidelityOptions,
    seed: u64,
) -> Result<BootstrapErrors> {
    if n_resamples < 100 {
        return Err(Error::invalid(format!("bootstrap needs at least 100 resamples, got {n_resamples}")));
    }
    let k = reference.k();
    let fixed = FidelityOptions { max_samples: opts.min_samples, ..opts.clone() };
    let fids: Vec<Option<Vec<f64>>> = (0..n_resamples as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(seed, domain::BOOTSTRAP, b);
            let sample: Vec<[f64; 2]> = (0..points.len()).map(|_| points[rng.random_range(0..points.len())]).collect();
            let fit = refit_gmm(&sample, reference, cfg).ok()?;
            let matched = match_to(reference, &fit);
            let rep = fidelity(&matched, &fixed).ok()?;
            Some(rep.regions.iter().map(|r| r.fidelity).collect())
        })
        .collect();
    let ok: Vec<Vec<f64>> = fids.into_iter().flatten().collect();
    let failures = n_resamples - ok.len();
    if failures * 10 > n_resamples {
        return Err(Error::Fit(format!("{failures} of {n_resamples} bootstrap refits failed")));
    }
    let m = ok.len() as f64;
    let se = (0..k)
        .map(|r| {
            let mean = ok.iter().map(|f| f[r]).sum::<f64>() / m;
            (ok.iter().map(|f| (f[r] - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        })
        .collect();
    Ok(BootstrapErrors { se, resamples: n_resamples, failures })
}

#[cfg(test)]
mod tests {
    use super::super::region_labels;
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn two_unit(sep: f64) -> MixtureModel {
        MixtureModel {
            weights: vec![0.5, 0.5],
            means: vec![[0.0, sep / 2.0], [0.0, -sep / 2.0]],
            covariances: vec![[[1.0, 0.0], [0.0, 1.0]]; 2],
            labels: region_labels(2, 9).unwrap(),
            log_likelihood: 0.0,
            points: 0,
            iterations: 0,
            separation_axis: [0.0, 1.0],
        }
    }

    #[test]
    fn gaussian_tail_oracle() {
        let tail = Normal::new(0.0, 1.0).unwrap().cdf(-2.0);
        let expect = 1.0 - 2.0 * tail;
        let rep = fidelity(&two_unit(4.0), &FidelityOptions::default()).unwrap();
        for r in &rep.regions {
            assert!(r.integration_se < 1e-4, "{}", r.integration_se);
            assert!((r.fidelity - expect).abs() < 4.0 * r.integration_se.max(1e-5), "{} vs {expect}", r.fidelity);
            assert!((r.missed - tail).abs() < 5e-4 && (r.false_positive - tail).abs() < 5e-4);
        }
        let grid = fidelity_grid(&two_unit(4.0), [0.0, 0.0], 1500, 9.0).unwrap();
        for r in &grid.regions {
            assert!((r.fidelity - expect).abs() < 1e-5, "{}", r.fidelity);
        }
    }

    #[test]
    fn far_apart_components_are_perfect() {
        let rep = fidelity(&two_unit(80.0), &FidelityOptions::default()).unwrap();
        assert!(rep.regions.iter().all(|r| r.fidelity == 1.0));
        assert_eq!(rep.regions[0].center_distance, 40.0);
    }

    #[test]
    fn unnormalized_model_rejected() {
        let mut m = two_unit(4.0);
        m.weights[0] = 0.7;
        assert!(fidelity(&m, &FidelityOptions::default()).is_err());
    }

    #[test]
    fn matching_restores_reference_order() {
        let reference = two_unit(4.0);
        let mut swapped = reference.clone();
        swapped.means.reverse();
        swapped.weights = vec![0.4, 0.6];
        let m = match_to(&reference, &swapped);
        assert_eq!(m.means, reference.means);
        assert_eq!(m.weights, vec![0.6, 0.4]);
        assert_eq!(permutations(4).len(), 24);
    }
}
