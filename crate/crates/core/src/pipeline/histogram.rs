use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{DMatrix, DVector, Dyn, Owned};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::f64::consts::{PI, SQRT_2};

use super::AnalysisConfig;
use crate::error::{Error, Result};
use crate::rng::{domain, stream};

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Azzalini skew-normal `2/ω·φ(z)·Φ(αz)`, `z = (x − ξ)/ω`, scaled by
/// `amplitude` (number of shots in the component).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewNormal {
    pub location: f64,
    pub scale: f64,
    pub shape: f64,
    pub amplitude: f64,
}

impl SkewNormal {
    /// Unit-mass density.
    pub fn pdf(&self, x: f64) -> f64 {
        let z = (x - self.location) / self.scale;
        2.0 / self.scale * std_normal_pdf(z) * std_normal_cdf(self.shape * z)
    }

    /// Unit-mass distribution function, by Simpson quadrature from 40σ below.
    pub fn cdf(&self, x: f64) -> f64 {
        let lo = self.location - 40.0 * self.scale;
        if x <= lo {
            return 0.0;
        }
        simpson(|t| self.pdf(t), lo, x, 4000).clamp(0.0, 1.0)
    }

    pub fn mean(&self) -> f64 {
        let delta = self.shape / (1.0 + self.shape * self.shape).sqrt();
        self.location + self.scale * delta * (2.0 / PI).sqrt()
    }

    pub fn variance(&self) -> f64 {
        let delta = self.shape / (1.0 + self.shape * self.shape).sqrt();
        self.scale * self.scale * (1.0 - 2.0 * delta * delta / PI)
    }

    pub fn mode(&self) -> f64 {
        // golden-section on the unimodal density
        let (mut a, mut b) = (self.location - 3.0 * self.scale, self.location + 3.0 * self.scale);
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..100 {
            let x1 = b - phi * (b - a);
            let x2 = a + phi * (b - a);
            if self.pdf(x1) < self.pdf(x2) {
                a = x1;
            } else {
                b = x2;
            }
        }
        0.5 * (a + b)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let delta = self.shape / (1.0 + self.shape * self.shape).sqrt();
        let u0: f64 = StandardNormal.sample(rng);
        let u1: f64 = StandardNormal.sample(rng);
        self.location + self.scale * (delta * u0.abs() + (1.0 - delta * delta).sqrt() * u1)
    }
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let n = panels + panels % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Unit-mass smoothed plateau between the two peak locations: the
/// difference of two normal distribution functions, divided by its exact
/// integral `ξ₁ − ξ₀`.
#[derive(Clone, Copy, Debug)]
struct Plateau {
    lo: f64,
    lo_scale: f64,
    hi: f64,
    hi_scale: f64,
}

impl Plateau {
    fn pdf(&self, x: f64) -> f64 {
        let w = self.hi - self.lo;
        (std_normal_cdf((x - self.lo) / self.lo_scale) - std_normal_cdf((x - self.hi) / self.hi_scale)) / w
    }

    fn cdf(&self, x: f64) -> f64 {
        // ∫ Φ((t − a)/s) dt from −∞ to x = s·(zΦ(z) + φ(z))
        let ramp = |a: f64, s: f64| {
            let z = (x - a) / s;
            s * (z * std_normal_cdf(z) + std_normal_pdf(z))
        };
        ((ramp(self.lo, self.lo_scale) - ramp(self.hi, self.hi_scale)) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }
}

/// Two-peak fit of the filtered-maximum histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionFit {
    /// Empty-shot peak.
    pub zero: SkewNormal,
    /// Single-atom peak.
    pub one: SkewNormal,
    /// Shots in the plateau between the peaks (atoms lost to the dark state
    /// during the exposure); counted as single-atom shots.
    pub offset: f64,
    pub threshold: f64,
    pub fidelity: f64,
    pub fidelity_se: Option<f64>,
    /// χ² per degree of freedom of the binned fit.
    pub reduced_chi2: f64,
    pub evaluations: usize,
    pub shots: usize,
}

impl DetectionFit {
    fn plateau(&self) -> Plateau {
        plateau_of(&self.zero, &self.one)
    }

    /// Fitted density of the empty component (shots per unit peak value).
    pub fn zero_density(&self, x: f64) -> f64 {
        self.zero.amplitude * self.zero.pdf(x)
    }

    /// Fitted density of the single-atom component including the plateau.
    pub fn one_density(&self, x: f64) -> f64 {
        self.one.amplitude * self.one.pdf(x) + self.offset * self.plateau().pdf(x)
    }

    /// Probability mass misassigned at threshold `t`, relative to all shots.
    pub fn misassigned(&self, t: f64) -> f64 {
        let total = self.zero.amplitude + self.one.amplitude + self.offset;
        (self.zero.amplitude * (1.0 - self.zero.cdf(t))
            + self.one.amplitude * self.one.cdf(t)
            + self.offset * self.plateau().cdf(t))
            / total
    }

    pub fn is_atom(&self, peak_value: f64) -> bool {
        peak_value > self.threshold
    }
}

fn plateau_of(zero: &SkewNormal, one: &SkewNormal) -> Plateau {
    let (lo, hi) = (zero.location, one.location.max(zero.location + 1e-12 * zero.scale.max(1e-300)));
    Plateau { lo, lo_scale: zero.scale, hi, hi_scale: one.scale }
}

struct HistogramProblem {
    edges: Vec<f64>,
    counts: Vec<f64>,
    p: DVector<f64>,
}

fn components(p: &DVector<f64>) -> (SkewNormal, SkewNormal, f64) {
    let clamp_exp = |v: f64| v.clamp(-40.0, 40.0).exp();
    let zero = SkewNormal { amplitude: clamp_exp(p[0]), location: p[1], scale: clamp_exp(p[2]), shape: p[3].clamp(-30.0, 30.0) };
    // the single-atom peak is right-skewed or symmetric; its left tail
    // belongs to the plateau of atoms lost during the exposure
    let shape_one = p[7].clamp(-30.0, 30.0).exp().ln_1p();
    let one = SkewNormal { amplitude: clamp_exp(p[4]), location: p[5], scale: clamp_exp(p[6]), shape: shape_one };
    let offset = clamp_exp(p[8]);
    (zero, one, offset)
}

impl HistogramProblem {
    fn model(&self, p: &DVector<f64>) -> Vec<f64> {
        let (zero, one, offset) = components(p);
        let plateau = plateau_of(&zero, &one);
        let f = |x: f64| zero.amplitude * zero.pdf(x) + one.amplitude * one.pdf(x) + offset * plateau.pdf(x);
        self.edges
            .windows(2)
            .map(|w| (w[1] - w[0]) / 6.0 * (f(w[0]) + 4.0 * f(0.5 * (w[0] + w[1])) + f(w[1])))
            .collect()
    }

    fn residuals_at(&self, p: &DVector<f64>) -> DVector<f64> {
        let m = self.model(p);
        DVector::from_iterator(
            m.len(),
            m.iter().zip(&self.counts).map(|(&m, &o)| {
                // Poisson deviance residual
                let m = m.max(1e-300);
                let d = if o > 0.0 { m - o + o * (o / m).ln() } else { m };
                (m - o).signum() * (2.0 * d.max(0.0)).sqrt()
            }),
        )
    }
}

impl LeastSquaresProblem<f64, Dyn, Dyn> for HistogramProblem {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, Dyn>;
    type ParameterStorage = Owned<f64, Dyn>;

    fn set_params(&mut self, x: &DVector<f64>) {
        self.p.copy_from(x);
    }

    fn params(&self) -> DVector<f64> {
        self.p.clone()
    }

    fn residuals(&self) -> Option<DVector<f64>> {
        let r = self.residuals_at(&self.p);
        r.iter().all(|v| v.is_finite()).then_some(r)
    }

    fn jacobian(&self) -> Option<DMatrix<f64>> {
        let mut jac = DMatrix::zeros(self.counts.len(), self.p.len());
        for j in 0..self.p.len() {
            let h = 1e-6 * self.p[j].abs().max(1e-3 * self.step_scale(j));
            let mut up = self.p.clone();
            let mut down = self.p.clone();
            up[j] += h;
            down[j] -= h;
            let d = (self.residuals_at(&up) - self.residuals_at(&down)) / (2.0 * h);
            jac.set_column(j, &d);
        }
        jac.iter().all(|v| v.is_finite()).then_some(jac)
    }
}

impl HistogramProblem {
    /// Natural scale of parameter `j` (locations scale with the data range).
    fn step_scale(&self, j: usize) -> f64 {
        match j {
            1 | 5 => self.edges[self.edges.len() - 1] - self.edges[0],
            _ => 1.0,
        }
    }
}

/// Two-cluster split of 1-D data (k-means from the extremes).
fn kmeans_split(data: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (mut c0, mut c1) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let mut split = (Vec::new(), Vec::new());
    for _ in 0..100 {
        let mid = 0.5 * (c0 + c1);
        let (lo, hi): (Vec<f64>, Vec<f64>) = data.iter().partition(|&&x| x <= mid);
        let n0 = lo.iter().sum::<f64>() / lo.len().max(1) as f64;
        let n1 = hi.iter().sum::<f64>() / hi.len().max(1) as f64;
        split = (lo, hi);
        if n0 == c0 && n1 == c1 {
            break;
        }
        (c0, c1) = (n0, n1);
    }
    split
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

/// Least-squares fit of the filtered-maximum histogram with a skew-normal
/// empty peak plus a skew-normal single-atom peak and a plateau between them.
///
/// Bins are compared through Poisson deviance residuals. The threshold is the crossing
/// of the two fitted component densities between their modes; the fidelity is
/// one minus the fitted mass on the wrong side of it, over all shots.
pub fn fit_detection_histogram(peaks: &[f64], cfg: &AnalysisConfig) -> Result<DetectionFit> {
    cfg.validate()?;
    if peaks.len() < 500 {
        return Err(Error::Fit(format!("need at least 500 shots, got {}", peaks.len())));
    }
    if peaks.iter().any(|p| !p.is_finite()) {
        return Err(Error::Fit("non-finite peak value".into()));
    }
    let (lo_data, hi_data) = kmeans_split(peaks);
    let n = peaks.len() as f64;
    if (lo_data.len().min(hi_data.len()) as f64) < 0.02 * n {
        return Err(Error::Fit("histogram is unimodal: one cluster holds over 98% of shots".into()));
    }
    let (m0, s0) = mean_std(&lo_data);
    let (m1, s1) = mean_std(&hi_data);

    let (min, max) = peaks.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let pad = 1e-9 * (max - min);
    let bins = cfg.histogram_bins;
    let width = (max - min + 2.0 * pad) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| min - pad + i as f64 * width).collect();
    let mut counts = vec![0.0; bins];
    for &p in peaks {
        let i = (((p - edges[0]) / width) as usize).min(bins - 1);
        counts[i] += 1.0;
    }

    let s0 = s0.max(0.5 * width);
    let s1 = s1.max(0.5 * width);
    // The plateau trades off against the skewed tails, so several
    // deterministic starts are tried and the lowest deviance kept.
    let n1 = hi_data.len() as f64;
    let mut best: Option<(HistogramProblem, f64)> = None;
    let mut failures = Vec::new();
    let mut evaluations = 0;
    for plateau_frac in [1e-3, 0.03, 0.15] {
        // p[7] is the pre-softplus single-atom shape: -3 is nearly symmetric
        for (a0, a1) in [(0.0, -3.0), (1.5, 0.5)] {
            let init = vec![
                (lo_data.len() as f64).ln(),
                m0,
                s0.ln(),
                a0,
                ((1.0 - plateau_frac) * n1).ln(),
                m1,
                s1.ln(),
                a1,
                (plateau_frac * n1).ln(),
            ];
            let problem = HistogramProblem { edges: edges.clone(), counts: counts.clone(), p: DVector::from_vec(init) };
            let (problem, report) = LevenbergMarquardt::new().with_patience(400).minimize(problem);
            evaluations += report.number_of_evaluations;
            if !report.termination.was_successful() {
                failures.push(format!("{:?}", report.termination));
                continue;
            }
            let (zero, one, _) = components(&problem.p);
            if !(one.location > zero.location) {
                failures.push("peaks out of order".to_string());
                continue;
            }
            if best.as_ref().is_none_or(|b| report.objective_function < b.1) {
                best = Some((problem, report.objective_function));
            }
        }
    }
    let Some((problem, objective)) = best else {
        return Err(Error::Fit(format!(
            "histogram fit did not converge from any start after {evaluations} evaluations: {}",
            failures.join("; ")
        )));
    };
    let (zero, one, offset) = components(&problem.p);
    let total = zero.amplitude + one.amplitude + offset;
    let separation = (one.mean() - zero.mean()) / (0.5 * (zero.variance() + one.variance())).sqrt();
    if !(separation > 2.0) || zero.amplitude.min(one.amplitude + offset) < 0.02 * total {
        return Err(Error::Fit(format!(
            "histogram is unimodal: fitted peak separation {separation:.2} pooled σ, weights {:.3} / {:.3}",
            zero.amplitude / total,
            (one.amplitude + offset) / total
        )));
    }
    let chi2 = 2.0 * objective;
    let dof = (bins as f64 - problem.p.len() as f64).max(1.0);
    let mut fit = DetectionFit {
        zero,
        one,
        offset,
        threshold: f64::NAN,
        fidelity: f64::NAN,
        fidelity_se: None,
        reduced_chi2: chi2 / dof,
        evaluations,
        shots: peaks.len(),
    };
    fit.threshold = intersection(&fit)?;
    fit.fidelity = (1.0 - fit.misassigned(fit.threshold)).clamp(0.0, 1.0);
    Ok(fit)
}

/// First crossing from the empty-dominated to the atom-dominated side between
/// the two fitted modes.
fn intersection(fit: &DetectionFit) -> Result<f64> {
    let a = fit.zero.mode();
    let b = fit.one.mode();
    let g = |x: f64| fit.zero_density(x) - fit.one_density(x);
    let steps = 4000;
    let mut prev = a;
    if g(a) <= 0.0 {
        return Err(Error::Fit("single-atom density exceeds the empty density at the empty peak".into()));
    }
    for i in 1..=steps {
        let x = a + (b - a) * i as f64 / steps as f64;
        if g(x) <= 0.0 {
            let (mut lo, mut hi) = (prev, x);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if g(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Ok(0.5 * (lo + hi));
        }
        prev = x;
    }
    Err(Error::Fit("fitted component densities do not cross between the peaks".into()))
}

/// Bootstrap standard error of the fitted fidelity: resample shots with
/// replacement and refit. Refit failures are skipped; more than 10% aborts.
pub fn bootstrap_detection_se(peaks: &[f64], cfg: &AnalysisConfig, resamples: usize, seed: u64) -> Result<f64> {
    use rayon::prelude::*;
    if resamples < 2 {
        return Err(Error::invalid("bootstrap needs at least two resamples"));
    }
    let fids: Vec<Option<f64>> = (0..resamples as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(seed, domain::BOOTSTRAP, b);
            let sample: Vec<f64> = (0..peaks.len()).map(|_| peaks[rng.random_range(0..peaks.len())]).collect();
            fit_detection_histogram(&sample, cfg).ok().map(|f| f.fidelity)
        })
        .collect();
    let ok: Vec<f64> = fids.into_iter().flatten().collect();
    if (ok.len() as f64) < 0.9 * resamples as f64 {
        return Err(Error::Fit(format!("{} of {resamples} bootstrap refits failed", resamples - ok.len())));
    }
    Ok(mean_std(&ok).1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draw(components: &[(SkewNormal, usize)], seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, 99, 0);
        let mut out = Vec::new();
        for (c, n) in components {
            out.extend((0..*n).map(|_| c.sample(&mut rng)));
        }
        out
    }

    fn sn(location: f64, scale: f64, shape: f64) -> SkewNormal {
        SkewNormal { location, scale, shape, amplitude: 1.0 }
    }

    #[test]
    fn skew_normal_moments_and_cdf() {
        let d = sn(1.0, 0.5, 3.0);
        assert!((simpson(|x| d.pdf(x), -20.0, 20.0, 20000) - 1.0).abs() < 1e-10);
        let mean = simpson(|x| x * d.pdf(x), -20.0, 20.0, 20000);
        assert!((mean - d.mean()).abs() < 1e-10);
        assert!((d.cdf(100.0) - 1.0).abs() < 1e-10);
        // symmetric case reduces to the normal
        let g = sn(0.0, 1.0, 0.0);
        assert!((g.cdf(1.0) - std_normal_cdf(1.0)).abs() < 1e-10);
        assert!(g.mode().abs() < 1e-6);
    }

    #[test]
    fn plateau_integrates_to_one() {
        let p = Plateau { lo: 0.1, lo_scale: 0.02, hi: 1.0, hi_scale: 0.1 };
        assert!((simpson(|x| p.pdf(x), -2.0, 3.0, 20000) - 1.0).abs() < 1e-10);
        assert!((p.cdf(0.5) - simpson(|x| p.pdf(x), -2.0, 0.5, 20000)).abs() < 1e-10);
    }

    #[test]
    fn well_separated_peaks() {
        let data = draw(&[(sn(1.0, 0.1, 2.0), 1000), (sn(10.0, 0.5, 1.0), 1000)], 1);
        let fit = fit_detection_histogram(&data, &AnalysisConfig::default()).unwrap();
        assert!(fit.fidelity > 0.999, "{fit:?}");
        assert!(fit.threshold > fit.zero.mode() && fit.threshold < fit.one.mode());
    }

    #[test]
    fn unimodal_rejected() {
        let data = draw(&[(sn(1.0, 0.1, 0.0), 1000)], 2);
        assert!(matches!(fit_detection_histogram(&data, &AnalysisConfig::default()), Err(Error::Fit(_))));
        assert!(fit_detection_histogram(&data[..100], &AnalysisConfig::default()).is_err());
    }

    /// Misassigned fraction of an equal-weight mixture at the crossing of the
    /// generating densities, by brute-force trapezoid integration.
    fn overlap_oracle(a: &SkewNormal, b: &SkewNormal) -> (f64, f64) {
        let n = 200_000;
        let (lo, hi) = (a.location - 20.0 * a.scale, b.location + 20.0 * b.scale);
        let h = (hi - lo) / n as f64;
        let xs: Vec<f64> = (0..=n).map(|i| lo + i as f64 * h).collect();
        let cross = xs
            .iter()
            .copied()
            .filter(|&x| x > a.location && x < b.location)
            .find(|&x| b.pdf(x) >= a.pdf(x))
            .unwrap();
        let trap = |f: &dyn Fn(f64) -> f64, from: f64, to: f64| {
            xs.windows(2).filter(|w| w[0] >= from && w[1] <= to).map(|w| 0.5 * h * (f(w[0]) + f(w[1]))).sum::<f64>()
        };
        let wrong = trap(&|x| a.pdf(x), cross, hi) + trap(&|x| b.pdf(x), lo, cross);
        (cross, 0.5 * wrong)
    }

    #[test]
    fn overlapping_components_match_oracle() {
        let a = sn(0.0, 1.0, 2.0);
        let b = sn(3.7, 1.3, 0.5);
        let (cross, wrong) = overlap_oracle(&a, &b);
        assert!((wrong - 0.04).abs() < 0.006, "oracle overlap {wrong}");
        let data = draw(&[(a, 20_000), (b, 20_000)], 3);
        let fit = fit_detection_histogram(&data, &AnalysisConfig::default()).unwrap();
        assert!((fit.fidelity - (1.0 - wrong)).abs() < 0.005, "{} vs {}: {fit:?}", fit.fidelity, 1.0 - wrong);
        assert!((fit.threshold - cross).abs() < 0.1, "{} vs {cross}", fit.threshold);
    }

    #[test]
    fn threshold_minimizes_misclassification() {
        let data = draw(&[(sn(0.0, 1.0, 3.0), 5000), (sn(4.0, 1.2, 1.0), 5000)], 4);
        let cfg = AnalysisConfig::default();
        let fit = fit_detection_histogram(&data, &cfg).unwrap();
        let n0 = 5000;
        let errors = |t: f64| {
            data[..n0].iter().filter(|&&x| x > t).count() + data[n0..].iter().filter(|&&x| x <= t).count()
        };
        let (min, max) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let width = (max - min) / cfg.histogram_bins as f64;
        let scan: Vec<f64> = (0..2000).map(|i| min + (max - min) * i as f64 / 2000.0).collect();
        let best_err = scan.iter().map(|&t| errors(t)).min().unwrap();
        // empirical optimum is flat-bottomed: the fitted threshold must sit
        // within one bin of a scan point that attains it
        let near = scan.iter().filter(|&&t| errors(t) <= best_err + 10).any(|&t| (t - fit.threshold).abs() <= width);
        assert!(near, "threshold {} not within a bin of the empirical optimum: {fit:?}", fit.threshold);
    }

    #[test]
    fn bootstrap_error_is_small_for_large_samples() {
        let data = draw(&[(sn(0.0, 1.0, 2.0), 2000), (sn(7.0, 1.2, 1.0), 2000)], 5);
        let se = bootstrap_detection_se(&data, &AnalysisConfig::default(), 40, 7).unwrap();
        assert!(se > 0.0 && se < 0.01, "{se}");
    }
}
