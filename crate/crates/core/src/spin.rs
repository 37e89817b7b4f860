//! Spin-F operator algebra and Zeeman dynamics of the ground-state nuclear
//! spin.
//!
//! Basis ordering is fixed across the crate: index `i` holds `m = F - i`, i.e.
//! amplitudes run from `m = +F` down to `m = -F`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Vector3};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::constants;
use crate::error::{Error, Result};

const NORM_TOLERANCE: f64 = 1e-10;

/// Angular momentum matrices `fx, fy, fz` for a spin `F` (units of ħ).
#[derive(Clone, Debug)]
pub struct SpinOperators {
    pub spin: f64,
    pub fx: DMatrix<C64>,
    pub fy: DMatrix<C64>,
    pub fz: DMatrix<C64>,
}

impl SpinOperators {
    pub fn dim(&self) -> usize {
        self.fz.nrows()
    }

    /// Projection quantum number of basis index `i`.
    pub fn m_of(&self, i: usize) -> f64 {
        self.spin - i as f64
    }

    /// `n·F` for a 3-vector `n` (not necessarily unit length).
    pub fn dot(&self, n: &Vector3<f64>) -> DMatrix<C64> {
        &self.fx * C64::from(n.x) + &self.fy * C64::from(n.y) + &self.fz * C64::from(n.z)
    }
}

/// Builds the spin matrices from the ladder operators,
/// `⟨m±1|f±|m⟩ = √(F(F+1) − m(m±1))`.
pub fn make_spin_operators(spin: f64) -> Result<SpinOperators> {
    let two_f = 2.0 * spin;
    if !spin.is_finite() || spin < 0.0 || (two_f - two_f.round()).abs() > 1e-12 {
        return Err(Error::invalid(format!("spin {spin} is not a non-negative half-integer")));
    }
    let dim = two_f.round() as usize + 1;
    let ff1 = spin * (spin + 1.0);
    let m = |i: usize| spin - i as f64;

    let mut raise = DMatrix::<C64>::zeros(dim, dim);
    for i in 1..dim {
        // |m⟩ at index i, |m+1⟩ at index i-1
        let mi = m(i);
        raise[(i - 1, i)] = C64::from((ff1 - mi * (mi + 1.0)).sqrt());
    }
    let lower = raise.adjoint();
    let fx = (&raise + &lower) * C64::from(0.5);
    let fy = (&raise - &lower) * C64::new(0.0, -0.5);
    let fz = DMatrix::from_diagonal(&DVector::from_fn(dim, |i, _| C64::from(m(i))));
    Ok(SpinOperators { spin, fx, fy, fz })
}

/// Linear Zeeman Hamiltonian `H = 2π·g·(B·F)` in rad/s, `b` in gauss and
/// `g_factor` in Hz/G.
pub fn zeeman_hamiltonian(ops: &SpinOperators, b: &Vector3<f64>, g_factor: f64) -> Result<DMatrix<C64>> {
    if !(b.iter().all(|v| v.is_finite()) && g_factor.is_finite()) {
        return Err(Error::invalid("non-finite magnetic field or g-factor"));
    }
    Ok(ops.dot(&(b * (2.0 * PI * g_factor))))
}

/// `exp(−i·H·t)` for Hermitian `H`, via its eigendecomposition.
///
/// One Newton–Schulz step pulls the result back onto the unitary group so that
/// repeated application does not accumulate a norm drift.
pub fn unitary_propagator(h: &DMatrix<C64>, t: f64) -> DMatrix<C64> {
    let eig = h.clone().symmetric_eigen();
    let phases = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| C64::from_polar(1.0, -l * t)),
    );
    let v = &eig.eigenvectors;
    let u = v * DMatrix::from_diagonal(&phases) * v.adjoint();
    polish_unitary(u)
}

fn polish_unitary(u: DMatrix<C64>) -> DMatrix<C64> {
    let n = u.nrows();
    let gram = u.adjoint() * &u;
    let corr = (DMatrix::<C64>::identity(n, n) * C64::from(3.0) - gram) * C64::from(0.5);
    u * corr
}

/// Rotation operator `exp(−i·angle·(n̂·F))`.
pub fn rotation_operator(ops: &SpinOperators, axis: &Vector3<f64>, angle: f64) -> Result<DMatrix<C64>> {
    let norm = axis.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::invalid("rotation axis has zero length"));
    }
    Ok(unitary_propagator(&ops.dot(&(axis / norm)), angle))
}

/// Smallest rotation taking `+z` onto `target` (axis, angle).
fn rotation_from_z(target: &Vector3<f64>) -> (Vector3<f64>, f64) {
    let d = target.normalize();
    let cross = Vector3::z().cross(&d);
    let s = cross.norm();
    let c = d.z.clamp(-1.0, 1.0);
    if s < 1e-15 {
        if c > 0.0 {
            (Vector3::x(), 0.0)
        } else {
            (Vector3::x(), PI)
        }
    } else {
        (cross / s, s.atan2(c))
    }
}

/// State of a spin-F qudit.
///
/// `amps[i]` is the amplitude of `m = F − i` quantized along `basis_axis`.
/// The transverse orientation of that basis is fixed by the smallest rotation
/// taking `+z` onto `basis_axis`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpinVector {
    pub amps: DVector<C64>,
    pub basis_axis: Vector3<f64>,
}

impl SpinVector {
    /// Basis state at index `index` (`m = F − index`) along `axis`.
    pub fn basis_state(dim: usize, index: usize, axis: Vector3<f64>) -> Result<Self> {
        if index >= dim {
            return Err(Error::invalid(format!("basis index {index} out of range for dimension {dim}")));
        }
        let norm = axis.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::invalid("basis axis has zero length"));
        }
        let mut amps = DVector::zeros(dim);
        amps[index] = C64::from(1.0);
        Ok(SpinVector { amps, basis_axis: axis / norm })
    }

    /// Stretched state `m = +F` along `axis`.
    pub fn stretched(dim: usize, axis: Vector3<f64>) -> Result<Self> {
        Self::basis_state(dim, 0, axis)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    fn check_normalized(&self) -> Result<()> {
        let n = self.norm_sqr();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::NotNormalized(n));
        }
        Ok(())
    }

    /// Same physical state with amplitudes quantized along `+z`.
    pub fn to_z_basis(&self, ops: &SpinOperators) -> Result<SpinVector> {
        let (axis, angle) = rotation_from_z(&self.basis_axis);
        if angle == 0.0 {
            return Ok(SpinVector { amps: self.amps.clone(), basis_axis: Vector3::z() });
        }
        let rot = rotation_operator(ops, &axis, angle)?;
        Ok(SpinVector { amps: rot * &self.amps, basis_axis: Vector3::z() })
    }

    /// Same physical state with amplitudes quantized along `axis`.
    pub fn in_basis(&self, ops: &SpinOperators, axis: &Vector3<f64>) -> Result<SpinVector> {
        let z = self.to_z_basis(ops)?;
        let (rot_axis, angle) = rotation_from_z(axis);
        let rot = rotation_operator(ops, &rot_axis, angle)?;
        Ok(SpinVector { amps: rot.adjoint() * z.amps, basis_axis: axis.normalize() })
    }
}

/// Guide field plus an exponentially rising quench,
/// `B(t) = b_guide + amplitude·(1 − e^{−t/τ})·quench_axis`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FieldSchedule {
    /// Gauss.
    pub b_guide: [f64; 3],
    /// Gauss.
    pub b_quench_amplitude: f64,
    pub quench_axis: [f64; 3],
    /// 1/e rise time, s.
    pub rise_time_tau: f64,
    /// Tilt of the detection basis from the guide axis, toward the quench axis, rad.
    pub detection_axis_angle: f64,
    /// Zeeman coefficient, Hz/G.
    pub g_factor: f64,
}

impl Default for FieldSchedule {
    fn default() -> Self {
        FieldSchedule {
            b_guide: [0.080, 0.0, 0.0],
            b_quench_amplitude: 1.158,
            quench_axis: [0.0, 0.0, 1.0],
            rise_time_tau: 0.3e-3,
            detection_axis_angle: 5f64.to_radians(),
            g_factor: constants::sr87_g_factor_hz_per_gauss(),
        }
    }
}

impl FieldSchedule {
    /// A time-independent field.
    pub fn constant(b: Vector3<f64>, g_factor: f64) -> Self {
        FieldSchedule {
            b_guide: b.into(),
            b_quench_amplitude: 0.0,
            quench_axis: [0.0, 0.0, 1.0],
            rise_time_tau: 1.0,
            detection_axis_angle: 0.0,
            g_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rise_time_tau > 0.0 && self.rise_time_tau.is_finite()) {
            return Err(Error::invalid("rise_time_tau must be positive"));
        }
        let axis = Vector3::from(self.quench_axis);
        if self.b_quench_amplitude != 0.0 && !(axis.norm() > 0.0) {
            return Err(Error::invalid("quench_axis has zero length"));
        }
        let finite = self.b_guide.iter().chain(self.quench_axis.iter()).all(|v| v.is_finite())
            && self.b_quench_amplitude.is_finite()
            && self.g_factor.is_finite()
            && self.detection_axis_angle.is_finite();
        if !finite {
            return Err(Error::invalid("non-finite field schedule entry"));
        }
        Ok(())
    }

    fn quench_unit(&self) -> Vector3<f64> {
        let axis = Vector3::from(self.quench_axis);
        let n = axis.norm();
        if n > 0.0 {
            axis / n
        } else {
            axis
        }
    }

    pub fn field_at(&self, t: f64) -> Vector3<f64> {
        let ramp = -(-t / self.rise_time_tau).exp_m1();
        Vector3::from(self.b_guide) + self.quench_unit() * (self.b_quench_amplitude * ramp)
    }

    /// Upper bound of |B(t)| over t ≥ 0.
    pub fn max_field(&self) -> f64 {
        Vector3::from(self.b_guide).norm() + self.b_quench_amplitude.abs()
    }

    /// Largest Larmor frequency reached, Hz.
    pub fn max_larmor_hz(&self) -> f64 {
        self.g_factor.abs() * self.max_field()
    }

    /// Largest step accepted by [`evolve`].
    pub fn max_step(&self) -> f64 {
        let mut limit = f64::INFINITY;
        if self.b_quench_amplitude != 0.0 {
            limit = limit.min(self.rise_time_tau / 30.0);
        }
        let f = self.max_larmor_hz();
        if f > 0.0 {
            limit = limit.min(1.0 / (50.0 * f));
        }
        limit
    }

    /// Step used by [`quench_experiment`]: comfortably inside the limits.
    pub fn default_step(&self) -> f64 {
        let s = self.max_step() * 0.75;
        if s.is_finite() {
            s
        } else {
            1e-6
        }
    }

    /// Unit detection axis: the guide axis tilted by `detection_axis_angle`
    /// within the plane spanned by the guide and quench axes.
    pub fn detection_axis(&self) -> Result<Vector3<f64>> {
        let guide = Vector3::from(self.b_guide);
        if !(guide.norm() > 0.0) {
            return Err(Error::invalid("guide field is zero; quantization axis undefined"));
        }
        let g = guide.normalize();
        let q = self.quench_unit();
        let mut perp = q - g * g.dot(&q);
        if perp.norm() < 1e-12 {
            // quench parallel to the guide: any perpendicular will do
            let trial = if g.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            perp = trial - g * g.dot(&trial);
        }
        let perp = perp.normalize();
        let a = self.detection_axis_angle;
        Ok(g * a.cos() + perp * a.sin())
    }
}

/// Propagates `state` from `t = 0` to `t_final` under `schedule`.
///
/// Piecewise-constant midpoint propagator: each step applies
/// `exp(−i·H(t_mid)·dt)`. The step is shortened uniformly so that an integer
/// number of steps covers `t_final`.
pub fn evolve(
    state: &SpinVector,
    schedule: &FieldSchedule,
    ops: &SpinOperators,
    t_final: f64,
    dt: f64,
) -> Result<SpinVector> {
    let mut prop = Propagator::new(schedule, ops, dt)?;
    state.check_normalized()?;
    if state.amps.len() != ops.dim() {
        return Err(Error::invalid("state dimension does not match operators"));
    }
    if !(t_final >= 0.0 && t_final.is_finite()) {
        return Err(Error::invalid("t_final must be a finite non-negative time"));
    }
    let mut psi = state.to_z_basis(ops)?;
    prop.advance(&mut psi.amps, 0.0, t_final)?;
    Ok(psi)
}

/// Stepper with a cached propagator for repeated identical fields.
struct Propagator<'a> {
    schedule: &'a FieldSchedule,
    ops: &'a SpinOperators,
    dt: f64,
    cache: Option<([u64; 3], f64, DMatrix<C64>)>,
}

impl<'a> Propagator<'a> {
    fn new(schedule: &'a FieldSchedule, ops: &'a SpinOperators, dt: f64) -> Result<Self> {
        schedule.validate()?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid("dt must be positive"));
        }
        if schedule.b_quench_amplitude != 0.0 && dt > schedule.rise_time_tau / 30.0 {
            return Err(Error::StepSize {
                dt,
                limit: schedule.rise_time_tau / 30.0,
                reason: "must resolve the quench rise time (dt ≤ τ/30)",
            });
        }
        let f = schedule.max_larmor_hz();
        if f > 0.0 && dt > 1.0 / (50.0 * f) {
            return Err(Error::StepSize {
                dt,
                limit: 1.0 / (50.0 * f),
                reason: "must resolve the Larmor precession (dt ≤ 1/(50 f_L))",
            });
        }
        Ok(Propagator { schedule, ops, dt, cache: None })
    }

    fn step_matrix(&mut self, t_mid: f64, h: f64) -> Result<&DMatrix<C64>> {
        let b = self.schedule.field_at(t_mid);
        let key = [b.x.to_bits(), b.y.to_bits(), b.z.to_bits()];
        let hit = matches!(&self.cache, Some((k, step, _)) if *k == key && *step == h);
        if !hit {
            let ham = zeeman_hamiltonian(self.ops, &b, self.schedule.g_factor)?;
            self.cache = Some((key, h, unitary_propagator(&ham, h)));
        }
        Ok(&self.cache.as_ref().expect("cache filled above").2)
    }

    fn advance(&mut self, amps: &mut DVector<C64>, t0: f64, t1: f64) -> Result<()> {
        let span = t1 - t0;
        if span <= 0.0 {
            return Ok(());
        }
        let n = (span / self.dt).ceil().max(1.0) as usize;
        let h = span / n as f64;
        for k in 0..n {
            let t_mid = t0 + (k as f64 + 0.5) * h;
            let u = self.step_matrix(t_mid, h)?;
            *amps = u * &*amps;
        }
        Ok(())
    }
}

/// Populations after a projective measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationRecord {
    pub time: f64,
    /// `p_m[i]` for `m = 9/2 − i`.
    pub p_m: [f64; 10],
    /// |m_F| bins: 9/2, 7/2, 5/2, merged 3/2 + 1/2.
    pub p_abs: [f64; 4],
}

impl PopulationRecord {
    pub fn from_p_m(time: f64, p_m: [f64; 10]) -> Self {
        let fold = |k: usize| p_m[k] + p_m[9 - k];
        let p_abs = [fold(0), fold(1), fold(2), fold(3) + fold(4)];
        PopulationRecord { time, p_m, p_abs }
    }

    pub const CSV_HEADER: &'static str = "t_s,p_9half,p_7half,p_5half,p_merged,\
p_m+9/2,p_m+7/2,p_m+5/2,p_m+3/2,p_m+1/2,p_m-1/2,p_m-3/2,p_m-5/2,p_m-7/2,p_m-9/2";

    pub fn csv_row(&self) -> String {
        let mut cols = vec![format!("{:e}", self.time)];
        cols.extend(self.p_abs.iter().chain(self.p_m.iter()).map(|p| format!("{p:.12e}")));
        cols.join(",")
    }
}

/// Projects a spin-9/2 state onto the basis quantized along `detection_axis`.
pub fn measure_populations(state: &SpinVector, detection_axis: &Vector3<f64>) -> Result<PopulationRecord> {
    let norm = detection_axis.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::invalid("detection axis has zero length"));
    }
    if state.amps.len() != 10 {
        return Err(Error::invalid("population records are defined for F = 9/2 only"));
    }
    state.check_normalized()?;
    let ops = make_spin_operators(constants::SR87_F)?;
    let rotated = state.in_basis(&ops, &(detection_axis / norm))?;
    let mut p_m = [0.0; 10];
    for (p, a) in p_m.iter_mut().zip(rotated.amps.iter()) {
        *p = a.norm_sqr();
    }
    Ok(PopulationRecord::from_p_m(0.0, p_m))
}

/// Hold-time scan of the transverse-field quench.
///
/// Atoms start stretched (`m = +9/2`) along the guide field; a fraction
/// `1 − p_prep` starts in `m = +7/2` instead (incoherent admixture).
pub fn quench_experiment(schedule: &FieldSchedule, times: &[f64], p_prep: f64) -> Result<Vec<PopulationRecord>> {
    quench_experiment_with_step(schedule, times, p_prep, schedule.default_step())
}

pub fn quench_experiment_with_step(
    schedule: &FieldSchedule,
    times: &[f64],
    p_prep: f64,
    dt: f64,
) -> Result<Vec<PopulationRecord>> {
    if times.is_empty() {
        return Ok(Vec::new());
    }
    if !(0.0..=1.0).contains(&p_prep) {
        return Err(Error::invalid("p_prep must lie in [0, 1]"));
    }
    if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::invalid("hold times must be finite and non-negative"));
    }
    let ops = make_spin_operators(constants::SR87_F)?;
    let guide = Vector3::from(schedule.b_guide);
    let detect = schedule.detection_axis()?;
    let guide = guide.normalize();

    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));

    let mut components: Vec<(f64, SpinVector)> = vec![(p_prep, SpinVector::basis_state(10, 0, guide)?)];
    if p_prep < 1.0 {
        components.push((1.0 - p_prep, SpinVector::basis_state(10, 1, guide)?));
    }
    let mut states: Vec<SpinVector> = components
        .iter()
        .map(|(_, s)| s.to_z_basis(&ops))
        .collect::<Result<_>>()?;

    let mut prop = Propagator::new(schedule, &ops, dt)?;
    let mut records = vec![None; times.len()];
    let mut now = 0.0;
    for &idx in &order {
        let t = times[idx];
        for s in states.iter_mut() {
            prop.advance(&mut s.amps, now, t)?;
        }
        now = now.max(t);
        let mut p_m = [0.0; 10];
        for ((w, _), s) in components.iter().zip(&states) {
            let rec = measure_populations(s, &detect)?;
            for (acc, p) in p_m.iter_mut().zip(rec.p_m) {
                *acc += w * p;
            }
        }
        records[idx] = Some(PopulationRecord::from_p_m(t, p_m));
    }
    Ok(records.into_iter().map(|r| r.expect("every time visited")).collect())
}
