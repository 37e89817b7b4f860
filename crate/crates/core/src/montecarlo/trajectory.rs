use nalgebra::Vector3;

use super::AtomSample;
use crate::constants::SR87_MASS;
use crate::error::{Error, Result};
use crate::optics::Potential;

fn acceleration(fields: &[&dyn Potential], r: &Vector3<f64>, m: f64) -> Vector3<f64> {
    fields.iter().fold(Vector3::zeros(), |acc, f| acc + f.force(r, m)) / SR87_MASS
}

/// Kinetic plus potential energy in `fields`, J.
pub fn total_energy(atom: &AtomSample, fields: &[&dyn Potential]) -> f64 {
    0.5 * SR87_MASS * atom.velocity.norm_squared()
        + fields.iter().map(|f| f.energy(&atom.position, atom.m_f)).sum::<f64>()
}

/// Classical RK4 integration of Newton's equations for a duration `t`.
///
/// The step is shortened uniformly so an integer number of steps spans `t`;
/// `dt` must satisfy `dt ≤ 1/(100·ω_max)` for the stiffest field.
pub fn integrate_trajectory(atom: &AtomSample, fields: &[&dyn Potential], t: f64, dt: f64) -> Result<AtomSample> {
    if !(dt > 0.0 && dt.is_finite()) || !(t >= 0.0 && t.is_finite()) {
        return Err(Error::invalid("duration and step must be finite, step positive"));
    }
    let omega = fields.iter().map(|f| f.max_angular_frequency(SR87_MASS)).fold(0.0, f64::max);
    if omega > 0.0 && dt > 1.0 / (100.0 * omega) {
        return Err(Error::StepSize {
            dt,
            limit: 1.0 / (100.0 * omega),
            reason: "dt ≤ 1/(100·ω_max) of the applied potentials",
        });
    }
    let mut out = atom.clone();
    if t == 0.0 {
        return Ok(out);
    }
    let n = (t / dt).ceil().max(1.0) as usize;
    let h = t / n as f64;
    let m = atom.m_f;
    let (mut r, mut v) = (atom.position, atom.velocity);
    if fields.is_empty() {
        out.position = r + v * t;
        return Ok(out);
    }
    for _ in 0..n {
        let a1 = acceleration(fields, &r, m);
        let (r2, v2) = (r + v * (0.5 * h), v + a1 * (0.5 * h));
        let a2 = acceleration(fields, &r2, m);
        let (r3, v3) = (r + v2 * (0.5 * h), v + a2 * (0.5 * h));
        let a3 = acceleration(fields, &r3, m);
        let (r4, v4) = (r + v3 * h, v + a3 * h);
        let a4 = acceleration(fields, &r4, m);
        r += (v + v2 * 2.0 + v3 * 2.0 + v4) * (h / 6.0);
        v += (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (h / 6.0);
    }
    out.position = r;
    out.velocity = v;
    Ok(out)
}
