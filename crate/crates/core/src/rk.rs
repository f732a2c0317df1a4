//! Adaptive Dormand–Prince 5(4) stepping for small fixed-size systems.
//!
//! Integration runs in either direction (`x_end < x_start` is fine) and can be
//! forced to land exactly on a list of output points.

use crate::error::{Error, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;

// 5th-order weights (also row 7 of the FSAL tableau).
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;

// b - b̂ (difference to the embedded 4th-order solution).
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

#[derive(Debug, Clone, Copy)]
pub struct StepControl {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step magnitude.
    pub h_init: f64,
    /// Smallest step magnitude relative to `|x|` before giving up.
    pub h_min_rel: f64,
    pub max_steps: usize,
}

impl StepControl {
    pub fn new(rtol: f64, atol: f64, h_init: f64) -> Self {
        Self { rtol, atol, h_init, h_min_rel: 1e-14, max_steps: 5_000_000 }
    }
}

/// What the observer wants after an accepted step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy)]
pub struct Outcome<const N: usize> {
    pub x: f64,
    pub y: [f64; N],
    pub accepted: usize,
    pub rejected: usize,
    /// True when the observer stopped the run before `x_end`.
    pub stopped: bool,
}

fn axpy<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for i in 0..N {
        let mut acc = 0.0;
        for (c, k) in terms {
            acc += c * k[i];
        }
        out[i] += h * acc;
    }
    out
}

/// One Dormand–Prince step. Returns the 5th-order solution, its derivative
/// (FSAL) and the scaled error norm.
fn dopri_step<const N: usize, F>(
    f: &F,
    x: f64,
    y: &[f64; N],
    k1: &[f64; N],
    h: f64,
    ctl: &StepControl,
) -> ([f64; N], [f64; N], f64)
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    let k2 = f(x + C2 * h, &axpy(y, h, &[(A21, k1)]));
    let k3 = f(x + C3 * h, &axpy(y, h, &[(A31, k1), (A32, &k2)]));
    let k4 = f(x + C4 * h, &axpy(y, h, &[(A41, k1), (A42, &k2), (A43, &k3)]));
    let k5 = f(x + C5 * h, &axpy(y, h, &[(A51, k1), (A52, &k2), (A53, &k3), (A54, &k4)]));
    let k6 = f(x + h, &axpy(y, h, &[(A61, k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]));
    let y_new = axpy(y, h, &[(B1, k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
    let k7 = f(x + h, &y_new);

    let mut err = 0.0f64;
    for i in 0..N {
        let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        let scale = ctl.atol + ctl.rtol * y[i].abs().max(y_new[i].abs());
        err = err.max((e / scale).abs());
    }
    if y_new.iter().any(|v| !v.is_finite()) {
        err = f64::INFINITY;
    }
    (y_new, k7, err)
}

/// Integrates `y' = f(x, y)` from `x_start` to `x_end`.
///
/// `landing` lists points (ordered in the direction of integration) on which
/// steps are forced to end; `observe` runs after every accepted step and may
/// stop the run early.
pub fn integrate<const N: usize, F, O>(
    f: F,
    x_start: f64,
    y_start: [f64; N],
    x_end: f64,
    ctl: &StepControl,
    landing: &[f64],
    mut observe: O,
) -> Result<Outcome<N>>
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
    O: FnMut(f64, &[f64; N]) -> Flow,
{
    let dir = if x_end >= x_start { 1.0 } else { -1.0 };
    let mut x = x_start;
    let mut y = y_start;
    let mut k1 = f(x, &y);
    let mut h = ctl.h_init.abs().min((x_end - x_start).abs()) * dir;
    let mut next_landing = 0usize;
    let mut accepted = 0usize;
    let mut rejected = 0usize;

    while (x_end - x) * dir > 0.0 {
        if accepted + rejected >= ctl.max_steps {
            return Err(Error::NumericalBlowup { x });
        }
        while next_landing < landing.len() && (landing[next_landing] - x) * dir <= 0.0 {
            next_landing += 1;
        }
        let target = landing.get(next_landing).copied().unwrap_or(x_end);
        let target = if (target - x_end) * dir > 0.0 { x_end } else { target };
        let mut step = h;
        let mut lands = false;
        if ((x + step) - target) * dir >= 0.0 {
            step = target - x;
            lands = true;
        }

        let (y_new, k_new, err) = dopri_step(&f, x, &y, &k1, step, ctl);
        if err <= 1.0 {
            x = if lands { target } else { x + step };
            y = y_new;
            k1 = k_new;
            accepted += 1;
            if observe(x, &y) == Flow::Stop {
                return Ok(Outcome { x, y, accepted, rejected, stopped: true });
            }
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            // A forced landing shortens the step; keep growing from the free size.
            let base = if lands { h.abs().max(step.abs()) } else { step.abs() };
            h = base * fac * dir;
        } else {
            rejected += 1;
            let fac = if err.is_finite() { (0.9 * err.powf(-0.2)).clamp(0.1, 0.9) } else { 0.1 };
            h = step * fac;
            let floor = ctl.h_min_rel * x.abs().max(f64::MIN_POSITIVE);
            if h.abs() < floor {
                return Err(Error::NumericalBlowup { x });
            }
        }
    }
    Ok(Outcome { x, y, accepted, rejected, stopped: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_forward_and_backward() {
        let ctl = StepControl::new(1e-11, 1e-14, 0.1);
        let out = integrate(|_, y: &[f64; 1]| [-y[0]], 0.0, [1.0], 3.0, &ctl, &[], |_, _| Flow::Continue).unwrap();
        assert!((out.y[0] - (-3.0f64).exp()).abs() < 1e-10);
        let back = integrate(|_, y: &[f64; 1]| [-y[0]], 3.0, out.y, 0.0, &ctl, &[], |_, _| Flow::Continue).unwrap();
        assert!((back.y[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn harmonic_oscillator_lands_on_points() {
        let ctl = StepControl::new(1e-10, 1e-12, 0.5);
        let stops: Vec<f64> = (1..=20).map(|k| k as f64 * 0.3).collect();
        let mut seen = Vec::new();
        let out = integrate(
            |_, y: &[f64; 2]| [y[1], -y[0]],
            0.0,
            [0.0, 1.0],
            6.0,
            &ctl,
            &stops,
            |x, y| {
                seen.push((x, y[0]));
                Flow::Continue
            },
        )
        .unwrap();
        for s in &stops {
            let (_, v) = seen.iter().find(|(x, _)| x == s).expect("landed");
            assert!((v - s.sin()).abs() < 1e-8);
        }
        assert!((out.y[0] - 6.0f64.sin()).abs() < 1e-8);
    }

    #[test]
    fn observer_can_stop() {
        let ctl = StepControl::new(1e-8, 1e-10, 0.01);
        let out = integrate(
            |_, _: &[f64; 1]| [1.0],
            0.0,
            [0.0],
            10.0,
            &ctl,
            &[],
            |_, y| {
                if y[0] > 1.0 {
                    Flow::Stop
                } else {
                    Flow::Continue
                }
            },
        )
        .unwrap();
        assert!(out.stopped);
        assert!(out.x > 1.0 && out.x < 10.0);
    }
}
