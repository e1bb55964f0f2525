//! Scalar SDE integrators and the analytic oracles used to validate every
//! stochastic component in the crate.
//!
//! The workhorse oracle is the affine equation with multiplicative noise
//!
//! ```text
//! dX_t = (a_t + b_t X_t) dt + c X_t dW_t,   X_0 = x,
//! ```
//!
//! whose solution has the closed form
//!
//! ```text
//! X_t = x exp[ int_0^t (b_s - c^2/2) ds + c W_t ]
//!     + int_0^t a_s exp[ int_s^t (b_r - c^2/2) dr + c (W_t - W_s) ] ds.
//! ```
//!
//! Every moment bound and pathwise flocking identity in the crate reduces to
//! this equation, optionally combined with the comparison principle: if
//! `dX <= (a_t + b X) dt + c X dW` and `Y` solves the equality version with
//! the same data, then `X_t <= Y_t` pathwise.

use crate::error::{Error, Result};
use crate::wiener::WienerPath;

/// Coefficients of the affine test equation, sampled on the driving path's
/// grid. Only grid-sampled coefficient processes are supported; sub-grid
/// variation is invisible to the oracle.
#[derive(Debug, Clone)]
pub struct AffineGbmSpec {
    pub x0: f64,
    /// Forcing `a_t` at grid times (length K+1).
    pub a: Vec<f64>,
    /// Drift factor `b_t` at grid times (length K+1).
    pub b: Vec<f64>,
    /// Constant diffusion coefficient.
    pub c: f64,
}

impl AffineGbmSpec {
    /// Constant-coefficient spec on a given grid length.
    pub fn constant(x0: f64, a: f64, b: f64, c: f64, grid_len: usize) -> Self {
        AffineGbmSpec {
            x0,
            a: vec![a; grid_len],
            b: vec![b; grid_len],
            c,
        }
    }

    fn check_grid(&self, path: &WienerPath) -> Result<()> {
        let n = path.values().len();
        if self.a.len() != n || self.b.len() != n {
            return Err(Error::Shape(format!(
                "coefficient grids (a: {}, b: {}) do not match path grid ({n})",
                self.a.len(),
                self.b.len()
            )));
        }
        Ok(())
    }
}

/// A scalar trajectory on the grid of its driving path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<f64>,
    pub path_seed: u64,
}

impl Trajectory {
    pub fn t(&self, k: usize) -> f64 {
        self.dt * k as f64
    }

    pub fn terminal(&self) -> f64 {
        *self.states.last().unwrap()
    }

    /// Max absolute gap over the shared grid.
    pub fn max_abs_gap(&self, other: &Trajectory) -> Result<f64> {
        if self.states.len() != other.states.len() {
            return Err(Error::Shape(format!(
                "trajectory lengths differ: {} vs {}",
                self.states.len(),
                other.states.len()
            )));
        }
        Ok(self
            .states
            .iter()
            .zip(&other.states)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max))
    }

    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "t,x")?;
        for (k, x) in self.states.iter().enumerate() {
            writeln!(out, "{},{}", self.t(k), x)?;
        }
        Ok(())
    }
}

/// Evaluate the closed form of the affine equation along `path`, with
/// trapezoidal quadrature for both time integrals.
///
/// Writing `I_k = int_0^{t_k} (b - c^2/2) ds`, the double-exponential
/// integral collapses to a single cumulative sum:
/// `X_k = e^{I_k + c W_k} [ x + int_0^{t_k} a_s e^{-I_s - c W_s} ds ]`.
pub fn gbm_affine_closed_form(spec: &AffineGbmSpec, path: &WienerPath) -> Result<Trajectory> {
    spec.check_grid(path)?;
    let dt = path.dt();
    let w = path.values();
    let half_c2 = 0.5 * spec.c * spec.c;
    let n = w.len();

    let mut states = Vec::with_capacity(n);
    let mut i_cum = 0.0; // I_k
    let mut g_cum = 0.0; // int_0^{t_k} a_s exp(-I_s - c W_s) ds
    let mut g_prev = spec.a[0]; // integrand at t_0 (I_0 = W_0 = 0)
    states.push(spec.x0);
    for k in 1..n {
        i_cum += 0.5 * ((spec.b[k - 1] - half_c2) + (spec.b[k] - half_c2)) * dt;
        let g_here = spec.a[k] * (-i_cum - spec.c * w[k]).exp();
        g_cum += 0.5 * (g_prev + g_here) * dt;
        g_prev = g_here;
        states.push((i_cum + spec.c * w[k]).exp() * (spec.x0 + g_cum));
    }
    Ok(Trajectory {
        dt,
        states,
        path_seed: path.seed(),
    })
}

fn finite_or_blowup(x: f64, k: usize, dt: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Blowup {
            step: k,
            t: dt * k as f64,
            what: format!("state became {x}"),
        })
    }
}

/// Euler-Maruyama for `dX = drift(t,X) dt + diffusion(t,X) dW` (Ito).
///
/// Strong order 1/2 in general, order 1 for the linear-diffusion systems
/// used here (checked empirically against the closed form).
pub fn integrate_ito(
    drift: impl Fn(f64, f64) -> f64,
    diffusion: impl Fn(f64, f64) -> f64,
    x0: f64,
    path: &WienerPath,
) -> Result<Trajectory> {
    let dt = path.dt();
    let mut states = Vec::with_capacity(path.values().len());
    states.push(x0);
    let mut x = x0;
    for k in 0..path.steps() {
        let t = path.t(k);
        x += drift(t, x) * dt + diffusion(t, x) * path.increment(k);
        states.push(finite_or_blowup(x, k + 1, dt)?);
    }
    Ok(Trajectory {
        dt,
        states,
        path_seed: path.seed(),
    })
}

/// Heun (stochastic trapezoidal) scheme for
/// `dX = drift(t,X) dt + diffusion(t,X) o dW` (Stratonovich).
///
/// Predictor steps with endpoint coefficients, corrector averages them;
/// for one-dimensional noise this converges to the Stratonovich solution
/// and reduces to deterministic Heun when the diffusion vanishes.
pub fn integrate_stratonovich(
    drift: impl Fn(f64, f64) -> f64,
    diffusion: impl Fn(f64, f64) -> f64,
    x0: f64,
    path: &WienerPath,
) -> Result<Trajectory> {
    let dt = path.dt();
    let mut states = Vec::with_capacity(path.values().len());
    states.push(x0);
    let mut x = x0;
    for k in 0..path.steps() {
        let (t0, t1) = (path.t(k), path.t(k + 1));
        let dw = path.increment(k);
        let (f0, g0) = (drift(t0, x), diffusion(t0, x));
        let pred = x + f0 * dt + g0 * dw;
        let (f1, g1) = (drift(t1, pred), diffusion(t1, pred));
        x += 0.5 * (f0 + f1) * dt + 0.5 * (g0 + g1) * dw;
        states.push(finite_or_blowup(x, k + 1, dt)?);
    }
    Ok(Trajectory {
        dt,
        states,
        path_seed: path.seed(),
    })
}

/// Per-component Ito drift correction that turns the Stratonovich system
/// `dv = F dt + sigma (vbar - v) o dW` into its Ito form: the returned
/// function maps `(vbar_component, v_component)` to the additive term
/// `-(1/2) sigma^2 (vbar - v)`.
pub fn ito_drift_correction(sigma: f64) -> impl Fn(f64, f64) -> f64 {
    let half_s2 = 0.5 * sigma * sigma;
    move |vbar, v| -half_s2 * (vbar - v)
}

/// Outcome of a pathwise comparison-principle check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonOutcome {
    pub holds: bool,
    /// First grid index where `X > Y + tol`, if any.
    pub first_violation: Option<usize>,
    /// Largest `X_k - Y_k` over the grid.
    pub max_excess: f64,
}

/// Check `X_t <= Y_t + tol` at every grid point with
/// `tol = 1e-9 * max_k |Y_k|`.
pub fn comparison_check(x_traj: &Trajectory, y_traj: &Trajectory) -> Result<ComparisonOutcome> {
    if x_traj.states.len() != y_traj.states.len() || x_traj.dt != y_traj.dt {
        return Err(Error::Shape(
            "comparison requires a shared grid and driving path".into(),
        ));
    }
    let tol = 1e-9 * y_traj.states.iter().fold(0.0_f64, |m, y| m.max(y.abs()));
    let mut first_violation = None;
    let mut max_excess = f64::NEG_INFINITY;
    for (k, (x, y)) in x_traj.states.iter().zip(&y_traj.states).enumerate() {
        let excess = x - y;
        max_excess = max_excess.max(excess);
        if excess > tol && first_violation.is_none() {
            first_violation = Some(k);
        }
    }
    Ok(ComparisonOutcome {
        holds: first_violation.is_none(),
        first_violation,
        max_excess,
    })
}
