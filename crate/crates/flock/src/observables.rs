//! Moments, fluctuation energy, support functionals, Monte Carlo statistics
//! and decay-rate fitting.
//!
//! The quantities tracked per state are
//!
//! ```text
//! M0 = total mass,          M1 = mean velocity (d-vector),
//! M2 = mean squared speed,  E  = mean |vbar_0 - v|^2,
//! X  = max |x|,             V  = max |v|,
//! ```
//!
//! with the particle normalization `1/N` (so `M0 = 1` structurally) and grid
//! quadrature on kinetic states. Flocking is `M2 -> 0` with `X` bounded.

use crate::error::{Error, Result};
use crate::wiener::WienerPath;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::io::Write;

/// Velocity moments of a phase-space state.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m0: f64,
    pub m1: Vec<f64>,
    pub m2: f64,
}

/// Anything that exposes the measurement layer: particle ensembles and
/// kinetic grid states.
pub trait PhaseObservables {
    fn dim(&self) -> usize;
    fn moments(&self) -> Moments;
    /// `(max |x|, max |v|)`; kinetic states threshold at `1e-12 * max f`.
    fn supports(&self) -> (f64, f64);
    /// Mean of `|vbar0 - v|^2` against the state's mass distribution.
    fn fluctuation_energy(&self, vbar0: &[f64]) -> f64;
}

/// Time series of the observables along one run, on the driving path's grid.
#[derive(Debug, Clone)]
pub struct MomentSeries {
    pub d: usize,
    pub t: Vec<f64>,
    pub m0: Vec<f64>,
    /// Flattened `d`-vectors, stride `d`.
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub e_t: Vec<f64>,
    pub supp_x: Vec<f64>,
    pub supp_v: Vec<f64>,
    /// Mean velocity recorded at t = 0, used by `e_t`.
    pub vbar0: Vec<f64>,
    pub path_seed: u64,
}

impl MomentSeries {
    pub fn new(d: usize, path_seed: u64) -> Self {
        MomentSeries {
            d,
            t: Vec::new(),
            m0: Vec::new(),
            m1: Vec::new(),
            m2: Vec::new(),
            e_t: Vec::new(),
            supp_x: Vec::new(),
            supp_v: Vec::new(),
            vbar0: vec![0.0; d],
            path_seed,
        }
    }

    pub fn record<S: PhaseObservables>(&mut self, t: f64, state: &S) {
        let m = state.moments();
        if self.t.is_empty() {
            self.vbar0 = m.m1.clone();
        }
        let (sx, sv) = state.supports();
        self.t.push(t);
        self.m0.push(m.m0);
        self.m1.extend_from_slice(&m.m1);
        self.m2.push(m.m2);
        self.e_t.push(state.fluctuation_energy(&self.vbar0));
        self.supp_x.push(sx);
        self.supp_v.push(sv);
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn m1_at(&self, k: usize) -> &[f64] {
        &self.m1[k * self.d..(k + 1) * self.d]
    }

    pub fn m1_norm_at(&self, k: usize) -> f64 {
        self.m1_at(k).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// CSV `t,M0,M1_0..M1_{d-1},M2,E,suppX,suppV`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        write!(out, "t,M0")?;
        for j in 0..self.d {
            write!(out, ",M1_{j}")?;
        }
        writeln!(out, ",M2,E,suppX,suppV")?;
        for k in 0..self.len() {
            write!(out, "{},{}", self.t[k], self.m0[k])?;
            for v in self.m1_at(k) {
                write!(out, ",{v}")?;
            }
            writeln!(
                out,
                ",{},{},{},{}",
                self.m2[k], self.e_t[k], self.supp_x[k], self.supp_v[k]
            )?;
        }
        Ok(())
    }

    /// Compact little-endian binary dump: magic `FLO1`, then
    /// `d, len` as u64, then the column-major f64 blocks
    /// (t, m0, m1, m2, e_t, supp_x, supp_v, vbar0).
    pub fn write_binary<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(b"FLO1")?;
        out.write_all(&(self.d as u64).to_le_bytes())?;
        out.write_all(&(self.len() as u64).to_le_bytes())?;
        for col in [
            &self.t,
            &self.m0,
            &self.m1,
            &self.m2,
            &self.e_t,
            &self.supp_x,
            &self.supp_v,
            &self.vbar0,
        ] {
            for v in col.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

/// Sample mean with a 95% normal CI half-width `1.96 s / sqrt(n)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub ci_half: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn overlaps(&self, other: &McEstimate) -> bool {
        (self.mean - other.mean).abs() <= self.ci_half + other.ci_half
    }
}

pub fn mc_expectation(samples: &[f64]) -> Result<McEstimate> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            need: 2,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Ok(McEstimate {
        mean,
        ci_half: 1.96 * (var / n).sqrt(),
        n: samples.len(),
    })
}

/// Which observable a rate fit runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateField {
    M2,
    Et,
}

/// Least-squares fit of `log(field)` against `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    /// Fitted log-slope (1/time).
    pub rate: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
}

impl RateFit {
    /// One-line key=value record.
    pub fn to_record(&self) -> String {
        format!(
            "rate={:.6} intercept={:.6} r2={:.6} window=[{:.4},{:.4}]",
            self.rate, self.intercept, self.r_squared, self.window.0, self.window.1
        )
    }
}

/// Default fit window `[0.2 T, 0.9 T]`: skips the initial transient and the
/// terminal noise floor.
pub fn default_window(t_final: f64) -> (f64, f64) {
    (0.2 * t_final, 0.9 * t_final)
}

fn log_least_squares(ts: &[f64], ys: &[f64], window: (f64, f64)) -> Result<RateFit> {
    let mut bad = Vec::new();
    let mut pairs = Vec::new();
    for (&t, &y) in ts.iter().zip(ys) {
        if t < window.0 - 1e-12 || t > window.1 + 1e-12 {
            continue;
        }
        if y <= 0.0 {
            bad.push(t);
        } else {
            pairs.push((t, y.ln()));
        }
    }
    if !bad.is_empty() {
        return Err(Error::Domain(format!(
            "non-positive values in fit window at t = {bad:?}"
        )));
    }
    if pairs.len() < 2 {
        return Err(Error::Domain(format!(
            "fit window [{}, {}] contains {} point(s), need >= 2",
            window.0,
            window.1,
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let (st, sy): (f64, f64) = pairs.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mt, my) = (st / n, sy / n);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (t, y) in &pairs {
        sxx += (t - mt) * (t - mt);
        sxy += (t - mt) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::Domain("degenerate fit window (single time)".into()));
    }
    let rate = sxy / sxx;
    let intercept = my - rate * mt;
    let ss_res = syy - rate * sxy;
    let r_squared = if syy <= f64::EPSILON * n {
        1.0 // flat series fitted exactly
    } else {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(RateFit {
        rate,
        intercept,
        r_squared,
        window,
    })
}

/// Fit the decay rate of one series field over `window`.
pub fn fit_decay_rate(
    series: &MomentSeries,
    field: RateField,
    window: (f64, f64),
) -> Result<RateFit> {
    let ys = match field {
        RateField::M2 => &series.m2,
        RateField::Et => &series.e_t,
    };
    log_least_squares(&series.t, ys, window)
}

/// Fit the decay rate of the Monte Carlo mean of per-replica series, with a
/// seeded bootstrap CI over replicas (the honest CI: regression residuals on
/// a mean curve are serially correlated).
pub fn fit_mean_decay_rate(
    replicas: &[&MomentSeries],
    field: RateField,
    window: (f64, f64),
    n_boot: usize,
    seed: u64,
) -> Result<(RateFit, f64)> {
    if replicas.is_empty() {
        return Err(Error::TooFewSamples { need: 2, got: 0 });
    }
    let ts = &replicas[0].t;
    let len = ts.len();
    fn column(s: &MomentSeries, field: RateField) -> &[f64] {
        match field {
            RateField::M2 => &s.m2,
            RateField::Et => &s.e_t,
        }
    }
    for s in replicas {
        if s.t.len() != len {
            return Err(Error::Shape("replica series have differing grids".into()));
        }
    }
    let mean_of = |idx: &[usize]| -> Vec<f64> {
        let mut acc = vec![0.0; len];
        for &i in idx {
            for (a, v) in acc.iter_mut().zip(column(replicas[i], field)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= idx.len() as f64);
        acc
    };
    let all: Vec<usize> = (0..replicas.len()).collect();
    let fit = log_least_squares(ts, &mean_of(&all), window)?;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut rates = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let idx: Vec<usize> = (0..replicas.len())
            .map(|_| rng.gen_range(0..replicas.len()))
            .collect();
        if let Ok(f) = log_least_squares(ts, &mean_of(&idx), window) {
            rates.push(f.rate);
        }
    }
    rates.sort_by(|a, b| a.total_cmp(b));
    let ci_half = if rates.len() >= 20 {
        let lo = rates[(0.025 * rates.len() as f64) as usize];
        let hi = rates[((0.975 * rates.len() as f64) as usize).min(rates.len() - 1)];
        0.5 * (hi - lo)
    } else {
        f64::INFINITY
    };
    Ok((fit, ci_half))
}

/// Outcome of a pathwise bound check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub holds: bool,
    /// Largest ratio (observed / bound) over the grid.
    pub max_ratio: f64,
    pub first_violation: Option<usize>,
}

/// Pathwise dissipation bound on M2 in its weakened floor form:
/// `M2(t) <= M2(0) exp(-2 phi_m t - 2 sigma W_t) (1 + tol)`, `tol = 10 dt`.
pub fn pathwise_bound_check(
    series: &MomentSeries,
    phi_m: f64,
    sigma: f64,
    path: &WienerPath,
) -> Result<BoundCheck> {
    if series.len() != path.values().len() {
        return Err(Error::Shape(format!(
            "series ({}) and path ({}) grids differ",
            series.len(),
            path.values().len()
        )));
    }
    let tol = 10.0 * path.dt();
    let m2_0 = series.m2[0];
    let mut max_ratio = 0.0_f64;
    let mut first_violation = None;
    for k in 0..series.len() {
        let bound = m2_0 * (-2.0 * phi_m * series.t[k] - 2.0 * sigma * path.values()[k]).exp();
        let ratio = if bound > 0.0 { series.m2[k] / bound } else { 1.0 };
        max_ratio = max_ratio.max(ratio);
        if series.m2[k] > bound * (1.0 + tol) && first_violation.is_none() {
            first_violation = Some(k);
        }
    }
    Ok(BoundCheck {
        holds: first_violation.is_none(),
        max_ratio,
        first_violation,
    })
}

/// Pathwise velocity-support bound:
/// `max_i |v_t| <= sqrt(2) (V_0 + phi_M sqrt(d M2(0)) t) exp(-phi_m t - sigma W_t) (1 + tol)`.
pub fn velocity_support_bound_check(
    series: &MomentSeries,
    phi_m: f64,
    phi_max: f64,
    sigma: f64,
    path: &WienerPath,
) -> Result<BoundCheck> {
    if series.len() != path.values().len() {
        return Err(Error::Shape("series and path grids differ".into()));
    }
    let tol = 10.0 * path.dt();
    let v0 = series.supp_v[0];
    let amp = phi_max * (series.d as f64 * series.m2[0]).sqrt();
    let mut max_ratio = 0.0_f64;
    let mut first_violation = None;
    for k in 0..series.len() {
        let t = series.t[k];
        let bound =
            2.0_f64.sqrt() * (v0 + amp * t) * (-phi_m * t - sigma * path.values()[k]).exp();
        let ratio = if bound > 0.0 { series.supp_v[k] / bound } else { 1.0 };
        max_ratio = max_ratio.max(ratio);
        if series.supp_v[k] > bound * (1.0 + tol) && first_violation.is_none() {
            first_violation = Some(k);
        }
    }
    Ok(BoundCheck {
        holds: first_violation.is_none(),
        max_ratio,
        first_violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wiener::derive_seed;
    use approx::assert_relative_eq;

    fn exp_series(rate: f64, t_final: f64, dt: f64) -> MomentSeries {
        let mut s = MomentSeries::new(1, 0);
        let steps = (t_final / dt).round() as usize;
        for k in 0..=steps {
            let t = k as f64 * dt;
            s.t.push(t);
            s.m0.push(1.0);
            s.m1.push(0.0);
            s.m2.push((rate * t).exp());
            s.e_t.push((rate * t).exp());
            s.supp_x.push(1.0);
            s.supp_v.push(1.0);
        }
        s
    }

    #[test]
    fn mc_expectation_basics() {
        let e = mc_expectation(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!((e.mean, e.ci_half), (1.0, 0.0));
        let e = mc_expectation(&[0.0, 2.0]).unwrap();
        assert_relative_eq!(e.mean, 1.0);
        assert_relative_eq!(e.ci_half, 1.96, max_relative = 1e-12);
        assert!(mc_expectation(&[3.0]).is_err());
    }

    /// Coverage: over 100 meta-trials of 10^4 standard-normal draws, the CI
    /// contains 0 at least 93 times.
    #[test]
    fn mc_ci_coverage() {
        use rand_distr::{Distribution, StandardNormal};
        let mut hits = 0;
        for trial in 0..100u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(51, trial));
            let draws: Vec<f64> = (0..10_000)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let e = mc_expectation(&draws).unwrap();
            if e.mean.abs() <= e.ci_half {
                hits += 1;
            }
        }
        assert!(hits >= 93, "coverage {hits}/100");
    }

    #[test]
    fn fit_exact_exponential() {
        let s = exp_series(-1.5, 1.0, 0.01);
        let f = fit_decay_rate(&s, RateField::M2, (0.0, 1.0)).unwrap();
        assert!((f.rate + 1.5).abs() < 1e-9, "rate {}", f.rate);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_constant_series_rate_zero() {
        let s = exp_series(0.0, 1.0, 0.01);
        let f = fit_decay_rate(&s, RateField::M2, (0.0, 1.0)).unwrap();
        assert!(f.rate.abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_nonpositive_values() {
        let mut s = exp_series(-1.0, 1.0, 0.1);
        s.m2[5] = 0.0;
        match fit_decay_rate(&s, RateField::M2, (0.0, 1.0)) {
            Err(Error::Domain(msg)) => assert!(msg.contains("0.5")),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn pathwise_bound_on_exact_decay() {
        // M2(t) = M2(0) exp(-2 phi t - 2 sigma W_t) exactly: the weakened
        // phi_m bound holds with equality for constant phi.
        let (phi, sigma) = (1.0, 0.4);
        let path = WienerPath::sample(61, 1.0, 0.01).unwrap();
        let mut s = MomentSeries::new(1, path.seed());
        for (k, &w) in path.values().iter().enumerate() {
            let t = path.t(k);
            s.t.push(t);
            s.m0.push(1.0);
            s.m1.push(0.0);
            s.m2.push((-2.0 * phi * t - 2.0 * sigma * w).exp());
            s.e_t.push(0.0);
            s.supp_x.push(0.0);
            s.supp_v.push(0.0);
        }
        let chk = pathwise_bound_check(&s, phi, sigma, &path).unwrap();
        assert!(chk.holds);
        assert!((chk.max_ratio - 1.0).abs() < 1e-12);
        // phi_m = 0 weakens the bound; still holds.
        assert!(pathwise_bound_check(&s, 0.0, sigma, &path).unwrap().holds);
        // Deliberately doubled floor must be violated.
        let wrong = pathwise_bound_check(&s, 2.0 * phi, sigma, &path).unwrap();
        assert!(!wrong.holds && wrong.first_violation.is_some());
    }

    #[test]
    fn bound_check_grid_mismatch() {
        let path = WienerPath::sample(1, 1.0, 0.01).unwrap();
        let s = exp_series(-1.0, 0.5, 0.01);
        assert!(matches!(
            pathwise_bound_check(&s, 1.0, 0.1, &path),
            Err(Error::Shape(_))
        ));
    }
}
