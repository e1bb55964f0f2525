//! Sampled Wiener paths on uniform grids, Brownian-bridge refinement, and
//! smooth (mollified) approximations for Wong-Zakai runs.
//!
//! One path per replica drives every component (particle, kinetic, oracle)
//! so that cross-method comparisons are pathwise. All sampling is seeded
//! through ChaCha streams and bit-reproducible.

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::Write;

/// Mix a master seed with a stream index into an independent sub-seed
/// (splitmix64 finalizer; replica streams are `derive_seed(master, k)`).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One scalar Brownian path sampled on the uniform grid `t_k = k*dt`,
/// `k = 0..=K`, with `W_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerPath {
    dt: f64,
    values: Vec<f64>,
    seed: u64,
}

impl WienerPath {
    /// Sample a path with `K = ceil(T/dt)` increments `N(0, dt)`.
    pub fn sample(seed: u64, t_final: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Config(format!("dt must be > 0, got {dt}")));
        }
        if !(t_final >= dt) {
            return Err(Error::Config(format!(
                "horizon T = {t_final} must be >= dt = {dt}"
            )));
        }
        let steps = (t_final / dt).ceil() as usize;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let sqrt_dt = dt.sqrt();
        let mut values = Vec::with_capacity(steps + 1);
        values.push(0.0);
        let mut w = 0.0;
        for _ in 0..steps {
            let z: f64 = StandardNormal.sample(&mut rng);
            w += sqrt_dt * z;
            values.push(w);
        }
        Ok(WienerPath { dt, values, seed })
    }

    /// A path that is identically zero (noise-free runs share the code path).
    pub fn zero(t_final: f64, dt: f64) -> Result<Self> {
        let mut p = Self::sample(0, t_final, dt)?;
        p.values.iter_mut().for_each(|v| *v = 0.0);
        Ok(p)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of increments `K`.
    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    /// Grid horizon `K*dt` (>= the requested T).
    pub fn t_final(&self) -> f64 {
        self.dt * self.steps() as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn t(&self, k: usize) -> f64 {
        self.dt * k as f64
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(|k| self.t(k))
    }

    /// Increment `W_{k+1} - W_k`.
    pub fn increment(&self, k: usize) -> f64 {
        self.values[k + 1] - self.values[k]
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, w| m.max(w.abs()))
    }

    /// Piecewise-linear interpolant, constant outside `[0, T]`.
    pub fn linear_interp(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let k_max = self.steps();
        let s = t / self.dt;
        let k = (s.floor() as usize).min(k_max.saturating_sub(1));
        if k >= k_max {
            return self.values[k_max];
        }
        let frac = s - k as f64;
        self.values[k] + frac.min(1.0) * (self.values[k + 1] - self.values[k])
    }

    /// Refine by an integer factor with a Brownian bridge: the new path has
    /// step `dt/factor` and reproduces the coarse values at `k*factor`
    /// bit-exactly. Refinement is deterministic given the path.
    pub fn refine(&self, factor: usize) -> Result<WienerPath> {
        if factor < 2 {
            return Err(Error::Config(format!(
                "refinement factor must be >= 2, got {factor}"
            )));
        }
        let fine_dt = self.dt / factor as f64;
        // Stream depends on the current grid so nested refinements draw
        // independent bridge noise.
        let stream = (0xB21D_6E00 + factor as u64) ^ self.dt.to_bits();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(self.seed, stream));
        let mut values = Vec::with_capacity(self.steps() * factor + 1);
        values.push(0.0);
        for k in 0..self.steps() {
            // Sequential bridge fill inside [t_k, t_{k+1}]: condition each new
            // point on (previous fine point, coarse right endpoint).
            let right = self.values[k + 1];
            let mut w = self.values[k];
            for j in 1..factor {
                let remaining = (factor - j + 1) as f64; // sub-intervals left incl. current
                let mean = w + (right - w) / remaining;
                let var = fine_dt * (remaining - 1.0) / remaining;
                let z: f64 = StandardNormal.sample(&mut rng);
                w = mean + var.sqrt() * z;
                values.push(w);
            }
            values.push(right); // coarse value preserved exactly
        }
        Ok(WienerPath {
            dt: fine_dt,
            values,
            seed: self.seed,
        })
    }

    /// Smooth the path with a triangular moving average of half-width `eps`.
    pub fn mollify(&self, eps: f64) -> Result<SmoothPath> {
        SmoothPath::new(self.clone(), eps)
    }

    /// Two-column CSV `t,W`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "t,W")?;
        for (k, w) in self.values.iter().enumerate() {
            writeln!(out, "{},{}", self.t(k), w)?;
        }
        Ok(())
    }
}

/// Mollified Wiener path `W^eps = tri_eps * W_lin`, where `W_lin` is the
/// piecewise-linear interpolant (constant outside `[0,T]`) and `tri_eps` the
/// unit-mass triangular kernel on `[-eps, eps]`.
///
/// The convolution is evaluated exactly, piece by piece in kernel-local
/// coordinates (both factors are piecewise linear, so every piece integral
/// is closed-form); this stays stable down to arbitrarily small `eps`.
/// `W^eps` is C^1 and `sup |W^eps - W_lin| -> 0` as `eps -> 0`.
#[derive(Debug, Clone)]
pub struct SmoothPath {
    base: WienerPath,
    eps: f64,
    /// Sampled mollified values on a fine uniform grid (for export/plots).
    fine_dt: f64,
    values: Vec<f64>,
}

impl SmoothPath {
    pub fn new(base: WienerPath, eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::Config(format!("eps must be > 0, got {eps}")));
        }
        let dt = base.dt();
        let mut sp = SmoothPath {
            base,
            eps,
            fine_dt: 0.0,
            values: Vec::new(),
        };
        let oversample = ((4.0 * dt / eps).ceil() as usize).clamp(4, 64);
        sp.fine_dt = dt / oversample as f64;
        let fine_n = sp.base.steps() * oversample + 1;
        sp.values = (0..fine_n).map(|j| sp.eval(j as f64 * sp.fine_dt)).collect();
        Ok(sp)
    }

    pub fn base(&self) -> &WienerPath {
        &self.base
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn fine_dt(&self) -> f64 {
        self.fine_dt
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `W_lin` as a linear function of the local offset `s = u - t`:
    /// returns `(w_at_u0, slope)` valid on `[u0, u1]` where the interpolant
    /// has no breakpoint strictly inside.
    fn local_line(&self, u0: f64) -> (f64, f64, f64) {
        // Returns (value at u0, slope, next breakpoint > u0).
        let dt = self.base.dt();
        let t_end = self.base.t_final();
        if u0 < 0.0 {
            (0.0, 0.0, 0.0)
        } else if u0 >= t_end {
            (*self.base.values().last().unwrap(), 0.0, f64::INFINITY)
        } else {
            let k = ((u0 / dt).floor() as usize).min(self.base.steps() - 1);
            let w0 = self.base.values()[k];
            let m = (self.base.values()[k + 1] - w0) / dt;
            (w0 + m * (u0 - self.base.t(k)), m, self.base.t(k + 1))
        }
    }

    /// Integrate `W_lin(t+s) * g(s)` over `s in [lo, hi]` for a linear
    /// weight `g(s) = g0 + g1 s`, splitting at interpolant breakpoints.
    fn weighted_integral(&self, t: f64, lo: f64, hi: f64, g0: f64, g1: f64) -> f64 {
        let mut acc = 0.0;
        let mut s = lo;
        while s < hi - 1e-300 {
            let (w_here, slope, next_break) = self.local_line(t + s);
            let s_next = (next_break - t).min(hi);
            let s_next = if s_next <= s { hi } else { s_next };
            // W_lin(t+s') = w_here + slope (s' - s) =: a + b s'
            let a = w_here - slope * s;
            let b = slope;
            // int (a + b s)(g0 + g1 s) ds, exact antiderivative.
            let f = |u: f64| {
                a * g0 * u + 0.5 * (a * g1 + b * g0) * u * u + b * g1 * u * u * u / 3.0
            };
            acc += f(s_next) - f(s);
            s = s_next;
        }
        acc
    }

    /// Exact mollified value `W^eps(t)`.
    pub fn eval(&self, t: f64) -> f64 {
        let e = self.eps;
        let inv_e2 = 1.0 / (e * e);
        // Kernel (e - |s|)/e^2 split at its apex s = 0.
        self.weighted_integral(t, -e, 0.0, e * inv_e2, inv_e2)
            + self.weighted_integral(t, 0.0, e, e * inv_e2, -inv_e2)
    }

    /// Exact derivative `d W^eps / dt` (continuous, piecewise linear):
    /// `[ int_t^{t+eps} W_lin - int_{t-eps}^t W_lin ] / eps^2`.
    pub fn derivative(&self, t: f64) -> f64 {
        let e = self.eps;
        (self.weighted_integral(t, 0.0, e, 1.0, 0.0)
            - self.weighted_integral(t, -e, 0.0, 1.0, 0.0))
            / (e * e)
    }

    /// Sup distance to the linear interpolant of the base path, taken on the
    /// fine sampling grid.
    pub fn sup_distance_to_base(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(j, v)| (v - self.base.linear_interp(j as f64 * self.fine_dt)).abs())
            .fold(0.0, f64::max)
    }
}
