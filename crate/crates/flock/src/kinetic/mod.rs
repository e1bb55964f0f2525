//! Grid-based solver for the stochastic kinetic equation in one space
//! dimension (two-dimensional phase space), driven by a sampled common
//! Wiener path.
//!
//! The density obeys
//!
//! ```text
//! df + v f_x dt + (F_a[f] f)_v dt = sigma (v f)_v o dW,
//! F_a[f](x, v) = int phi(|y - x|) (w - v) f(y, w) dw dy,
//! ```
//!
//! solved by stochastic characteristics: along
//! `dX = V dt, dV = F_a dt - sigma V o dW` the density is the initial datum
//! times an exponential factor,
//!
//! ```text
//! f_t(X_t, V_t) = f_in(x, v) exp[ int_0^t B(s, X_s) ds + sigma W_t ],
//! B(s, x) = int phi(|y - x|) f_s(y, w) dw dy   (= -div_v F_a in d = 1).
//! ```
//!
//! Because `F_a[g]` is linear in `v` (`F = A(x) - B(x) v`), a time level of
//! the frozen field is just the pair `A, B` tabulated on the x-grid from the
//! v-moments of `g`; characteristic tracing interpolates them linearly.

mod solver;

pub use solver::{
    characteristics_step, semi_lagrangian_evolve, solve_fixed_point, successive_step,
    IterationDiagnostics, KineticTrajectory, SemiLagrangianRun,
};

use crate::config::NoiseMode;
use crate::error::{Error, Result};
use crate::observables::{Moments, PhaseObservables};
use crate::particle::ParticleEnsemble;
use crate::weight::CommWeight;
use crate::wiener::WienerPath;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::io::Write;

/// Support threshold as a fraction of `max f`: semi-Lagrangian interpolation
/// produces harmless sub-epsilon halos that must not count as support.
pub const SUPPORT_THRESHOLD_FRACTION: f64 = 1e-12;

/// Uniform node-centered rectangle in (x, v) phase space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub nx: usize,
    pub nv: usize,
}

impl PhaseGrid {
    pub fn new(x_range: (f64, f64), v_range: (f64, f64), nx: usize, nv: usize) -> Result<Self> {
        if nx < 8 || nv < 8 {
            return Err(Error::Config(format!(
                "grid needs nx, nv >= 8, got {nx} x {nv}"
            )));
        }
        if !(x_range.0 < x_range.1) || !(v_range.0 < v_range.1)
            || !x_range.0.is_finite() || !x_range.1.is_finite()
            || !v_range.0.is_finite() || !v_range.1.is_finite()
        {
            return Err(Error::Config("grid bounds must be finite and ordered".into()));
        }
        Ok(PhaseGrid {
            x_min: x_range.0,
            x_max: x_range.1,
            v_min: v_range.0,
            v_max: v_range.1,
            nx,
            nv,
        })
    }

    /// Symmetric grid `[-x_half, x_half] x [-v_half, v_half]`.
    pub fn centered(x_half: f64, v_half: f64, nx: usize, nv: usize) -> Result<Self> {
        Self::new((-x_half, x_half), (-v_half, v_half), nx, nv)
    }

    pub fn hx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn hv(&self) -> f64 {
        (self.v_max - self.v_min) / (self.nv - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.hx()
    }

    pub fn v(&self, j: usize) -> f64 {
        self.v_min + j as f64 * self.hv()
    }

    pub fn len(&self) -> usize {
        self.nx * self.nv
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.nv + j
    }

    /// Trapezoid quadrature weight of node (i, j), including hx*hv.
    #[inline]
    pub fn quad_weight(&self, i: usize, j: usize) -> f64 {
        let wx = if i == 0 || i == self.nx - 1 { 0.5 } else { 1.0 };
        let wv = if j == 0 || j == self.nv - 1 { 0.5 } else { 1.0 };
        wx * wv * self.hx() * self.hv()
    }

    pub fn contains(&self, x: f64, v: f64) -> bool {
        x >= self.x_min && x <= self.x_max && v >= self.v_min && v <= self.v_max
    }

    /// Extended hull used by the characteristic tracer: the grid box
    /// inflated by 5% of each range plus two cells.
    pub fn extended_hull(&self) -> (f64, f64, f64, f64) {
        let mx = 0.05 * (self.x_max - self.x_min) + 2.0 * self.hx();
        let mv = 0.05 * (self.v_max - self.v_min) + 2.0 * self.hv();
        (self.x_min - mx, self.x_max + mx, self.v_min - mv, self.v_max + mv)
    }
}

/// Phase-space density at one time: nonnegative node values on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KineticState {
    pub grid: PhaseGrid,
    /// Row-major `nx x nv` node values.
    pub f: Vec<f64>,
    pub t: f64,
}

impl KineticState {
    pub fn zero(grid: PhaseGrid) -> Self {
        KineticState {
            grid,
            f: vec![0.0; grid.len()],
            t: 0.0,
        }
    }

    /// Build from a closure and normalize to unit mass.
    pub fn from_density(grid: PhaseGrid, density: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut state = KineticState::zero(grid);
        for i in 0..grid.nx {
            for j in 0..grid.nv {
                let val = density(grid.x(i), grid.v(j));
                if !(val >= 0.0) {
                    return Err(Error::Domain(format!(
                        "density must be nonnegative, got {val} at ({}, {})",
                        grid.x(i),
                        grid.v(j)
                    )));
                }
                state.f[grid.idx(i, j)] = val;
            }
        }
        state.normalize_mass()?;
        Ok(state)
    }

    /// Normalized indicator of `[-x_half, x_half] x [-v_half, v_half]`,
    /// discretized by cell averages (edge nodes carry the covered fraction
    /// of their dual cell) so grid moments converge at O(h^2).
    pub fn indicator(grid: PhaseGrid, x_half: f64, v_half: f64) -> Result<Self> {
        let coverage = |c: f64, h: f64, half: f64| -> f64 {
            let lo = (c - 0.5 * h).max(-half);
            let hi = (c + 0.5 * h).min(half);
            ((hi - lo) / h).clamp(0.0, 1.0)
        };
        let (hx, hv) = (grid.hx(), grid.hv());
        Self::from_density(grid, |x, v| {
            coverage(x, hx, x_half) * coverage(v, hv, v_half)
        })
    }

    pub fn mass(&self) -> f64 {
        let g = &self.grid;
        let mut acc = 0.0;
        for i in 0..g.nx {
            for j in 0..g.nv {
                acc += g.quad_weight(i, j) * self.f[g.idx(i, j)];
            }
        }
        acc
    }

    pub fn sup(&self) -> f64 {
        self.f.iter().fold(0.0, |m: f64, &v| m.max(v))
    }

    fn normalize_mass(&mut self) -> Result<()> {
        let m = self.mass();
        if !(m > 0.0) {
            return Err(Error::Domain("cannot normalize a zero-mass state".into()));
        }
        let inv = 1.0 / m;
        self.f.iter_mut().for_each(|v| *v *= inv);
        Ok(())
    }

    /// Bilinear interpolation; zero outside the grid (compact support).
    pub fn interp(&self, x: f64, v: f64) -> f64 {
        let g = &self.grid;
        if !g.contains(x, v) {
            return 0.0;
        }
        let (hx, hv) = (g.hx(), g.hv());
        let fi = ((x - g.x_min) / hx).floor().clamp(0.0, (g.nx - 2) as f64);
        let fj = ((v - g.v_min) / hv).floor().clamp(0.0, (g.nv - 2) as f64);
        let (i, j) = (fi as usize, fj as usize);
        let ax = ((x - g.x(i)) / hx).clamp(0.0, 1.0);
        let av = ((v - g.v(j)) / hv).clamp(0.0, 1.0);
        let f00 = self.f[g.idx(i, j)];
        let f01 = self.f[g.idx(i, j + 1)];
        let f10 = self.f[g.idx(i + 1, j)];
        let f11 = self.f[g.idx(i + 1, j + 1)];
        (1.0 - ax) * ((1.0 - av) * f00 + av * f01) + ax * ((1.0 - av) * f10 + av * f11)
    }

    /// Cubic Lagrange interpolation (4x4 stencil, clamped at the grid edge),
    /// limited to the surrounding cell's value range — bound-preserving, so
    /// nonnegativity survives and over/undershoot clipping stays balanced.
    /// Zero outside the grid. Used by the per-step semi-Lagrangian mode,
    /// where bilinear's O(h) accumulated transport error would swamp the
    /// scheme.
    pub fn interp_cubic(&self, x: f64, v: f64) -> f64 {
        let g = &self.grid;
        if !g.contains(x, v) {
            return 0.0;
        }
        let (hx, hv) = (g.hx(), g.hv());
        let sx = ((x - g.x_min) / hx).clamp(0.0, (g.nx - 1) as f64);
        let sv = ((v - g.v_min) / hv).clamp(0.0, (g.nv - 1) as f64);
        let i = (sx.floor() as usize).min(g.nx - 2);
        let j = (sv.floor() as usize).min(g.nv - 2);
        let ax = sx - i as f64;
        let av = sv - j as f64;

        fn weights(a: f64) -> [f64; 4] {
            [
                -a * (a - 1.0) * (a - 2.0) / 6.0,
                (a + 1.0) * (a - 1.0) * (a - 2.0) / 2.0,
                -(a + 1.0) * a * (a - 2.0) / 2.0,
                (a + 1.0) * a * (a - 1.0) / 6.0,
            ]
        }
        let wx = weights(ax);
        let wv = weights(av);
        let mut acc = 0.0;
        for (oi, wxi) in wx.iter().enumerate() {
            let ii = (i as i64 + oi as i64 - 1).clamp(0, g.nx as i64 - 1) as usize;
            let mut row = 0.0;
            for (oj, wvj) in wv.iter().enumerate() {
                let jj = (j as i64 + oj as i64 - 1).clamp(0, g.nv as i64 - 1) as usize;
                row += wvj * self.f[g.idx(ii, jj)];
            }
            acc += wxi * row;
        }
        let f00 = self.f[g.idx(i, j)];
        let f01 = self.f[g.idx(i, j + 1)];
        let f10 = self.f[g.idx(i + 1, j)];
        let f11 = self.f[g.idx(i + 1, j + 1)];
        let lo = f00.min(f01).min(f10).min(f11);
        let hi = f00.max(f01).max(f10).max(f11);
        acc.clamp(lo, hi)
    }

    /// Support box `(max |x|, max |v|)` over nodes with `f > threshold`.
    pub fn support_box(&self) -> (f64, f64) {
        let thresh = SUPPORT_THRESHOLD_FRACTION * self.sup();
        let g = &self.grid;
        let (mut sx, mut sv) = (0.0_f64, 0.0_f64);
        for i in 0..g.nx {
            for j in 0..g.nv {
                if self.f[g.idx(i, j)] > thresh {
                    sx = sx.max(g.x(i).abs());
                    sv = sv.max(g.v(j).abs());
                }
            }
        }
        (sx, sv)
    }

    /// Phase-space support radius `max sqrt(x^2 + v^2)` (the R_0 entering
    /// the support envelopes).
    pub fn support_radius(&self) -> f64 {
        let thresh = SUPPORT_THRESHOLD_FRACTION * self.sup();
        let g = &self.grid;
        let mut r = 0.0_f64;
        for i in 0..g.nx {
            for j in 0..g.nv {
                if self.f[g.idx(i, j)] > thresh {
                    r = r.max(g.x(i).hypot(g.v(j)));
                }
            }
        }
        r
    }

    /// Mollify the initial datum: separable compact bump of radius `eps`
    /// per axis, then renormalize to unit mass and re-center the mean
    /// velocity to zero. The support grows by at most `eps` per side;
    /// errors out if that would leave the grid.
    pub fn mollify_initial(&self, eps: f64) -> Result<KineticState> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {eps}")));
        }
        let g = self.grid;
        let (sx, sv) = self.support_box();
        if sx + eps > g.x_max.min(-g.x_min) || sv + eps > g.v_max.min(-g.v_min) {
            return Err(Error::Config(format!(
                "mollified support (|x| <= {:.3}, |v| <= {:.3}) would exceed the grid",
                sx + eps,
                sv + eps
            )));
        }

        // Discrete unit-mass bump weights per axis; identity when eps < h.
        let bump_weights = |h: f64| -> Vec<f64> {
            let m = (eps / h).floor() as i64;
            if m == 0 {
                return vec![1.0];
            }
            let mut w: Vec<f64> = (-m..=m)
                .map(|k| {
                    let u = k as f64 * h / eps;
                    (-1.0 / (1.0 - u * u)).exp()
                })
                .collect();
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= total);
            w
        };
        let wx = bump_weights(g.hx());
        let wv = bump_weights(g.hv());

        // Separable convolution, x then v.
        let mut tmp = vec![0.0; g.len()];
        let mx = (wx.len() as i64 - 1) / 2;
        for i in 0..g.nx as i64 {
            for (o, &w) in wx.iter().enumerate() {
                let src = i - mx + o as i64;
                if src < 0 || src >= g.nx as i64 {
                    continue;
                }
                for j in 0..g.nv {
                    tmp[g.idx(i as usize, j)] += w * self.f[g.idx(src as usize, j)];
                }
            }
        }
        let mut out = vec![0.0; g.len()];
        let mv = (wv.len() as i64 - 1) / 2;
        for i in 0..g.nx {
            for j in 0..g.nv as i64 {
                for (o, &w) in wv.iter().enumerate() {
                    let src = j - mv + o as i64;
                    if src < 0 || src >= g.nv as i64 {
                        continue;
                    }
                    out[g.idx(i, j as usize)] += w * tmp[g.idx(i, src as usize)];
                }
            }
        }

        let mut state = KineticState {
            grid: g,
            f: out,
            t: self.t,
        };
        state.normalize_mass()?;
        // Re-center the mean velocity (moment normalization).
        let m = state.moments();
        let vbar = m.m1[0] / m.m0;
        if vbar.abs() > 1e-13 * (1.0 + m.m2.sqrt()) {
            let shifted: Vec<f64> = (0..g.nx)
                .flat_map(|i| (0..g.nv).map(move |j| (i, j)))
                .map(|(i, j)| state.interp(g.x(i), g.v(j) + vbar))
                .collect();
            state.f = shifted;
            state.normalize_mass()?;
        }
        Ok(state)
    }

    /// Draw `n` particles from this density by rejection sampling
    /// (deterministic given `seed`), then center velocities.
    pub fn sample_particles(&self, n: usize, seed: u64) -> Result<ParticleEnsemble> {
        let g = &self.grid;
        let sup = self.sup();
        if !(sup > 0.0) {
            return Err(Error::Domain("cannot sample from a zero state".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        while x.len() < n {
            let xc = rng.gen_range(g.x_min..g.x_max);
            let vc = rng.gen_range(g.v_min..g.v_max);
            let u: f64 = rng.gen_range(0.0..sup);
            if u < self.interp(xc, vc) {
                x.push(xc);
                v.push(vc);
            }
        }
        let mut ens = ParticleEnsemble::from_parts(1, x, v, 0.0, NoiseMode::Common)?;
        ens.center_velocities();
        Ok(ens)
    }

    /// Flat CSV `x,v,f` over all nodes.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "x,v,f")?;
        let g = &self.grid;
        for i in 0..g.nx {
            for j in 0..g.nv {
                writeln!(out, "{},{},{}", g.x(i), g.v(j), self.f[g.idx(i, j)])?;
            }
        }
        Ok(())
    }

    /// Binary grid dump: magic `FLK1`, grid bounds and shape, then node
    /// values as little-endian f64.
    pub fn write_binary<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(b"FLK1")?;
        for b in [
            self.grid.x_min,
            self.grid.x_max,
            self.grid.v_min,
            self.grid.v_max,
            self.t,
        ] {
            out.write_all(&b.to_le_bytes())?;
        }
        out.write_all(&(self.grid.nx as u64).to_le_bytes())?;
        out.write_all(&(self.grid.nv as u64).to_le_bytes())?;
        for v in &self.f {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

impl PhaseObservables for KineticState {
    fn dim(&self) -> usize {
        1
    }

    fn moments(&self) -> Moments {
        let g = &self.grid;
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..g.nx {
            for j in 0..g.nv {
                let w = g.quad_weight(i, j) * self.f[g.idx(i, j)];
                let v = g.v(j);
                m0 += w;
                m1 += w * v;
                m2 += w * v * v;
            }
        }
        Moments {
            m0,
            m1: vec![m1],
            m2,
        }
    }

    fn supports(&self) -> (f64, f64) {
        self.support_box()
    }

    fn fluctuation_energy(&self, vbar0: &[f64]) -> f64 {
        let g = &self.grid;
        let mut acc = 0.0;
        for i in 0..g.nx {
            for j in 0..g.nv {
                let gap = vbar0[0] - g.v(j);
                acc += g.quad_weight(i, j) * self.f[g.idx(i, j)] * gap * gap;
            }
        }
        acc
    }
}

/// One time level of the frozen interaction field `F = A(x) - B(x) v`,
/// tabulated on the x-grid.
#[derive(Debug, Clone)]
pub struct FieldLevel {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl FieldLevel {
    /// Build from a state: `B(x) = int phi(|y-x|) rho(y) dy`,
    /// `A(x) = int phi(|y-x|) jmom(y) dy` with `rho, jmom` the v-moments.
    pub fn from_state(state: &KineticState, w: &CommWeight) -> FieldLevel {
        let g = &state.grid;
        let (hx, hv) = (g.hx(), g.hv());
        let mut rho = vec![0.0; g.nx];
        let mut jmom = vec![0.0; g.nx];
        for i in 0..g.nx {
            for j in 0..g.nv {
                let wv = if j == 0 || j == g.nv - 1 { 0.5 } else { 1.0 };
                let val = wv * hv * state.f[g.idx(i, j)];
                rho[i] += val;
                jmom[i] += val * g.v(j);
            }
        }
        let mut a = vec![0.0; g.nx];
        let mut b = vec![0.0; g.nx];
        for i in 0..g.nx {
            let xi = g.x(i);
            let (mut ai, mut bi) = (0.0, 0.0);
            for (k, (&r, &jm)) in rho.iter().zip(&jmom).enumerate() {
                let wxk = if k == 0 || k == g.nx - 1 { 0.5 } else { 1.0 };
                let phi = w.value((g.x(k) - xi).abs()) * wxk * hx;
                bi += phi * r;
                ai += phi * jm;
            }
            a[i] = ai;
            b[i] = bi;
        }
        FieldLevel { a, b }
    }

    /// Linear interpolation in x, clamped to the grid ends.
    pub fn eval(&self, grid: &PhaseGrid, x: f64) -> (f64, f64) {
        let hx = grid.hx();
        let s = ((x - grid.x_min) / hx).clamp(0.0, (grid.nx - 1) as f64);
        let i = (s.floor() as usize).min(grid.nx - 2);
        let frac = s - i as f64;
        (
            self.a[i] + frac * (self.a[i + 1] - self.a[i]),
            self.b[i] + frac * (self.b[i + 1] - self.b[i]),
        )
    }
}

/// The interaction field at (x, v): `F_a[f](x, v)` by trapezoid quadrature.
pub fn field_fa(state: &KineticState, w: &CommWeight, x: f64, v: f64) -> Result<f64> {
    if !state.grid.contains(x, v) {
        return Err(Error::Domain(format!("query ({x}, {v}) outside grid")));
    }
    let level = FieldLevel::from_state(state, w);
    let (a, b) = level.eval(&state.grid, x);
    Ok(a - b * v)
}

/// The velocity divergence of the field, `div_v F_a = -B(x)` in d = 1.
pub fn div_v_fa(state: &KineticState, w: &CommWeight, x: f64) -> Result<f64> {
    if x < state.grid.x_min || x > state.grid.x_max {
        return Err(Error::Domain(format!("query x = {x} outside grid")));
    }
    let level = FieldLevel::from_state(state, w);
    let (_, b) = level.eval(&state.grid, x);
    Ok(-b)
}

/// Pathwise support envelopes from the a-priori moment bound: with
/// `gamma = max(M2(0), phi_M)` and
/// `K_t = M2(0) sup_{s<=t} exp(-phi_M s + 2 sigma W_s)`,
///
/// ```text
/// Venv(t)^2 = [ (R0+1)^2 + phi_M int_0^t (gamma + K_s) e^{gamma s} ds ]
///             * exp(phi_M t - 2 sigma W_t)
/// Xenv(t)^2 = 2 [ (R0+1)^2 + t int_0^t [ (R0+1)^2
///             + phi_M int_0^s (gamma + K_r) e^{gamma r} dr ]
///             * exp(phi_M s - 2 sigma W_s) ds ]
/// ```
#[derive(Debug, Clone)]
pub struct SupportEnvelopes {
    pub t: Vec<f64>,
    pub x_env: Vec<f64>,
    pub v_env: Vec<f64>,
}

pub fn support_envelopes(
    r0: f64,
    phi_max: f64,
    m2_initial: f64,
    sigma: f64,
    path: &WienerPath,
) -> SupportEnvelopes {
    let gamma = m2_initial.max(phi_max);
    let r1 = (r0 + 1.0) * (r0 + 1.0);
    let dt = path.dt();
    let n = path.values().len();

    let mut k_sup = f64::NEG_INFINITY;
    let mut int_inner = 0.0; // int (gamma + K_s) e^{gamma s} ds
    let mut int_outer = 0.0; // int [r1 + phi_M int_inner] e^{phi_M s - 2 sigma W_s} ds
    let mut prev_inner_integrand = 0.0;
    let mut prev_outer_integrand = 0.0;
    let mut t_out = Vec::with_capacity(n);
    let mut x_env = Vec::with_capacity(n);
    let mut v_env = Vec::with_capacity(n);

    for (k, &w) in path.values().iter().enumerate() {
        let t = path.t(k);
        k_sup = k_sup.max((-phi_max * t + 2.0 * sigma * w).exp());
        let k_t = m2_initial * k_sup;
        let inner_integrand = (gamma + k_t) * (gamma * t).exp();
        if k > 0 {
            int_inner += 0.5 * (prev_inner_integrand + inner_integrand) * dt;
        }
        prev_inner_integrand = inner_integrand;

        let pre = r1 + phi_max * int_inner;
        let v2 = pre * (phi_max * t - 2.0 * sigma * w).exp();
        let outer_integrand = v2;
        if k > 0 {
            int_outer += 0.5 * (prev_outer_integrand + outer_integrand) * dt;
        }
        prev_outer_integrand = outer_integrand;

        let x2 = 2.0 * (r1 + t * int_outer);
        t_out.push(t);
        v_env.push(v2.max(0.0).sqrt());
        x_env.push(x2.max(0.0).sqrt());
    }
    SupportEnvelopes {
        t: t_out,
        x_env,
        v_env,
    }
}

/// Refuse grids that cannot contain the support envelopes over the horizon.
pub fn validate_grid_against_envelopes(grid: &PhaseGrid, env: &SupportEnvelopes) -> Result<()> {
    let needed_x = env.x_env.iter().fold(0.0_f64, |m, &x| m.max(x));
    let needed_v = env.v_env.iter().fold(0.0_f64, |m, &v| m.max(v));
    let have_x = grid.x_max.min(-grid.x_min);
    let have_v = grid.v_max.min(-grid.v_min);
    if have_x < needed_x || have_v < needed_v {
        return Err(Error::GridTooSmall {
            needed_x,
            needed_v,
            have_x,
            have_v,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_grid() -> PhaseGrid {
        PhaseGrid::centered(2.0, 2.0, 65, 65).unwrap()
    }

    #[test]
    fn grid_rejects_small_counts() {
        assert!(PhaseGrid::centered(1.0, 1.0, 4, 64).is_err());
    }

    #[test]
    fn uniform_density_moments() {
        // Uniform on [-1,1]^2 normalized: M2 = 1/3 up to quadrature error.
        let state = KineticState::indicator(test_grid(), 1.0, 1.0).unwrap();
        let m = state.moments();
        let h = state.grid.hx();
        assert_relative_eq!(m.m0, 1.0, max_relative = 1e-12);
        assert!(m.m1[0].abs() < 1e-12);
        assert!((m.m2 - 1.0 / 3.0).abs() < h * h + 5e-3, "M2 = {}", m.m2);
    }

    #[test]
    fn indicator_supports() {
        let state = KineticState::indicator(test_grid(), 0.5, 0.25).unwrap();
        let (sx, sv) = state.supports();
        let g = state.grid;
        assert!((sx - 0.5).abs() <= g.hx() + 1e-12);
        assert!((sv - 0.25).abs() <= g.hv() + 1e-12);
    }

    #[test]
    fn mollify_preserves_mass_and_sup() {
        let state = KineticState::indicator(test_grid(), 1.0, 1.0).unwrap();
        let moll = state.mollify_initial(0.2).unwrap();
        assert!((moll.mass() - 1.0).abs() < 1e-10);
        assert!(moll.sup() <= state.sup() * (1.0 + 1e-6));
        assert!(moll.f.iter().all(|&v| v >= 0.0));
        // Support grows by at most eps per side (plus one cell).
        let (sx0, _) = state.support_box();
        let (sx1, _) = moll.support_box();
        assert!(sx1 <= sx0 + 0.2 + state.grid.hx() + 1e-12);
        // Mean velocity re-centered.
        assert!(moll.moments().m1[0].abs() < 1e-12);
    }

    #[test]
    fn mollify_tiny_eps_is_identity() {
        let state = KineticState::indicator(test_grid(), 1.0, 1.0).unwrap();
        let moll = state.mollify_initial(1e-6).unwrap();
        for (a, b) in state.f.iter().zip(&moll.f) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn mollify_rejects_support_overflow() {
        let state = KineticState::indicator(test_grid(), 1.9, 1.0).unwrap();
        assert!(matches!(
            state.mollify_initial(0.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn field_odd_integrand_vanishes() {
        // f symmetric in v about 0, query at v = 0: F_a = 0 up to quadrature.
        let state = KineticState::indicator(test_grid(), 1.0, 1.0).unwrap();
        let w = CommWeight::rational_floor(0.1, 1.0).unwrap();
        let f = field_fa(&state, &w, 0.3, 0.0).unwrap();
        assert!(f.abs() < 1e-10, "F_a = {f}");
    }

    #[test]
    fn field_delta_limit() {
        // Mass concentrated near (x0, v0) with phi = 1: F_a ~ v0 - v.
        let grid = test_grid();
        let (x0, v0) = (0.4, -0.6);
        let width = 0.1;
        let state = KineticState::from_density(grid, |x, v| {
            if (x - x0).abs() <= width && (v - v0).abs() <= width {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let w = CommWeight::constant(1.0).unwrap();
        let query_v = 0.8;
        let f = field_fa(&state, &w, -0.2, query_v).unwrap();
        assert!(
            (f - (v0 - query_v)).abs() < 4.0 * width * width + 0.05,
            "F_a = {f} vs {}",
            v0 - query_v
        );
    }

    #[test]
    fn field_moment_identity() {
        // v above all support velocities, phi = 1: F_a = M1 - v M0 = -v.
        let state = KineticState::indicator(test_grid(), 1.0, 1.0).unwrap();
        let w = CommWeight::constant(1.0).unwrap();
        let v = 1.8;
        let f = field_fa(&state, &w, 0.0, v).unwrap();
        assert!((f + v).abs() < 1e-8, "F_a = {f}");
    }

    #[test]
    fn div_v_bounds() {
        let state = KineticState::indicator(test_grid(), 1.0, 1.0).unwrap();
        let w = CommWeight::rational_floor(0.4, 1.0).unwrap();
        for &x in &[-1.5, -0.3, 0.0, 0.9, 1.7] {
            let div = div_v_fa(&state, &w, x).unwrap();
            assert!(div <= -0.4 + 1e-9 && div >= -1.0 - 1e-9, "div {div} at {x}");
        }
        // phi = 1 with unit mass: exactly -1 up to quadrature.
        let w1 = CommWeight::constant(1.0).unwrap();
        assert!((div_v_fa(&state, &w1, 0.2).unwrap() + 1.0).abs() < 1e-10);
        // Zero state: zero divergence.
        let z = KineticState::zero(test_grid());
        assert_eq!(div_v_fa(&z, &w1, 0.0).unwrap(), 0.0);
        assert!(field_fa(&state, &w1, 5.0, 0.0).is_err());
    }

    #[test]
    fn envelopes_monotone_and_validate() {
        let path = WienerPath::sample(3, 0.5, 0.01).unwrap();
        let env = support_envelopes(1.6, 1.0, 1.0 / 3.0, 0.3, &path);
        // X envelope grows with t by construction.
        for k in 1..env.t.len() {
            assert!(env.x_env[k] >= env.x_env[k - 1] - 1e-12);
        }
        let big = PhaseGrid::centered(8.0, 8.0, 65, 65).unwrap();
        assert!(validate_grid_against_envelopes(&big, &env).is_ok());
        let small = PhaseGrid::centered(2.0, 2.0, 65, 65).unwrap();
        assert!(matches!(
            validate_grid_against_envelopes(&small, &env),
            Err(Error::GridTooSmall { .. })
        ));
    }

    #[test]
    fn particle_sampling_matches_density_moments() {
        let state = KineticState::indicator(test_grid(), 1.0, 1.0)
            .unwrap()
            .mollify_initial(0.15)
            .unwrap();
        let ens = state.sample_particles(4096, 9).unwrap();
        use crate::observables::PhaseObservables as _;
        let mp = ens.moments();
        let mk = state.moments();
        assert!(mp.m1[0].abs() < 1e-12); // centered
        assert!(
            (mp.m2 - mk.m2).abs() < 0.05 * mk.m2,
            "particle M2 {} vs kinetic {}",
            mp.m2,
            mk.m2
        );
    }
}
