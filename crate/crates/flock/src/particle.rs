//! The N-particle Cucker-Smale engine.
//!
//! Dynamics per particle (d-dimensional):
//!
//! ```text
//! dx_i = v_i dt
//! dv_i = F_i dt + sigma (vbar - v_i) o dW        (Stratonovich, common noise)
//! dv_i = [F_i - sigma^2/2 (vbar - v_i)] dt + sigma (vbar - v_i) dW_i   (Ito)
//! F_i  = (1/N) sum_j phi(|x_j - x_i|) (v_j - v_i)
//! ```
//!
//! Force evaluation is direct O(N^2); N stays at desk scale and exactness
//! keeps oracle comparisons clean. Stepping reads an immutable snapshot and
//! writes the next state, so particles parallelize without aliasing and the
//! result is bit-identical to the serial loop (each row sum stays serial).

use crate::config::{NoiseMode, SimConfig};
use crate::error::{Error, Result};
use crate::observables::{MomentSeries, Moments, PhaseObservables};
use crate::weight::CommWeight;
use crate::wiener::{derive_seed, WienerPath};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::io::Write;

/// Abort a replica when max|v| exceeds this multiple of its initial scale.
const BLOWUP_FACTOR: f64 = 1e6;

/// Run forces in parallel only past this particle count.
const PAR_THRESHOLD: usize = 256;

/// Positions and velocities of N particles in dimension d at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    d: usize,
    /// Flattened N x d positions.
    x: Vec<f64>,
    /// Flattened N x d velocities.
    v: Vec<f64>,
    t: f64,
    noise_mode: NoiseMode,
}

/// Noise increments consumed by one Ito step.
#[derive(Debug, Clone, Copy)]
pub enum Increments<'a> {
    /// One scalar increment shared by all particles.
    Common(f64),
    /// One increment per particle (i.i.d. mode).
    PerParticle(&'a [f64]),
}

impl ParticleEnsemble {
    pub fn from_parts(
        d: usize,
        x: Vec<f64>,
        v: Vec<f64>,
        t: f64,
        noise_mode: NoiseMode,
    ) -> Result<Self> {
        if d == 0 || x.is_empty() || x.len() != v.len() || x.len() % d != 0 {
            return Err(Error::Shape(format!(
                "inconsistent ensemble: d = {d}, |x| = {}, |v| = {}",
                x.len(),
                v.len()
            )));
        }
        if x.iter().chain(v.iter()).any(|a| !a.is_finite()) {
            return Err(Error::Shape("non-finite entries in ensemble".into()));
        }
        Ok(ParticleEnsemble {
            d,
            x,
            v,
            t,
            noise_mode,
        })
    }

    /// Default initial condition: uniform on `[-1,1]^d x [-1,1]^d`, then
    /// velocities shifted so the mean velocity vanishes (the normalized
    /// first moment every flocking statement assumes).
    pub fn sample_uniform(n: usize, d: usize, seed: u64, noise_mode: NoiseMode) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(n * d);
        let mut v = Vec::with_capacity(n * d);
        for _ in 0..n {
            for _ in 0..d {
                x.push(rng.gen_range(-1.0..1.0));
            }
            for _ in 0..d {
                v.push(rng.gen_range(-1.0..1.0));
            }
        }
        let mut ens = ParticleEnsemble {
            d,
            x,
            v,
            t: 0.0,
            noise_mode,
        };
        ens.center_velocities();
        ens
    }

    /// Shift all velocities so the empirical mean velocity is zero.
    pub fn center_velocities(&mut self) {
        let vbar = self.vbar();
        for i in 0..self.n() {
            for k in 0..self.d {
                self.v[i * self.d + k] -= vbar[k];
            }
        }
    }

    pub fn n(&self) -> usize {
        self.x.len() / self.d
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn noise_mode(&self) -> NoiseMode {
        self.noise_mode
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.v[i * self.d..(i + 1) * self.d]
    }

    /// Empirical mean velocity.
    pub fn vbar(&self) -> Vec<f64> {
        let n = self.n();
        let mut vbar = vec![0.0; self.d];
        for i in 0..n {
            for k in 0..self.d {
                vbar[k] += self.v[i * self.d + k];
            }
        }
        vbar.iter_mut().for_each(|c| *c /= n as f64);
        vbar
    }

    pub fn max_speed(&self) -> f64 {
        (0..self.n())
            .map(|i| norm(self.velocity(i)))
            .fold(0.0, f64::max)
    }

    /// Alignment force on particle `i`.
    pub fn flocking_force(&self, w: &CommWeight, i: usize) -> Result<Vec<f64>> {
        if i >= self.n() {
            return Err(Error::Domain(format!(
                "particle index {i} out of range (N = {})",
                self.n()
            )));
        }
        let mut out = vec![0.0; self.d];
        self.force_into(w, i, &mut out);
        Ok(out)
    }

    fn force_into(&self, w: &CommWeight, i: usize, out: &mut [f64]) {
        let (n, d) = (self.n(), self.d);
        let xi = self.position(i);
        let vi = self.velocity(i);
        out.iter_mut().for_each(|c| *c = 0.0);
        for j in 0..n {
            let xj = &self.x[j * d..j * d + d];
            let mut r2 = 0.0;
            for k in 0..d {
                let dx = xj[k] - xi[k];
                r2 += dx * dx;
            }
            let phi = w.value(r2.sqrt());
            let vj = &self.v[j * d..j * d + d];
            for k in 0..d {
                out[k] += phi * (vj[k] - vi[k]);
            }
        }
        let inv_n = 1.0 / n as f64;
        out.iter_mut().for_each(|c| *c *= inv_n);
    }

    /// All alignment forces, flattened N x d. O(N^2); parallel over
    /// particles with serial row sums, so thread count never changes bits.
    pub fn flocking_forces(&self, w: &CommWeight) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n * self.d];
        if n >= PAR_THRESHOLD {
            out.par_chunks_mut(self.d)
                .enumerate()
                .for_each(|(i, fi)| self.force_into(w, i, fi));
        } else {
            for (i, fi) in out.chunks_mut(self.d).enumerate() {
                self.force_into(w, i, fi);
            }
        }
        out
    }

    /// One Heun step of the common-noise Stratonovich system: every particle
    /// shares the scalar increment `dw`. Conserves the mean velocity to
    /// roundoff (the force sum and the noise coefficients both sum to zero,
    /// and Heun preserves linear invariants).
    pub fn step_stratonovich(
        &self,
        w: &CommWeight,
        sigma: f64,
        dw: f64,
        dt: f64,
    ) -> Result<ParticleEnsemble> {
        if self.noise_mode == NoiseMode::Independent {
            return Err(Error::Config(
                "step_stratonovich requires common-noise (or noise-free) mode".into(),
            ));
        }
        let (n, d) = (self.n(), self.d);
        let f0 = self.flocking_forces(w);
        let vbar0 = self.vbar();

        let mut xp = vec![0.0; n * d];
        let mut vp = vec![0.0; n * d];
        for i in 0..n {
            for k in 0..d {
                let idx = i * d + k;
                xp[idx] = self.x[idx] + self.v[idx] * dt;
                vp[idx] =
                    self.v[idx] + f0[idx] * dt + sigma * (vbar0[k] - self.v[idx]) * dw;
            }
        }
        let pred = ParticleEnsemble {
            d,
            x: xp,
            v: vp,
            t: self.t + dt,
            noise_mode: self.noise_mode,
        };
        let f1 = pred.flocking_forces(w);
        let vbar1 = pred.vbar();

        let mut x = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        for i in 0..n {
            for k in 0..d {
                let idx = i * d + k;
                x[idx] = self.x[idx] + 0.5 * (self.v[idx] + pred.v[idx]) * dt;
                v[idx] = self.v[idx]
                    + 0.5 * (f0[idx] + f1[idx]) * dt
                    + 0.5
                        * sigma
                        * ((vbar0[k] - self.v[idx]) + (vbar1[k] - pred.v[idx]))
                        * dw;
            }
        }
        self.finite_state(x, v, dt)
    }

    /// One Euler-Maruyama step of the Ito form
    /// `dv = [F - sigma^2/2 (vbar - v)] dt + sigma (vbar - v) dW`.
    pub fn step_ito(
        &self,
        w: &CommWeight,
        sigma: f64,
        incr: Increments<'_>,
        dt: f64,
    ) -> Result<ParticleEnsemble> {
        let (n, d) = (self.n(), self.d);
        match (self.noise_mode, incr) {
            (NoiseMode::Independent, Increments::PerParticle(dws)) if dws.len() != n => {
                return Err(Error::Shape(format!(
                    "expected {n} per-particle increments, got {}",
                    dws.len()
                )));
            }
            (NoiseMode::Independent, Increments::Common(_)) => {
                return Err(Error::Shape(
                    "independent mode needs per-particle increments".into(),
                ));
            }
            (NoiseMode::Common | NoiseMode::None, Increments::PerParticle(_)) => {
                return Err(Error::Shape(
                    "common mode takes one scalar increment".into(),
                ));
            }
            _ => {}
        }
        let f = self.flocking_forces(w);
        let vbar = self.vbar();
        let half_s2 = 0.5 * sigma * sigma;

        let mut x = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        for i in 0..n {
            let dw = match incr {
                Increments::Common(dw) => dw,
                Increments::PerParticle(dws) => dws[i],
            };
            for k in 0..d {
                let idx = i * d + k;
                let relax = vbar[k] - self.v[idx];
                x[idx] = self.x[idx] + self.v[idx] * dt;
                v[idx] = self.v[idx] + (f[idx] - half_s2 * relax) * dt + sigma * relax * dw;
            }
        }
        self.finite_state(x, v, dt)
    }

    /// Heun step of the Stratonovich system with per-particle increments
    /// (used to measure the Ito-form discrepancy in i.i.d. mode; the common
    /// form is [`ParticleEnsemble::step_stratonovich`]).
    pub fn step_stratonovich_independent(
        &self,
        w: &CommWeight,
        sigma: f64,
        dws: &[f64],
        dt: f64,
    ) -> Result<ParticleEnsemble> {
        let (n, d) = (self.n(), self.d);
        if dws.len() != n {
            return Err(Error::Shape(format!(
                "expected {n} per-particle increments, got {}",
                dws.len()
            )));
        }
        let f0 = self.flocking_forces(w);
        let vbar0 = self.vbar();
        let mut xp = vec![0.0; n * d];
        let mut vp = vec![0.0; n * d];
        for i in 0..n {
            for k in 0..d {
                let idx = i * d + k;
                xp[idx] = self.x[idx] + self.v[idx] * dt;
                vp[idx] = self.v[idx] + f0[idx] * dt + sigma * (vbar0[k] - self.v[idx]) * dws[i];
            }
        }
        let pred = ParticleEnsemble {
            d,
            x: xp,
            v: vp,
            t: self.t + dt,
            noise_mode: self.noise_mode,
        };
        let f1 = pred.flocking_forces(w);
        let vbar1 = pred.vbar();
        let mut x = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        for i in 0..n {
            for k in 0..d {
                let idx = i * d + k;
                x[idx] = self.x[idx] + 0.5 * (self.v[idx] + pred.v[idx]) * dt;
                v[idx] = self.v[idx]
                    + 0.5 * (f0[idx] + f1[idx]) * dt
                    + 0.5
                        * sigma
                        * ((vbar0[k] - self.v[idx]) + (vbar1[k] - pred.v[idx]))
                        * dws[i];
            }
        }
        self.finite_state(x, v, dt)
    }

    fn finite_state(&self, x: Vec<f64>, v: Vec<f64>, dt: f64) -> Result<ParticleEnsemble> {
        if x.iter().chain(v.iter()).any(|a| !a.is_finite()) {
            return Err(Error::Blowup {
                step: (self.t / dt).round() as usize + 1,
                t: self.t + dt,
                what: "non-finite particle state".into(),
            });
        }
        Ok(ParticleEnsemble {
            d: self.d,
            x,
            v,
            t: self.t + dt,
            noise_mode: self.noise_mode,
        })
    }
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|c| c * c).sum::<f64>().sqrt()
}

impl PhaseObservables for ParticleEnsemble {
    fn dim(&self) -> usize {
        self.d
    }

    fn moments(&self) -> Moments {
        let n = self.n();
        let mut m1 = vec![0.0; self.d];
        let mut m2 = 0.0;
        for i in 0..n {
            let vi = self.velocity(i);
            for k in 0..self.d {
                m1[k] += vi[k];
            }
            m2 += vi.iter().map(|c| c * c).sum::<f64>();
        }
        let inv_n = 1.0 / n as f64;
        m1.iter_mut().for_each(|c| *c *= inv_n);
        Moments {
            m0: 1.0,
            m1,
            m2: m2 * inv_n,
        }
    }

    fn supports(&self) -> (f64, f64) {
        let sx = (0..self.n())
            .map(|i| norm(self.position(i)))
            .fold(0.0, f64::max);
        (sx, self.max_speed())
    }

    fn fluctuation_energy(&self, vbar0: &[f64]) -> f64 {
        let n = self.n();
        let mut acc = 0.0;
        for i in 0..n {
            let vi = self.velocity(i);
            for k in 0..self.d {
                let gap = vbar0[k] - vi[k];
                acc += gap * gap;
            }
        }
        acc / n as f64
    }
}

/// Time-stepping scheme for [`run_on_path`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Heun on the Stratonovich form.
    Stratonovich,
    /// Euler-Maruyama on the Ito form.
    Ito,
}

/// One run's output: thinned snapshots plus the full observable series.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub snap_times: Vec<f64>,
    pub snapshots: Vec<ParticleEnsemble>,
    /// Observables at every step of the path grid.
    pub moments: MomentSeries,
    pub path_seed: u64,
    pub config_hash: u64,
}

impl TrajectoryRecord {
    pub fn final_state(&self) -> &ParticleEnsemble {
        self.snapshots.last().unwrap()
    }

    /// CSV `t,i,x_0..,v_0..` over all snapshots.
    pub fn write_snapshots_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let d = self.final_state().d();
        write!(out, "t,i")?;
        for k in 0..d {
            write!(out, ",x{k}")?;
        }
        for k in 0..d {
            write!(out, ",v{k}")?;
        }
        writeln!(out)?;
        for (t, snap) in self.snap_times.iter().zip(&self.snapshots) {
            for i in 0..snap.n() {
                write!(out, "{t},{i}")?;
                for c in snap.position(i) {
                    write!(out, ",{c}")?;
                }
                for c in snap.velocity(i) {
                    write!(out, ",{c}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Replica-local seed streams derived from the master seed.
pub fn replica_init_seed(master: u64, replica: usize) -> u64 {
    derive_seed(master, 2 * replica as u64)
}

pub fn replica_noise_seed(master: u64, replica: usize) -> u64 {
    derive_seed(master, 2 * replica as u64 + 1)
}

fn check_path_grid(config: &SimConfig, path: &WienerPath) -> Result<()> {
    if (path.dt() - config.dt).abs() > 1e-15 * config.dt.max(1.0) || path.steps() < config.steps()
    {
        return Err(Error::Shape(format!(
            "path grid (dt = {}, steps = {}) does not cover config (dt = {}, steps = {})",
            path.dt(),
            path.steps(),
            config.dt,
            config.steps()
        )));
    }
    Ok(())
}

/// Integrate one replica along an explicit common path (or a zero path for
/// the deterministic mode), recording observables at every step and
/// snapshots every `snapshot_every` steps.
pub fn run_on_path(
    config: &SimConfig,
    init: &ParticleEnsemble,
    path: &WienerPath,
    scheme: Scheme,
    snapshot_every: usize,
) -> Result<TrajectoryRecord> {
    if config.noise_mode == NoiseMode::Independent {
        return Err(Error::Config(
            "run_on_path covers common/none modes; use run_independent".into(),
        ));
    }
    check_path_grid(config, path)?;
    let sigma = if config.noise_mode == NoiseMode::None {
        0.0
    } else {
        config.sigma
    };
    let cadence = snapshot_every.max(1);
    let steps = config.steps();
    let v_scale = init.max_speed().max(1e-12);

    let mut record = TrajectoryRecord {
        snap_times: vec![0.0],
        snapshots: vec![init.clone()],
        moments: MomentSeries::new(config.d, path.seed()),
        path_seed: path.seed(),
        config_hash: config.hash(),
    };
    record.moments.record(0.0, init);

    let mut state = init.clone();
    for k in 0..steps {
        let dw = if config.noise_mode == NoiseMode::None {
            0.0
        } else {
            path.increment(k)
        };
        state = match scheme {
            Scheme::Stratonovich => state.step_stratonovich(&config.weight, sigma, dw, config.dt),
            Scheme::Ito => state.step_ito(&config.weight, sigma, Increments::Common(dw), config.dt),
        }
        .map_err(|e| annotate_step(e, k))?;
        if state.max_speed() > BLOWUP_FACTOR * v_scale {
            return Err(Error::Blowup {
                step: k + 1,
                t: state.t(),
                what: format!("max speed exceeded {BLOWUP_FACTOR:e} x initial scale"),
            });
        }
        record.moments.record(state.t(), &state);
        if (k + 1) % cadence == 0 || k + 1 == steps {
            record.snap_times.push(state.t());
            record.snapshots.push(state.clone());
        }
    }
    Ok(record)
}

/// Integrate one replica with i.i.d. per-particle noises drawn from
/// `noise_seed` (increments are generated on the fly; there is no shared
/// path to reuse in this mode).
pub fn run_independent(
    config: &SimConfig,
    init: &ParticleEnsemble,
    noise_seed: u64,
    scheme: Scheme,
    snapshot_every: usize,
) -> Result<TrajectoryRecord> {
    if config.noise_mode != NoiseMode::Independent {
        return Err(Error::Config("config is not in independent mode".into()));
    }
    let cadence = snapshot_every.max(1);
    let steps = config.steps();
    let v_scale = init.max_speed().max(1e-12);
    let mut rng = ChaCha12Rng::seed_from_u64(noise_seed);
    let sqrt_dt = config.dt.sqrt();

    let mut record = TrajectoryRecord {
        snap_times: vec![0.0],
        snapshots: vec![init.clone()],
        moments: MomentSeries::new(config.d, noise_seed),
        path_seed: noise_seed,
        config_hash: config.hash(),
    };
    record.moments.record(0.0, init);

    let mut dws = vec![0.0; config.n];
    let mut state = init.clone();
    for k in 0..steps {
        for dw in dws.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *dw = sqrt_dt * z;
        }
        state = match scheme {
            Scheme::Ito => state.step_ito(
                &config.weight,
                config.sigma,
                Increments::PerParticle(&dws),
                config.dt,
            ),
            Scheme::Stratonovich => {
                state.step_stratonovich_independent(&config.weight, config.sigma, &dws, config.dt)
            }
        }
        .map_err(|e| annotate_step(e, k))?;
        if state.max_speed() > BLOWUP_FACTOR * v_scale {
            return Err(Error::Blowup {
                step: k + 1,
                t: state.t(),
                what: format!("max speed exceeded {BLOWUP_FACTOR:e} x initial scale"),
            });
        }
        record.moments.record(state.t(), &state);
        if (k + 1) % cadence == 0 || k + 1 == steps {
            record.snap_times.push(state.t());
            record.snapshots.push(state.clone());
        }
    }
    Ok(record)
}

/// Full simulation from a config alone: initial data and driving noise are
/// derived from `config.seed` (replica 0 streams).
pub fn run(config: &SimConfig, scheme: Scheme, snapshot_every: usize) -> Result<TrajectoryRecord> {
    let init = ParticleEnsemble::sample_uniform(
        config.n,
        config.d,
        replica_init_seed(config.seed, 0),
        config.noise_mode,
    );
    match config.noise_mode {
        NoiseMode::Independent => run_independent(
            config,
            &init,
            replica_noise_seed(config.seed, 0),
            scheme,
            snapshot_every,
        ),
        NoiseMode::Common => {
            let path = WienerPath::sample(
                replica_noise_seed(config.seed, 0),
                config.t_final,
                config.dt,
            )?;
            run_on_path(config, &init, &path, scheme, snapshot_every)
        }
        NoiseMode::None => {
            let path = WienerPath::zero(config.t_final, config.dt)?;
            run_on_path(config, &init, &path, scheme, snapshot_every)
        }
    }
}

/// Classical RK4 on the smoothed-noise system (the Wong-Zakai regularized
/// equations): `v' = F + sigma (vbar - v) dW^eps/dt`, with sub-steps sized
/// to resolve the kernel half-width `eps`. Observables are recorded on the
/// base path grid so records stay comparable across methods.
pub fn run_wong_zakai(
    config: &SimConfig,
    init: &ParticleEnsemble,
    path: &WienerPath,
    eps: f64,
    snapshot_every: usize,
) -> Result<TrajectoryRecord> {
    check_path_grid(config, path)?;
    let smooth = path.mollify(eps)?;
    let cadence = snapshot_every.max(1);
    let steps = config.steps();
    let (n, d) = (config.n, config.d);
    let sigma = if config.noise_mode == NoiseMode::None {
        0.0
    } else {
        config.sigma
    };
    let v_scale = init.max_speed().max(1e-12);
    let substeps = ((4.0 * config.dt / eps).ceil() as usize).clamp(2, 4096);
    let h = config.dt / substeps as f64;

    // Phase-space derivative of the regularized ODE at time t.
    let deriv = |t: f64, state: &ParticleEnsemble, out_x: &mut [f64], out_v: &mut [f64]| {
        let f = state.flocking_forces(&config.weight);
        let vbar = state.vbar();
        let w_dot = smooth.derivative(t);
        for i in 0..n {
            for k in 0..d {
                let idx = i * d + k;
                out_x[idx] = state.v[idx];
                out_v[idx] = f[idx] + sigma * (vbar[k] - state.v[idx]) * w_dot;
            }
        }
    };

    let mut record = TrajectoryRecord {
        snap_times: vec![0.0],
        snapshots: vec![init.clone()],
        moments: MomentSeries::new(d, path.seed()),
        path_seed: path.seed(),
        config_hash: config.hash(),
    };
    record.moments.record(0.0, init);

    let mut state = init.clone();
    let (mut kx1, mut kv1) = (vec![0.0; n * d], vec![0.0; n * d]);
    let (mut kx2, mut kv2) = (kx1.clone(), kv1.clone());
    let (mut kx3, mut kv3) = (kx1.clone(), kv1.clone());
    let (mut kx4, mut kv4) = (kx1.clone(), kv1.clone());
    for k in 0..steps {
        for s in 0..substeps {
            let t = state.t();
            deriv(t, &state, &mut kx1, &mut kv1);
            let mid1 = advance(&state, &kx1, &kv1, 0.5 * h);
            deriv(t + 0.5 * h, &mid1, &mut kx2, &mut kv2);
            let mid2 = advance(&state, &kx2, &kv2, 0.5 * h);
            deriv(t + 0.5 * h, &mid2, &mut kx3, &mut kv3);
            let end = advance(&state, &kx3, &kv3, h);
            deriv(t + h, &end, &mut kx4, &mut kv4);

            let mut x = state.x.clone();
            let mut v = state.v.clone();
            for idx in 0..n * d {
                x[idx] += h / 6.0 * (kx1[idx] + 2.0 * kx2[idx] + 2.0 * kx3[idx] + kx4[idx]);
                v[idx] += h / 6.0 * (kv1[idx] + 2.0 * kv2[idx] + 2.0 * kv3[idx] + kv4[idx]);
            }
            state = state
                .finite_state(x, v, h)
                .map_err(|e| annotate_step(e, k * substeps + s))?;
        }
        if state.max_speed() > BLOWUP_FACTOR * v_scale {
            return Err(Error::Blowup {
                step: k + 1,
                t: state.t(),
                what: "max speed exceeded blowup threshold".into(),
            });
        }
        record.moments.record(state.t(), &state);
        if (k + 1) % cadence == 0 || k + 1 == steps {
            record.snap_times.push(state.t());
            record.snapshots.push(state.clone());
        }
    }
    Ok(record)
}

fn advance(base: &ParticleEnsemble, kx: &[f64], kv: &[f64], h: f64) -> ParticleEnsemble {
    let mut x = base.x.clone();
    let mut v = base.v.clone();
    for idx in 0..x.len() {
        x[idx] += h * kx[idx];
        v[idx] += h * kv[idx];
    }
    ParticleEnsemble {
        d: base.d,
        x,
        v,
        t: base.t + h,
        noise_mode: base.noise_mode,
    }
}

fn annotate_step(e: Error, step: usize) -> Error {
    match e {
        Error::Blowup { t, what, .. } => Error::Blowup { step, t, what },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pair_1d(v0: f64, v1: f64, gap: f64) -> ParticleEnsemble {
        ParticleEnsemble::from_parts(
            1,
            vec![-0.5 * gap, 0.5 * gap],
            vec![v0, v1],
            0.0,
            NoiseMode::Common,
        )
        .unwrap()
    }

    #[test]
    fn equal_velocities_give_zero_force() {
        let ens = ParticleEnsemble::from_parts(
            2,
            vec![0.0, 0.0, 1.0, 0.5, -1.0, 2.0],
            vec![0.3, -0.2, 0.3, -0.2, 0.3, -0.2],
            0.0,
            NoiseMode::Common,
        )
        .unwrap();
        let w = CommWeight::rational_floor(0.1, 1.0).unwrap();
        for f in ens.flocking_forces(&w) {
            assert!(f.abs() < 1e-15);
        }
    }

    #[test]
    fn hand_evaluated_pair_force() {
        let ens = pair_1d(1.0, -1.0, 1.0);
        let w = CommWeight::constant(1.0).unwrap();
        let f0 = ens.flocking_force(&w, 0).unwrap();
        assert_relative_eq!(f0[0], -1.0);
        assert!(ens.flocking_force(&w, 2).is_err());
    }

    #[test]
    fn forces_sum_to_zero() {
        let ens = ParticleEnsemble::sample_uniform(300, 2, 9, NoiseMode::Common);
        let w = CommWeight::rational_floor(0.1, 1.0).unwrap();
        let f = ens.flocking_forces(&w);
        let max_v = ens.max_speed();
        for k in 0..2 {
            let total: f64 = (0..ens.n()).map(|i| f[i * 2 + k]).sum();
            assert!(
                total.abs() <= 1e-12 * ens.n() as f64 * max_v,
                "component {k}: {total}"
            );
        }
    }

    #[test]
    fn strat_step_without_noise_is_heun() {
        let w = CommWeight::constant(1.0).unwrap();
        let ens = pair_1d(1.0, -1.0, 1.0);
        let dt = 0.01;
        let stepped = ens.step_stratonovich(&w, 0.0, 0.123, dt).unwrap();
        // Hand Heun on dw = -w for the velocity gap (vbar = 0):
        // per particle dv = -v, so v' = v (1 - dt + dt^2/2).
        let factor = 1.0 - dt + 0.5 * dt * dt;
        assert_relative_eq!(stepped.velocity(0)[0], factor, max_relative = 1e-13);
        assert_relative_eq!(stepped.velocity(1)[0], -factor, max_relative = 1e-13);
    }

    #[test]
    fn single_particle_velocity_constant() {
        let ens = ParticleEnsemble::from_parts(1, vec![0.3], vec![0.7], 0.0, NoiseMode::Common)
            .unwrap();
        let w = CommWeight::constant(1.0).unwrap();
        let stepped = ens.step_stratonovich(&w, 0.8, 0.31, 0.01).unwrap();
        assert_relative_eq!(stepped.velocity(0)[0], 0.7, max_relative = 1e-15);
    }

    /// N = 2 closed form: the velocity gap obeys
    /// w_t = w_0 exp(-phi t - sigma W_t); Heun matches within 5 dt relative.
    #[test]
    fn pair_matches_scalar_closed_form() {
        let (sigma, dt, t_final) = (0.5, 1.0 / 1024.0, 1.0);
        let w = CommWeight::constant(1.0).unwrap();
        let path = WienerPath::sample(77, t_final, dt).unwrap();
        let mut state = pair_1d(1.0, -1.0, 0.8);
        for k in 0..path.steps() {
            state = state
                .step_stratonovich(&w, sigma, path.increment(k), dt)
                .unwrap();
        }
        let gap = state.velocity(0)[0] - state.velocity(1)[0];
        let exact = 2.0 * (-t_final - sigma * path.values()[path.steps()]).exp();
        assert!(
            ((gap - exact) / exact).abs() < 5.0 * dt,
            "gap {gap} vs {exact}"
        );
    }

    #[test]
    fn mean_velocity_conserved_under_common_noise() {
        let config = SimConfig {
            d: 2,
            n: 32,
            t_final: 1.0,
            dt: 0.005,
            sigma: 0.6,
            ..SimConfig::default()
        };
        let rec = run(&config, Scheme::Stratonovich, 50).unwrap();
        let tol = 1e-10 * config.n as f64 * rec.snapshots[0].max_speed();
        for k in 0..rec.moments.len() {
            assert!(
                rec.moments.m1_norm_at(k) <= tol,
                "mean velocity drifted at step {k}: {}",
                rec.moments.m1_norm_at(k)
            );
        }
        // Mass is structural.
        assert!(rec.moments.m0.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn ito_step_with_zero_sigma_is_euler() {
        let w = CommWeight::constant(1.0).unwrap();
        let ens = pair_1d(1.0, -1.0, 1.0);
        let dt = 0.01;
        let stepped = ens
            .step_ito(&w, 0.0, Increments::Common(0.4), dt)
            .unwrap();
        assert_relative_eq!(stepped.velocity(0)[0], 1.0 - dt, max_relative = 1e-14);
    }

    #[test]
    fn increment_mode_mismatch_rejected() {
        let w = CommWeight::constant(1.0).unwrap();
        let common = pair_1d(1.0, -1.0, 1.0);
        assert!(common
            .step_ito(&w, 0.5, Increments::PerParticle(&[0.1, 0.2]), 0.01)
            .is_err());
        let indep = ParticleEnsemble::from_parts(
            1,
            vec![0.0, 1.0],
            vec![1.0, -1.0],
            0.0,
            NoiseMode::Independent,
        )
        .unwrap();
        assert!(indep
            .step_ito(&w, 0.5, Increments::Common(0.1), 0.01)
            .is_err());
        assert!(indep
            .step_ito(&w, 0.5, Increments::PerParticle(&[0.1]), 0.01)
            .is_err());
        assert!(indep.step_stratonovich(&w, 0.5, 0.1, 0.01).is_err());
    }

    #[test]
    fn run_is_deterministic() {
        let config = SimConfig {
            n: 8,
            d: 2,
            t_final: 0.5,
            dt: 0.01,
            ..SimConfig::default()
        };
        let a = run(&config, Scheme::Stratonovich, 10).unwrap();
        let b = run(&config, Scheme::Stratonovich, 10).unwrap();
        assert_eq!(a.final_state(), b.final_state());
        assert_eq!(a.moments.m2, b.moments.m2);
        assert_eq!(a.config_hash, b.config_hash);
    }

    #[test]
    fn zero_horizon_keeps_initial_ensemble_only() {
        // t_final == dt gives exactly one step; the degenerate "initial
        // record only" shape comes from requesting zero steps.
        let config = SimConfig {
            n: 4,
            t_final: 0.01,
            dt: 0.01,
            ..SimConfig::default()
        };
        let init = ParticleEnsemble::sample_uniform(4, 1, 3, NoiseMode::Common);
        let path = WienerPath::sample(1, 0.01, 0.01).unwrap();
        let mut cfg0 = config.clone();
        cfg0.t_final = 0.0;
        // steps() == 0: record holds the initial ensemble alone.
        assert_eq!(cfg0.steps(), 0);
        let rec = run_on_path(&cfg0, &init, &path, Scheme::Stratonovich, 1).unwrap();
        assert_eq!(rec.snapshots.len(), 1);
        assert_eq!(rec.moments.len(), 1);
    }

    /// Pathwise dissipation with constant weight: M2(t) matches
    /// M2(0) exp(-2 phi t - 2 sigma W_t) within 10 dt relative error.
    #[test]
    fn m2_tracks_exact_exponential() {
        let config = SimConfig {
            d: 1,
            n: 16,
            t_final: 1.0,
            dt: 1.0 / 1024.0,
            sigma: 0.4,
            seed: 5,
            ..SimConfig::default()
        };
        let rec = run(&config, Scheme::Stratonovich, 1024).unwrap();
        let path = WienerPath::sample(
            replica_noise_seed(config.seed, 0),
            config.t_final,
            config.dt,
        )
        .unwrap();
        let m2_0 = rec.moments.m2[0];
        for k in 0..rec.moments.len() {
            let exact =
                m2_0 * (-2.0 * rec.moments.t[k] - 2.0 * config.sigma * path.values()[k]).exp();
            assert!(
                ((rec.moments.m2[k] - exact) / exact).abs() <= 10.0 * config.dt,
                "step {k}: {} vs {exact}",
                rec.moments.m2[k]
            );
        }
    }

    #[test]
    fn wong_zakai_without_noise_matches_deterministic_run() {
        let config = SimConfig {
            d: 1,
            n: 8,
            t_final: 1.0,
            dt: 0.01,
            sigma: 0.0,
            noise_mode: NoiseMode::None,
            ..SimConfig::default()
        };
        let init = ParticleEnsemble::sample_uniform(8, 1, 11, NoiseMode::None);
        let path = WienerPath::zero(config.t_final, config.dt).unwrap();
        let het = run_on_path(&config, &init, &path, Scheme::Stratonovich, 100).unwrap();
        let wz = run_wong_zakai(&config, &init, &path, 0.05, 100).unwrap();
        let tol = 10.0 * config.dt * config.dt * config.t_final;
        for (a, b) in het.final_state().v().iter().zip(wz.final_state().v()) {
            assert!((a - b).abs() <= tol, "{a} vs {b}");
        }
    }
}
