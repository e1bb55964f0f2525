//! Wasserstein-2 machinery on empirical measures and the mean-field
//! experiments: pathwise stability and propagation of chaos under common
//! noise.
//!
//! For two uniform empirical measures with equal atom counts, W2 reduces to
//! a minimum-cost perfect matching with squared Euclidean costs; the solver
//! is the shortest-augmenting-path assignment algorithm with potentials
//! (O(N^3), exact). Unequal counts are handled by splitting atoms to the
//! lcm (exact for uniform weights) while the split size stays at desk
//! scale, and by entropic regularization with plan rounding beyond that —
//! flagged, since the regularized value is only an upper bound.

use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::particle::{run_on_path, ParticleEnsemble, Scheme, TrajectoryRecord};
use crate::wiener::WienerPath;
use rayon::prelude::*;

/// Split threshold for the exact lcm route on unequal atom counts.
const MAX_EXACT_SIZE: usize = 4096;

/// Entropic regularization strength (fraction of the mean cost) for the
/// approximate route beyond [`MAX_EXACT_SIZE`].
const SINKHORN_EPS_FRACTION: f64 = 0.01;
const SINKHORN_MAX_ITERS: usize = 500;

/// A uniformly weighted empirical measure on phase space R^{2d}:
/// atoms `(x, v)` with weight `1/N` each.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    /// Flattened atoms, stride `dim`.
    atoms: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn from_points(dim: usize, atoms: Vec<f64>) -> Result<Self> {
        if dim == 0 || atoms.is_empty() || atoms.len() % dim != 0 {
            return Err(Error::EmptyMeasure);
        }
        Ok(EmpiricalMeasure { dim, atoms })
    }

    /// The empirical measure `(1/N) sum δ_{(x_i, v_i)}` of an ensemble.
    pub fn from_ensemble(ens: &ParticleEnsemble) -> Self {
        let d = ens.d();
        let mut atoms = Vec::with_capacity(ens.n() * 2 * d);
        for i in 0..ens.n() {
            atoms.extend_from_slice(ens.position(i));
            atoms.extend_from_slice(ens.velocity(i));
        }
        EmpiricalMeasure {
            dim: 2 * d,
            atoms,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.atoms.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    /// Atoms replicated `k` times each (uniform-weight splitting).
    fn replicate(&self, k: usize) -> EmpiricalMeasure {
        let mut atoms = Vec::with_capacity(self.atoms.len() * k);
        for i in 0..self.len() {
            for _ in 0..k {
                atoms.extend_from_slice(self.atom(i));
            }
        }
        EmpiricalMeasure {
            dim: self.dim,
            atoms,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
}

/// Exact minimum-cost perfect matching on a dense `n x n` cost matrix
/// (row-major), by shortest augmenting paths with dual potentials.
/// Returns the row assigned to each column and the total cost.
pub fn solve_assignment(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    assert_eq!(cost.len(), n * n);
    const UNASSIGNED: usize = usize::MAX;
    let virt = n; // virtual start column
    let mut u = vec![0.0_f64; n]; // row potentials
    let mut v = vec![0.0_f64; n + 1]; // column potentials
    let mut row_of = vec![UNASSIGNED; n + 1]; // column -> row
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0_f64; n + 1];
    let mut used = vec![false; n + 1];

    for i in 0..n {
        row_of[virt] = i;
        minv[..n].iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|f| *f = false);
        let mut j0 = virt;
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let row = &cost[i0 * n..(i0 + 1) * n];
            let mut delta = f64::INFINITY;
            let mut j1 = virt;
            for j in 0..n {
                if !used[j] {
                    let cur = row[j] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    if row_of[j] != UNASSIGNED {
                        u[row_of[j]] += delta;
                    }
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == UNASSIGNED {
                break;
            }
        }
        // Unwind the augmenting path.
        while j0 != virt {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
        }
    }

    let assignment: Vec<usize> = row_of[..n].to_vec();
    let total = assignment
        .iter()
        .enumerate()
        .map(|(j, &i)| cost[i * n + j])
        .sum();
    (assignment, total)
}

/// How a W2 value was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum W2Method {
    /// Exact assignment on equal atom counts.
    ExactMatching,
    /// Exact assignment after lcm atom splitting (uniform weights).
    ExactLcmSplit,
    /// Entropic regularization + plan rounding: a feasible plan, so the
    /// value is an upper bound on the true W2.
    SinkhornUpperBound,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct W2Outcome {
    pub value: f64,
    pub method: W2Method,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Exact W2 on equal-size uniform measures via assignment.
fn w2_matching(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> f64 {
    let n = a.len();
    let mut cost = vec![0.0; n * n];
    cost.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let ai = a.atom(i);
        for (j, c) in row.iter_mut().enumerate() {
            *c = sq_dist(ai, b.atom(j));
        }
    });
    let (_, total) = solve_assignment(&cost, n);
    (total / n as f64).max(0.0).sqrt()
}

/// Sinkhorn with Altschuler-style rounding to a feasible plan; the rounded
/// plan's transport cost upper-bounds the true W2^2.
fn w2_sinkhorn_upper(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut cost = vec![0.0; n * m];
    let mut mean_cost = 0.0;
    for i in 0..n {
        for j in 0..m {
            let c = sq_dist(a.atom(i), b.atom(j));
            cost[i * m + j] = c;
            mean_cost += c;
        }
    }
    mean_cost /= (n * m) as f64;
    let eps = (SINKHORN_EPS_FRACTION * mean_cost).max(1e-12);
    let kernel: Vec<f64> = cost.iter().map(|c| (-c / eps).exp()).collect();
    let (ra, rb) = (1.0 / n as f64, 1.0 / m as f64);
    let mut f = vec![1.0_f64; n];
    let mut g = vec![1.0_f64; m];
    for _ in 0..SINKHORN_MAX_ITERS {
        for i in 0..n {
            let s: f64 = (0..m).map(|j| kernel[i * m + j] * g[j]).sum();
            f[i] = ra / s.max(1e-300);
        }
        for j in 0..m {
            let s: f64 = (0..n).map(|i| kernel[i * m + j] * f[i]).sum();
            g[j] = rb / s.max(1e-300);
        }
    }
    // Plan + rounding to exact marginals.
    let mut plan: Vec<f64> = (0..n * m)
        .map(|ij| f[ij / m] * kernel[ij] * g[ij % m])
        .collect();
    for i in 0..n {
        let s: f64 = plan[i * m..(i + 1) * m].iter().sum();
        if s > ra {
            let scale = ra / s;
            plan[i * m..(i + 1) * m].iter_mut().for_each(|p| *p *= scale);
        }
    }
    let mut col_sums = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            col_sums[j] += plan[i * m + j];
        }
    }
    for j in 0..m {
        if col_sums[j] > rb {
            let scale = rb / col_sums[j];
            for i in 0..n {
                plan[i * m + j] *= scale;
            }
        }
    }
    // Distribute the residual mass as a product completion.
    let mut row_def = vec![0.0; n];
    let mut col_def = vec![0.0; m];
    let mut total_def = 0.0;
    for i in 0..n {
        let s: f64 = plan[i * m..(i + 1) * m].iter().sum();
        row_def[i] = (ra - s).max(0.0);
        total_def += row_def[i];
    }
    let mut col_now = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            col_now[j] += plan[i * m + j];
        }
    }
    for j in 0..m {
        col_def[j] = (rb - col_now[j]).max(0.0);
    }
    if total_def > 1e-300 {
        for i in 0..n {
            for j in 0..m {
                plan[i * m + j] += row_def[i] * col_def[j] / total_def;
            }
        }
    }
    let cost_total: f64 = plan.iter().zip(&cost).map(|(p, c)| p * c).sum();
    cost_total.max(0.0).sqrt()
}

/// W2 between uniform empirical measures, with full method detail.
pub fn wasserstein2_detailed(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
) -> Result<W2Outcome> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "measure dims differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (n, m) = (a.len(), b.len());
    if n == m {
        return Ok(W2Outcome {
            value: w2_matching(a, b),
            method: W2Method::ExactMatching,
        });
    }
    let l = n / gcd(n, m) * m;
    if l <= MAX_EXACT_SIZE {
        let ra = a.replicate(l / n);
        let rb = b.replicate(l / m);
        return Ok(W2Outcome {
            value: w2_matching(&ra, &rb),
            method: W2Method::ExactLcmSplit,
        });
    }
    Ok(W2Outcome {
        value: w2_sinkhorn_upper(a, b),
        method: W2Method::SinkhornUpperBound,
    })
}

/// W2 between uniform empirical measures. Warns on stderr when the result
/// comes from the regularized route and is only an upper bound.
pub fn wasserstein2(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    let out = wasserstein2_detailed(a, b)?;
    if out.method == W2Method::SinkhornUpperBound {
        eprintln!(
            "warning: W2({}, {} atoms) computed by entropic regularization \
             (eps_reg = {SINKHORN_EPS_FRACTION} x mean cost); value is an upper bound",
            a.len(),
            b.len()
        );
    }
    Ok(out.value)
}

/// Brute-force W2 over all N! matchings; the oracle for small N.
pub fn wasserstein2_brute_force(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    if a.dim() != b.dim() || a.len() != b.len() {
        return Err(Error::Shape("brute force needs equal-size measures".into()));
    }
    let n = a.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let total: f64 = p
            .iter()
            .enumerate()
            .map(|(i, &j)| sq_dist(a.atom(i), b.atom(j)))
            .sum();
        if total < best {
            best = total;
        }
    });
    Ok((best / n as f64).sqrt())
}

fn permute(perm: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == perm.len() {
        visit(perm);
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute(perm, k + 1, visit);
        perm.swap(k, i);
    }
}

/// One row of a propagation-of-chaos table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChaosRow {
    pub n: usize,
    pub w2_to_largest: f64,
}

/// Propagation-of-chaos experiment: run nested ensembles of sizes `n_list`
/// on one shared common-noise path and report `W2(mu^N_T, mu^{N_max}_T)`.
///
/// Nesting: the N-particle initial data are the first N atoms of one master
/// draw of size `N_max`, so convergence in N is monotone by construction of
/// the coupling. The largest run stands in for the mean-field limit.
pub fn chaos_experiment(
    config: &SimConfig,
    n_list: &[usize],
    path: &WienerPath,
) -> Result<Vec<ChaosRow>> {
    if n_list.is_empty() {
        return Err(Error::Usage("chaos experiment needs at least one N".into()));
    }
    let n_max = *n_list.iter().max().unwrap();
    let master = ParticleEnsemble::sample_uniform(
        n_max,
        config.d,
        crate::particle::replica_init_seed(config.seed, 0),
        config.noise_mode,
    );

    let run_first_n = |n: usize| -> Result<TrajectoryRecord> {
        let d = config.d;
        let init = ParticleEnsemble::from_parts(
            d,
            master.x()[..n * d].to_vec(),
            master.v()[..n * d].to_vec(),
            0.0,
            config.noise_mode,
        )?;
        let mut cfg = config.clone();
        cfg.n = n;
        run_on_path(&cfg, &init, path, Scheme::Stratonovich, usize::MAX)
    };

    let reference = EmpiricalMeasure::from_ensemble(run_first_n(n_max)?.final_state());
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let w2 = if n == n_max {
            0.0
        } else {
            let mu_n = EmpiricalMeasure::from_ensemble(run_first_n(n)?.final_state());
            wasserstein2(&mu_n, &reference)?
        };
        rows.push(ChaosRow {
            n,
            w2_to_largest: w2,
        });
    }
    Ok(rows)
}

/// W2(t) series between two same-size runs coupled through one path.
#[derive(Debug, Clone)]
pub struct StabilityOutcome {
    pub t: Vec<f64>,
    pub w2: Vec<f64>,
    pub w2_initial: f64,
    /// `max_t W2(t) / W2(0)` (0 when the initial data coincide).
    pub max_ratio: f64,
    /// `sup_t |W_t|` of the driving path, recorded because the stability
    /// constant of the theory depends on it.
    pub path_sup: f64,
}

/// Pathwise stability experiment: evolve two initial conditions along the
/// same common-noise path and track `W2(mu_t, mu~_t)` at snapshot cadence.
pub fn stability_experiment(
    config: &SimConfig,
    init_a: &ParticleEnsemble,
    init_b: &ParticleEnsemble,
    path: &WienerPath,
    snapshot_every: usize,
) -> Result<StabilityOutcome> {
    if init_a.n() != init_b.n() || init_a.d() != init_b.d() {
        return Err(Error::Shape(
            "stability experiment needs equal-size ensembles".into(),
        ));
    }
    let rec_a = run_on_path(config, init_a, path, Scheme::Stratonovich, snapshot_every)?;
    let rec_b = run_on_path(config, init_b, path, Scheme::Stratonovich, snapshot_every)?;
    let mut t = Vec::with_capacity(rec_a.snapshots.len());
    let mut w2 = Vec::with_capacity(rec_a.snapshots.len());
    for (snap_a, snap_b) in rec_a.snapshots.iter().zip(&rec_b.snapshots) {
        t.push(snap_a.t());
        w2.push(wasserstein2(
            &EmpiricalMeasure::from_ensemble(snap_a),
            &EmpiricalMeasure::from_ensemble(snap_b),
        )?);
    }
    let w2_initial = w2[0];
    let max_ratio = if w2_initial > 0.0 {
        w2.iter().fold(0.0_f64, |m, &x| m.max(x)) / w2_initial
    } else {
        0.0
    };
    Ok(StabilityOutcome {
        t,
        w2,
        w2_initial,
        max_ratio,
        path_sup: path.sup_abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NoiseMode;
    use crate::wiener::derive_seed;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_measure(n: usize, dim: usize, seed: u64) -> EmpiricalMeasure {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        EmpiricalMeasure::from_points(
            dim,
            (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_measures_have_zero_distance() {
        let a = random_measure(6, 4, 1);
        assert!(wasserstein2(&a, &a).unwrap() < 1e-12);
    }

    #[test]
    fn single_atom_transport() {
        let a = EmpiricalMeasure::from_points(2, vec![0.0, 0.0]).unwrap();
        let b = EmpiricalMeasure::from_points(2, vec![1.0, 0.0]).unwrap();
        assert!((wasserstein2(&a, &b).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn two_atom_hand_example() {
        // Brute force over both matchings gives sqrt((0.01 + 0.01)/2) = 0.1.
        let a = EmpiricalMeasure::from_points(2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let b = EmpiricalMeasure::from_points(2, vec![0.0, 0.1, 1.0, -0.1]).unwrap();
        let brute = wasserstein2_brute_force(&a, &b).unwrap();
        let fast = wasserstein2(&a, &b).unwrap();
        assert!((brute - 0.1).abs() < 1e-14);
        assert!((fast - 0.1).abs() < 1e-14);
    }

    #[test]
    fn matcher_equals_brute_force_up_to_eight() {
        for n in 1..=8usize {
            for trial in 0..4u64 {
                let a = random_measure(n, 2, derive_seed(100 + n as u64, trial));
                let b = random_measure(n, 2, derive_seed(200 + n as u64, trial));
                let brute = wasserstein2_brute_force(&a, &b).unwrap();
                let fast = wasserstein2(&a, &b).unwrap();
                assert!(
                    (brute - fast).abs() <= 1e-12 * brute.max(1.0),
                    "n = {n}: {fast} vs brute {brute}"
                );
            }
        }
    }

    #[test]
    fn metric_properties() {
        // Symmetry and triangle inequality on random triples.
        for trial in 0..100u64 {
            let a = random_measure(5, 2, derive_seed(300, trial));
            let b = random_measure(5, 2, derive_seed(400, trial));
            let c = random_measure(5, 2, derive_seed(500, trial));
            let ab = wasserstein2(&a, &b).unwrap();
            let ba = wasserstein2(&b, &a).unwrap();
            let bc = wasserstein2(&b, &c).unwrap();
            let ac = wasserstein2(&a, &c).unwrap();
            assert!((ab - ba).abs() <= 1e-12);
            assert!(ac <= ab + bc + 1e-9, "triangle violated: {ac} > {ab} + {bc}");
        }
    }

    #[test]
    fn distance_invariant_under_relabeling() {
        let a = random_measure(7, 2, 9);
        let b = random_measure(7, 2, 10);
        let mut shuffled = Vec::new();
        let order = [3usize, 0, 6, 1, 5, 2, 4];
        for &i in &order {
            shuffled.extend_from_slice(a.atom(i));
        }
        let a_perm = EmpiricalMeasure::from_points(2, shuffled).unwrap();
        let d1 = wasserstein2(&a, &b).unwrap();
        let d2 = wasserstein2(&a_perm, &b).unwrap();
        assert!((d1 - d2).abs() <= 1e-12);
    }

    #[test]
    fn lcm_split_consistent_with_duplication() {
        // W2 must not see the difference between {p, q} and {p, p, q, q}.
        let a = random_measure(2, 2, 21);
        let b = random_measure(4, 2, 22);
        let a_dup = a.replicate(2);
        let via_split = wasserstein2(&a, &b).unwrap();
        let direct = wasserstein2(&a_dup, &b).unwrap();
        assert!((via_split - direct).abs() <= 1e-12, "{via_split} vs {direct}");
        // Replicated copies of the same measure are at distance zero.
        assert!(wasserstein2(&a, &a.replicate(3)).unwrap() <= 1e-12);
    }

    #[test]
    fn sinkhorn_route_upper_bounds_exact() {
        let a = random_measure(12, 2, 31);
        let b = random_measure(12, 2, 32);
        let exact = wasserstein2(&a, &b).unwrap();
        let upper = w2_sinkhorn_upper(&a, &b);
        assert!(upper >= exact - 1e-9, "upper {upper} < exact {exact}");
        assert!(upper <= 1.5 * exact + 1e-6, "loose upper bound {upper} vs {exact}");
    }

    #[test]
    fn empty_measure_rejected() {
        assert!(EmpiricalMeasure::from_points(2, vec![]).is_err());
    }

    #[test]
    fn chaos_single_row_is_zero() {
        let config = SimConfig {
            d: 1,
            n: 16,
            t_final: 0.2,
            dt: 0.01,
            sigma: 0.3,
            ..SimConfig::default()
        };
        let path = WienerPath::sample(3, config.t_final, config.dt).unwrap();
        let rows = chaos_experiment(&config, &[16], &path).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].w2_to_largest, 0.0);
    }

    #[test]
    fn stability_identical_initial_data_is_zero() {
        let config = SimConfig {
            d: 1,
            n: 8,
            t_final: 0.3,
            dt: 0.01,
            sigma: 0.4,
            ..SimConfig::default()
        };
        let init = ParticleEnsemble::sample_uniform(8, 1, 5, NoiseMode::Common);
        let path = WienerPath::sample(6, config.t_final, config.dt).unwrap();
        let out = stability_experiment(&config, &init, &init, &path, 10).unwrap();
        assert!(out.w2.iter().all(|&w| w < 1e-12));
        assert_eq!(out.max_ratio, 0.0);
    }

    /// Linear response: halving a uniform velocity perturbation roughly
    /// halves W2(t) pointwise (ratio in [0.3, 0.7] per time on a fixed path).
    #[test]
    fn stability_linear_response() {
        let config = SimConfig {
            d: 1,
            n: 16,
            t_final: 0.5,
            dt: 0.01,
            sigma: 0.3,
            ..SimConfig::default()
        };
        let base = ParticleEnsemble::sample_uniform(16, 1, 7, NoiseMode::Common);
        let path = WienerPath::sample(8, config.t_final, config.dt).unwrap();
        let perturbed = |epsv: f64| {
            let v: Vec<f64> = base.v().iter().map(|&c| c + epsv).collect();
            ParticleEnsemble::from_parts(1, base.x().to_vec(), v, 0.0, NoiseMode::Common).unwrap()
        };
        let big = stability_experiment(&config, &base, &perturbed(1e-3), &path, 5).unwrap();
        let small = stability_experiment(&config, &base, &perturbed(5e-4), &path, 5).unwrap();
        assert!(big.max_ratio.is_finite());
        for (k, (&wb, &ws)) in big.w2.iter().zip(&small.w2).enumerate() {
            let ratio = ws / wb;
            assert!(
                (0.3..=0.7).contains(&ratio),
                "t index {k}: ratio {ratio} (big {wb}, small {ws})"
            );
        }
    }
}
