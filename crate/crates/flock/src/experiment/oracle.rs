//! The `oracle-suite` experiment: every analytic-oracle check that the rest
//! of the laboratory leans on, run as one batch.

use super::{CheckResult, ExperimentSpec};
use crate::error::Result;
use crate::sde::{
    comparison_check, gbm_affine_closed_form, integrate_ito, integrate_stratonovich,
    AffineGbmSpec,
};
use crate::svg::write_csv_table;
use crate::wiener::{derive_seed, WienerPath};
use std::path::PathBuf;

const DT_LADDER: [f64; 3] = [1.0 / 256.0, 1.0 / 512.0, 1.0 / 1024.0];
const N_PATHS: usize = 100;

pub fn run(spec: &ExperimentSpec) -> Result<(Vec<CheckResult>, Vec<PathBuf>)> {
    let seed = spec.config.seed;
    let mut checks = Vec::new();
    let mut artifacts = Vec::new();
    let (a, b, c, x0) = (0.3, -0.8, 0.5, 1.0);

    // Closed form vs direct GBM evaluation on one path.
    {
        let path = WienerPath::sample(derive_seed(seed, 1), 1.0, 1.0 / 512.0)?;
        let (mu, cc) = (0.7, 0.4);
        let gbm = AffineGbmSpec::constant(x0, 0.0, mu, cc, path.values().len());
        let traj = gbm_affine_closed_form(&gbm, &path)?;
        let max_rel = traj
            .states
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let direct =
                    x0 * ((mu - 0.5 * cc * cc) * path.t(k) + cc * path.values()[k]).exp();
                ((x - direct) / direct).abs()
            })
            .fold(0.0, f64::max);
        checks.push(CheckResult::new(
            "LemA.1-closed-form-gbm",
            max_rel < 1e-12,
            format!("max_rel_err={max_rel:.3e} tol=1e-12"),
        ));
    }

    // Strong convergence of both integrators against the closed form:
    // per path, the max grid error must shrink at every dt halving.
    {
        let mut em_monotone = 0usize;
        let mut heun_monotone = 0usize;
        let mut mean_err = [[0.0f64; 3]; 2];
        for p in 0..N_PATHS {
            let coarse = WienerPath::sample(derive_seed(seed, 100 + p as u64), 1.0, DT_LADDER[0])?;
            let paths = [coarse.clone(), coarse.refine(2)?, coarse.refine(4)?];
            let mut em_errs = [0.0f64; 3];
            let mut heun_errs = [0.0f64; 3];
            for (lvl, path) in paths.iter().enumerate() {
                let gbm = AffineGbmSpec::constant(x0, a, b, c, path.values().len());
                let oracle = gbm_affine_closed_form(&gbm, path)?;
                let em = integrate_ito(|_, x| a + b * x, |_, x| c * x, x0, path)?;
                em_errs[lvl] = em.max_abs_gap(&oracle)?;
                // Stratonovich form of the same equation: Ito drift b x
                // with diffusion c x corresponds to (b - c^2/2) x drift.
                let bs = b - 0.5 * c * c;
                let heun =
                    integrate_stratonovich(|_, x| a + bs * x, |_, x| c * x, x0, path)?;
                heun_errs[lvl] = heun.max_abs_gap(&oracle)?;
                mean_err[0][lvl] += em_errs[lvl] / N_PATHS as f64;
                mean_err[1][lvl] += heun_errs[lvl] / N_PATHS as f64;
            }
            if em_errs[1] < em_errs[0] && em_errs[2] < em_errs[1] {
                em_monotone += 1;
            }
            if heun_errs[1] < heun_errs[0] && heun_errs[2] < heun_errs[1] {
                heun_monotone += 1;
            }
        }
        checks.push(CheckResult::new(
            "LemA.1-em-dt-halving",
            em_monotone >= 90,
            format!("monotone_paths={em_monotone}/{N_PATHS} need>=90"),
        ));
        checks.push(CheckResult::new(
            "LemA.1-heun-dt-halving",
            heun_monotone >= 90,
            format!("monotone_paths={heun_monotone}/{N_PATHS} need>=90"),
        ));
        let conv_path = spec.output_dir.join("em_convergence.csv");
        let rows: Vec<Vec<f64>> = DT_LADDER
            .iter()
            .enumerate()
            .map(|(l, &dt)| vec![dt, mean_err[0][l], mean_err[1][l]])
            .collect();
        write_csv_table(&conv_path, "dt,max_error_em,max_error_heun", &rows)?;
        artifacts.push(conv_path);
    }

    // Comparison principle: lowering the forcing keeps X below Y pathwise
    // on every sampled path; the reversed construction must violate.
    {
        let mut holds = 0usize;
        let mut reversed_detected = 0usize;
        for p in 0..N_PATHS {
            let path = WienerPath::sample(derive_seed(seed, 300 + p as u64), 1.0, 1.0 / 256.0)?;
            let n = path.values().len();
            let hi = AffineGbmSpec::constant(x0, a + 0.5, -0.4, 0.6, n);
            let lo = AffineGbmSpec::constant(x0, a, -0.4, 0.6, n);
            let y = gbm_affine_closed_form(&hi, &path)?;
            let x = gbm_affine_closed_form(&lo, &path)?;
            if comparison_check(&x, &y)?.holds {
                holds += 1;
            }
            if !comparison_check(&y, &x)?.holds {
                reversed_detected += 1;
            }
        }
        checks.push(CheckResult::new(
            "LemA.2-comparison",
            holds == N_PATHS && reversed_detected == N_PATHS,
            format!("holds={holds}/{N_PATHS} reversed_detected={reversed_detected}/{N_PATHS}"),
        ));
    }

    // Stratonovich chain rule: dX = -X o dW gives X = exp(-W) exactly.
    {
        let path = WienerPath::sample(derive_seed(seed, 400), 1.0, 1.0 / 2048.0)?;
        let traj = integrate_stratonovich(|_, _| 0.0, |_, x| -x, 1.0, &path)?;
        let err = traj
            .states
            .iter()
            .zip(path.values())
            .map(|(x, w)| (x - (-w).exp()).abs())
            .fold(0.0, f64::max);
        checks.push(CheckResult::new(
            "strat-chain-rule",
            err < 1e-4,
            format!("max_err={err:.3e} tol=1e-4"),
        ));
    }

    Ok((checks, artifacts))
}
