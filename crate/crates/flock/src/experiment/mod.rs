//! Named, seeded experiments binding all modules together: each experiment
//! runs a fixed protocol, writes CSV tables, a run manifest, optional SVG
//! decay plots, and a set of named pass/fail checks against the theory.
//!
//! Statistical checks fail only when the theoretical value lies outside the
//! 95% CI widened by the documented discretization tolerance, so seeded
//! reruns are stable.

mod flocking;
mod kinetic_exp;
mod oracle;
mod wasserstein;
mod wong_zakai;

use crate::config::SimConfig;
use crate::error::{Error, Result};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// The named experiments the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentName {
    OracleSuite,
    FlockRate,
    PathwiseBounds,
    WongZakai,
    ItoVsStrat,
    Chaos,
    Stability,
    KineticFixedPoint,
    KineticVsParticle,
}

pub const EXPERIMENT_NAMES: [(&str, ExperimentName); 9] = [
    ("oracle-suite", ExperimentName::OracleSuite),
    ("flock-rate", ExperimentName::FlockRate),
    ("pathwise-bounds", ExperimentName::PathwiseBounds),
    ("wong-zakai", ExperimentName::WongZakai),
    ("ito-vs-strat", ExperimentName::ItoVsStrat),
    ("chaos", ExperimentName::Chaos),
    ("stability", ExperimentName::Stability),
    ("kinetic-fixed-point", ExperimentName::KineticFixedPoint),
    ("kinetic-vs-particle", ExperimentName::KineticVsParticle),
];

impl ExperimentName {
    pub fn parse(s: &str) -> Result<Self> {
        EXPERIMENT_NAMES
            .iter()
            .find(|(name, _)| *name == s)
            .map(|(_, e)| *e)
            .ok_or_else(|| {
                let known: Vec<&str> = EXPERIMENT_NAMES.iter().map(|(n, _)| *n).collect();
                Error::Usage(format!(
                    "unknown experiment `{s}`; expected one of: {}",
                    known.join(", ")
                ))
            })
    }

    pub fn as_str(&self) -> &'static str {
        EXPERIMENT_NAMES
            .iter()
            .find(|(_, e)| e == self)
            .map(|(n, _)| *n)
            .unwrap()
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Grid/solver options for the kinetic experiments; every field has a
/// sensible default and the grid auto-sizes to the support envelopes when
/// no explicit bounds are given.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KineticOptions {
    /// Explicit half-widths (x, v); `None` auto-sizes from the envelopes.
    pub grid_half: Option<(f64, f64)>,
    pub nx: usize,
    pub nv: usize,
    /// Mollification radius for the initial datum.
    pub moll_eps: f64,
    /// Relative solver tolerance (fraction of `sup f_in`).
    pub tol_rel: f64,
    pub max_iter: usize,
    pub semi_lagrangian: bool,
}

impl Default for KineticOptions {
    fn default() -> Self {
        KineticOptions {
            grid_half: None,
            nx: 65,
            nv: 65,
            moll_eps: 0.3,
            tol_rel: 1e-6,
            max_iter: 8,
            semi_lagrangian: false,
        }
    }
}

/// A fully specified experiment invocation.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub name: ExperimentName,
    pub config: SimConfig,
    pub output_dir: PathBuf,
    pub kinetic: KineticOptions,
}

/// One named pass/fail check with its measured values.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: String,
}

impl CheckResult {
    pub fn new(name: &str, passed: bool, measured: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed,
            measured,
        }
    }
}

/// What an experiment produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub name: ExperimentName,
    pub checks: Vec<CheckResult>,
    pub artifacts: Vec<PathBuf>,
    pub wall_time_s: f64,
    pub output_dir: PathBuf,
}

impl ExperimentOutcome {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Run one experiment: compute, write artifacts + manifest (+ failures.txt
/// when checks fail), and return the outcome. The exit status of the CLI is
/// a pure function of the returned checks.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    std::fs::create_dir_all(&spec.output_dir)?;
    let started = Instant::now();
    let (checks, mut artifacts) = match spec.name {
        ExperimentName::OracleSuite => oracle::run(spec)?,
        ExperimentName::FlockRate => flocking::run_flock_rate(spec)?,
        ExperimentName::PathwiseBounds => flocking::run_pathwise_bounds(spec)?,
        ExperimentName::ItoVsStrat => flocking::run_ito_vs_strat(spec)?,
        ExperimentName::WongZakai => wong_zakai::run(spec)?,
        ExperimentName::Chaos => wasserstein::run_chaos(spec)?,
        ExperimentName::Stability => wasserstein::run_stability(spec)?,
        ExperimentName::KineticFixedPoint => kinetic_exp::run_fixed_point(spec)?,
        ExperimentName::KineticVsParticle => kinetic_exp::run_vs_particle(spec)?,
    };
    let wall_time_s = started.elapsed().as_secs_f64();

    let manifest_path = spec.output_dir.join("manifest.txt");
    write_manifest(&manifest_path, spec, &checks, &artifacts, wall_time_s)?;
    artifacts.push(manifest_path);

    let failures: Vec<&CheckResult> = checks.iter().filter(|c| !c.passed).collect();
    if !failures.is_empty() {
        let failures_path = spec.output_dir.join("failures.txt");
        let mut out = std::fs::File::create(&failures_path)?;
        for c in &failures {
            writeln!(out, "check={} status=fail {}", c.name, c.measured)?;
        }
        artifacts.push(failures_path);
    }

    Ok(ExperimentOutcome {
        name: spec.name,
        checks,
        artifacts,
        wall_time_s,
        output_dir: spec.output_dir.clone(),
    })
}

fn write_manifest(
    path: &Path,
    spec: &ExperimentSpec,
    checks: &[CheckResult],
    artifacts: &[PathBuf],
    wall_time_s: f64,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "experiment = {}", spec.name)?;
    writeln!(out, "version = {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(out, "config_hash = {:016x}", spec.config.hash())?;
    writeln!(out, "wall_time_s = {wall_time_s:.3}")?;
    writeln!(out, "# config")?;
    write!(out, "{}", spec.config.to_config_string())?;
    writeln!(out, "# checks")?;
    for c in checks {
        writeln!(
            out,
            "check {} {} {}",
            c.name,
            if c.passed { "pass" } else { "fail" },
            c.measured
        )?;
    }
    writeln!(out, "# artifacts")?;
    for a in artifacts {
        if let Some(name) = a.file_name() {
            writeln!(out, "artifact {}", name.to_string_lossy())?;
        }
    }
    Ok(())
}

/// One parsed manifest row for the report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub experiment: String,
    pub check: String,
    pub passed: bool,
    pub measured: String,
}

/// Scan `dir` (and one level of subdirectories) for manifests and write
/// `summary.txt`: one row per theorem-tagged check, plus an overall verdict.
/// Deterministic, so reruns on the same directory are idempotent.
pub fn emit_report(dir: &Path) -> Result<(PathBuf, bool)> {
    let mut manifests = Vec::new();
    collect_manifests(dir, 0, &mut manifests)?;
    if manifests.is_empty() {
        return Err(Error::Usage(format!(
            "no manifest.txt found under {}",
            dir.display()
        )));
    }
    manifests.sort();
    let mut rows: Vec<ReportRow> = Vec::new();
    for m in &manifests {
        let text = std::fs::read_to_string(m)?;
        let experiment = text
            .lines()
            .find_map(|l| l.strip_prefix("experiment = "))
            .unwrap_or("?")
            .to_string();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("check ") {
                let mut parts = rest.splitn(3, ' ');
                let check = parts.next().unwrap_or("?").to_string();
                let status = parts.next().unwrap_or("?");
                let measured = parts.next().unwrap_or("").to_string();
                rows.push(ReportRow {
                    experiment: experiment.clone(),
                    check,
                    passed: status == "pass",
                    measured,
                });
            }
        }
    }
    rows.sort_by(|a, b| (&a.experiment, &a.check).cmp(&(&b.experiment, &b.check)));
    let overall = rows.iter().all(|r| r.passed);

    let summary_path = dir.join("summary.txt");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&summary_path)?);
    writeln!(out, "overall = {}", if overall { "pass" } else { "fail" })?;
    writeln!(out, "checks = {}", rows.len())?;
    let wide = rows.iter().map(|r| r.check.len()).max().unwrap_or(8).max(8);
    let wexp = rows
        .iter()
        .map(|r| r.experiment.len())
        .max()
        .unwrap_or(10)
        .max(10);
    writeln!(
        out,
        "{:<wexp$}  {:<wide$}  {:<6}  measured",
        "experiment", "check", "status"
    )?;
    for r in &rows {
        writeln!(
            out,
            "{:<wexp$}  {:<wide$}  {:<6}  {}",
            r.experiment,
            r.check,
            if r.passed { "pass" } else { "FAIL" },
            r.measured
        )?;
    }
    drop(out);
    Ok((summary_path, overall))
}

fn collect_manifests(dir: &Path, depth: usize, found: &mut Vec<PathBuf>) -> Result<()> {
    let manifest = dir.join("manifest.txt");
    if manifest.is_file() {
        found.push(manifest);
    }
    if depth >= 2 {
        return Ok(());
    }
    if let Ok(entries) = std::fs::read_dir(dir) {
        for entry in entries.flatten() {
            let p = entry.path();
            if p.is_dir() {
                collect_manifests(&p, depth + 1, found)?;
            }
        }
    }
    Ok(())
}

/// Discretization slack used to widen statistical checks (see module docs).
pub(crate) fn dt_slack(dt: f64) -> f64 {
    10.0 * dt
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_names_round_trip() {
        for (name, e) in EXPERIMENT_NAMES {
            assert_eq!(ExperimentName::parse(name).unwrap(), e);
            assert_eq!(e.as_str(), name);
        }
        assert!(matches!(
            ExperimentName::parse("frobnicate"),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn report_requires_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_report(dir.path()),
            Err(Error::Usage(_))
        ));
    }
}
