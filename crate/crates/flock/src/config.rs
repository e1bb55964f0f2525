//! Simulation configuration: validated parameters, the plain-text
//! `key=value` config format, and the `FLOCK_SEED` environment override.

use crate::error::{Error, Result};
use crate::weight::CommWeight;
use std::collections::BTreeMap;

/// Which driving noise a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// sigma is ignored; the deterministic system.
    None,
    /// One scalar Wiener path shared by every particle.
    Common,
    /// One i.i.d. Wiener path per particle.
    Independent,
}

impl NoiseMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(NoiseMode::None),
            "common" => Ok(NoiseMode::Common),
            "independent" => Ok(NoiseMode::Independent),
            other => Err(Error::Config(format!(
                "unknown noise_mode `{other}` (none | common | independent)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseMode::None => "none",
            NoiseMode::Common => "common",
            NoiseMode::Independent => "independent",
        }
    }
}

/// Validated run parameters shared by every engine.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Spatial dimension (>= 1).
    pub d: usize,
    /// Particle count.
    pub n: usize,
    /// Time horizon.
    pub t_final: f64,
    /// Uniform time step.
    pub dt: f64,
    /// Noise strength sigma >= 0.
    pub sigma: f64,
    pub weight: CommWeight,
    pub noise_mode: NoiseMode,
    /// Master seed; replica streams are derived from it.
    pub seed: u64,
    /// Monte Carlo replica count.
    pub replicas: usize,
}

/// Keys required in a config file, in documentation order.
pub const CONFIG_KEYS: [&str; 9] = [
    "d",
    "n",
    "t_final",
    "dt",
    "sigma",
    "weight",
    "noise_mode",
    "seed",
    "replicas",
];

impl SimConfig {
    pub fn validate(self) -> Result<Self> {
        if self.d < 1 {
            return Err(Error::Config("d must be >= 1".into()));
        }
        if self.n < 1 {
            return Err(Error::Config("n must be >= 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.t_final >= self.dt) {
            return Err(Error::Config(format!(
                "t_final = {} must be >= dt = {}",
                self.t_final, self.dt
            )));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if self.replicas < 1 {
            return Err(Error::Config("replicas must be >= 1".into()));
        }
        Ok(self)
    }

    /// Parse the plain-text config format: one `key = value` per line,
    /// `#` comments. All of [`CONFIG_KEYS`] are required; unknown keys are
    /// rejected. `FLOCK_SEED`, when set, overrides the file's seed.
    pub fn from_str(text: &str) -> Result<Self> {
        let mut map: BTreeMap<&str, &str> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = k.trim();
            if !CONFIG_KEYS.contains(&key) {
                return Err(Error::Config(format!(
                    "line {}: unknown key `{key}`",
                    lineno + 1
                )));
            }
            map.insert(key, v.trim());
        }
        let missing: Vec<String> = CONFIG_KEYS
            .iter()
            .filter(|k| !map.contains_key(**k))
            .map(|k| k.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingKeys(missing));
        }

        fn num<T: std::str::FromStr>(map: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
            map[key]
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad value for `{key}`: `{}`", map[key])))
        }

        let mut seed: u64 = num(&map, "seed")?;
        if let Ok(env_seed) = std::env::var("FLOCK_SEED") {
            seed = env_seed.trim().parse::<u64>().map_err(|_| {
                Error::Config(format!("FLOCK_SEED must be a u64, got `{env_seed}`"))
            })?;
        }

        SimConfig {
            d: num(&map, "d")?,
            n: num(&map, "n")?,
            t_final: num(&map, "t_final")?,
            dt: num(&map, "dt")?,
            sigma: num(&map, "sigma")?,
            weight: CommWeight::parse(map["weight"])?,
            noise_mode: NoiseMode::parse(map["noise_mode"])?,
            seed,
            replicas: num(&map, "replicas")?,
        }
        .validate()
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    /// Canonical `key = value` dump (parses back to an equal config).
    pub fn to_config_string(&self) -> String {
        format!(
            "d = {}\nn = {}\nt_final = {}\ndt = {}\nsigma = {}\nweight = {}\nnoise_mode = {}\nseed = {}\nreplicas = {}\n",
            self.d,
            self.n,
            self.t_final,
            self.dt,
            self.sigma,
            self.weight.to_config_string(),
            self.noise_mode.as_str(),
            self.seed,
            self.replicas
        )
    }

    /// FNV-1a hash of the canonical dump; stamped into trajectory records
    /// and manifests so outputs can be traced to the exact configuration.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_config_string().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// Number of integrator steps `ceil(t_final/dt)`.
    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).ceil() as usize
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            d: 1,
            n: 16,
            t_final: 1.0,
            dt: 0.01,
            sigma: 0.5,
            weight: CommWeight::Constant { value: 1.0 },
            noise_mode: NoiseMode::Common,
            seed: 1,
            replicas: 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# desk-scale run
d = 2
n = 64
t_final = 4.0
dt = 0.005
sigma = 0.5
weight = constant:1.0
noise_mode = common
seed = 7
replicas = 500
";

    #[test]
    fn parse_and_round_trip() {
        let c = SimConfig::from_str(SAMPLE).unwrap();
        assert_eq!(c.n, 64);
        assert_eq!(c.noise_mode, NoiseMode::Common);
        let back = SimConfig::from_str(&c.to_config_string()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
    }

    #[test]
    fn empty_config_lists_missing_keys() {
        match SimConfig::from_str("") {
            Err(Error::MissingKeys(keys)) => {
                assert_eq!(keys.len(), CONFIG_KEYS.len());
                assert!(keys.contains(&"t_final".to_string()));
            }
            other => panic!("expected MissingKeys, got {other:?}"),
        }
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(SimConfig::from_str(&SAMPLE.replace("dt = 0.005", "dt = 0")).is_err());
        assert!(SimConfig::from_str(&SAMPLE.replace("sigma = 0.5", "sigma = -1")).is_err());
        assert!(SimConfig::from_str(&SAMPLE.replace("n = 64", "n = 0")).is_err());
        assert!(SimConfig::from_str(&SAMPLE.replace("noise_mode = common", "noise_mode = bow")).is_err());
    }

    #[test]
    fn unknown_key_rejected() {
        let text = format!("{SAMPLE}gamma = 3\n");
        assert!(matches!(SimConfig::from_str(&text), Err(Error::Config(_))));
    }
}
