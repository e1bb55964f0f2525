//! Radial communication weights.
//!
//! A communication weight couples particle pairs through their distance:
//! nonnegative, radially symmetric, bounded, non-increasing and Lipschitz,
//! with infimum `phi_m` and maximum `phi_M = phi(0)`. All flocking rate
//! bands are expressed through these two bounds.

use crate::error::{Error, Result};

/// Radial communication profile `r -> phi(r)`.
///
/// Three shipped profiles:
/// - `Constant`: `phi(r) = c`. Makes every pathwise bound an equality, so it
///   anchors the closed-form checks.
/// - `RationalFloor`: `phi(r) = phi_m + (phi_M - phi_m) / (1 + r^2)`. Bounded
///   below by `phi_m > 0`, the regime where exponential flocking holds.
/// - `InversePower`: `phi(r) = (1 + r^2)^(-beta/2)`. The classical profile;
///   its infimum is 0, so it violates the positive-floor hypothesis and is
///   meant for exploratory runs only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CommWeight {
    Constant { value: f64 },
    RationalFloor { phi_m: f64, phi_max: f64 },
    InversePower { beta: f64 },
}

impl CommWeight {
    pub fn constant(value: f64) -> Result<Self> {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::Config(format!(
                "constant weight must be finite and >= 0, got {value}"
            )));
        }
        Ok(CommWeight::Constant { value })
    }

    pub fn rational_floor(phi_m: f64, phi_max: f64) -> Result<Self> {
        if !(0.0 <= phi_m && phi_m <= phi_max) || !phi_max.is_finite() {
            return Err(Error::Config(format!(
                "rational weight needs 0 <= phi_m <= phi_M, got phi_m={phi_m}, phi_M={phi_max}"
            )));
        }
        Ok(CommWeight::RationalFloor { phi_m, phi_max })
    }

    pub fn inverse_power(beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Config(format!(
                "inverse-power weight needs beta > 0, got {beta}"
            )));
        }
        Ok(CommWeight::InversePower { beta })
    }

    /// Evaluate the profile at radius `r >= 0`.
    pub fn eval(&self, r: f64) -> Result<f64> {
        if !(r >= 0.0) {
            return Err(Error::Domain(format!("weight evaluated at r = {r} < 0")));
        }
        Ok(self.value(r))
    }

    /// Profile value for a radius already known to be nonnegative
    /// (norms of difference vectors). Hot path of the O(N^2) kernels.
    #[inline(always)]
    pub fn value(&self, r: f64) -> f64 {
        debug_assert!(r >= 0.0);
        match *self {
            CommWeight::Constant { value } => value,
            CommWeight::RationalFloor { phi_m, phi_max } => {
                phi_m + (phi_max - phi_m) / (1.0 + r * r)
            }
            CommWeight::InversePower { beta } => (1.0 + r * r).powf(-0.5 * beta),
        }
    }

    /// Infimum of the profile over `[0, inf)`.
    pub fn phi_m(&self) -> f64 {
        match *self {
            CommWeight::Constant { value } => value,
            CommWeight::RationalFloor { phi_m, .. } => phi_m,
            CommWeight::InversePower { .. } => 0.0,
        }
    }

    /// Maximum `phi(0)`.
    pub fn phi_max(&self) -> f64 {
        match *self {
            CommWeight::Constant { value } => value,
            CommWeight::RationalFloor { phi_max, .. } => phi_max,
            CommWeight::InversePower { .. } => 1.0,
        }
    }

    /// Lipschitz constant of the radial profile.
    ///
    /// `RationalFloor`: sup |d/dr (1+r^2)^-1| = 3*sqrt(3)/8 at r = 1/sqrt(3).
    /// `InversePower`: sup of beta*r*(1+r^2)^(-(beta+2)/2) at r^2 = 1/(beta+1).
    pub fn lipschitz(&self) -> f64 {
        match *self {
            CommWeight::Constant { .. } => 0.0,
            CommWeight::RationalFloor { phi_m, phi_max } => {
                (phi_max - phi_m) * 3.0 * 3.0_f64.sqrt() / 8.0
            }
            CommWeight::InversePower { beta } => {
                let r2 = 1.0 / (beta + 1.0);
                beta * r2.sqrt() * (1.0 + r2).powf(-0.5 * (beta + 2.0))
            }
        }
    }

    /// True when the profile satisfies the positive-floor hypothesis
    /// `phi_m > 0` required by the exponential flocking bands.
    pub fn has_positive_floor(&self) -> bool {
        self.phi_m() > 0.0
    }

    /// Parse the config-file syntax: `constant:c`, `rational:phi_m,phi_M`,
    /// `power:beta`.
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, args) = s.split_once(':').unwrap_or((s, ""));
        let nums: Vec<f64> = if args.is_empty() {
            Vec::new()
        } else {
            args.split(',')
                .map(|a| {
                    a.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad weight parameter `{a}` in `{s}`")))
                })
                .collect::<Result<_>>()?
        };
        match (kind.trim(), nums.as_slice()) {
            ("constant", [c]) => CommWeight::constant(*c),
            ("constant", []) => CommWeight::constant(1.0),
            ("rational", [m, mx]) => CommWeight::rational_floor(*m, *mx),
            ("power", [b]) => CommWeight::inverse_power(*b),
            _ => Err(Error::Config(format!(
                "unknown weight spec `{s}` (expected constant:c | rational:phi_m,phi_M | power:beta)"
            ))),
        }
    }

    /// Config-file representation (inverse of [`CommWeight::parse`]).
    pub fn to_config_string(&self) -> String {
        match *self {
            CommWeight::Constant { value } => format!("constant:{value}"),
            CommWeight::RationalFloor { phi_m, phi_max } => format!("rational:{phi_m},{phi_max}"),
            CommWeight::InversePower { beta } => format!("power:{beta}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn shipped_profiles() -> Vec<CommWeight> {
        vec![
            CommWeight::constant(1.0).unwrap(),
            CommWeight::rational_floor(0.1, 1.0).unwrap(),
            CommWeight::rational_floor(0.4, 1.0).unwrap(),
            CommWeight::inverse_power(2.0).unwrap(),
        ]
    }

    #[test]
    fn builtin_rational_at_zero_is_phi_max() {
        let w = CommWeight::rational_floor(0.1, 1.0).unwrap();
        assert_eq!(w.eval(0.0).unwrap(), 1.0);
    }

    #[test]
    fn constant_profile_everywhere() {
        let w = CommWeight::constant(1.0).unwrap();
        assert_eq!(w.eval(7.3).unwrap(), 1.0);
    }

    #[test]
    fn rational_monotone_sample() {
        let w = CommWeight::rational_floor(0.1, 1.0).unwrap();
        assert!(w.eval(2.0).unwrap() <= w.eval(1.0).unwrap());
    }

    #[test]
    fn negative_radius_is_domain_error() {
        let w = CommWeight::constant(1.0).unwrap();
        assert!(matches!(w.eval(-0.5), Err(Error::Domain(_))));
    }

    /// Bounds, monotonicity and the Lipschitz certificate at 10^4 random
    /// radius pairs for every shipped profile.
    #[test]
    fn invariants_hold_at_random_pairs() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        for w in shipped_profiles() {
            let (phi_m, phi_max, lip) = (w.phi_m(), w.phi_max(), w.lipschitz());
            assert_eq!(w.value(0.0), phi_max);
            for _ in 0..10_000 {
                let r = rng.gen_range(0.0..50.0_f64);
                let s = rng.gen_range(0.0..50.0_f64);
                let (fr, fs) = (w.value(r), w.value(s));
                assert!(fr >= phi_m - 1e-15 && fr <= phi_max + 1e-15);
                if r <= s {
                    assert!(fr >= fs - 1e-15, "non-increasing violated for {w:?}");
                }
                assert!(
                    (fr - fs).abs() <= lip * (r - s).abs() + 1e-12,
                    "Lipschitz bound violated for {w:?} at r={r}, s={s}"
                );
            }
        }
    }

    #[test]
    fn parse_round_trip() {
        for w in shipped_profiles() {
            let back = CommWeight::parse(&w.to_config_string()).unwrap();
            assert_eq!(w, back);
        }
        assert!(CommWeight::parse("splines:1,2").is_err());
        assert!(CommWeight::parse("rational:0.5").is_err());
    }
}
