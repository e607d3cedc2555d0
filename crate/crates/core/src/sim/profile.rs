//! Deterministic value generators for simulated hosts.

use std::f64::consts::TAU;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ProfileKind {
    Constant(f64),
    Sine { mean: f64, amplitude: f64, period_s: f64 },
    RandomWalk { start: f64, step_sd: f64, lo: f64, hi: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimProfile {
    pub kind: ProfileKind,
    pub seed: u64,
}

impl SimProfile {
    pub fn constant(v: f64) -> Self {
        SimProfile { kind: ProfileKind::Constant(v), seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn sampler(&self) -> ProfileSampler {
        ProfileSampler {
            kind: self.kind,
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            state: match self.kind {
                ProfileKind::RandomWalk { start, .. } => start,
                _ => 0.0,
            },
        }
    }
}

/// Parses `constant:V`, `sine:MEAN:AMP:PERIOD` or `walk:START:SD:LO:HI`.
impl FromStr for ProfileKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split(':');
        let kind = parts.next().unwrap_or_default();
        let nums: Vec<f64> =
            parts.map(|p| p.parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
        if nums.iter().any(|v| !v.is_finite()) {
            return Err("profile parameters must be finite".into());
        }
        match (kind, nums.as_slice()) {
            ("constant", [v]) => Ok(ProfileKind::Constant(*v)),
            ("sine", [mean, amplitude, period_s]) if *period_s > 0.0 => {
                Ok(ProfileKind::Sine { mean: *mean, amplitude: *amplitude, period_s: *period_s })
            }
            ("walk", [start, step_sd, lo, hi]) if lo <= hi && *step_sd >= 0.0 => {
                Ok(ProfileKind::RandomWalk { start: start.clamp(*lo, *hi), step_sd: *step_sd, lo: *lo, hi: *hi })
            }
            _ => Err(format!("unrecognised profile {s:?}")),
        }
    }
}

pub struct ProfileSampler {
    kind: ProfileKind,
    rng: ChaCha8Rng,
    state: f64,
}

impl ProfileSampler {
    /// Value at time `t`. Random walks advance one step per call.
    pub fn next(&mut self, t: u64) -> f64 {
        match self.kind {
            ProfileKind::Constant(v) => v,
            ProfileKind::Sine { mean, amplitude, period_s } => mean + amplitude * (TAU * t as f64 / period_s).sin(),
            ProfileKind::RandomWalk { step_sd, lo, hi, .. } => {
                let v = self.state;
                if step_sd > 0.0 {
                    let step = Normal::new(0.0, step_sd).expect("finite sd").sample(&mut self.rng);
                    self.state = (self.state + step).clamp(lo, hi);
                }
                v
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_profiles() {
        assert_eq!("constant:10".parse::<ProfileKind>().unwrap(), ProfileKind::Constant(10.0));
        assert!(matches!("sine:50:10:60".parse::<ProfileKind>().unwrap(), ProfileKind::Sine { .. }));
        assert!(matches!("walk:50:2:0:100".parse::<ProfileKind>().unwrap(), ProfileKind::RandomWalk { .. }));
        assert!("sine:1:2:0".parse::<ProfileKind>().is_err());
        assert!("constant".parse::<ProfileKind>().is_err());
        assert!("constant:nan".parse::<ProfileKind>().is_err());
    }

    #[test]
    fn same_seed_same_stream() {
        for kind in ["sine:50:20:120", "walk:50:5:0:100"] {
            let p = SimProfile { kind: kind.parse().unwrap(), seed: 7 };
            let (mut a, mut b) = (p.sampler(), p.sampler());
            for t in 0..500 {
                assert_eq!(a.next(t).to_bits(), b.next(t).to_bits());
            }
        }
    }

    #[test]
    fn walk_respects_bounds() {
        let p = SimProfile { kind: "walk:50:30:0:100".parse().unwrap(), seed: 3 };
        let mut s = p.sampler();
        assert!((0..10_000).map(|t| s.next(t)).all(|v| (0.0..=100.0).contains(&v)));
    }
}
