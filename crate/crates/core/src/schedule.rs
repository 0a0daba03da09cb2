//! Variance schedules and their derived tables.
//!
//! All tables are indexed by the diffusion step `t ∈ 1..=T`; `alpha_bar(0)`
//! is defined as 1.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ScheduleKind {
    Linear,
    /// Squared-cosine ᾱ; `beta_start`/`beta_end` are validated but only the
    /// 0.999 cap bounds the betas.
    Cosine,
}

impl ScheduleKind {
    pub fn code(self) -> u8 {
        match self {
            ScheduleKind::Linear => 0,
            ScheduleKind::Cosine => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ScheduleKind::Linear),
            1 => Some(ScheduleKind::Cosine),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    /// `alpha_bar[t]` for t in 0..=T
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;

impl NoiseSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "betas must satisfy 0 < start <= end < 1, got {} .. {}",
                beta_start, beta_end
            )));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                if steps == 1 {
                    alloc::vec![beta_start]
                } else {
                    (0..steps)
                        .map(|i| {
                            beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                        })
                        .collect()
                }
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let c = libm::cos(
                        (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                            * core::f64::consts::FRAC_PI_2,
                    );
                    c * c
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-12, 0.999))
                    .collect()
            }
        };
        Self::from_betas(kind, beta_start, beta_end, beta)
    }

    /// Linear schedule with the 1e-4 → 0.02 range rescaled to `steps`
    /// (`× 1000 / steps`), so that short chains still end near N(0, I).
    pub fn rescaled_linear(steps: usize) -> Result<Self> {
        let k = 1000.0 / steps as f64;
        Self::new(steps, 1e-4 * k, (0.02 * k).min(0.999), ScheduleKind::Linear)
    }

    fn from_betas(kind: ScheduleKind, beta_start: f64, beta_end: f64, beta: Vec<f64>) -> Result<Self> {
        if let Some(b) = beta.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {} outside (0, 1)", b)));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        for a in &alpha {
            let prev = *alpha_bar.last().expect("seeded with 1");
            alpha_bar.push(prev * a);
        }
        let sigma = (1..=beta.len())
            .map(|t| {
                libm::sqrt((1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t - 1])
            })
            .collect();
        Ok(Self {
            kind,
            beta_start,
            beta_end,
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    /// T, the number of diffusion steps.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "diffusion step {} outside 1..={}",
                t,
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// Stable identifier of the schedule parameters, stored in latent codes.
    pub fn id(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(&(self.steps() as u64).to_le_bytes());
        eat(&[self.kind.code()]);
        eat(&self.beta_start.to_bits().to_le_bytes());
        eat(&self.beta_end.to_bits().to_le_bytes());
        h
    }

    /// Largest deviation of the stored σ_t² from
    /// `(1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`, recomputed from the betas alone.
    pub fn sigma_identity_error(&self) -> f64 {
        let mut prod = 1.0;
        let mut worst = 0.0f64;
        for t in 1..=self.steps() {
            let prev = prod;
            prod *= 1.0 - self.beta(t);
            let expected = (1.0 - prev) / (1.0 - prod) * self.beta(t);
            worst = worst.max((self.sigma(t) * self.sigma(t) - expected).abs());
        }
        worst
    }

    pub fn alpha_bar_strictly_decreasing(&self) -> bool {
        self.alpha_bar.windows(2).all(|w| w[1] < w[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_half_steps() {
        let s = NoiseSchedule::new(2, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(2), 0.25);
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn default_linear_ends_near_white_noise() {
        let s = NoiseSchedule::new(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        // oracle: direct product
        let mut prod = 1.0;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!(prod < 1e-4);
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-18);
    }

    #[test]
    fn identities_hold_for_every_kind() {
        for s in [
            NoiseSchedule::new(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap(),
            NoiseSchedule::rescaled_linear(100).unwrap(),
            NoiseSchedule::new(200, 1e-4, 0.02, ScheduleKind::Cosine).unwrap(),
            NoiseSchedule::new(1, 0.3, 0.3, ScheduleKind::Linear).unwrap(),
        ] {
            assert_eq!(s.sigma(1), 0.0);
            assert!(s.alpha_bar_strictly_decreasing());
            assert!(s.sigma_identity_error() <= 1e-12);
        }
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(NoiseSchedule::new(10, 0.0, 0.1, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::new(10, 0.2, 0.1, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::new(10, 0.1, 1.0, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::new(0, 0.1, 0.2, ScheduleKind::Linear).is_err());
        let s = NoiseSchedule::rescaled_linear(100).unwrap();
        assert!(s.check_step(0).is_err() && s.check_step(101).is_err() && s.check_step(100).is_ok());
    }

    #[test]
    fn id_distinguishes_schedules() {
        let a = NoiseSchedule::rescaled_linear(100).unwrap();
        let b = NoiseSchedule::rescaled_linear(1000).unwrap();
        assert_ne!(a.id(), b.id());
        assert_eq!(a.id(), NoiseSchedule::rescaled_linear(100).unwrap().id());
    }
}
