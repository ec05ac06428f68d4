//! Packet transmission schedules with optional temporal randomization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

/// Largest jitter magnitude accepted by [`randomize_schedule`].
pub const MAX_GAMMA: f64 = 0.9;

/// Jitter level at and above which neighbouring packets may swap order,
/// so a sorting repair pass is run.
pub const REPAIR_GAMMA: f64 = 0.5;

/// Transmission times `t_m = (m + beta_m) * dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalSchedule {
    pub base_interval_s: f64,
    pub gamma: f64,
    pub betas: Vec<f64>,
    pub timestamps: Vec<f64>,
    /// True when the sorting repair changed the order of drawn timestamps.
    pub repaired: bool,
}

impl TemporalSchedule {
    /// Regular schedule `t_m = m * dt`.
    pub fn regular(num_packets: usize, base_interval_s: f64) -> Result<Self> {
        check_interval(base_interval_s)?;
        Ok(Self {
            base_interval_s,
            gamma: 0.0,
            betas: vec![0.0; num_packets],
            timestamps: (0..num_packets).map(|m| m as f64 * base_interval_s).collect(),
            repaired: false,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Regular schedule with the same length and interval, as assumed by a
    /// receiver that does not know the jitter.
    pub fn assumed_regular(&self) -> Self {
        Self::regular(self.len(), self.base_interval_s).expect("interval already validated")
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 * self.base_interval_s
    }
}

fn check_interval(dt: f64) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return invalid(format!("packet interval must be positive, got {dt}"));
    }
    Ok(())
}

/// Draw `beta_m ~ U[-gamma, gamma]` and build the jittered schedule.
///
/// For `gamma >= 0.5` adjacent packets can cross, so the drawn times are
/// sorted and the betas recomputed. Sorting keeps every `|beta_m| <= gamma`
/// because the k-th order statistic of `{j + beta_j}` stays in `[k-gamma, k+gamma]`.
pub fn randomize_schedule(
    num_packets: usize,
    base_interval_s: f64,
    gamma: f64,
    seed: u64,
) -> Result<TemporalSchedule> {
    check_interval(base_interval_s)?;
    if !(0.0..=MAX_GAMMA).contains(&gamma) {
        return invalid(format!("gamma must lie in [0, {MAX_GAMMA}], got {gamma}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut betas: Vec<f64> = (0..num_packets)
        .map(|_| if gamma > 0.0 { rng.gen_range(-gamma..=gamma) } else { 0.0 })
        .collect();
    let mut timestamps: Vec<f64> = betas
        .iter()
        .enumerate()
        .map(|(m, b)| (m as f64 + b) * base_interval_s)
        .collect();
    let mut repaired = false;
    if gamma >= REPAIR_GAMMA {
        repaired = timestamps.windows(2).any(|w| w[1] <= w[0]);
        if repaired {
            timestamps.sort_by(|a, b| a.total_cmp(b));
            // Exact ties have probability zero but would break strict order.
            for m in 1..timestamps.len() {
                if timestamps[m] <= timestamps[m - 1] {
                    timestamps[m] = f64::from_bits(timestamps[m - 1].to_bits() + 1);
                }
            }
            for (m, b) in betas.iter_mut().enumerate() {
                *b = timestamps[m] / base_interval_s - m as f64;
            }
        }
    }
    Ok(TemporalSchedule { base_interval_s, gamma, betas, timestamps, repaired })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_zero_is_regular() {
        let s = randomize_schedule(100, 1e-3, 0.0, 1).unwrap();
        for (m, t) in s.timestamps.iter().enumerate() {
            assert_eq!(*t, m as f64 * 1e-3);
        }
        assert!(!s.repaired);
    }

    #[test]
    fn jitter_bounded_and_ordered() {
        let s = randomize_schedule(2000, 1e-3, 0.3, 3).unwrap();
        for (m, b) in s.betas.iter().enumerate() {
            assert!(b.abs() <= 0.3);
            assert!((s.timestamps[m] - (m as f64 + b) * 1e-3).abs() < 1e-15);
        }
        assert!(s.timestamps.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn large_gamma_repaired() {
        let s = randomize_schedule(2000, 1e-3, 0.9, 5).unwrap();
        assert!(s.repaired);
        assert!(s.timestamps.windows(2).all(|w| w[1] > w[0]));
        assert!(s.betas.iter().all(|b| b.abs() <= 0.9 + 1e-9));
    }

    #[test]
    fn rejects_bad_gamma() {
        assert!(randomize_schedule(10, 1e-3, 0.95, 0).is_err());
        assert!(randomize_schedule(10, 1e-3, -0.1, 0).is_err());
        assert!(randomize_schedule(10, 0.0, 0.1, 0).is_err());
    }
}
