//! The synthetic reference deployment: an 8-antenna access point, a hand
//! performing gestures 0.5 m in front of it, and single-antenna receivers
//! (the sensing user, the communication user and the eavesdropper) placed
//! in a room with a few static reflectors.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{
    generate_csi, synthesize_gesture_paths, CsiTensor, GestureKind, PathComponent, Reflector, RoomLayout,
};
use crate::error::{invalid, Result};
use crate::schedule::{randomize_schedule, TemporalSchedule};

/// Receiver placement relative to the array centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub distance_m: f64,
    pub angle_deg: f64,
    /// Line-of-sight amplitude scale (1 = LoS).
    #[serde(default = "one")]
    pub los_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Placement {
    pub const fn new(distance_m: f64, angle_deg: f64) -> Self {
        Self { distance_m, angle_deg, los_scale: 1.0 }
    }

    pub fn position(&self) -> [f64; 3] {
        let a = self.angle_deg.to_radians();
        [self.distance_m * a.cos(), self.distance_m * a.sin(), 0.0]
    }

    /// Receiver `k` of a half-wavelength array centred on this placement,
    /// spread perpendicular to the line of sight.
    pub fn array_element(&self, k: usize, count: usize, wavelength: f64) -> [f64; 3] {
        let p = self.position();
        let a = self.angle_deg.to_radians();
        let off = (k as f64 - (count as f64 - 1.0) / 2.0) * 0.5 * wavelength;
        [p[0] - off * a.sin(), p[1] + off * a.cos(), p[2]]
    }
}

/// Parameters of the reference deployment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceConfig {
    pub carrier_freq_hz: f64,
    pub antennas: usize,
    pub packet_rate_hz: f64,
    pub gesture_duration_s: f64,
    pub gesture_distance_m: f64,
    pub hand_reflectivity: f64,
    pub noise_std: f64,
    pub reflectors: Vec<Reflector>,
    pub bob_s: Placement,
    pub bob_c: Placement,
    pub eve: Placement,
    pub samples_per_class: usize,
    /// Fraction of each class used for training; the rest is held out.
    pub train_fraction: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            carrier_freq_hz: 2.4e9,
            antennas: 8,
            packet_rate_hz: 1000.0,
            gesture_duration_s: 1.5,
            gesture_distance_m: 0.5,
            hand_reflectivity: 0.08,
            noise_std: 0.004,
            reflectors: vec![
                Reflector { position: [2.0, 3.0, 0.0], reflectivity: 0.5 },
                Reflector { position: [-1.0, 2.5, 0.3], reflectivity: 0.4 },
                Reflector { position: [3.0, -2.0, 0.0], reflectivity: 0.5 },
                Reflector { position: [1.0, -3.0, 0.5], reflectivity: 0.3 },
            ],
            bob_s: Placement::new(3.0, -35.0),
            bob_c: Placement::new(3.5, 60.0),
            eve: Placement::new(3.0, 25.0),
            samples_per_class: 200,
            train_fraction: 0.75,
        }
    }
}

impl ReferenceConfig {
    pub fn num_packets(&self) -> usize {
        (self.gesture_duration_s * self.packet_rate_hz).round() as usize
    }

    pub fn interval_s(&self) -> f64 {
        1.0 / self.packet_rate_hz
    }

    pub fn validate(&self) -> Result<()> {
        if self.antennas == 0 || self.num_packets() == 0 {
            return invalid("reference scenario needs antennas and packets");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return invalid("train fraction must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn layout(&self, receiver: Placement) -> RoomLayout {
        RoomLayout {
            carrier_freq_hz: self.carrier_freq_hz,
            num_antennas: self.antennas,
            spacing_wavelengths: 0.5,
            receiver: receiver.position(),
            reflectors: self.reflectors.clone(),
            los_scale: receiver.los_scale,
            hand_reflectivity: self.hand_reflectivity,
            noise_std: self.noise_std,
        }
    }

    pub fn wavelength(&self) -> f64 {
        crate::channel::SPEED_OF_LIGHT / self.carrier_freq_hz
    }

    pub fn hand_rest(&self) -> [f64; 3] {
        [self.gesture_distance_m, 0.0, 0.0]
    }

    /// Transmission schedule of one gesture recording.
    pub fn schedule(&self, gamma: f64, seed: u64) -> Result<TemporalSchedule> {
        if gamma == 0.0 {
            TemporalSchedule::regular(self.num_packets(), self.interval_s())
        } else {
            randomize_schedule(self.num_packets(), self.interval_s(), gamma, seed)
        }
    }
}

/// Layout of the reference deployment with its receiver at `receiver`.
pub fn layout() -> RoomLayout {
    let cfg = ReferenceConfig::default();
    cfg.layout(cfg.bob_s)
}

/// One performed gesture, independent of where it is observed from.
#[derive(Clone, Debug)]
pub struct GestureInstance {
    pub kind: GestureKind,
    pub seed: u64,
    pub paths: Vec<PathComponent>,
}

/// Seed of sample `index` of class `kind` under a base seed.
pub fn sample_seed(base: u64, kind: GestureKind, index: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((kind.index() as u64) << 32)
        .wrapping_add(index as u64)
}

pub fn gesture_instance(cfg: &ReferenceConfig, kind: GestureKind, seed: u64) -> Result<GestureInstance> {
    let paths = synthesize_gesture_paths(kind, cfg.gesture_duration_s, cfg.gesture_distance_m, seed)?;
    Ok(GestureInstance { kind, seed, paths })
}

/// CSI of a gesture seen by a receiver at `receiver` (array of transmit
/// antennas to one receive antenna).
pub fn observe(
    cfg: &ReferenceConfig,
    g: &GestureInstance,
    receiver: [f64; 3],
    los_scale: f64,
    schedule: &TemporalSchedule,
    noise_seed: u64,
) -> Result<CsiTensor> {
    let mut layout = cfg.layout(Placement::new(1.0, 0.0));
    layout.receiver = receiver;
    layout.los_scale = los_scale;
    let sc = layout.scenario(&g.paths, cfg.hand_rest())?;
    generate_csi(&sc, schedule.len(), schedule, noise_seed)
}

pub fn observe_at(
    cfg: &ReferenceConfig,
    g: &GestureInstance,
    at: Placement,
    schedule: &TemporalSchedule,
    noise_seed: u64,
) -> Result<CsiTensor> {
    observe(cfg, g, at.position(), at.los_scale, schedule, noise_seed)
}

/// Unencrypted observation: every transmit antenna sends the same symbol
/// (all-ones beamformer), so the receiver sees the column sum.
pub fn unencrypted_series(csi: &CsiTensor) -> Vec<Complex64> {
    csi.noisy.column_sums()
}

/// Train/test split of the per-class sample indices.
pub fn split(cfg: &ReferenceConfig) -> (Vec<usize>, Vec<usize>) {
    let n_train = ((cfg.samples_per_class as f64) * cfg.train_fraction).round() as usize;
    ((0..n_train).collect(), (n_train..cfg.samples_per_class).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::sensing_snr;

    #[test]
    fn reference_snr_is_plausible() {
        let cfg = ReferenceConfig::default();
        let g = gesture_instance(&cfg, GestureKind::PushPull, 1).unwrap();
        let s = cfg.schedule(0.0, 0).unwrap();
        let csi = observe_at(&cfg, &g, cfg.bob_s, &s, 2).unwrap();
        let snr = crate::metrics::to_db(sensing_snr(&csi));
        assert!((-35.0..0.0).contains(&snr), "{snr}");
        assert_eq!(csi.num_packets(), 1500);
    }

    #[test]
    fn array_elements_are_half_wavelength_apart() {
        let p = Placement::new(3.0, 30.0);
        let lam = 0.125;
        let a = p.array_element(0, 4, lam);
        let b = p.array_element(1, 4, lam);
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        assert!((d - lam / 2.0).abs() < 1e-12);
    }
}
