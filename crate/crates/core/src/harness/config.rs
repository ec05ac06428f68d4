//! Experiment configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::comm::Modulation;
use crate::error::{invalid, Error, Result};
use crate::optimizer::{AdmmParams, ObjectiveWeights};
use crate::reference::ReferenceConfig;
use crate::schedule::MAX_GAMMA;
use crate::sensing::{ClassifierConfig, FeatureConfig, SubmodelConfig};

/// Largest virtual aperture an attacker may synthesize.
pub const MAX_VIRTUAL_ANTENNAS: usize = 80;

/// How the eavesdropper uses its observations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackStrategy {
    /// Classify the single encrypted series as if it were clean CSI.
    NaiveNoKey,
    /// Several physical antennas at the eavesdropper, combined blindly.
    MultiAntennaNoKey { count: usize },
    /// Observations from several positions taken at different times.
    VirtualAntennas { count: usize },
}

impl AttackStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AttackStrategy::NaiveNoKey => Ok(()),
            AttackStrategy::MultiAntennaNoKey { count } if count >= 1 => Ok(()),
            AttackStrategy::VirtualAntennas { count } if (1..=MAX_VIRTUAL_ANTENNAS).contains(&count) => Ok(()),
            _ => invalid(format!("attack antenna count out of range: {self:?}")),
        }
    }

    pub fn views(&self) -> usize {
        match *self {
            AttackStrategy::NaiveNoKey => 1,
            AttackStrategy::MultiAntennaNoKey { count } | AttackStrategy::VirtualAntennas { count } => count,
        }
    }

    pub fn name(&self) -> String {
        match *self {
            AttackStrategy::NaiveNoKey => "naive".into(),
            AttackStrategy::MultiAntennaNoKey { count } => format!("multi_antenna_{count}"),
            AttackStrategy::VirtualAntennas { count } => format!("virtual_{count}"),
        }
    }
}

/// Where the sensing family of encryption matrices comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum PsiSource {
    /// `count` matrices with unit-modulus random coefficients.
    Random { count: usize, seed: u64 },
    /// `count` matrices optimized from random starts.
    Optimized { count: usize, seed: u64 },
    /// Matrices stored in the binary coefficient format.
    File { paths: Vec<PathBuf> },
}

impl PsiSource {
    pub fn count(&self) -> usize {
        match self {
            PsiSource::Random { count, .. } | PsiSource::Optimized { count, .. } => *count,
            PsiSource::File { paths } => paths.len(),
        }
    }
}

/// Axes swept by the experiment; empty axes are skipped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepAxes {
    /// Eavesdropper distances from the array, in metres.
    pub distance_m: Vec<f64>,
    pub packet_rate_hz: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Encoder counts of the sub-model.
    pub num_encoders: Vec<usize>,
    /// Transmit antenna counts of the access point.
    pub antennas: Vec<usize>,
}

/// Settings of the distance sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistanceSettings {
    /// Scrambling strengths of the matrices used along the sweep: the
    /// coefficients are `1 + s * u` with `u` a random unit phasor.
    pub strengths: Vec<f64>,
    pub seed: u64,
}

impl Default for DistanceSettings {
    fn default() -> Self {
        Self { strengths: vec![3.0, 5.0], seed: 17 }
    }
}

/// Settings of the communication link evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkSettings {
    pub modulations: Vec<Modulation>,
    pub payload_snr_db: Vec<f64>,
    pub payload_symbols: usize,
    /// Independent link runs per (modulation, SNR).
    pub seeds: usize,
    /// Block length of the keyed least-squares decryption.
    pub block_len: usize,
}

impl Default for LinkSettings {
    fn default() -> Self {
        Self {
            modulations: vec![Modulation::Qam32, Modulation::Qam64],
            payload_snr_db: vec![25.0],
            payload_symbols: 200,
            seeds: 10,
            block_len: 32,
        }
    }
}

/// Settings of the encryption-matrix optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizationSettings {
    pub weights: ObjectiveWeights,
    /// Bob's sensing floor sits at the median of random matrices plus this
    /// fraction of the remaining headroom to the full-power bound.
    pub floor_headroom: f64,
    /// Random matrices used to locate the median.
    pub floor_samples: usize,
    /// Size of the random and optimized populations.
    pub population: usize,
    /// Optimize against Eve's true channel instead of the feedback estimate.
    pub oracle_eve: bool,
    pub params: AdmmParams,
}

impl Default for OptimizationSettings {
    fn default() -> Self {
        Self {
            weights: ObjectiveWeights { w1: 1.0 / 3.0, w2: 1.0 / 3.0, w3: 1.0 / 3.0 },
            floor_headroom: 0.1,
            floor_samples: 16,
            population: 20,
            oracle_eve: false,
            params: AdmmParams { penalty: 1e9, max_iters: 600, feasible_tol: 1e-9, ..AdmmParams::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Optional TOML file holding the reference deployment; overrides
    /// `reference` when set.
    pub scenario: Option<PathBuf>,
    pub reference: ReferenceConfig,
    pub features: FeatureConfig,
    pub classifier: ClassifierConfig,
    pub submodel: SubmodelConfig,
    /// Pre-trained checkpoints; trained from scratch when absent.
    pub classifier_path: Option<PathBuf>,
    pub submodel_path: Option<PathBuf>,
    pub psi: PsiSource,
    /// Temporal randomization bound of the encrypted recordings.
    pub gamma: f64,
    /// Held-out recordings per class used for evaluation (all when absent).
    pub eval_per_class: Option<usize>,
    pub attacks: Vec<AttackStrategy>,
    /// Recordings scored per attack.
    pub attack_trials: usize,
    pub sweep: SweepAxes,
    pub distance: DistanceSettings,
    pub link: LinkSettings,
    pub optimization: OptimizationSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("results"),
            scenario: None,
            reference: ReferenceConfig::default(),
            features: FeatureConfig::default(),
            classifier: ClassifierConfig::default(),
            submodel: SubmodelConfig { epochs: 10, ..SubmodelConfig::default() },
            classifier_path: None,
            submodel_path: None,
            psi: PsiSource::Random { count: 2, seed: 100 },
            gamma: 0.5,
            eval_per_class: None,
            attacks: vec![
                AttackStrategy::NaiveNoKey,
                AttackStrategy::MultiAntennaNoKey { count: 4 },
                AttackStrategy::VirtualAntennas { count: 20 },
                AttackStrategy::VirtualAntennas { count: 80 },
            ],
            attack_trials: 200,
            sweep: SweepAxes {
                distance_m: (0..10).map(|i| 2.5 + 0.3 * i as f64).collect(),
                gamma: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
                ..SweepAxes::default()
            },
            distance: DistanceSettings::default(),
            link: LinkSettings::default(),
            optimization: OptimizationSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse a TOML file, resolve the scenario reference and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.load_scenario()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.scenario, &mut self.classifier_path, &mut self.submodel_path].into_iter().flatten() {
            fix(p);
        }
        if let PsiSource::File { paths } = &mut self.psi {
            paths.iter_mut().for_each(fix);
        }
    }

    fn load_scenario(&mut self) -> Result<()> {
        if let Some(p) = &self.scenario {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::InvalidArgument(format!("scenario file {}: {e}", p.display())))?;
            self.reference = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.reference.validate()?;
        self.features.validate()?;
        self.submodel.validate()?;
        self.optimization.weights.validate()?;
        if !(0.0..=MAX_GAMMA).contains(&self.gamma) {
            return invalid(format!("gamma must lie in [0, {MAX_GAMMA}]"));
        }
        if self.psi.count() == 0 {
            return invalid("the encryption-matrix family is empty");
        }
        for a in &self.attacks {
            a.validate()?;
        }
        let s = &self.sweep;
        if s.distance_m.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return invalid("sweep distances must be positive");
        }
        if s.packet_rate_hz.iter().any(|r| !(100.0..=1500.0).contains(r)) {
            return invalid("swept packet rates must lie in [100, 1500] pkt/s");
        }
        if s.gamma.iter().any(|g| !(0.0..=MAX_GAMMA).contains(g)) {
            return invalid(format!("swept gamma values must lie in [0, {MAX_GAMMA}]"));
        }
        if s.num_encoders.iter().any(|v| !(2..=16).contains(v)) {
            return invalid("swept encoder counts must lie in [2, 16]");
        }
        if s.antennas.iter().any(|q| *q == 0) {
            return invalid("swept antenna counts must be positive");
        }
        if !(0.0..1.0).contains(&self.optimization.floor_headroom) || self.optimization.floor_samples == 0 {
            return invalid("optimization floor settings out of range");
        }
        if self.link.seeds == 0 || self.link.payload_symbols == 0 {
            return invalid("link evaluation needs seeds and payload symbols");
        }
        let mut files: Vec<&PathBuf> = self.classifier_path.iter().chain(&self.submodel_path).collect();
        if let PsiSource::File { paths } = &self.psi {
            files.extend(paths);
        }
        if let Some(missing) = files.into_iter().find(|p| !p.exists()) {
            return invalid(format!("referenced file does not exist: {}", missing.display()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn virtual_antennas_are_capped() {
        assert!(AttackStrategy::VirtualAntennas { count: 80 }.validate().is_ok());
        assert!(AttackStrategy::VirtualAntennas { count: 81 }.validate().is_err());
        assert!(AttackStrategy::MultiAntennaNoKey { count: 0 }.validate().is_err());
    }

    #[test]
    fn missing_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "classifier_path = \"nope.mcnn\"\n").unwrap();
        assert!(ExperimentConfig::load(&path).is_err());
        std::fs::write(&path, "seed = 5\n[sweep]\ngamma = [0.2]\n").unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.sweep.gamma, vec![0.2]);
    }

    #[test]
    fn out_of_range_sweeps_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.packet_rate_hz = vec![50.0];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.gamma = vec![0.95];
        assert!(cfg.validate().is_err());
    }
}
