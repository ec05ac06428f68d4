//! Reference gesture recordings: deterministic per-sample seeds, CSI at any
//! receiver placement, and the feature maps derived from them.

use crate::channel::{generate_csi, CsiTensor, GestureKind};
use crate::crypto::{encrypt, EncryptedCsiSeries, EncryptionMatrix};
use crate::error::Result;
use crate::reference::{gesture_instance, observe, sample_seed, split, unencrypted_series, Placement, ReferenceConfig};
use crate::schedule::TemporalSchedule;
use crate::sensing::{extract_features, FeatureConfig, FeatureMap};

/// One recording of the reference set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleId {
    pub kind: GestureKind,
    pub index: usize,
    pub seed: u64,
}

impl SampleId {
    pub fn label(&self) -> usize {
        self.kind.index()
    }

    /// Seed of the jittered schedule used when this gesture is recorded.
    pub fn schedule_seed(&self) -> u64 {
        self.seed ^ 0x5c4e_d01e
    }
}

/// Train and test recordings, interleaved by class.
pub fn reference_samples(rc: &ReferenceConfig, base_seed: u64) -> (Vec<SampleId>, Vec<SampleId>) {
    let (tr, te) = split(rc);
    let samples = |idx: &[usize]| {
        idx.iter()
            .flat_map(|&i| {
                GestureKind::ALL.iter().map(move |&kind| SampleId { kind, index: i, seed: sample_seed(base_seed, kind, i) })
            })
            .collect::<Vec<_>>()
    };
    (samples(&tr), samples(&te))
}

/// Noise seed of a recording at a receiver position.
fn noise_seed(sample: &SampleId, receiver: [f64; 3]) -> u64 {
    let mut h = sample.seed ^ 0x6e6f_6973_65;
    for c in receiver {
        h = h.rotate_left(17) ^ c.to_bits();
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Everything needed to reproduce recordings of the reference deployment.
#[derive(Clone, Debug)]
pub struct Recorder {
    pub reference: ReferenceConfig,
    pub features: FeatureConfig,
}

impl Recorder {
    pub fn new(reference: ReferenceConfig, features: FeatureConfig) -> Result<Self> {
        reference.validate()?;
        features.validate()?;
        Ok(Self { reference, features })
    }

    /// CSI of a gesture observed by a single antenna at `receiver`.
    pub fn record_at(
        &self,
        sample: &SampleId,
        receiver: [f64; 3],
        los_scale: f64,
        schedule: &TemporalSchedule,
    ) -> Result<CsiTensor> {
        let g = gesture_instance(&self.reference, sample.kind, sample.seed)?;
        observe(&self.reference, &g, receiver, los_scale, schedule, noise_seed(sample, receiver))
    }

    pub fn record(&self, sample: &SampleId, at: Placement, schedule: &TemporalSchedule) -> Result<CsiTensor> {
        self.record_at(sample, at.position(), at.los_scale, schedule)
    }

    /// CSI of the empty room (static paths only) at `at`.
    pub fn static_link(&self, at: Placement, schedule: &TemporalSchedule, seed: u64) -> Result<CsiTensor> {
        let rc = &self.reference;
        let sc = rc.layout(at).scenario(&[], rc.hand_rest())?;
        generate_csi(&sc, schedule.len(), schedule, seed)
    }

    /// Schedule of a recording under jitter level `gamma`.
    pub fn schedule(&self, sample: &SampleId, gamma: f64) -> Result<TemporalSchedule> {
        self.reference.schedule(gamma, sample.schedule_seed())
    }

    /// Features of the unencrypted recording on a regular schedule.
    pub fn clean_features(&self, sample: &SampleId, at: Placement) -> Result<FeatureMap> {
        let sched = self.schedule(sample, 0.0)?;
        let csi = self.record(sample, at, &sched)?;
        extract_features(&unencrypted_series(&csi), &sched, &self.features)
    }

    /// Encrypted recording at `at`.
    pub fn encrypted(&self, sample: &SampleId, at: Placement, psi: &EncryptionMatrix, gamma: f64) -> Result<EncryptedCsiSeries> {
        let sched = self.schedule(sample, gamma)?;
        let csi = self.record(sample, at, &sched)?;
        encrypt(&csi, psi)
    }
}
