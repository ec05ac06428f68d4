//! Experiment runner. The classifier and sub-model are trained once; every
//! role is then evaluated at the reference point and along each sweep axis.
//! A failing sweep point is logged and skipped without touching the rows of
//! other points.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::attack::{eve_features, run_attack, EveObservation};
use super::config::{AttackStrategy, ExperimentConfig, PsiSource};
use super::data::{reference_samples, Recorder, SampleId};
use crate::comm::{run_link, sigma_for_payload_snr, LinkConfig, Role};
use crate::crypto::{
    decrypt_block_ls, default_block_len, encrypt, hash_key, sample_psi, EncryptionMatrix, KeyPhi, MagnitudeRange,
};
use crate::error::{Error, Result};
use crate::metrics::{bob_sdnr, comm_snr, eve_sdnr, score_task, sensing_snr, to_db};
use crate::optimizer::{achievable_bounds, objectives, optimize_psi, ChannelStats, ObjectiveBundle, QosBounds};
use crate::reference::{unencrypted_series, Placement, ReferenceConfig};
use crate::sensing::{
    extract_features, train_classifier, train_submodel, ClassifierR, FeatureMap, SubmodelF, SubmodelSample,
};
use crate::stats::median;

/// One evaluated (point, role, matrix) combination. Metrics that do not
/// apply are left empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub point: usize,
    pub axis: String,
    pub coord: f64,
    pub role: String,
    pub psi: String,
    pub n: usize,
    pub accuracy: Option<f64>,
    pub sdnr_db: Option<f64>,
    pub snr_db: Option<f64>,
    pub ber: Option<f64>,
    pub similarity: Option<f64>,
}

impl ResultRow {
    fn new(point: usize, axis: &str, coord: f64, role: &str, psi: &str) -> Self {
        Self { point, axis: axis.into(), coord, role: role.into(), psi: psi.into(), ..Self::default() }
    }
}

/// One member of a random or optimized population, in dB.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationRow {
    pub kind: String,
    pub index: usize,
    pub seed: u64,
    pub feasible: bool,
    pub eta_c_bob_db: f64,
    pub eta_sd_bob_db: f64,
    pub eta_sd_eve_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub model: String,
    pub epoch: usize,
    pub loss: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub point: usize,
    pub axis: String,
    pub coord: f64,
    pub error: String,
}

/// Record of what a run used and produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub crate_version: String,
    pub seed: u64,
    pub derived_seeds: BTreeMap<String, u64>,
    pub failed_points: usize,
    /// SHA-256 of every CSV written.
    pub outputs: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

pub const RESULTS_CSV: &str = "results.csv";
pub const OPTIMIZATION_CSV: &str = "optimization.csv";
pub const TRAINING_CSV: &str = "training.csv";
pub const ERRORS_CSV: &str = "errors.csv";
pub const MANIFEST: &str = "manifest.toml";

/// Outcome of a run; timings are reported here rather than in the
/// bundle so the bundle stays reproducible.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub points: usize,
    pub failed_points: usize,
    pub timings: Vec<(String, f64)>,
}

impl RunSummary {
    pub fn timing(&self, stage: &str) -> Option<f64> {
        self.timings.iter().find(|t| t.0 == stage).map(|t| t.1)
    }
}

/// A member of the sensing family.
#[derive(Clone, Debug)]
pub struct FamilyMember {
    pub id: String,
    pub psi: EncryptionMatrix,
    pub key: KeyPhi,
}

/// Coefficients `1 + s * u` with `u` a random unit phasor, scaled into the
/// power budget: a matrix that only partly scrambles the channel.
pub fn partial_psi(antennas: usize, packets: usize, strength: f64, seed: u64) -> Result<EncryptionMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coeffs = (0..antennas * packets)
        .map(|_| Complex64::new(1.0, 0.0) + Complex64::from_polar(strength, rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)))
        .collect();
    EncryptionMatrix::projected(antennas, packets, coeffs, EncryptionMatrix::default_budget(antennas, packets))
}

/// Family member that encrypts a recording.
pub fn assign(sample: &SampleId, family_len: usize) -> usize {
    (sample.index + sample.label()) % family_len.max(1)
}

fn seed_mix(seed: u64, tag: u64) -> u64 {
    (seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)).rotate_left(23)
}

fn accuracy_of(preds: &[usize], labels: &[usize]) -> Result<f64> {
    Ok(score_task(preds, labels)?.accuracy)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Objective bundle of the reference deployment: Bob's statistics come from
/// the communication user's feedback and Eve's are estimated as the average
/// of the two users' feedback, or taken from her real channel when
/// `oracle_eve` is set. `truth` always carries Eve's real statistics.
pub struct OptimizationSetup {
    pub bundle: ObjectiveBundle,
    pub truth: ObjectiveBundle,
    pub bounds: QosBounds,
}

impl OptimizationSetup {
    pub fn new(rec: &Recorder, sample: &SampleId, cfg: &ExperimentConfig) -> Result<Self> {
        let rc = &rec.reference;
        let sched = rec.schedule(sample, 0.0)?;
        let bs = ChannelStats::from_feedback(&rec.record(sample, rc.bob_s, &sched)?)?;
        let bc = ChannelStats::from_feedback(&rec.record(sample, rc.bob_c, &sched)?)?;
        let eve_true = ChannelStats::from_feedback(&rec.record(sample, rc.eve, &sched)?)?;
        let eve_est = if cfg.optimization.oracle_eve { eve_true.clone() } else { ChannelStats::average(&[bs, bc.clone()])? };
        let bl = default_block_len(rc.antennas);
        let bundle = ObjectiveBundle::new(bc.clone(), eve_est, rc.noise_std, bl)?;
        let truth = ObjectiveBundle::new(bc, eve_true, rc.noise_std, bl)?;
        let m = rc.num_packets();
        let o = &cfg.optimization;
        let base = (0..o.floor_samples)
            .map(|i| {
                let p = sample_psi(rc.antennas, m, seed_mix(cfg.seed, 0xf100 + i as u64), MagnitudeRange::UNIT)?;
                Ok(objectives(&bundle, &p)?.eta_sd_bob)
            })
            .collect::<Result<Vec<_>>>()?;
        let med = median(&base);
        let (_, sd_max) = achievable_bounds(&bundle, m, EncryptionMatrix::default_budget(rc.antennas, m));
        let bounds = QosBounds { eps_c: 0.0, eps_sd: med + o.floor_headroom * (sd_max - med).max(0.0) };
        Ok(Self { bundle, truth, bounds })
    }

    pub fn optimize(&self, init: &EncryptionMatrix, cfg: &ExperimentConfig) -> Result<(EncryptionMatrix, bool)> {
        let o = &cfg.optimization;
        let (psi, trace) = optimize_psi(init, &o.weights, &self.bounds, &self.bundle, &o.params)?;
        Ok((psi, trace.feasible))
    }
}

/// Random and optimized populations scored against Eve's true channel.
pub fn optimization_population(
    setup: &OptimizationSetup,
    cfg: &ExperimentConfig,
    antennas: usize,
    packets: usize,
    count: usize,
) -> Result<Vec<OptimizationRow>> {
    let mut rows = Vec::with_capacity(2 * count);
    let db = |o: crate::optimizer::Objectives| (to_db(o.eta_c_bob), to_db(o.eta_sd_bob), to_db(o.eta_sd_eve));
    for i in 0..count {
        let seed = seed_mix(cfg.seed, 0x1_0000 + i as u64);
        let init = sample_psi(antennas, packets, seed, MagnitudeRange::UNIT)?;
        let (c, b, e) = db(objectives(&setup.truth, &init)?);
        rows.push(OptimizationRow {
            kind: "random".into(),
            index: i,
            seed,
            feasible: true,
            eta_c_bob_db: c,
            eta_sd_bob_db: b,
            eta_sd_eve_db: e,
        });
        let (opt, feasible) = setup.optimize(&init, cfg)?;
        let (c, b, e) = db(objectives(&setup.truth, &opt)?);
        rows.push(OptimizationRow {
            kind: "optimized".into(),
            index: i,
            seed,
            feasible,
            eta_c_bob_db: c,
            eta_sd_bob_db: b,
            eta_sd_eve_db: e,
        });
    }
    Ok(rows)
}

/// Trained models plus the data they were trained on.
pub struct Lab {
    pub cfg: ExperimentConfig,
    pub rec: Recorder,
    pub train: Vec<SampleId>,
    pub test: Vec<SampleId>,
    pub classifier: ClassifierR,
    pub family: Vec<FamilyMember>,
    pub submodel: SubmodelF,
    pub setup: OptimizationSetup,
    pub training: Vec<TrainingRow>,
    pub timings: Vec<(String, f64)>,
}

impl Lab {
    /// Build the reference data set, train R and F (or load them) and
    /// construct the sensing family.
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut timings = Vec::new();
        let rec = Recorder::new(cfg.reference.clone(), cfg.features.clone())?;
        let rc = &rec.reference;
        let (train, mut test) = reference_samples(rc, cfg.seed);
        if let Some(n) = cfg.eval_per_class {
            test.truncate(n * crate::sensing::NUM_CLASSES);
        }
        let mut training = Vec::new();

        let t = Instant::now();
        let classifier = match &cfg.classifier_path {
            Some(p) => ClassifierR::load(p)?,
            None => {
                let (r, rows) = train_reference_classifier(&rec, &train, &test, cfg)?;
                training.extend(rows);
                r
            }
        };
        timings.push(("classifier".to_string(), t.elapsed().as_secs_f64()));

        let setup = OptimizationSetup::new(&rec, &train[0], cfg)?;
        let t = Instant::now();
        let family = build_family(cfg, &setup, rc.antennas, rc.num_packets())?;
        timings.push(("family".to_string(), t.elapsed().as_secs_f64()));

        let t = Instant::now();
        let submodel = match &cfg.submodel_path {
            Some(p) => SubmodelF::load(p)?,
            None => {
                let (f, run) = fit_submodel(&rec, cfg, &classifier, &family, &train, &test, cfg.submodel.clone())?;
                for (e, l) in run.loss_curve.iter().enumerate() {
                    training.push(TrainingRow {
                        model: "submodel".into(),
                        epoch: e,
                        loss: *l,
                        eval_accuracy: run.eval_accuracy.get(e).copied(),
                    });
                }
                f
            }
        };
        timings.push(("submodel".to_string(), t.elapsed().as_secs_f64()));
        Ok(Self { cfg: cfg.clone(), rec, train, test, classifier, family, submodel, setup, training, timings })
    }

    fn eval_samples(&self) -> &[SampleId] {
        &self.test
    }

    /// Roles at the reference placements.
    pub fn reference_rows(&self, point: usize) -> Result<Vec<ResultRow>> {
        let rc = &self.rec.reference;
        let fc = &self.rec.features;
        let k = self.family.len();
        let gamma = self.cfg.gamma;
        #[derive(Default)]
        struct Acc {
            preds: Vec<usize>,
            labels: Vec<usize>,
            sdnr: Vec<f64>,
            sim: Vec<f64>,
        }
        impl Acc {
            fn push(&mut self, pred: usize, label: usize) {
                self.preds.push(pred);
                self.labels.push(label);
            }
        }
        let roles = ["eve", "eve_psi_only", "bob_s", "bob_s_wrong_key", "bob_s_no_f", "bob_s_decrypted"];
        let mut per: Vec<BTreeMap<&str, Acc>> =
            (0..k).map(|_| roles.iter().map(|r| (*r, Acc::default())).collect()).collect();
        let mut clean = Acc::default();
        let mut eve_clean = Acc::default();
        for sample in self.eval_samples() {
            let label = sample.label();
            let j = assign(sample, k);
            let member = &self.family[j];
            let reg = self.rec.schedule(sample, 0.0)?;
            let csi_b0 = self.rec.record(sample, rc.bob_s, &reg)?;
            let fm_clean = extract_features(&unencrypted_series(&csi_b0), &reg, fc)?;
            clean.push(self.classifier.predict(&fm_clean)?, label);
            clean.sdnr.push(sensing_snr(&csi_b0));
            let csi_e0 = self.rec.record(sample, rc.eve, &reg)?;
            eve_clean.push(self.classifier.predict(&extract_features(&unencrypted_series(&csi_e0), &reg, fc)?)?, label);
            eve_clean.sdnr.push(sensing_snr(&csi_e0));

            let acc = &mut per[j];
            // Eve with and without temporal randomization.
            let enc0 = encrypt(&csi_e0, &member.psi)?;
            let a = acc.get_mut("eve_psi_only").unwrap();
            a.push(self.classifier.predict(&eve_features(&enc0.values, &enc0, fc)?)?, label);
            a.sdnr.push(eve_sdnr(&csi_e0, &member.psi)?.value_linear);
            let sched = self.rec.schedule(sample, gamma)?;
            let csi_e = self.rec.record(sample, rc.eve, &sched)?;
            let enc = encrypt(&csi_e, &member.psi)?;
            let a = acc.get_mut("eve").unwrap();
            a.push(self.classifier.predict(&eve_features(&enc.values, &enc, fc)?)?, label);
            a.sdnr.push(eve_sdnr(&csi_e, &member.psi)?.value_linear);

            // Bob's sensing paths on the jittered recording.
            let csi_b = self.rec.record(sample, rc.bob_s, &sched)?;
            let enc_b = encrypt(&csi_b, &member.psi)?;
            let fm_sur = self.submodel.surrogate_features(&enc_b, &member.key, fc)?;
            let a = acc.get_mut("bob_s").unwrap();
            a.push(self.classifier.predict(&fm_sur)?, label);
            a.sim.push(fm_sur.cosine(&fm_clean));
            a.sdnr.push(bob_sdnr(&csi_b, &member.psi, default_block_len(rc.antennas))?.value_linear);
            let wrong = &self.family[(j + 1) % k].key;
            let fm_wrong = self.submodel.surrogate_features(&enc_b, wrong, fc)?;
            let a = acc.get_mut("bob_s_wrong_key").unwrap();
            a.push(self.classifier.predict(&fm_wrong)?, label);
            a.sim.push(fm_wrong.cosine(&fm_clean));
            let fm_enc = extract_features(&enc_b.values, &enc_b.schedule, fc)?;
            let a = acc.get_mut("bob_s_no_f").unwrap();
            a.push(self.classifier.predict(&fm_enc)?, label);
            a.sim.push(fm_enc.cosine(&fm_clean));
            let dec = decrypt_block_ls(&enc_b.values, &member.psi, default_block_len(rc.antennas))?;
            let fm_dec = extract_features(&dec.channels.column_sums(), &enc_b.schedule, fc)?;
            let a = acc.get_mut("bob_s_decrypted").unwrap();
            a.push(self.classifier.predict(&fm_dec)?, label);
            a.sim.push(fm_dec.cosine(&fm_clean));
        }
        let axis = "reference";
        let finish = |role: &str, psi: &str, a: &Acc| -> Result<ResultRow> {
            let mut r = ResultRow::new(point, axis, 0.0, role, psi);
            r.n = a.labels.len();
            r.accuracy = Some(accuracy_of(&a.preds, &a.labels)?);
            r.sdnr_db = (!a.sdnr.is_empty()).then(|| to_db(mean(&a.sdnr)));
            r.similarity = (!a.sim.is_empty()).then(|| mean(&a.sim));
            Ok(r)
        };
        let mut rows = vec![finish("clean", "none", &clean)?, finish("eve_clean", "none", &eve_clean)?];
        for (j, accs) in per.iter().enumerate() {
            for role in roles {
                if !accs[role].labels.is_empty() {
                    rows.push(finish(role, &self.family[j].id, &accs[role])?);
                }
            }
        }
        Ok(rows)
    }

    /// Observations of one recording for an attack strategy.
    pub fn eve_views(&self, sample: &SampleId, strategy: AttackStrategy) -> Result<Vec<crate::crypto::EncryptedCsiSeries>> {
        let rc = &self.rec.reference;
        let psi = &self.family[assign(sample, self.family.len())].psi;
        let lam = rc.wavelength();
        let eve = rc.eve;
        match strategy {
            AttackStrategy::NaiveNoKey => Ok(vec![self.rec.encrypted(sample, eve, psi, self.cfg.gamma)?]),
            AttackStrategy::MultiAntennaNoKey { count } => {
                let sched = self.rec.schedule(sample, self.cfg.gamma)?;
                (0..count)
                    .map(|i| {
                        let pos = eve.array_element(i, count, lam);
                        encrypt(&self.rec.record_at(sample, pos, eve.los_scale, &sched)?, psi)
                    })
                    .collect()
            }
            AttackStrategy::VirtualAntennas { count } => (0..count)
                .map(|i| {
                    // Each virtual element is a visit at a different time,
                    // hence its own transmission schedule.
                    let sched = self.rec.reference.schedule(self.cfg.gamma, sample.schedule_seed() ^ (i as u64 + 1) << 40)?;
                    let pos = eve.array_element(i, count, lam);
                    encrypt(&self.rec.record_at(sample, pos, eve.los_scale, &sched)?, psi)
                })
                .collect(),
        }
    }

    pub fn attack_rows(&self, point: usize, strategy: AttackStrategy) -> Result<Vec<ResultRow>> {
        let n = self.cfg.attack_trials.min(self.test.len());
        let obs = self.test[..n]
            .iter()
            .map(|s| Ok(EveObservation { views: self.eve_views(s, strategy)?, label: s.label() }))
            .collect::<Result<Vec<_>>>()?;
        let score = run_attack(strategy, &obs, &self.classifier, &self.rec.features)?;
        let mut r = ResultRow::new(point, "attack", strategy.views() as f64, &strategy.name(), "family");
        r.n = score.counts.total;
        r.accuracy = Some(score.accuracy);
        Ok(vec![r])
    }

    /// Eve at distance `d` along her bearing: the partial matrices without
    /// jitter, and the family with and without jitter.
    pub fn distance_rows(&self, point: usize, d: f64) -> Result<Vec<ResultRow>> {
        let rc = &self.rec.reference;
        let fc = &self.rec.features;
        let at = Placement { distance_m: d, ..rc.eve };
        let partial = self
            .cfg
            .distance
            .strengths
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok((format!("partial-{s}"), partial_psi(rc.antennas, rc.num_packets(), *s, seed_mix(self.cfg.distance.seed, i as u64))?))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut stats: BTreeMap<(String, &str), (Vec<usize>, Vec<usize>, Vec<f64>)> = BTreeMap::new();
        for sample in self.eval_samples() {
            let label = sample.label();
            let reg = self.rec.schedule(sample, 0.0)?;
            let csi0 = self.rec.record(sample, at, &reg)?;
            for (id, psi) in &partial {
                let enc = encrypt(&csi0, psi)?;
                let e = stats.entry((id.clone(), "eve_psi_only")).or_default();
                e.0.push(self.classifier.predict(&eve_features(&enc.values, &enc, fc)?)?);
                e.1.push(label);
                e.2.push(eve_sdnr(&csi0, psi)?.value_linear);
            }
            let member = &self.family[assign(sample, self.family.len())];
            let enc = encrypt(&csi0, &member.psi)?;
            let e = stats.entry(("family".into(), "eve_psi_only")).or_default();
            e.0.push(self.classifier.predict(&eve_features(&enc.values, &enc, fc)?)?);
            e.1.push(label);
            e.2.push(eve_sdnr(&csi0, &member.psi)?.value_linear);
            let sched = self.rec.schedule(sample, self.cfg.gamma)?;
            let csi = self.rec.record(sample, at, &sched)?;
            let enc = encrypt(&csi, &member.psi)?;
            let e = stats.entry(("family".into(), "eve")).or_default();
            e.0.push(self.classifier.predict(&eve_features(&enc.values, &enc, fc)?)?);
            e.1.push(label);
            e.2.push(eve_sdnr(&csi, &member.psi)?.value_linear);
        }
        stats
            .iter()
            .map(|((psi, role), (p, l, s))| {
                let mut r = ResultRow::new(point, "distance", d, role, psi);
                r.n = l.len();
                r.accuracy = Some(accuracy_of(p, l)?);
                r.sdnr_db = Some(to_db(mean(s)));
                Ok(r)
            })
            .collect()
    }

    /// Eve and Bob's sensing user under temporal randomization `gamma`.
    pub fn gamma_rows(&self, point: usize, gamma: f64) -> Result<Vec<ResultRow>> {
        let rc = &self.rec.reference;
        let fc = &self.rec.features;
        let (mut pe, mut pb, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for sample in self.eval_samples() {
            let member = &self.family[assign(sample, self.family.len())];
            let sched = self.rec.schedule(sample, gamma)?;
            let enc_e = encrypt(&self.rec.record(sample, rc.eve, &sched)?, &member.psi)?;
            pe.push(self.classifier.predict(&eve_features(&enc_e.values, &enc_e, fc)?)?);
            let enc_b = encrypt(&self.rec.record(sample, rc.bob_s, &sched)?, &member.psi)?;
            pb.push(self.classifier.predict(&self.submodel.surrogate_features(&enc_b, &member.key, fc)?)?);
            labels.push(sample.label());
        }
        let mut e = ResultRow::new(point, "gamma", gamma, "eve", "family");
        e.n = labels.len();
        e.accuracy = Some(accuracy_of(&pe, &labels)?);
        let mut b = ResultRow::new(point, "gamma", gamma, "bob_s", "family");
        b.n = labels.len();
        b.accuracy = Some(accuracy_of(&pb, &labels)?);
        Ok(vec![e, b])
    }

    /// Packet rate changes the number of packets per gesture, so the family
    /// and the sub-model are rebuilt for it; R works on the fixed feature
    /// grid and is reused.
    pub fn packet_rate_rows(&self, point: usize, rate: f64) -> Result<Vec<ResultRow>> {
        let rc = ReferenceConfig { packet_rate_hz: rate, ..self.rec.reference.clone() };
        let rec = Recorder::new(rc.clone(), self.rec.features.clone())?;
        let family = build_family(&self.cfg, &self.setup, rc.antennas, rc.num_packets())
            .or_else(|_| random_family(&self.cfg, rc.antennas, rc.num_packets()))?;
        let (f, _) = fit_submodel(&rec, &self.cfg, &self.classifier, &family, &self.train, &self.test, self.cfg.submodel.clone())?;
        let mut rows = self.sensing_rows(&rec, &family, &f, point, "packet_rate", rate)?;
        rows.extend(self.link_rows_for(&rec, point, "packet_rate", rate, self.cfg.link.payload_snr_db[0], &family[0].psi, "family")?);
        Ok(rows)
    }

    /// Sub-model with `v` encoders trained on a family of `2 v` matrices;
    /// one row per matrix.
    pub fn encoder_rows(&self, point: usize, v: usize) -> Result<Vec<ResultRow>> {
        let rc = &self.rec.reference;
        let cfg = ExperimentConfig { psi: PsiSource::Random { count: 2 * v, seed: seed_mix(self.cfg.seed, 0xe0) }, ..self.cfg.clone() };
        let family = random_family(&cfg, rc.antennas, rc.num_packets())?;
        let sub = crate::sensing::SubmodelConfig { num_encoders: v, ..self.cfg.submodel.clone() };
        let (f, _) = fit_submodel(&self.rec, &cfg, &self.classifier, &family, &self.train, &self.test, sub)?;
        let mut rows = Vec::new();
        let set = encrypted_set(&self.rec, &family, &self.test, rc.bob_s, self.cfg.gamma)?;
        for (j, member) in family.iter().enumerate() {
            let (mut p, mut l) = (Vec::new(), Vec::new());
            for (s, sample) in set.iter().zip(&self.test) {
                if assign(sample, family.len()) == j {
                    p.push(f.predict(&self.classifier, &s.series, &s.key, &self.rec.features)?);
                    l.push(s.label);
                }
            }
            let mut r = ResultRow::new(point, "num_encoders", v as f64, "bob_s", &member.id);
            r.n = l.len();
            r.accuracy = Some(accuracy_of(&p, &l)?);
            rows.push(r);
        }
        Ok(rows)
    }

    /// Access point with `q` antennas: clean and eavesdropped sensing with R,
    /// and the keyed link.
    pub fn antenna_rows(&self, point: usize, q: usize) -> Result<Vec<ResultRow>> {
        let rc = ReferenceConfig { antennas: q, ..self.rec.reference.clone() };
        let rec = Recorder::new(rc.clone(), self.rec.features.clone())?;
        let family = random_family(&self.cfg, q, rc.num_packets())?;
        let fc = &rec.features;
        let (mut pc, mut pe, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for sample in self.eval_samples() {
            let reg = rec.schedule(sample, 0.0)?;
            let csi = rec.record(sample, rc.bob_s, &reg)?;
            pc.push(self.classifier.predict(&extract_features(&unencrypted_series(&csi), &reg, fc)?)?);
            let enc = rec.encrypted(sample, rc.eve, &family[assign(sample, family.len())].psi, self.cfg.gamma)?;
            pe.push(self.classifier.predict(&eve_features(&enc.values, &enc, fc)?)?);
            labels.push(sample.label());
        }
        let mut c = ResultRow::new(point, "antennas", q as f64, "clean", "none");
        c.n = labels.len();
        c.accuracy = Some(accuracy_of(&pc, &labels)?);
        let mut e = ResultRow::new(point, "antennas", q as f64, "eve", "family");
        e.n = labels.len();
        e.accuracy = Some(accuracy_of(&pe, &labels)?);
        let mut rows = vec![c, e];
        let link = LinkConfig { block_len: self.cfg.link.block_len.max(default_block_len(q)), ..self.link_config(0.0) };
        rows.extend(self.link_rows_with(&rec, point, "antennas", q as f64, self.cfg.link.payload_snr_db[0], &family[0].psi, "family", link)?);
        Ok(rows)
    }

    fn sensing_rows(
        &self,
        rec: &Recorder,
        family: &[FamilyMember],
        f: &SubmodelF,
        point: usize,
        axis: &str,
        coord: f64,
    ) -> Result<Vec<ResultRow>> {
        let rc = &rec.reference;
        let fc = &rec.features;
        let (mut pe, mut pb, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for sample in self.eval_samples() {
            let member = &family[assign(sample, family.len())];
            let sched = rec.schedule(sample, self.cfg.gamma)?;
            let enc_e = encrypt(&rec.record(sample, rc.eve, &sched)?, &member.psi)?;
            pe.push(self.classifier.predict(&eve_features(&enc_e.values, &enc_e, fc)?)?);
            let enc_b = encrypt(&rec.record(sample, rc.bob_s, &sched)?, &member.psi)?;
            pb.push(self.classifier.predict(&f.surrogate_features(&enc_b, &member.key, fc)?)?);
            labels.push(sample.label());
        }
        let mut e = ResultRow::new(point, axis, coord, "eve", "family");
        e.n = labels.len();
        e.accuracy = Some(accuracy_of(&pe, &labels)?);
        let mut b = ResultRow::new(point, axis, coord, "bob_s", "family");
        b.n = labels.len();
        b.accuracy = Some(accuracy_of(&pb, &labels)?);
        Ok(vec![e, b])
    }

    fn link_config(&self, sigma: f64) -> LinkConfig {
        LinkConfig {
            modulation: self.cfg.link.modulations.first().copied().unwrap_or(crate::comm::Modulation::Qam64),
            payload_symbols: self.cfg.link.payload_symbols,
            sigma,
            block_len: self.cfg.link.block_len,
        }
    }

    fn link_rows_for(
        &self,
        rec: &Recorder,
        point: usize,
        axis: &str,
        coord: f64,
        snr_db: f64,
        psi: &EncryptionMatrix,
        psi_id: &str,
    ) -> Result<Vec<ResultRow>> {
        self.link_rows_with(rec, point, axis, coord, snr_db, psi, psi_id, self.link_config(0.0))
    }

    /// Keyed and keyless BER on the empty-room link to the communication
    /// user, for every configured modulation.
    #[allow(clippy::too_many_arguments)]
    fn link_rows_with(
        &self,
        rec: &Recorder,
        point: usize,
        axis: &str,
        coord: f64,
        snr_db: f64,
        psi: &EncryptionMatrix,
        psi_id: &str,
        base: LinkConfig,
    ) -> Result<Vec<ResultRow>> {
        let rc = &rec.reference;
        let sched = regular_schedule(rc)?;
        let plain = EncryptionMatrix::all_ones(rc.antennas, rc.num_packets())?;
        let mut rows = Vec::new();
        for &modulation in &self.cfg.link.modulations {
            for s in 0..self.cfg.link.seeds {
                let seed = seed_mix(self.cfg.seed, 0x11_0000 + s as u64);
                let csi = rec.static_link(rc.bob_c, &sched, seed)?;
                let sigma = sigma_for_payload_snr(&csi, snr_db);
                let cfg = LinkConfig { modulation, sigma, ..base };
                for (role, p, id) in
                    [(Role::BobKeyed, &plain, "none"), (Role::BobKeyed, psi, psi_id), (Role::BobKeyless, psi, psi_id)]
                {
                    let rep = run_link(&csi, p, role, &cfg, seed)?;
                    let name = match (role, id) {
                        (_, "none") => "bob_c_plain",
                        (Role::BobKeyed, _) => "bob_c",
                        _ => "bob_c_keyless",
                    };
                    let mut r = ResultRow::new(point, axis, coord, name, id);
                    r.n = rep.score.counts.total_bits;
                    r.ber = Some(rep.score.ber);
                    r.snr_db = Some(rep.payload_snr_db);
                    r.psi = format!("{id}:{}:{s}", modulation.name());
                    rows.push(r);
                }
            }
        }
        Ok(rows)
    }

    /// BER per role at one payload SNR, plus the LTS SNR each matrix leaves
    /// at the communication user.
    pub fn link_rows(&self, point: usize, snr_db: f64, optimized: &EncryptionMatrix) -> Result<Vec<ResultRow>> {
        let rc = &self.rec.reference;
        let random = &self.family[0].psi;
        let mut rows = self.link_rows_for(&self.rec, point, "link", snr_db, snr_db, optimized, "optimized")?;
        rows.extend(
            self.link_rows_for(&self.rec, point, "link", snr_db, snr_db, random, "random")?
                .into_iter()
                .filter(|r| r.role != "bob_c_plain"),
        );
        let sched = regular_schedule(rc)?;
        let csi = self.rec.static_link(rc.bob_c, &sched, seed_mix(self.cfg.seed, 0x11_0000))?;
        let sigma = sigma_for_payload_snr(&csi, snr_db);
        let plain = EncryptionMatrix::all_ones(rc.antennas, rc.num_packets())?;
        for (id, p) in [("none", &plain), ("optimized", optimized), ("random", random)] {
            let lts = crate::crypto::encrypt_grid(&csi.clean, p)?;
            let mut r = ResultRow::new(point, "link", snr_db, "lts", id);
            r.n = lts.len();
            r.snr_db = Some(comm_snr(&lts, sigma)?.db);
            rows.push(r);
        }
        Ok(rows)
    }
}

fn regular_schedule(rc: &ReferenceConfig) -> Result<crate::schedule::TemporalSchedule> {
    rc.schedule(0.0, 0)
}

/// Train R on clean recordings at the sensing user's placement.
pub fn train_reference_classifier(
    rec: &Recorder,
    train: &[SampleId],
    test: &[SampleId],
    cfg: &ExperimentConfig,
) -> Result<(ClassifierR, Vec<TrainingRow>)> {
    let at = rec.reference.bob_s;
    let (r, log) = train_classifier(&clean_set(rec, train, at)?, Some(&clean_set(rec, test, at)?), &cfg.classifier)?;
    let rows = log
        .losses
        .iter()
        .enumerate()
        .map(|(e, l)| TrainingRow {
            model: "classifier".into(),
            epoch: e,
            loss: *l,
            eval_accuracy: log.eval_accuracy.get(e).copied(),
        })
        .collect();
    Ok((r, rows))
}

fn clean_set(rec: &Recorder, samples: &[SampleId], at: Placement) -> Result<Vec<(FeatureMap, usize)>> {
    samples.iter().map(|s| Ok((rec.clean_features(s, at)?, s.label()))).collect()
}

fn encrypted_set(
    rec: &Recorder,
    family: &[FamilyMember],
    samples: &[SampleId],
    at: Placement,
    gamma: f64,
) -> Result<Vec<SubmodelSample>> {
    samples
        .iter()
        .map(|s| {
            let m = &family[assign(s, family.len())];
            Ok(SubmodelSample { series: rec.encrypted(s, at, &m.psi, gamma)?, key: m.key.clone(), label: s.label() })
        })
        .collect()
}

fn fit_submodel(
    rec: &Recorder,
    cfg: &ExperimentConfig,
    r: &ClassifierR,
    family: &[FamilyMember],
    train: &[SampleId],
    test: &[SampleId],
    sub: crate::sensing::SubmodelConfig,
) -> Result<(SubmodelF, crate::sensing::TrainRun)> {
    let at = rec.reference.bob_s;
    let data = encrypted_set(rec, family, train, at, cfg.gamma)?;
    let eval = encrypted_set(rec, family, test, at, cfg.gamma)?;
    let mut f = SubmodelF::new(&sub, rec.reference.num_packets())?;
    let run = train_submodel(&mut f, r, &data, Some(&eval), &rec.features)?;
    Ok((f, run))
}

fn member(id: String, psi: EncryptionMatrix) -> FamilyMember {
    let key = hash_key(&psi);
    FamilyMember { id, psi, key }
}

fn random_family(cfg: &ExperimentConfig, antennas: usize, packets: usize) -> Result<Vec<FamilyMember>> {
    let (count, seed) = match &cfg.psi {
        PsiSource::Random { count, seed } | PsiSource::Optimized { count, seed } => (*count, *seed),
        PsiSource::File { paths } => (paths.len(), cfg.seed),
    };
    (0..count)
        .map(|i| Ok(member(format!("random-{i}"), sample_psi(antennas, packets, seed + i as u64, MagnitudeRange::UNIT)?)))
        .collect()
}

/// The sensing family for an access point with the given shape.
pub fn build_family(
    cfg: &ExperimentConfig,
    setup: &OptimizationSetup,
    antennas: usize,
    packets: usize,
) -> Result<Vec<FamilyMember>> {
    match &cfg.psi {
        PsiSource::Random { .. } => random_family(cfg, antennas, packets),
        PsiSource::Optimized { .. } => {
            if setup.bundle.antennas() != antennas || cfg.reference.num_packets() != packets {
                return Err(Error::InvalidArgument("optimized family only exists for the reference shape".into()));
            }
            random_family(cfg, antennas, packets)?
                .into_iter()
                .enumerate()
                .map(|(i, m)| Ok(member(format!("optimized-{i}"), setup.optimize(&m.psi, cfg)?.0)))
                .collect()
        }
        PsiSource::File { paths } => paths
            .iter()
            .map(|p| {
                let psi = EncryptionMatrix::load(p)?;
                if psi.antennas() != antennas || psi.packets() != packets {
                    return Err(Error::InvalidArgument(format!("{} has the wrong shape", p.display())));
                }
                let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok(member(id, psi))
            })
            .collect(),
    }
}

struct Collector {
    rows: Vec<ResultRow>,
    errors: Vec<ErrorRow>,
    next: usize,
}

impl Collector {
    fn point(&mut self, axis: &str, coord: f64, f: impl FnOnce(usize) -> Result<Vec<ResultRow>>) {
        let index = self.next;
        self.next += 1;
        match f(index) {
            Ok(rows) => self.rows.extend(rows),
            Err(e) => {
                let err = Error::SweepPoint { index, source: Box::new(e) };
                eprintln!("{axis}={coord}: {err}");
                self.errors.push(ErrorRow { point: index, axis: axis.into(), coord, error: err.to_string() });
            }
        }
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

pub const RESULT_HEADER: &[&str] =
    &["point", "axis", "coord", "role", "psi", "n", "accuracy", "sdnr_db", "snr_db", "ber", "similarity"];
pub const OPTIMIZATION_HEADER: &[&str] =
    &["kind", "index", "seed", "feasible", "eta_c_bob_db", "eta_sd_bob_db", "eta_sd_eve_db"];
pub const TRAINING_HEADER: &[&str] = &["model", "epoch", "loss", "eval_accuracy"];
pub const ERROR_HEADER: &[&str] = &["point", "axis", "coord", "error"];

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Run the whole experiment and write the result bundle to `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let out = cfg.out_dir.clone();
    fs::create_dir_all(out.join("models"))?;
    let lab = Lab::prepare(cfg)?;
    let mut timings = lab.timings.clone();
    lab.classifier.save(&out.join("models/classifier.mcnn"))?;
    lab.submodel.save(&out.join("models/submodel.mcnn"))?;
    for m in &lab.family {
        m.psi.save(&out.join(format!("models/{}.psi", m.id)))?;
    }

    let mut col = Collector { rows: Vec::new(), errors: Vec::new(), next: 0 };
    let t = Instant::now();
    col.point("reference", 0.0, |p| lab.reference_rows(p));
    timings.push(("reference".into(), t.elapsed().as_secs_f64()));

    let t = Instant::now();
    for &a in &cfg.attacks {
        col.point("attack", a.views() as f64, |p| lab.attack_rows(p, a));
    }
    timings.push(("attack".into(), t.elapsed().as_secs_f64()));

    let t = Instant::now();
    for &d in &cfg.sweep.distance_m {
        col.point("distance", d, |p| lab.distance_rows(p, d));
    }
    for &g in &cfg.sweep.gamma {
        col.point("gamma", g, |p| lab.gamma_rows(p, g));
    }
    for &r in &cfg.sweep.packet_rate_hz {
        col.point("packet_rate", r, |p| lab.packet_rate_rows(p, r));
    }
    for &v in &cfg.sweep.num_encoders {
        col.point("num_encoders", v as f64, |p| lab.encoder_rows(p, v));
    }
    for &q in &cfg.sweep.antennas {
        col.point("antennas", q as f64, |p| lab.antenna_rows(p, q));
    }
    timings.push(("sweeps".into(), t.elapsed().as_secs_f64()));

    let rc = &lab.rec.reference;
    let t = Instant::now();
    let link_seed = seed_mix(cfg.seed, 0x71);
    let link_psi = sample_psi(rc.antennas, rc.num_packets(), link_seed, MagnitudeRange::UNIT)
        .and_then(|init| lab.setup.optimize(&init, cfg));
    match link_psi {
        Ok((psi, _)) => {
            psi.save(&out.join("models/link_optimized.psi"))?;
            for &snr in &cfg.link.payload_snr_db {
                col.point("link", snr, |p| lab.link_rows(p, snr, &psi));
            }
        }
        Err(e) => col.point("link", f64::NAN, |_| Err(e)),
    }
    timings.push(("link".into(), t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let population = optimization_population(&lab.setup, cfg, rc.antennas, rc.num_packets(), cfg.optimization.population);
    let optimization = match population {
        Ok(rows) => rows,
        Err(e) => {
            col.point("optimization", cfg.optimization.population as f64, |_| Err(e));
            Vec::new()
        }
    };
    timings.push(("optimization".into(), t.elapsed().as_secs_f64()));

    write_csv(&out.join(RESULTS_CSV), &col.rows, RESULT_HEADER)?;
    write_csv(&out.join(OPTIMIZATION_CSV), &optimization, OPTIMIZATION_HEADER)?;
    write_csv(&out.join(TRAINING_CSV), &lab.training, TRAINING_HEADER)?;
    write_csv(&out.join(ERRORS_CSV), &col.errors, ERROR_HEADER)?;

    let mut outputs = BTreeMap::new();
    for name in [RESULTS_CSV, OPTIMIZATION_CSV, TRAINING_CSV, ERRORS_CSV] {
        outputs.insert(name.to_string(), sha256_file(&out.join(name))?);
    }
    let derived_seeds = BTreeMap::from([
        ("classifier".to_string(), cfg.classifier.seed),
        ("submodel".to_string(), cfg.submodel.seed),
        ("link_psi".to_string(), link_seed),
        ("distance_psi".to_string(), cfg.distance.seed),
        ("recordings".to_string(), cfg.seed),
    ]);
    let manifest = Manifest {
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        derived_seeds,
        failed_points: col.errors.len(),
        outputs,
        config: cfg.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(out.join(MANIFEST), text)?;
    Ok(RunSummary { out_dir: out, points: col.next, failed_points: col.errors.len(), timings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignment_spreads_every_class_over_the_family() {
        let rc = ReferenceConfig { samples_per_class: 8, ..ReferenceConfig::default() };
        let (train, _) = reference_samples(&rc, 3);
        for k in [2usize, 3, 4] {
            for c in 0..8 {
                let used: std::collections::BTreeSet<usize> =
                    train.iter().filter(|s| s.label() == c).map(|s| assign(s, k)).collect();
                assert_eq!(used.len(), k);
            }
        }
    }

    #[test]
    fn partial_matrices_respect_the_budget() {
        let p = partial_psi(4, 50, 3.0, 1).unwrap();
        assert!(p.power() <= p.power_budget() * (1.0 + 1e-12));
        assert_ne!(p, partial_psi(4, 50, 3.0, 2).unwrap());
    }

    #[test]
    fn failing_points_do_not_touch_other_rows() {
        let mut col = Collector { rows: Vec::new(), errors: Vec::new(), next: 0 };
        col.point("a", 1.0, |p| Ok(vec![ResultRow::new(p, "a", 1.0, "x", "none")]));
        col.point("a", 2.0, |_| Err(Error::InvalidArgument("boom".into())));
        col.point("a", 3.0, |p| Ok(vec![ResultRow::new(p, "a", 3.0, "x", "none")]));
        assert_eq!(col.rows.len(), 2);
        assert_eq!(col.rows[1].point, 2);
        assert_eq!(col.errors.len(), 1);
        assert_eq!(col.errors[0].point, 1);
    }

    #[test]
    fn rows_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let mut r = ResultRow::new(0, "gamma", 0.5, "eve", "family");
        r.accuracy = Some(0.125);
        r.n = 8;
        write_csv(&path, &[r.clone()], RESULT_HEADER).unwrap();
        let back: Vec<ResultRow> = read_csv(&path).unwrap();
        assert_eq!(back, vec![r]);
        write_csv::<ResultRow>(&path, &[], RESULT_HEADER).unwrap();
        assert!(read_csv::<ResultRow>(&path).unwrap().is_empty());
    }
}
