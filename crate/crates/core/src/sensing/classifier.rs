//! The frozen gesture classifier R: a two-stage convolutional network with
//! two dense layers over the Doppler spectrogram.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::features::FeatureMap;
use super::nn::{
    argmax, flatten_grads, grad_check, FD_STEP, one_hot, param_digest, read_checkpoint, softmax, softmax_xent,
    write_checkpoint, GradCheckReport, LayerKind, Optimizer, Sequential,
};
use crate::channel::GestureKind;
use crate::error::{invalid, Error, Result};

pub const NUM_CLASSES: usize = GestureKind::ALL.len();

/// Negative-side slope of R's rectifiers; keeps the input gradient non-zero
/// everywhere so the sub-model can be trained through R.
pub const LEAK: f64 = 0.01;

/// Training settings for R.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    /// Noise-only examples with a uniform target, as a fraction of the
    /// labelled set; teaches R to be uncertain on structureless input.
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, learning_rate: 2e-3, dropout: 0.5, outlier_fraction: 0.25, seed: 7 }
    }
}

/// Class probabilities and the predicted label.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub probs: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierR {
    net: Sequential,
    frames: usize,
    bins: usize,
    frozen: bool,
    trained: bool,
}

/// Per-epoch record of classifier training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassifierLog {
    pub losses: Vec<f64>,
    /// Accuracy on the evaluation set after each epoch (if one was given).
    pub eval_accuracy: Vec<f64>,
}

impl ClassifierR {
    /// Untrained, unfrozen network for `frames x bins` spectrograms.
    pub fn new(frames: usize, bins: usize, dropout: f64, seed: u64) -> Result<Self> {
        if frames < 4 || bins < 4 {
            return invalid("spectrogram too small for two pooling stages");
        }
        let (h2, w2) = ((frames / 2) / 2, (bins / 2) / 2);
        let kinds = [
            LayerKind::Conv2d { in_c: 1, out_c: 8, k: 3, pad: 1 },
            LayerKind::LeakyRelu { slope: LEAK },
            LayerKind::MaxPool2,
            LayerKind::Conv2d { in_c: 8, out_c: 16, k: 3, pad: 1 },
            LayerKind::LeakyRelu { slope: LEAK },
            LayerKind::MaxPool2,
            LayerKind::Dense { inputs: 16 * h2 * w2, outputs: 32 },
            LayerKind::LeakyRelu { slope: LEAK },
            LayerKind::Dropout { p: dropout },
            LayerKind::Dense { inputs: 32, outputs: NUM_CLASSES },
        ];
        let mut net = Sequential::build([1, frames, bins], &kinds)?;
        net.xavier_init(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { net, frames, bins, frozen: false, trained: false })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Clear the frozen flag (for fine-tuning experiments).
    pub fn thaw(&mut self) {
        self.frozen = false;
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    pub fn params(&self) -> Vec<f64> {
        self.net.flat_params()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::ContractViolation("classifier is frozen".into()));
        }
        self.net.set_flat_params(p)
    }

    /// SHA-256 over the parameter bytes.
    pub fn digest(&self) -> String {
        param_digest(&self.net.flat_params())
    }

    fn check_shape(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.frames * self.bins {
            return invalid(format!(
                "feature map has {} values, classifier expects {}x{}",
                x.len(),
                self.frames,
                self.bins
            ));
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_shape(x)?;
        Ok(self.net.infer(x))
    }

    /// Class probabilities for a feature map.
    pub fn infer(&self, fm: &FeatureMap) -> Result<Inference> {
        if fm.frames() != self.frames || fm.bins() != self.bins {
            return invalid(format!(
                "feature map is {}x{}, classifier expects {}x{}",
                fm.frames(),
                fm.bins(),
                self.frames,
                self.bins
            ));
        }
        let probs = softmax(&self.net.infer(&fm.flat()));
        let label = argmax(&probs);
        Ok(Inference { probs, label })
    }

    pub fn predict(&self, fm: &FeatureMap) -> Result<usize> {
        Ok(self.infer(fm)?.label)
    }

    pub fn accuracy(&self, data: &[(FeatureMap, usize)]) -> Result<f64> {
        if data.is_empty() {
            return invalid("empty evaluation set");
        }
        let mut ok = 0;
        for (fm, y) in data {
            if self.predict(fm)? == *y {
                ok += 1;
            }
        }
        Ok(ok as f64 / data.len() as f64)
    }

    /// Cross-entropy against `target` and its gradient with respect to the
    /// flattened input. Parameters are not touched (inference mode).
    pub fn loss_and_input_grad(&self, x: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_shape(x)?;
        let (z, tr) = self.net.forward(x, None);
        let (loss, gz) = softmax_xent(&z, target);
        Ok((loss, self.net.backward(&tr, &gz, None)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let meta = [
            self.frames as f64,
            self.bins as f64,
            if self.frozen { 1.0 } else { 0.0 },
            if self.trained { 1.0 } else { 0.0 },
        ];
        write_checkpoint(w, &[&self.net], &[&meta])
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let (mut nets, extra) = read_checkpoint(r)?;
        if nets.len() != 1 || extra.len() != 1 || extra[0].len() != 4 {
            return Err(Error::Format("not a classifier checkpoint".into()));
        }
        let m = &extra[0];
        Ok(Self {
            net: nets.remove(0),
            frames: m[0] as usize,
            bins: m[1] as usize,
            frozen: m[2] != 0.0,
            trained: m[3] != 0.0,
        })
    }
}

/// Structureless spectrogram: Rayleigh magnitudes, as from white noise.
fn outlier_map(frames: usize, bins: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..frames * bins)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            (a * a + b * b).sqrt()
        })
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Train R on labelled feature maps; the result is frozen. `eval` is an
/// optional held-out set scored after each epoch.
pub fn train_classifier(
    data: &[(FeatureMap, usize)],
    eval: Option<&[(FeatureMap, usize)]>,
    cfg: &ClassifierConfig,
) -> Result<(ClassifierR, ClassifierLog)> {
    let first = data.first().ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;
    let mut classes: Vec<usize> = data.iter().map(|d| d.1).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return invalid("training set must contain at least two classes");
    }
    if classes.iter().any(|c| *c >= NUM_CLASSES) {
        return invalid("label out of range");
    }
    let (frames, bins) = (first.0.frames(), first.0.bins());
    let mut r = ClassifierR::new(frames, bins, cfg.dropout, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let n_out = (data.len() as f64 * cfg.outlier_fraction).round() as usize;
    let mut examples: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(data.len() + n_out);
    for (fm, y) in data {
        if fm.frames() != frames || fm.bins() != bins {
            return invalid("inconsistent feature map shapes");
        }
        examples.push((fm.flat(), one_hot(*y, NUM_CLASSES)));
    }
    let uniform = vec![1.0 / NUM_CLASSES as f64; NUM_CLASSES];
    for _ in 0..n_out {
        examples.push((outlier_map(frames, bins, &mut rng), uniform.clone()));
    }
    let mut params = r.net.flat_params();
    let mut opt = Optimizer::adam(cfg.learning_rate, params.len());
    let mut log = ClassifierLog::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grads = r.net.zero_grads();
            for &i in batch {
                let (x, t) = &examples[i];
                let (z, tr) = r.net.forward(x, Some(&mut rng));
                let (loss, gz) = softmax_xent(&z, t);
                total += loss;
                r.net.backward(&tr, &gz, Some(&mut grads));
            }
            let mut g = flatten_grads(&grads);
            let inv = 1.0 / batch.len() as f64;
            g.iter_mut().for_each(|v| *v *= inv);
            opt.step(&mut params, &g);
            r.net.set_flat_params(&params)?;
        }
        let mean = total / examples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged("classifier loss became non-finite".into()));
        }
        log.losses.push(mean);
        if let Some(ev) = eval {
            log.eval_accuracy.push(r.accuracy(ev)?);
        }
    }
    r.trained = true;
    r.freeze();
    Ok((r, log))
}

/// Backprop check of R's parameters on a fixed batch.
pub fn grad_check_classifier(
    r: &ClassifierR,
    batch: &[(FeatureMap, usize)],
    probes: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let xs: Vec<(Vec<f64>, Vec<f64>)> = batch.iter().map(|(f, y)| (f.flat(), one_hot(*y, NUM_CLASSES))).collect();
    for (x, _) in &xs {
        r.check_shape(x)?;
    }
    let loss = |net: &Sequential| xs.iter().map(|(x, t)| softmax_xent(&net.infer(x), t).0).sum::<f64>();
    let mut grads = r.net.zero_grads();
    for (x, t) in &xs {
        let (z, tr) = r.net.forward(x, None);
        let (_, gz) = softmax_xent(&z, t);
        r.net.backward(&tr, &gz, Some(&mut grads));
    }
    let mut work = r.net.clone();
    grad_check(
        &r.net.flat_params(),
        &flatten_grads(&grads),
        |p| {
            work.set_flat_params(p).expect("same length");
            loss(&work)
        },
        probes,
        FD_STEP,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_set(n_per: usize, seed: u64) -> Vec<(FeatureMap, usize)> {
        // Each class lights up a distinct bin track.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for c in 0..NUM_CLASSES {
            for _ in 0..n_per {
                let mut v = vec![0.0; 8 * 8];
                for f in 0..8 {
                    for b in 0..8 {
                        v[f * 8 + b] = rng.gen_range(0.0..0.3);
                    }
                    v[f * 8 + (c + f / 4) % 8] += 1.0;
                }
                out.push((FeatureMap::from_flat(&v, 8, 8).unwrap(), c));
            }
        }
        out
    }

    #[test]
    fn probabilities_on_simplex() {
        let r = ClassifierR::new(8, 8, 0.5, 1).unwrap();
        let d = toy_set(1, 2);
        for (fm, _) in &d {
            let p = r.infer(fm).unwrap().probs;
            assert!(p.iter().all(|v| *v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn learns_toy_task_and_freezes() {
        let train = toy_set(20, 3);
        let test = toy_set(10, 4);
        let cfg = ClassifierConfig { epochs: 15, ..Default::default() };
        let (r, log) = train_classifier(&train, Some(&test), &cfg).unwrap();
        assert!(r.is_frozen());
        assert!(*log.eval_accuracy.last().unwrap() > 0.9, "{log:?}");
        let (r2, _) = train_classifier(&train, Some(&test), &cfg).unwrap();
        assert_eq!(r.digest(), r2.digest());
    }

    #[test]
    fn zero_epochs_is_chance() {
        let train = toy_set(20, 3);
        let cfg = ClassifierConfig { epochs: 0, ..Default::default() };
        let (r, _) = train_classifier(&train, None, &cfg).unwrap();
        let acc = r.accuracy(&toy_set(25, 9)).unwrap();
        assert!((acc - 0.125).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn single_class_rejected() {
        let d: Vec<_> = toy_set(3, 1).into_iter().filter(|x| x.1 == 0).collect();
        assert!(train_classifier(&d, None, &ClassifierConfig::default()).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let r = ClassifierR::new(8, 8, 0.5, 1).unwrap();
        let fm = FeatureMap::from_flat(&[0.0; 20], 4, 5).unwrap();
        assert!(r.infer(&fm).is_err());
    }

    #[test]
    fn frozen_rejects_updates_and_checkpoint_round_trips() {
        let mut r = ClassifierR::new(8, 8, 0.5, 1).unwrap();
        r.freeze();
        assert!(matches!(r.set_params(&r.params()), Err(Error::ContractViolation(_))));
        let mut buf = Vec::new();
        r.write_to(&mut buf).unwrap();
        let r2 = ClassifierR::read_from(buf.as_slice()).unwrap();
        assert_eq!(r, r2);
        assert_eq!(&buf[..5], b"MCNN1");
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let r = ClassifierR::new(8, 8, 0.5, 5).unwrap();
        let rep = grad_check_classifier(&r, &toy_set(1, 6)[..4], 120, 1).unwrap();
        assert!(rep.passed(1e-4), "{rep:?}");
    }
}
