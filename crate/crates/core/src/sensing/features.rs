//! Doppler spectrogram features: linear-interpolation resampling of the
//! (possibly jittered) packet series onto a uniform grid, mean removal, a
//! short-time DFT over the low-Doppler band, magnitude and Frobenius
//! normalization. Every stage has an explicit adjoint so gradients can flow
//! from the classifier back to the complex series.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{invalid, Result};
use crate::schedule::TemporalSchedule;

/// Spectrogram parameters.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Uniform resampling grid rate.
    pub grid_rate_hz: f64,
    /// STFT window length in grid samples (Hann window).
    pub window: usize,
    pub hop: usize,
    /// Number of retained DFT bins, centred on zero Doppler.
    pub bins: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { grid_rate_hz: 1000.0, window: 256, hop: 64, bins: 12 }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grid_rate_hz.is_finite() && self.grid_rate_hz > 0.0) {
            return invalid("feature grid rate must be positive");
        }
        if self.window < 2 || self.hop == 0 || self.bins == 0 || self.bins > self.window {
            return invalid("feature window/hop/bins out of range");
        }
        Ok(())
    }

    /// Grid length for a schedule.
    pub fn grid_len(&self, schedule: &TemporalSchedule) -> usize {
        (schedule.duration_s() * self.grid_rate_hz).round() as usize
    }

    pub fn frames_for(&self, grid_len: usize) -> usize {
        if grid_len < self.window {
            0
        } else {
            (grid_len - self.window) / self.hop + 1
        }
    }

    /// Signed frequency of retained bin `b`.
    pub fn bin_hz(&self, b: usize) -> f64 {
        (b as f64 - (self.bins / 2) as f64) * self.grid_rate_hz / self.window as f64
    }
}

/// Spectrogram plus the resampled amplitude and unwrapped phase series.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `[frame][bin]`, non-negative, unit Frobenius norm (unless all zero).
    pub spectrogram: Vec<Vec<f64>>,
    pub amp_series: Vec<f64>,
    pub phase_series: Vec<f64>,
}

impl FeatureMap {
    pub fn frames(&self) -> usize {
        self.spectrogram.len()
    }

    pub fn bins(&self) -> usize {
        self.spectrogram.first().map_or(0, Vec::len)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.spectrogram.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64], frames: usize, bins: usize) -> Result<Self> {
        if flat.len() != frames * bins {
            return invalid("flat spectrogram length mismatch");
        }
        Ok(Self {
            spectrogram: flat.chunks(bins.max(1)).map(<[f64]>::to_vec).collect(),
            amp_series: Vec::new(),
            phase_series: Vec::new(),
        })
    }

    /// Cosine similarity of two spectrograms.
    pub fn cosine(&self, other: &FeatureMap) -> f64 {
        let a = self.flat();
        let b = other.flat();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }

    /// Signed frequency of the strongest bin per frame.
    pub fn ridge_track(&self, cfg: &FeatureConfig) -> Vec<f64> {
        self.spectrogram
            .iter()
            .map(|row| cfg.bin_hz(crate::sensing::nn::argmax(row)))
            .collect()
    }

    /// Mean over frames of peak energy divided by mean off-peak energy.
    pub fn ridge_to_background(&self) -> f64 {
        let mut acc = 0.0;
        for row in &self.spectrogram {
            let e: Vec<f64> = row.iter().map(|v| v * v).collect();
            let k = crate::sensing::nn::argmax(&e);
            let rest: f64 = e.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, v)| v).sum::<f64>()
                / (e.len().max(2) - 1) as f64;
            acc += e[k] / rest.max(1e-300);
        }
        acc / self.spectrogram.len().max(1) as f64
    }
}

/// Linear interpolation weights from packet times to grid times:
/// `r[k] = w[k] * x[i[k]] + (1 - w[k]) * x[i[k] + 1]`.
#[derive(Clone, Debug)]
struct Resampler {
    idx: Vec<usize>,
    w: Vec<f64>,
}

impl Resampler {
    fn new(timestamps: &[f64], grid_len: usize, rate: f64) -> Self {
        let n = timestamps.len();
        let mut idx = Vec::with_capacity(grid_len);
        let mut w = Vec::with_capacity(grid_len);
        let mut i = 0usize;
        for k in 0..grid_len {
            let t = k as f64 / rate;
            if n == 1 || t <= timestamps[0] {
                idx.push(0);
                w.push(1.0);
                continue;
            }
            if t >= timestamps[n - 1] {
                idx.push(n - 2);
                w.push(0.0);
                continue;
            }
            while i + 2 < n && timestamps[i + 1] <= t {
                i += 1;
            }
            let (t0, t1) = (timestamps[i], timestamps[i + 1]);
            idx.push(i);
            w.push((t1 - t) / (t1 - t0));
        }
        Self { idx, w }
    }

    fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        self.idx
            .iter()
            .zip(&self.w)
            .map(|(&i, &w)| if w == 1.0 { x[i] } else { x[i] * w + x[i + 1] * (1.0 - w) })
            .collect()
    }

    fn adjoint(&self, g: &[Complex64], n: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); n];
        for ((&i, &w), gk) in self.idx.iter().zip(&self.w).zip(g) {
            out[i] += gk * w;
            if w != 1.0 {
                out[i + 1] += gk * (1.0 - w);
            }
        }
        out
    }
}

/// Values kept from a forward pass for [`feature_backward`].
#[derive(Clone, Debug)]
pub struct FeatureTape {
    resampler: Resampler,
    series_len: usize,
    spectra: Vec<Vec<Complex64>>,
    mags: Vec<f64>,
    norm: f64,
    cfg: FeatureConfig,
}

const NORM_EPS: f64 = 1e-30;

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

fn twiddles(cfg: &FeatureConfig) -> Vec<Vec<Complex64>> {
    let w = cfg.window;
    (0..cfg.bins)
        .map(|b| {
            let k = b as f64 - (cfg.bins / 2) as f64;
            (0..w).map(|n| Complex64::from_polar(1.0, -2.0 * PI * k * n as f64 / w as f64)).collect()
        })
        .collect()
}

fn unwrap_phase(x: &[Complex64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut prev = 0.0;
    let mut offset = 0.0;
    for (i, v) in x.iter().enumerate() {
        let p = v.arg();
        if i > 0 {
            let d = p - prev;
            if d > PI {
                offset -= 2.0 * PI;
            } else if d < -PI {
                offset += 2.0 * PI;
            }
        }
        prev = p;
        out.push(p + offset);
    }
    out
}

/// Forward pass returning the feature map and the tape for backprop.
pub fn extract_features_tape(
    series: &[Complex64],
    schedule: &TemporalSchedule,
    cfg: &FeatureConfig,
) -> Result<(FeatureMap, FeatureTape)> {
    cfg.validate()?;
    if series.len() != schedule.len() {
        return invalid(format!("series has {} packets but schedule has {}", series.len(), schedule.len()));
    }
    let grid_len = cfg.grid_len(schedule);
    if series.len() < cfg.window || grid_len < cfg.window {
        return invalid(format!("series of {} packets is shorter than the STFT window {}", series.len(), cfg.window));
    }
    let resampler = Resampler::new(&schedule.timestamps, grid_len, cfg.grid_rate_hz);
    let r = resampler.apply(series);
    let amp_series = r.iter().map(|v| v.norm()).collect();
    let phase_series = unwrap_phase(&r);
    let mean = r.iter().sum::<Complex64>() / grid_len as f64;
    let rc: Vec<Complex64> = r.iter().map(|v| v - mean).collect();

    let win = hann(cfg.window);
    let tw = twiddles(cfg);
    let frames = cfg.frames_for(grid_len);
    let mut spectra = Vec::with_capacity(frames);
    let mut mags = Vec::with_capacity(frames * cfg.bins);
    for f in 0..frames {
        let seg: Vec<Complex64> = (0..cfg.window).map(|n| rc[f * cfg.hop + n] * win[n]).collect();
        let sample: Vec<Complex64> =
            tw.iter().map(|row| row.iter().zip(&seg).map(|(a, b)| a * b).sum()).collect();
        mags.extend(sample.iter().map(|x| x.norm()));
        spectra.push(sample);
    }
    let norm = (mags.iter().map(|m| m * m).sum::<f64>() + NORM_EPS).sqrt();
    let spectrogram = mags.chunks(cfg.bins).map(|c| c.iter().map(|m| m / norm).collect()).collect();
    let fm = FeatureMap { spectrogram, amp_series, phase_series };
    let tape = FeatureTape { resampler, series_len: series.len(), spectra, mags, norm, cfg: cfg.clone() };
    Ok((fm, tape))
}

/// Spectrogram features of a CSI series sampled at `schedule`'s timestamps.
pub fn extract_features(series: &[Complex64], schedule: &TemporalSchedule, cfg: &FeatureConfig) -> Result<FeatureMap> {
    extract_features_tape(series, schedule, cfg).map(|(f, _)| f)
}

/// Backpropagate a gradient on the flattened spectrogram to the series.
///
/// The result uses the packed convention `dL/dRe + j dL/dIm` per packet.
pub fn feature_backward(tape: &FeatureTape, g_feat: &[f64]) -> Vec<Complex64> {
    let cfg = &tape.cfg;
    let n = tape.norm;
    let dot: f64 = g_feat.iter().zip(&tape.mags).map(|(g, m)| g * m).sum();
    let win = hann(cfg.window);
    let tw = twiddles(cfg);
    let grid_len = tape.resampler.idx.len();
    let mut g_rc = vec![Complex64::new(0.0, 0.0); grid_len];
    for (f, sample) in tape.spectra.iter().enumerate() {
        let gx: Vec<Complex64> = sample
            .iter()
            .enumerate()
            .map(|(b, x)| {
                let i = f * cfg.bins + b;
                let m = tape.mags[i];
                if m == 0.0 {
                    return Complex64::new(0.0, 0.0);
                }
                let gm = g_feat[i] / n - m * dot / (n * n * n);
                x * (gm / m)
            })
            .collect();
        for t in 0..cfg.window {
            let mut acc = Complex64::new(0.0, 0.0);
            for (b, g) in gx.iter().enumerate() {
                acc += g * tw[b][t].conj();
            }
            g_rc[f * cfg.hop + t] += acc * win[t];
        }
    }
    let mean = g_rc.iter().sum::<Complex64>() / grid_len as f64;
    for v in g_rc.iter_mut() {
        *v -= mean;
    }
    tape.resampler.adjoint(&g_rc, tape.series_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{synthesize_gesture_paths, GestureKind};
    use crate::schedule::randomize_schedule;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pure_tone_ridge_at_its_bin() {
        let cfg = FeatureConfig::default();
        let sched = TemporalSchedule::regular(1500, 1e-3).unwrap();
        let f0 = cfg.bin_hz(9);
        let x: Vec<Complex64> =
            sched.timestamps.iter().map(|t| Complex64::from_polar(1.0, 2.0 * PI * f0 * t)).collect();
        let fm = extract_features(&x, &sched, &cfg).unwrap();
        assert_eq!(fm.frames(), cfg.frames_for(1500));
        for row in &fm.spectrogram {
            assert_eq!(crate::sensing::nn::argmax(row), 9);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
        let fro: f64 = fm.flat().iter().map(|v| v * v).sum();
        assert!((fro - 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_series_rejected() {
        let cfg = FeatureConfig::default();
        let sched = TemporalSchedule::regular(100, 1e-3).unwrap();
        let x = vec![Complex64::new(1.0, 0.0); 100];
        assert!(extract_features(&x, &sched, &cfg).is_err());
    }

    fn zigzag_clean(seed: u64) -> (Vec<Complex64>, TemporalSchedule) {
        let layout = crate::reference::layout();
        let paths = synthesize_gesture_paths(GestureKind::DrawZigzag, 1.5, 0.5, seed).unwrap();
        let sc = layout.scenario(&paths, [0.5, 0.0, 0.0]).unwrap();
        let sched = TemporalSchedule::regular(1500, 1e-3).unwrap();
        let csi = crate::channel::generate_csi(&sc, 1500, &sched, seed).unwrap();
        (csi.clean.column_sums(), sched)
    }

    #[test]
    fn zigzag_has_two_sign_changes() {
        let cfg = FeatureConfig::default();
        for seed in 0..5 {
            let (x, sched) = zigzag_clean(seed);
            let fm = extract_features(&x, &sched, &cfg).unwrap();
            let energy: Vec<f64> = fm.spectrogram.iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
            let emax = energy.iter().cloned().fold(0.0, f64::max);
            let track: Vec<f64> = fm
                .ridge_track(&cfg)
                .into_iter()
                .zip(&energy)
                .filter(|(f, e)| **e > 0.2 * emax && *f != 0.0)
                .map(|(f, _)| f)
                .collect();
            let changes = track.windows(2).filter(|w| w[0].signum() != w[1].signum()).count();
            assert_eq!(changes, 2, "seed {seed}: track {track:?}");
        }
    }

    #[test]
    fn jittered_schedule_misread_as_regular_degrades_ridge() {
        let cfg = FeatureConfig { grid_rate_hz: 1000.0, window: 64, hop: 16, bins: 64 };
        let mut better = 0;
        for seed in 0..8 {
            let sched = randomize_schedule(600, 1e-3, 0.9, seed).unwrap();
            let x: Vec<Complex64> =
                sched.timestamps.iter().map(|t| Complex64::from_polar(1.0, 2.0 * PI * 250.0 * t)).collect();
            let right = extract_features(&x, &sched, &cfg).unwrap().ridge_to_background();
            let wrong = extract_features(&x, &sched.assumed_regular(), &cfg).unwrap().ridge_to_background();
            if right > wrong {
                better += 1;
            }
        }
        assert!(better >= 7, "{better}/8");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = FeatureConfig { grid_rate_hz: 1000.0, window: 32, hop: 16, bins: 8 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sched = randomize_schedule(200, 1e-3, 0.3, 3).unwrap();
        let x: Vec<Complex64> =
            (0..200).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let (fm, tape) = extract_features_tape(&x, &sched, &cfg).unwrap();
        let c: Vec<f64> = (0..fm.flat().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |x: &[Complex64]| {
            extract_features(x, &sched, &cfg).unwrap().flat().iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = feature_backward(&tape, &c);
        let h = 1e-6;
        for m in (0..200).step_by(7) {
            for part in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                let d = if part == 0 { Complex64::new(h, 0.0) } else { Complex64::new(0.0, h) };
                xp[m] += d;
                xm[m] -= d;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                let a = if part == 0 { g[m].re } else { g[m].im };
                assert!((a - fd).abs() <= 1e-6 * a.abs().max(1e-3), "m {m} part {part}: {a} vs {fd}");
            }
        }
    }
}
