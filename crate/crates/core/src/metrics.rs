//! Signal-quality and task-quality metrics.

use num_complex::Complex64;

use crate::channel::CsiTensor;
use crate::crypto::{decrypt_block_ls, encrypt_grid, EncryptedCsiSeries, EncryptionMatrix};
use crate::error::{invalid, Error, Result};

/// Sentinel reported instead of +infinity.
pub const SATURATED_DB: f64 = 300.0;
pub const SATURATED_LINEAR: f64 = 1e30;

/// Linear ratio to dB with +/-300 dB saturation.
pub fn to_db(x: f64) -> f64 {
    if x >= SATURATED_LINEAR {
        SATURATED_DB
    } else if x <= 1e-30 {
        -SATURATED_DB
    } else {
        10.0 * x.log10()
    }
}

/// `num / den` where a zero denominator saturates instead of producing inf/NaN.
pub fn saturating_ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        (num / den).min(SATURATED_LINEAR)
    } else if num > 0.0 {
        SATURATED_LINEAR
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Level {
    pub linear: f64,
    pub db: f64,
}

impl Level {
    pub fn from_linear(linear: f64) -> Self {
        Self { linear, db: to_db(linear) }
    }
}

/// Mean per-packet energies entering the SDNR ratio.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SdnrBreakdown {
    pub dynamic_energy: f64,
    pub distortion_energy: f64,
    pub static_energy: f64,
    pub noise_energy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdnrReport {
    pub value_linear: f64,
    pub value_db: f64,
    pub num_packets: usize,
    pub breakdown: SdnrBreakdown,
}

/// Sensing SNR: per-antenna mean of `|h^D|^2 / (|h^S|^2 + sigma^2)`, then
/// averaged over antennas.
pub fn sensing_snr(csi: &CsiTensor) -> f64 {
    let s2 = csi.sigma * csi.sigma;
    let q = csi.num_antennas();
    let mut total = 0.0;
    let mut sat = false;
    for a in 0..q {
        let per: f64 = csi
            .dynamic_part
            .row(a)
            .iter()
            .zip(csi.static_part.row(a))
            .map(|(d, s)| {
                let r = saturating_ratio(d.norm_sqr(), s.norm_sqr() + s2);
                sat |= r >= SATURATED_LINEAR;
                r
            })
            .sum();
        total += per / csi.num_packets() as f64;
    }
    if sat {
        SATURATED_LINEAR
    } else {
        total / q as f64
    }
}

/// Signal-to-distortion-plus-noise ratio on aligned series.
///
/// `observed` is the mix seen by a receiver (noise-free), `observed_dynamic`
/// its dynamic part, and `reference` / `reference_static` the undistorted
/// channel it is compared against. The per-packet ratios are averaged and
/// divided by `antennas` (1 for a plain series).
pub fn sdnr(
    observed: &[Complex64],
    observed_dynamic: &[Complex64],
    reference: &[Complex64],
    reference_static: &[Complex64],
    sigma: f64,
    antennas: usize,
) -> Result<SdnrReport> {
    let m = observed.len();
    if m == 0 || observed_dynamic.len() != m || reference.len() != m || reference_static.len() != m {
        return invalid("sdnr series lengths must match and be non-empty");
    }
    if antennas == 0 {
        return invalid("antenna count must be positive");
    }
    let s2 = sigma * sigma;
    let mut acc = 0.0;
    let mut sat = false;
    let mut b = SdnrBreakdown::default();
    for k in 0..m {
        let dyn_e = observed_dynamic[k].norm_sqr();
        let dist_e = (observed[k] - reference[k]).norm_sqr();
        let stat_e = reference_static[k].norm_sqr();
        let r = saturating_ratio(dyn_e, dist_e + stat_e + s2);
        sat |= r >= SATURATED_LINEAR;
        acc += r;
        b.dynamic_energy += dyn_e;
        b.distortion_energy += dist_e;
        b.static_energy += stat_e;
    }
    let mf = m as f64;
    b.dynamic_energy /= mf;
    b.distortion_energy /= mf;
    b.static_energy /= mf;
    b.noise_energy = s2;
    let v = if sat { SATURATED_LINEAR } else { acc / (mf * antennas as f64) };
    Ok(SdnrReport { value_linear: v, value_db: to_db(v), num_packets: m, breakdown: b })
}

/// Eve's SDNR: the encrypted mix against the unencrypted all-antenna
/// observation, with the `1/(Q M)` prefactor.
pub fn eve_sdnr(csi: &CsiTensor, psi: &EncryptionMatrix) -> Result<SdnrReport> {
    let observed = encrypt_grid(&csi.clean, psi)?;
    let observed_dyn = encrypt_grid(&csi.dynamic_part, psi)?;
    let reference = csi.clean.column_sums();
    let reference_static = csi.static_part.column_sums();
    sdnr(&observed, &observed_dyn, &reference, &reference_static, csi.sigma, csi.num_antennas())
}

/// Bob's SDNR: per-antenna channels recovered by block least squares from
/// the noisy encrypted mix, compared with the true per-antenna channels.
/// The recovery residual carries the noise amplification of the inverse.
pub fn bob_sdnr(csi: &CsiTensor, psi: &EncryptionMatrix, block_len: usize) -> Result<SdnrReport> {
    let noisy = encrypt_grid(&csi.noisy, psi)?;
    let dynamic = encrypt_grid(&csi.dynamic_part, psi)?;
    let rec = decrypt_block_ls(&noisy, psi, block_len)?;
    let rec_dyn = decrypt_block_ls(&dynamic, psi, block_len)?;
    let q = csi.num_antennas();
    let m = csi.num_packets();
    let s2 = csi.sigma * csi.sigma;
    let mut acc = 0.0;
    let mut sat = false;
    let mut b = SdnrBreakdown::default();
    for a in 0..q {
        for k in 0..m {
            let dyn_e = rec_dyn.channels.get(a, k).norm_sqr();
            let dist_e = (rec.channels.get(a, k) - csi.clean.get(a, k)).norm_sqr();
            let stat_e = csi.static_part.get(a, k).norm_sqr();
            let r = saturating_ratio(dyn_e, dist_e + stat_e + s2);
            sat |= r >= SATURATED_LINEAR;
            acc += r;
            b.dynamic_energy += dyn_e;
            b.distortion_energy += dist_e;
            b.static_energy += stat_e;
        }
    }
    let n = (q * m) as f64;
    b.dynamic_energy /= n;
    b.distortion_energy /= n;
    b.static_energy /= n;
    b.noise_energy = s2;
    let v = if sat { SATURATED_LINEAR } else { acc / n };
    Ok(SdnrReport { value_linear: v, value_db: to_db(v), num_packets: m, breakdown: b })
}

/// Communication SNR `||y||^2 / (M sigma^2)`.
pub fn comm_snr(values: &[Complex64], sigma: f64) -> Result<Level> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return invalid(format!("sigma must be positive, got {sigma}"));
    }
    if values.is_empty() {
        return invalid("empty series");
    }
    let e: f64 = values.iter().map(|v| v.norm_sqr()).sum();
    Ok(Level::from_linear(e / (values.len() as f64 * sigma * sigma)))
}

pub fn comm_snr_of(enc: &EncryptedCsiSeries, sigma: f64) -> Result<Level> {
    comm_snr(&enc.values, sigma)
}

/// Cosine similarity of the magnitude sequences `|a|` and `|b|`.
pub fn envelope_similarity(a: &[Complex64], b: &[Complex64]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return invalid("envelope similarity needs equal non-empty lengths");
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.norm(), y.norm());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScoreCounts {
    pub correct: usize,
    pub total: usize,
    pub error_bits: usize,
    pub total_bits: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskScore {
    pub accuracy: f64,
    pub ber: f64,
    pub counts: ScoreCounts,
}

impl TaskScore {
    pub fn from_counts(counts: ScoreCounts) -> Self {
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self { accuracy: frac(counts.correct, counts.total), ber: frac(counts.error_bits, counts.total_bits), counts }
    }

    /// Pool counts of several scores.
    pub fn merge(scores: &[TaskScore]) -> Self {
        let mut c = ScoreCounts::default();
        for s in scores {
            c.correct += s.counts.correct;
            c.total += s.counts.total;
            c.error_bits += s.counts.error_bits;
            c.total_bits += s.counts.total_bits;
        }
        Self::from_counts(c)
    }
}

pub fn score_task(predictions: &[usize], labels: &[usize]) -> Result<TaskScore> {
    if predictions.len() != labels.len() {
        return invalid("predictions and labels differ in length");
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(TaskScore::from_counts(ScoreCounts { correct, total: labels.len(), error_bits: 0, total_bits: 0 }))
}

pub fn score_bits(tx: &[u8], rx: &[u8]) -> Result<TaskScore> {
    if tx.len() != rx.len() {
        return invalid("bit streams differ in length");
    }
    let errors = tx.iter().zip(rx).filter(|(a, b)| (*a & 1) != (*b & 1)).count();
    Ok(TaskScore::from_counts(ScoreCounts {
        correct: tx.len() - errors,
        total: tx.len(),
        error_bits: errors,
        total_bits: tx.len(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ComplexGrid;
    use crate::schedule::TemporalSchedule;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn tensor(stat: ComplexGrid, dynamic: ComplexGrid, sigma: f64) -> CsiTensor {
        let mut clean = stat.clone();
        for (x, d) in clean.as_mut_slice().iter_mut().zip(dynamic.as_slice()) {
            *x += d;
        }
        let m = clean.cols();
        CsiTensor {
            noisy: clean.clone(),
            clean,
            static_part: stat,
            dynamic_part: dynamic,
            sigma,
            carrier_freq_hz: 2.4e9,
            schedule: TemporalSchedule::regular(m, 1e-3).unwrap(),
        }
    }

    fn rand_grid(rng: &mut ChaCha8Rng, q: usize, m: usize) -> ComplexGrid {
        let data = (0..q * m).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        ComplexGrid::from_vec(q, m, data).unwrap()
    }

    #[test]
    fn sensing_snr_closed_forms() {
        let zero = ComplexGrid::zeros(2, 10);
        let ones = ComplexGrid::from_vec(2, 10, vec![c(1.0, 0.0); 20]).unwrap();
        assert_eq!(sensing_snr(&tensor(ones.clone(), zero.clone(), 0.3)), 0.0);
        let t = tensor(ones.clone(), ComplexGrid::from_vec(2, 10, vec![c(0.0, 1.0); 20]).unwrap(), 1.0);
        assert!((sensing_snr(&t) - 0.5).abs() < 1e-15);
        let t = tensor(zero, ones, 0.0);
        assert_eq!(sensing_snr(&t), SATURATED_LINEAR);
        assert_eq!(to_db(sensing_snr(&t)), SATURATED_DB);
    }

    #[test]
    fn sensing_snr_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = tensor(rand_grid(&mut rng, 3, 40), rand_grid(&mut rng, 3, 40), 0.4);
        let mut oracle = 0.0;
        for q in 0..3 {
            let mut s = 0.0;
            for m in 0..40 {
                let d = t.dynamic_part.get(q, m);
                let st = t.static_part.get(q, m);
                s += (d.re * d.re + d.im * d.im) / (st.re * st.re + st.im * st.im + 0.16);
            }
            oracle += s / 40.0;
        }
        oracle /= 3.0;
        assert!((sensing_snr(&t) - oracle).abs() < 1e-12 * oracle.max(1.0));
    }

    #[test]
    fn sdnr_degenerates_to_sensing_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = tensor(rand_grid(&mut rng, 1, 50), rand_grid(&mut rng, 1, 50), 0.3);
        let r = sdnr(t.clean.row(0), t.dynamic_part.row(0), t.clean.row(0), t.static_part.row(0), 0.3, 1).unwrap();
        assert_eq!(r.breakdown.distortion_energy, 0.0);
        assert_eq!(r.value_linear, sensing_snr(&t));
        let psi = EncryptionMatrix::all_ones(1, 50).unwrap();
        assert_eq!(eve_sdnr(&t, &psi).unwrap().value_linear, sensing_snr(&t));
    }

    #[test]
    fn sdnr_length_mismatch() {
        let a = vec![c(1.0, 0.0); 4];
        assert!(sdnr(&a, &a[..3], &a, &a, 0.1, 1).is_err());
    }

    #[test]
    fn comm_snr_identities() {
        let ones = vec![c(1.0, 0.0); 16];
        assert!(comm_snr(&ones, 1.0).unwrap().db.abs() < 1e-12);
        let twos = vec![c(2.0, 0.0); 16];
        let d = comm_snr(&twos, 1.0).unwrap().db - comm_snr(&ones, 1.0).unwrap().db;
        assert!((d - 6.0206).abs() < 1e-4);
        assert!(comm_snr(&ones, 0.0).is_err());
    }

    #[test]
    fn envelope_similarity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<Complex64> = (0..30).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let b: Vec<Complex64> = (0..30).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        assert!((envelope_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let a2: Vec<Complex64> = a.iter().map(|x| x * 2.0).collect();
        assert!((envelope_similarity(&a, &a2).unwrap() - 1.0).abs() < 1e-15);
        let ma: Vec<f64> = a.iter().map(|x| (x.re * x.re + x.im * x.im).sqrt()).collect();
        let mb: Vec<f64> = b.iter().map(|x| (x.re * x.re + x.im * x.im).sqrt()).collect();
        let dot: f64 = ma.iter().zip(&mb).map(|(x, y)| x * y).sum();
        let oracle = dot / (ma.iter().map(|x| x * x).sum::<f64>().sqrt() * mb.iter().map(|x| x * x).sum::<f64>().sqrt());
        assert!((envelope_similarity(&a, &b).unwrap() - oracle).abs() < 1e-12);
        assert!(matches!(envelope_similarity(&a, &vec![c(0.0, 0.0); 30]), Err(Error::UndefinedSimilarity)));
    }

    #[test]
    fn scores() {
        assert_eq!(score_bits(&[0, 1, 1], &[0, 1, 1]).unwrap().ber, 0.0);
        assert_eq!(score_task(&[1, 2, 3], &[0, 0, 0]).unwrap().accuracy, 0.0);
        let tx = vec![0u8; 1000];
        let mut rx = tx.clone();
        rx[1] = 1;
        rx[10] = 1;
        rx[999] = 1;
        assert!((score_bits(&tx, &rx).unwrap().ber - 0.003).abs() < 1e-15);
        assert!(score_task(&[1], &[1, 2]).is_err());
    }
}
