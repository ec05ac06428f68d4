//! Channel encryption.
//!
//! The transmitter multiplies each antenna's LTS by a secret complex
//! coefficient per packet, so a single-antenna receiver observes
//! `y_m = sum_q h_{q,m} d_{q,m}`. A receiver holding the coefficients
//! recovers per-antenna CSI by block least squares.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha512};

use crate::channel::{ComplexGrid, CsiTensor};
use crate::error::{invalid, Error, Result};
pub use crate::schedule::{randomize_schedule, TemporalSchedule};

/// Magic prefix of the binary coefficient file.
pub const PSI_MAGIC: &[u8; 6] = b"MCPSI1";
/// Condition number above which a block is declared singular.
pub const SINGULAR_CONDITION: f64 = 1e12;
/// Key length in bits.
pub const KEY_BITS: usize = 2048;
/// Description of how the key is derived.
pub const KEY_DIGEST_ALG: &str = "sha512-ctr4";

/// Diagonal encryption matrices for all antennas and packets, stored as
/// coefficients `d[q][m]` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncryptionMatrix {
    antennas: usize,
    packets: usize,
    coeffs: Vec<Complex64>,
    power_budget: f64,
}

impl EncryptionMatrix {
    pub fn new(antennas: usize, packets: usize, coeffs: Vec<Complex64>, power_budget: f64) -> Result<Self> {
        if antennas == 0 || packets == 0 {
            return invalid("encryption matrix needs at least one antenna and packet");
        }
        if coeffs.len() != antennas * packets {
            return invalid(format!("{} coefficients for {antennas}x{packets}", coeffs.len()));
        }
        if coeffs.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return invalid("non-finite coefficient");
        }
        if !(power_budget.is_finite() && power_budget > 0.0) {
            return invalid("power budget must be positive");
        }
        let m = Self { antennas, packets, coeffs, power_budget };
        if m.power() > power_budget {
            return invalid(format!("power {} exceeds budget {power_budget}", m.power()));
        }
        Ok(m)
    }

    /// Budget `M * Q`, the power of an all-ones matrix.
    pub fn default_budget(antennas: usize, packets: usize) -> f64 {
        (antennas * packets) as f64
    }

    pub fn with_default_budget(antennas: usize, packets: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        Self::new(antennas, packets, coeffs, Self::default_budget(antennas, packets))
    }

    /// First antenna passes through, others are silent.
    pub fn passthrough(antennas: usize, packets: usize) -> Result<Self> {
        let mut c = vec![Complex64::new(0.0, 0.0); antennas * packets];
        c[..packets].fill(Complex64::new(1.0, 0.0));
        Self::with_default_budget(antennas, packets, c)
    }

    /// Every antenna transmits the LTS unchanged (no encryption).
    pub fn all_ones(antennas: usize, packets: usize) -> Result<Self> {
        Self::with_default_budget(antennas, packets, vec![Complex64::new(1.0, 0.0); antennas * packets])
    }

    /// Scale arbitrary coefficients down (never up) to fit the budget.
    pub fn projected(antennas: usize, packets: usize, mut coeffs: Vec<Complex64>, power_budget: f64) -> Result<Self> {
        project_to_budget(&mut coeffs, power_budget);
        Self::new(antennas, packets, coeffs, power_budget)
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn packets(&self) -> usize {
        self.packets
    }

    pub fn power_budget(&self) -> f64 {
        self.power_budget
    }

    pub fn coeff(&self, q: usize, m: usize) -> Complex64 {
        self.coeffs[q * self.packets + m]
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn column(&self, m: usize) -> Vec<Complex64> {
        (0..self.antennas).map(|q| self.coeff(q, m)).collect()
    }

    pub fn power(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    /// True when every packet uses exactly the weights `w`, i.e. the LTS sees
    /// the same channel as a payload sent with `w`.
    pub fn matches_weights(&self, w: &[Complex64]) -> bool {
        w.len() == self.antennas
            && (0..self.antennas).all(|q| (0..self.packets).all(|m| self.coeff(q, m) == w[q]))
    }

    /// Canonical little-endian serialization, `[q][m]` order, `(re, im)` pairs.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.coeffs.len() * 16);
        for c in &self.coeffs {
            out.extend_from_slice(&c.re.to_le_bytes());
            out.extend_from_slice(&c.im.to_le_bytes());
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PSI_MAGIC)?;
        w.write_all(&(self.antennas as u32).to_le_bytes())?;
        w.write_all(&(self.packets as u32).to_le_bytes())?;
        w.write_all(&self.canonical_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != PSI_MAGIC {
            return Err(Error::Format("bad coefficient file magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let q = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let m = u32::from_le_bytes(b4) as usize;
        let mut buf = vec![0u8; q * m * 16];
        r.read_exact(&mut buf).map_err(|_| Error::Format("truncated coefficient file".into()))?;
        let coeffs = buf
            .chunks_exact(16)
            .map(|c| {
                Complex64::new(
                    f64::from_le_bytes(c[..8].try_into().unwrap()),
                    f64::from_le_bytes(c[8..].try_into().unwrap()),
                )
            })
            .collect::<Vec<_>>();
        let budget = Self::default_budget(q, m).max(coeffs.iter().map(|c| c.norm_sqr()).sum());
        Self::new(q, m, coeffs, budget)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Size in bytes of the serialized coefficients.
    pub fn serialized_len(&self) -> usize {
        self.coeffs.len() * 16
    }
}

/// Shrink `coeffs` uniformly so that their total power is within `budget`.
pub fn project_to_budget(coeffs: &mut [Complex64], budget: f64) {
    let p: f64 = coeffs.iter().map(|c| c.norm_sqr()).sum();
    if p <= budget {
        return;
    }
    let mut scale = (budget / p).sqrt();
    loop {
        let scaled: f64 = coeffs.iter().map(|c| (c * scale).norm_sqr()).sum();
        if scaled <= budget {
            break;
        }
        scale *= 1.0 - 1e-15;
    }
    for c in coeffs.iter_mut() {
        *c *= scale;
    }
}

/// Closed range of coefficient magnitudes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MagnitudeRange {
    pub lo: f64,
    pub hi: f64,
}

impl MagnitudeRange {
    pub const UNIT: MagnitudeRange = MagnitudeRange { lo: 1.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let r = Self { lo, hi };
        r.validate()?;
        Ok(r)
    }

    fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo <= 0.0 || self.lo > self.hi {
            return invalid(format!("empty or non-positive magnitude range [{}, {}]", self.lo, self.hi));
        }
        Ok(())
    }
}

/// Uniform random phases and magnitudes, rescaled into the `M * Q` budget.
pub fn sample_psi(antennas: usize, packets: usize, seed: u64, range: MagnitudeRange) -> Result<EncryptionMatrix> {
    range.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coeffs = (0..antennas * packets)
        .map(|_| {
            let mag = if range.hi > range.lo { rng.gen_range(range.lo..=range.hi) } else { range.lo };
            Complex64::from_polar(mag, rng.gen_range(-PI..PI))
        })
        .collect();
    EncryptionMatrix::projected(antennas, packets, coeffs, EncryptionMatrix::default_budget(antennas, packets))
}

/// What a single-antenna receiver observes: one value per packet.
#[derive(Clone, Debug, PartialEq)]
pub struct EncryptedCsiSeries {
    pub values: Vec<Complex64>,
    pub schedule: TemporalSchedule,
}

/// `y_m = sum_q h_{q,m} d_{q,m}` for every column of `grid`.
pub fn encrypt_grid(grid: &ComplexGrid, psi: &EncryptionMatrix) -> Result<Vec<Complex64>> {
    if grid.rows() != psi.antennas() || grid.cols() != psi.packets() {
        return invalid(format!(
            "CSI shape {}x{} does not match coefficients {}x{}",
            grid.rows(),
            grid.cols(),
            psi.antennas(),
            psi.packets()
        ));
    }
    let mut out = vec![Complex64::new(0.0, 0.0); grid.cols()];
    for q in 0..grid.rows() {
        for (m, (o, h)) in out.iter_mut().zip(grid.row(q)).enumerate() {
            *o += h * psi.coeff(q, m);
        }
    }
    Ok(out)
}

/// Encrypt the noisy CSI of `csi`.
pub fn encrypt(csi: &CsiTensor, psi: &EncryptionMatrix) -> Result<EncryptedCsiSeries> {
    Ok(EncryptedCsiSeries { values: encrypt_grid(&csi.noisy, psi)?, schedule: csi.schedule.clone() })
}

/// 2048-bit key derived from the coefficients.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct KeyPhi {
    bytes: [u8; KEY_BITS / 8],
}

impl std::fmt::Debug for KeyPhi {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "KeyPhi({}…)", &self.to_hex()[..16])
    }
}

impl KeyPhi {
    pub fn from_bytes(bytes: [u8; KEY_BITS / 8]) -> Self {
        Self { bytes }
    }

    pub fn as_bytes(&self) -> &[u8; KEY_BITS / 8] {
        &self.bytes
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let v = hex::decode(s).map_err(|e| Error::Format(format!("key hex: {e}")))?;
        let bytes: [u8; KEY_BITS / 8] =
            v.try_into().map_err(|_| Error::Format("key must be 256 bytes".into()))?;
        Ok(Self { bytes })
    }

    pub fn bit(&self, i: usize) -> bool {
        (self.bytes[i / 8] >> (7 - i % 8)) & 1 == 1
    }

    pub fn hamming_distance(&self, other: &KeyPhi) -> u32 {
        self.bytes.iter().zip(&other.bytes).map(|(a, b)| (a ^ b).count_ones()).sum()
    }
}

/// Key = SHA-512(bytes || ctr) for ctr = 0..3 (u32 little-endian), concatenated.
pub fn hash_key(psi: &EncryptionMatrix) -> KeyPhi {
    let ser = psi.canonical_bytes();
    let mut bytes = [0u8; KEY_BITS / 8];
    for (i, chunk) in bytes.chunks_exact_mut(64).enumerate() {
        let mut h = Sha512::new();
        h.update(&ser);
        h.update((i as u32).to_le_bytes());
        chunk.copy_from_slice(&h.finalize());
    }
    KeyPhi { bytes }
}

/// Per-antenna CSI recovered by block least squares.
#[derive(Clone, Debug)]
pub struct BlockRecovery {
    pub channels: ComplexGrid,
    pub block_len: usize,
    pub condition_numbers: Vec<f64>,
    /// Trailing packets too few to solve; filled from the previous block.
    pub flagged_tail: Option<std::ops::Range<usize>>,
}

/// Default block length for `q` antennas.
pub fn default_block_len(antennas: usize) -> usize {
    4 * antennas
}

/// Solve `y_b = D_b h_b` for each block of `block_len` packets, assuming the
/// per-antenna channel is constant within a block.
pub fn decrypt_block_ls(values: &[Complex64], psi: &EncryptionMatrix, block_len: usize) -> Result<BlockRecovery> {
    let q = psi.antennas();
    let m = psi.packets();
    if values.len() != m {
        return invalid(format!("{} observations for {m} packets", values.len()));
    }
    if block_len < q || m < q {
        return Err(Error::Underdetermined { block_len: block_len.min(m), antennas: q });
    }
    let mut channels = ComplexGrid::zeros(q, m);
    let mut conds = Vec::new();
    let mut flagged = None;
    let mut start = 0;
    let mut block = 0;
    while start < m {
        let len = block_len.min(m - start);
        if len < q {
            // Hold the last solved block.
            for a in 0..q {
                let v = channels.get(a, start - 1);
                for k in start..m {
                    channels.set(a, k, v);
                }
            }
            flagged = Some(start..m);
            break;
        }
        let d = DMatrix::from_fn(len, q, |i, j| psi.coeff(j, start + i));
        let y = DVector::from_fn(len, |i, _| values[start + i]);
        let svd = d.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !(cond <= SINGULAR_CONDITION) {
            return Err(Error::SingularBlock { block, condition: cond });
        }
        let h = svd.solve(&y, 0.0).map_err(|_| Error::SingularBlock { block, condition: cond })?;
        for a in 0..q {
            for k in start..start + len {
                channels.set(a, k, h[a]);
            }
        }
        conds.push(cond);
        start += len;
        block += 1;
    }
    Ok(BlockRecovery { channels, block_len, condition_numbers: conds, flagged_tail: flagged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_csi, PathComponent, Scenario};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn rand_grid(q: usize, m: usize, seed: u64) -> ComplexGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..q * m).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        ComplexGrid::from_vec(q, m, data).unwrap()
    }

    #[test]
    fn passthrough_selects_first_antenna() {
        let g = rand_grid(3, 20, 1);
        let psi = EncryptionMatrix::passthrough(3, 20).unwrap();
        let y = encrypt_grid(&g, &psi).unwrap();
        assert_eq!(y, g.row(0));
    }

    #[test]
    fn encrypt_matches_scalar_oracle() {
        let g = rand_grid(4, 30, 2);
        let psi = sample_psi(4, 30, 3, MagnitudeRange::new(0.5, 1.5).unwrap()).unwrap();
        let y = encrypt_grid(&g, &psi).unwrap();
        for m in 0..30 {
            let mut re = 0.0;
            let mut im = 0.0;
            for q in 0..4 {
                let (a, b) = (g.get(q, m), psi.coeff(q, m));
                re += a.re * b.re - a.im * b.im;
                im += a.re * b.im + a.im * b.re;
            }
            assert!((y[m].re - re).abs() < 1e-12 && (y[m].im - im).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let g = rand_grid(4, 30, 2);
        let psi = EncryptionMatrix::all_ones(3, 30).unwrap();
        assert!(matches!(encrypt_grid(&g, &psi), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn sample_psi_respects_budget_and_is_seeded() {
        let p = sample_psi(8, 100, 7, MagnitudeRange::new(0.5, 2.0).unwrap()).unwrap();
        assert!(p.power() <= 800.0);
        assert_eq!(p, sample_psi(8, 100, 7, MagnitudeRange::new(0.5, 2.0).unwrap()).unwrap());
        assert_ne!(p, sample_psi(8, 100, 8, MagnitudeRange::new(0.5, 2.0).unwrap()).unwrap());
        assert!(MagnitudeRange::new(2.0, 1.0).is_err());
        let u = sample_psi(2, 10, 0, MagnitudeRange::UNIT).unwrap();
        assert!(u.coeffs().iter().all(|c| (c.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn key_is_deterministic_and_sensitive() {
        let a = sample_psi(4, 16, 1, MagnitudeRange::UNIT).unwrap();
        let k1 = hash_key(&a);
        assert_eq!(k1, hash_key(&a.clone()));
        assert_eq!(k1.to_hex().len(), 512);
        assert_eq!(KeyPhi::from_hex(&k1.to_hex()).unwrap(), k1);
        let mut coeffs = a.coeffs().to_vec();
        coeffs[5].re = f64::from_bits(coeffs[5].re.to_bits() ^ 1);
        let b = EncryptionMatrix::new(4, 16, coeffs, a.power_budget() + 1.0).unwrap();
        let d = k1.hamming_distance(&hash_key(&b));
        assert!((900..=1148).contains(&d), "avalanche distance {d}");
    }

    #[test]
    fn key_oracle_first_block() {
        // Independent recomputation of the first 64 bytes.
        let a = sample_psi(2, 3, 9, MagnitudeRange::UNIT).unwrap();
        let mut ser = Vec::new();
        for q in 0..2 {
            for m in 0..3 {
                ser.extend(a.coeff(q, m).re.to_le_bytes());
                ser.extend(a.coeff(q, m).im.to_le_bytes());
            }
        }
        ser.extend([0u8, 0, 0, 0]);
        let d = Sha512::digest(&ser);
        assert_eq!(&hash_key(&a).as_bytes()[..64], d.as_slice());
    }

    #[test]
    fn key_size_ratio_reference() {
        let p = EncryptionMatrix::all_ones(8, 1500).unwrap();
        assert_eq!(p.serialized_len(), 192_000);
        let ratio = (KEY_BITS / 8) as f64 / p.serialized_len() as f64;
        assert!(ratio < 0.0054);
    }

    #[test]
    fn file_round_trip() {
        let a = sample_psi(3, 11, 4, MagnitudeRange::new(0.1, 1.0).unwrap()).unwrap();
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..6], PSI_MAGIC);
        assert_eq!(buf.len(), 6 + 8 + 3 * 11 * 16);
        let b = EncryptionMatrix::read_from(buf.as_slice()).unwrap();
        assert_eq!(a.coeffs(), b.coeffs());
        assert!(EncryptionMatrix::read_from(&buf[..20]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(EncryptionMatrix::read_from(bad.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn block_ls_recovers_noiseless_static_channel() {
        let q = 4;
        let m = 64;
        let h: Vec<Complex64> = (0..q).map(|i| c(0.3 * i as f64 + 0.1, -0.2 * i as f64)).collect();
        let rows: Vec<Vec<Complex64>> = h.iter().map(|v| vec![*v; m]).collect();
        let g = ComplexGrid::from_rows(&rows).unwrap();
        let psi = sample_psi(q, m, 5, MagnitudeRange::UNIT).unwrap();
        let y = encrypt_grid(&g, &psi).unwrap();
        let rec = decrypt_block_ls(&y, &psi, 16).unwrap();
        assert_eq!(rec.condition_numbers.len(), 4);
        for a in 0..q {
            for k in 0..m {
                assert!((rec.channels.get(a, k) - h[a]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn block_ls_errors() {
        let psi = sample_psi(4, 32, 5, MagnitudeRange::UNIT).unwrap();
        let y = vec![c(0.0, 0.0); 32];
        assert!(matches!(decrypt_block_ls(&y, &psi, 3), Err(Error::Underdetermined { .. })));
        let ones = EncryptionMatrix::all_ones(4, 32).unwrap();
        assert!(matches!(decrypt_block_ls(&y, &ones, 8), Err(Error::SingularBlock { block: 0, .. })));
    }

    #[test]
    fn block_ls_tail_flagged() {
        let psi = sample_psi(2, 21, 5, MagnitudeRange::UNIT).unwrap();
        let g = ComplexGrid::from_rows(&[vec![c(1.0, 0.0); 21], vec![c(0.0, 1.0); 21]]).unwrap();
        let y = encrypt_grid(&g, &psi).unwrap();
        let rec = decrypt_block_ls(&y, &psi, 4).unwrap();
        assert_eq!(rec.flagged_tail, Some(20..21));
        assert!((rec.channels.get(1, 20) - c(0.0, 1.0)).norm() < 1e-10);
        let rec = decrypt_block_ls(&y, &psi, 7).unwrap();
        assert_eq!(rec.flagged_tail, None);
    }

    #[test]
    fn encrypt_uses_noisy_csi() {
        let s = Scenario::new(2.4e9, vec![vec![PathComponent::fixed(c(0.5, 0.0), 0.0)]; 2], 0.2).unwrap();
        let sched = TemporalSchedule::regular(10, 1e-3).unwrap();
        let csi = generate_csi(&s, 10, &sched, 3).unwrap();
        let psi = EncryptionMatrix::all_ones(2, 10).unwrap();
        let e = encrypt(&csi, &psi).unwrap();
        assert_eq!(e.values, csi.noisy.column_sums());
    }
}
