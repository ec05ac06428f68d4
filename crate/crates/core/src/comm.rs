//! Packet-level communication link over the encrypted channel.
//!
//! The LTS of packet `m` leaves antenna `q` weighted by `d_{q,m}`; the
//! payload leaves every antenna with a fixed beamformer (all ones). A
//! receiver that estimates the channel from the LTS therefore equalizes the
//! payload with the wrong channel unless it can undo the encryption.

use std::io::Write;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{complex_noise, CsiTensor};
use crate::crypto::{decrypt_block_ls, EncryptionMatrix};
use crate::error::{invalid, Error, Result};
use crate::metrics::{score_bits, to_db, TaskScore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    Bpsk,
    Qam32,
    Qam64,
}

impl Modulation {
    pub fn bits_per_symbol(self) -> usize {
        match self {
            Modulation::Bpsk => 1,
            Modulation::Qam32 => 5,
            Modulation::Qam64 => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modulation::Bpsk => "bpsk",
            Modulation::Qam32 => "qam32",
            Modulation::Qam64 => "qam64",
        }
    }

    /// Constellation indexed by the bit label (MSB first), unit average energy.
    pub fn constellation(self) -> Vec<Complex64> {
        let pts: Vec<Complex64> = match self {
            Modulation::Bpsk => vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
            Modulation::Qam64 => (0..64)
                .map(|label| {
                    let i = gray_level(label >> 3, 3);
                    let q = gray_level(label & 7, 3);
                    Complex64::new(i, q)
                })
                .collect(),
            Modulation::Qam32 => (0..32).map(cross32_point).collect(),
        };
        let e = pts.iter().map(|p| p.norm_sqr()).sum::<f64>() / pts.len() as f64;
        pts.into_iter().map(|p| p / e.sqrt()).collect()
    }

    pub fn map(self, bits: &[u8]) -> Result<Vec<Complex64>> {
        let k = self.bits_per_symbol();
        if bits.len() % k != 0 {
            return invalid(format!("{} bits is not a multiple of {k}", bits.len()));
        }
        let c = self.constellation();
        Ok(bits
            .chunks_exact(k)
            .map(|ch| c[ch.iter().fold(0usize, |acc, b| (acc << 1) | (*b as usize & 1))])
            .collect())
    }

    /// Minimum-distance hard decision.
    pub fn demap(self, symbols: &[Complex64]) -> Vec<u8> {
        let c = self.constellation();
        let k = self.bits_per_symbol();
        let mut out = Vec::with_capacity(symbols.len() * k);
        for s in symbols {
            let (best, _) = c
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (s - p).norm_sqr()))
                .fold((0, f64::MAX), |a, b| if b.1 < a.1 { b } else { a });
            for j in (0..k).rev() {
                out.push(((best >> j) & 1) as u8);
            }
        }
        out
    }
}

/// Amplitude level `2p - (2^n - 1)` of the position `p` whose Gray code is `g`.
fn gray_level(g: usize, nbits: u32) -> f64 {
    let mut p = g;
    let mut shift = g >> 1;
    while shift > 0 {
        p ^= shift;
        shift >>= 1;
    }
    2.0 * p as f64 - ((1usize << nbits) - 1) as f64
}

/// Cross 32-QAM: an 8x4 Gray rectangle whose outer columns (|I| = 7) are
/// folded onto the missing top/bottom rows of the 6x6 cross.
fn cross32_point(label: usize) -> Complex64 {
    let i = gray_level(label >> 2, 3);
    let q = gray_level(label & 3, 2);
    if i.abs() < 7.0 {
        return Complex64::new(i, q);
    }
    let fi = i.signum() * q.abs();
    let fq = q.signum() * 5.0;
    Complex64::new(fi, fq)
}

/// Fixed payload beamformer: every antenna transmits with unit weight.
pub fn payload_beamformer(antennas: usize) -> Vec<Complex64> {
    vec![Complex64::new(1.0, 0.0); antennas]
}

/// Known training symbol.
pub const LTS_SYMBOL: Complex64 = Complex64 { re: 1.0, im: 0.0 };

#[derive(Clone, Debug, PartialEq)]
pub struct Packet {
    pub lts: Complex64,
    pub payload_bits: Vec<u8>,
    pub modulation: Modulation,
}

impl Packet {
    pub fn random(modulation: Modulation, symbols: usize, rng: &mut impl Rng) -> Self {
        let bits = (0..symbols * modulation.bits_per_symbol()).map(|_| rng.gen_range(0..2u8)).collect();
        Self { lts: LTS_SYMBOL, payload_bits: bits, modulation }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReceivedPacket {
    pub lts: Complex64,
    pub payload: Vec<Complex64>,
    /// Effective payload channel (for SNR bookkeeping only).
    pub payload_channel: Complex64,
}

/// Send packet `m` through the clean channel of `csi` with the LTS
/// encrypted by column `m` of `psi`, adding noise of std `sigma`.
pub fn transmit_packet(
    pkt: &Packet,
    csi: &CsiTensor,
    psi: &EncryptionMatrix,
    m: usize,
    sigma: f64,
    seed: u64,
) -> Result<ReceivedPacket> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    transmit_with_rng(pkt, csi, psi, m, sigma, &mut rng)
}

fn transmit_with_rng(
    pkt: &Packet,
    csi: &CsiTensor,
    psi: &EncryptionMatrix,
    m: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<ReceivedPacket> {
    if psi.antennas() != csi.num_antennas() || psi.packets() != csi.num_packets() {
        return invalid("coefficients do not match the CSI shape");
    }
    if m >= csi.num_packets() {
        return invalid(format!("packet index {m} out of range"));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return invalid("sigma must be finite and >= 0");
    }
    let w = payload_beamformer(csi.num_antennas());
    let mut lts_ch = Complex64::new(0.0, 0.0);
    let mut pay_ch = Complex64::new(0.0, 0.0);
    for q in 0..csi.num_antennas() {
        let h = csi.clean.get(q, m);
        lts_ch += h * psi.coeff(q, m);
        pay_ch += h * w[q];
    }
    let symbols = pkt.modulation.map(&pkt.payload_bits)?;
    let noise = complex_noise(symbols.len() + 1, sigma, rng);
    Ok(ReceivedPacket {
        lts: lts_ch * pkt.lts + noise[0],
        payload: symbols.iter().zip(&noise[1..]).map(|(s, n)| pay_ch * s + n).collect(),
        payload_channel: pay_ch,
    })
}

/// Least-squares channel estimate from one received LTS.
pub fn estimate_csi_from_lts(received: Complex64, lts: Complex64) -> Result<Complex64> {
    if lts.norm_sqr() == 0.0 {
        return invalid("training symbol must be non-zero");
    }
    Ok(received / lts)
}

/// Zero-forcing equalization followed by hard demapping.
pub fn equalize_and_demod(payload: &[Complex64], estimate: Complex64, modulation: Modulation) -> Result<Vec<u8>> {
    if !(estimate.norm() > 1e-12) || !estimate.re.is_finite() || !estimate.im.is_finite() {
        return Err(Error::Equalization(format!("channel estimate {estimate} is not invertible")));
    }
    let eq: Vec<Complex64> = payload.iter().map(|y| y / estimate).collect();
    Ok(modulation.demap(&eq))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Holds the coefficients and recovers per-antenna CSI by block LS.
    BobKeyed,
    /// Legitimate receiver without the coefficients.
    BobKeyless,
    Eve,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::BobKeyed => "bob_keyed",
            Role::BobKeyless => "bob_keyless",
            Role::Eve => "eve",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub modulation: Modulation,
    pub payload_symbols: usize,
    pub sigma: f64,
    pub block_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BerReport {
    pub role: Role,
    pub modulation: Modulation,
    pub score: TaskScore,
    pub payload_snr_db: f64,
}

/// Run every packet of `csi` through the link and score the payload bits.
///
/// Bits and noise depend only on `seed`, so different roles on the same
/// seed see identical transmissions.
pub fn run_link(csi: &CsiTensor, psi: &EncryptionMatrix, role: Role, cfg: &LinkConfig, seed: u64) -> Result<BerReport> {
    let m_total = csi.num_packets();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut packets = Vec::with_capacity(m_total);
    let mut received = Vec::with_capacity(m_total);
    for m in 0..m_total {
        let pkt = Packet::random(cfg.modulation, cfg.payload_symbols, &mut rng);
        received.push(transmit_with_rng(&pkt, csi, psi, m, cfg.sigma, &mut rng)?);
        packets.push(pkt);
    }
    let raw: Vec<Complex64> = received
        .iter()
        .zip(&packets)
        .map(|(r, p)| estimate_csi_from_lts(r.lts, p.lts))
        .collect::<Result<_>>()?;
    let w = payload_beamformer(csi.num_antennas());
    let estimates = match role {
        Role::BobKeyed if !psi.matches_weights(&w) => {
            let rec = decrypt_block_ls(&raw, psi, cfg.block_len)?;
            (0..m_total)
                .map(|m| (0..csi.num_antennas()).map(|q| rec.channels.get(q, m) * w[q]).sum())
                .collect()
        }
        _ => raw,
    };
    let mut tx = Vec::new();
    let mut rx = Vec::new();
    let mut snr = 0.0;
    for ((pkt, r), est) in packets.iter().zip(&received).zip(&estimates) {
        tx.extend_from_slice(&pkt.payload_bits);
        rx.extend(equalize_and_demod(&r.payload, *est, cfg.modulation)?);
        snr += r.payload_channel.norm_sqr();
    }
    let snr_lin = snr / m_total as f64 / (cfg.sigma * cfg.sigma);
    Ok(BerReport { role, modulation: cfg.modulation, score: score_bits(&tx, &rx)?, payload_snr_db: to_db(snr_lin) })
}

/// Noise std that puts the mean payload SNR of `csi` at `snr_db`.
pub fn sigma_for_payload_snr(csi: &CsiTensor, snr_db: f64) -> f64 {
    let p: f64 = csi.clean.column_sums().iter().map(|v| v.norm_sqr()).sum::<f64>() / csi.num_packets() as f64;
    (p / 10f64.powf(snr_db / 10.0)).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BerRow {
    pub role: Role,
    pub modulation: Modulation,
    pub psi_id: String,
    pub seed: u64,
    pub ber: f64,
    pub snr_db: f64,
}

pub fn write_ber_csv<W: Write>(rows: &[BerRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["role", "mod", "psi_id", "seed", "ber", "snr_db"])?;
    for r in rows {
        w.write_record(&[
            r.role.name().to_string(),
            r.modulation.name().to_string(),
            r.psi_id.clone(),
            r.seed.to_string(),
            r.ber.to_string(),
            r.snr_db.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
