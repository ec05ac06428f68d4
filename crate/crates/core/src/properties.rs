//! Property tests of the cross-module invariants.

use crate::channel::{ComplexGrid, CsiTensor};
use crate::comm::{estimate_csi_from_lts, transmit_packet, Modulation, Packet};
use crate::crypto::{
    decrypt_block_ls, encrypt, encrypt_grid, hash_key, sample_psi, EncryptionMatrix, MagnitudeRange,
};
use crate::harness::{reference_samples, Recorder};
use crate::metrics::{sdnr, sensing_snr};
use crate::optimizer::{optimize_psi, AdmmParams, ChannelStats, ObjectiveBundle, ObjectiveWeights, QosBounds};
use crate::reference::ReferenceConfig;
use crate::schedule::TemporalSchedule;
use crate::sensing::{ClassifierR, FeatureMap, SubmodelConfig, SubmodelF};
use crate::stats::{rank_sum_greater, spearman};
use crate::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_grid(q: usize, m: usize, seed: u64) -> ComplexGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..q * m).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    ComplexGrid::from_vec(q, m, data).unwrap()
}

fn tensor(q: usize, m: usize, sigma: f64, seed: u64) -> CsiTensor {
    let static_part = rand_grid(q, m, seed);
    let dynamic_part = rand_grid(q, m, seed + 1);
    let sum: Vec<Complex64> = static_part.as_slice().iter().zip(dynamic_part.as_slice()).map(|(s, d)| s + d).collect();
    let clean = ComplexGrid::from_vec(q, m, sum).unwrap();
    CsiTensor {
        noisy: clean.clone(),
        clean,
        static_part,
        dynamic_part,
        sigma,
        carrier_freq_hz: 2.4e9,
        schedule: TemporalSchedule::regular(m, 1e-3).unwrap(),
    }
}

fn small_reference() -> ReferenceConfig {
    ReferenceConfig { antennas: 2, packet_rate_hz: 200.0, samples_per_class: 4, ..ReferenceConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sampled_and_projected_matrices_meet_the_power_budget(
        q in 1usize..6, m in 1usize..64, seed in any::<u64>(), scale in 0.1f64..20.0,
    ) {
        let psi = sample_psi(q, m, seed, MagnitudeRange::new(0.1, 3.0).unwrap()).unwrap();
        prop_assert!(psi.power() <= psi.power_budget());
        let coeffs = psi.coeffs().iter().map(|c| c * scale).collect();
        let p = EncryptionMatrix::projected(q, m, coeffs, EncryptionMatrix::default_budget(q, m)).unwrap();
        prop_assert!(p.power() <= p.power_budget());
    }

    #[test]
    fn encryption_is_linear(q in 1usize..5, m in 1usize..40, seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let g1 = rand_grid(q, m, seed);
        let g2 = rand_grid(q, m, seed ^ 1);
        let psi = sample_psi(q, m, seed ^ 2, MagnitudeRange::UNIT).unwrap();
        let mix: Vec<Complex64> = g1.as_slice().iter().zip(g2.as_slice()).map(|(x, y)| x * a + y * b).collect();
        let lhs = encrypt_grid(&ComplexGrid::from_vec(q, m, mix).unwrap(), &psi).unwrap();
        let y1 = encrypt_grid(&g1, &psi).unwrap();
        let y2 = encrypt_grid(&g2, &psi).unwrap();
        for k in 0..m {
            prop_assert!((lhs[k] - (y1[k] * a + y2[k] * b)).norm() < 1e-12);
        }
    }

    #[test]
    fn block_constant_channels_round_trip(q in 1usize..5, blocks in 1usize..6, seed in any::<u64>()) {
        let l = 4 * q;
        let m = blocks * l;
        let psi = sample_psi(q, m, seed, MagnitudeRange::new(0.5, 1.5).unwrap()).unwrap();
        let per_block = rand_grid(q, blocks, seed ^ 9);
        let mut h = ComplexGrid::zeros(q, m);
        for a in 0..q {
            for k in 0..m {
                h.set(a, k, per_block.get(a, k / l));
            }
        }
        let y = encrypt_grid(&h, &psi).unwrap();
        let rec = decrypt_block_ls(&y, &psi, l).unwrap();
        for (x, t) in rec.channels.as_slice().iter().zip(h.as_slice()) {
            prop_assert!((x - t).norm() < 1e-9 * (1.0 + t.norm()));
        }
    }

    #[test]
    fn key_is_deterministic_and_avalanches(seed in any::<u64>(), idx in 0usize..64) {
        let psi = sample_psi(4, 16, seed, MagnitudeRange::UNIT).unwrap();
        let k = hash_key(&psi);
        prop_assert_eq!(k.clone(), hash_key(&psi.clone()));
        let mut c = psi.coeffs().to_vec();
        c[idx] *= Complex64::from_polar(1.0, 1e-9);
        let other = hash_key(&EncryptionMatrix::with_default_budget(4, 16, c).unwrap());
        let d = k.hamming_distance(&other);
        prop_assert!((900..=1148).contains(&d), "hamming distance {}", d);
    }

    #[test]
    fn sdnr_ignores_a_global_phase(q in 1usize..4, m in 2usize..40, seed in any::<u64>(), phi in -3.2f64..3.2) {
        let csi = tensor(q, m, 0.1, seed);
        let psi = sample_psi(q, m, seed ^ 3, MagnitudeRange::UNIT).unwrap();
        let obs = encrypt_grid(&csi.clean, &psi).unwrap();
        let obs_d = encrypt_grid(&csi.dynamic_part, &psi).unwrap();
        let r = csi.clean.column_sums();
        let rs = csi.static_part.column_sums();
        let rot = Complex64::from_polar(1.0, phi);
        let turn = |v: &[Complex64]| v.iter().map(|x| x * rot).collect::<Vec<_>>();
        let a = sdnr(&obs, &obs_d, &r, &rs, csi.sigma, q).unwrap().value_linear;
        let b = sdnr(&turn(&obs), &turn(&obs_d), &turn(&r), &turn(&rs), csi.sigma, q).unwrap().value_linear;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
    }

    #[test]
    fn more_noise_never_raises_sensing_quality(q in 1usize..4, m in 2usize..40, seed in any::<u64>(), s1 in 0.0f64..1.0, ds in 0.0f64..1.0) {
        let lo = tensor(q, m, s1, seed);
        let hi = CsiTensor { sigma: s1 + ds, ..lo.clone() };
        prop_assert!(sensing_snr(&hi) <= sensing_snr(&lo));
        let psi = sample_psi(q, m, seed ^ 4, MagnitudeRange::UNIT).unwrap();
        let e_lo = crate::metrics::eve_sdnr(&lo, &psi).unwrap().value_linear;
        let e_hi = crate::metrics::eve_sdnr(&hi, &psi).unwrap().value_linear;
        prop_assert!(e_hi <= e_lo);
    }

    #[test]
    fn noiseless_lts_estimate_equals_the_encrypted_channel(q in 1usize..5, m in 1usize..20, seed in any::<u64>()) {
        let csi = tensor(q, m, 0.0, seed);
        let psi = sample_psi(q, m, seed ^ 5, MagnitudeRange::UNIT).unwrap();
        let enc = encrypt(&csi, &psi).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pkt = Packet::random(Modulation::Qam64, 4, &mut rng);
        for k in 0..m {
            let rx = transmit_packet(&pkt, &csi, &psi, k, 0.0, seed).unwrap();
            prop_assert_eq!(estimate_csi_from_lts(rx.lts, pkt.lts).unwrap(), enc.values[k]);
        }
    }

    #[test]
    fn rank_statistics_stay_in_range(x in prop::collection::vec(-10.0f64..10.0, 3..30), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-5.0..5.0)).collect();
        if let Ok(r) = spearman(&x, &y) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        }
        let p = rank_sum_greater(&x, &y).unwrap().p_greater;
        prop_assert!((0.0..=1.0).contains(&p));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn recordings_decompose_and_repeat(seed in any::<u64>(), pick in 0usize..32) {
        let rc = small_reference();
        let rec = Recorder::new(rc.clone(), Default::default()).unwrap();
        let (train, _) = reference_samples(&rc, seed);
        let sample = &train[pick % train.len()];
        let sched = rec.schedule(sample, 0.5).unwrap();
        let a = rec.record(sample, rc.eve, &sched).unwrap();
        let b = rec.record(sample, rc.eve, &sched).unwrap();
        prop_assert_eq!(&a.noisy, &b.noisy);
        for ((c, s), d) in a.clean.as_slice().iter().zip(a.static_part.as_slice()).zip(a.dynamic_part.as_slice()) {
            prop_assert!((c - (s + d)).norm() <= 1e-12 * (1.0 + c.norm()));
        }
    }

    #[test]
    fn optimized_matrices_are_feasible_and_accepted_monotonically(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gains = || (0..3).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect::<Vec<_>>();
        let bob = ChannelStats::new(gains(), gains()).unwrap();
        let eve = ChannelStats::new(gains(), gains()).unwrap();
        let bundle = ObjectiveBundle::new(bob, eve, 0.1, 12).unwrap();
        let init = sample_psi(3, 48, seed, MagnitudeRange::UNIT).unwrap();
        let params = AdmmParams { max_iters: 150, burn_in: 30, ..AdmmParams::default() };
        let w = ObjectiveWeights::new(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0).unwrap();
        let (psi, trace) = optimize_psi(&init, &w, &QosBounds { eps_c: 0.0, eps_sd: 0.0 }, &bundle, &params).unwrap();
        prop_assert!(psi.power() <= psi.power_budget());
        let after: Vec<f64> = trace.rows.iter().filter(|r| r.iter > trace.burn_in_end).map(|r| r.objective).collect();
        prop_assert!(after.windows(2).all(|p| p[1] >= p[0]));
    }

    #[test]
    fn classifier_outputs_lie_on_the_simplex(seed in any::<u64>()) {
        let r = ClassifierR::new(8, 6, 0.5, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat: Vec<f64> = (0..48).map(|_| rng.gen_range(0.0..1.0)).collect();
        let fm = FeatureMap::from_flat(&flat, 8, 6).unwrap();
        let p = r.infer(&fm).unwrap().probs;
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn inference_gates_are_binary_with_one_open(seed in any::<u64>()) {
        let cfg = SubmodelConfig { num_encoders: 4, embed_dim: 32, gate_hidden: 16, seed, ..SubmodelConfig::default() };
        let f = SubmodelF::new(&cfg, 64).unwrap();
        let key = hash_key(&sample_psi(2, 8, seed, MagnitudeRange::UNIT).unwrap());
        let g = f.gates(&key);
        prop_assert!(g.iter().all(|v| *v == 0.0 || *v == 1.0));
        prop_assert!(g.iter().any(|v| *v == 1.0));
    }
}
