//! The keyed dynamic sub-model F: a gating network driven by the key picks
//! a subset of V encoders; their summed output is decoded into a surrogate
//! CSI series that the frozen classifier R consumes.
//!
//! Each encoder starts with a per-packet complex affine layer
//! `z[m] = A[m] x[m] + B[m]` (x is the RMS-normalized encrypted series),
//! followed by a strided 1-D convolution stack. The decoder is a stack of
//! transposed convolutions whose output is added to the summed affine
//! outputs. Gates are binary in the forward pass and trained with the
//! straight-through estimator.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classifier::{ClassifierR, NUM_CLASSES};
use super::features::{extract_features, extract_features_tape, feature_backward, FeatureConfig, FeatureMap};
use super::nn::{
    argmax, grad_check, FD_STEP, one_hot, read_checkpoint, write_checkpoint, GradCheckReport, LayerGrad, LayerKind,
    Optimizer, Sequential, Trace,
};
use crate::crypto::{EncryptedCsiSeries, KeyPhi, KEY_BITS};
use crate::error::{invalid, Error, Result};

/// Fold the key bits into `embed_dim` values: entry `j` is the fraction of
/// set bits among positions `j, j + E, j + 2E, ...`.
pub fn key_embed(phi: &KeyPhi, embed_dim: usize) -> Vec<f64> {
    let e = embed_dim.max(1);
    let mut counts = vec![0.0; e];
    let mut totals = vec![0.0; e];
    for i in 0..KEY_BITS {
        totals[i % e] += 1.0;
        if phi.bit(i) {
            counts[i % e] += 1.0;
        }
    }
    counts.iter().zip(&totals).map(|(c, t)| if *t > 0.0 { c / t } else { 0.0 }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubmodelConfig {
    pub num_encoders: usize,
    pub embed_dim: usize,
    pub gate_hidden: usize,
    /// Output channels of the four encoder convolutions.
    pub encoder_channels: [usize; 4],
    /// Output channels of the five decoder transposed convolutions; the last
    /// must be 2 (real and imaginary parts).
    pub decoder_channels: [usize; 5],
    pub kernel: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    /// Learning-rate multiplier of the gating network. A gate flip re-routes
    /// every series of a key at once, so gates move more slowly than the
    /// encoders.
    pub gate_lr_scale: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_probes: usize,
    /// Fit the demixing layers from per-key moments of the training series
    /// at the start of the first epoch.
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for SubmodelConfig {
    fn default() -> Self {
        Self {
            num_encoders: 8,
            embed_dim: 128,
            gate_hidden: 64,
            encoder_channels: [4, 8, 8, 16],
            decoder_channels: [8, 4, 4, 2, 2],
            kernel: 3,
            dropout: 0.5,
            learning_rate: 1e-3,
            gate_lr_scale: 0.01,
            batch_size: 128,
            epochs: 30,
            grad_probes: 100,
            warm_start: true,
            seed: 11,
        }
    }
}

impl SubmodelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_encoders == 0 || self.embed_dim == 0 || self.gate_hidden == 0 {
            return invalid("sub-model needs encoders, an embedding and a hidden width");
        }
        if self.decoder_channels[4] != 2 {
            return invalid("the last decoder layer must have 2 channels");
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return invalid("kernel must be odd");
        }
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|c| *c == 0) {
            return invalid("layer widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) || self.batch_size == 0 {
            return invalid("dropout must lie in [0, 1) and batch size be positive");
        }
        Ok(())
    }
}

const ENC_STRIDES: [usize; 4] = [1, 2, 2, 2];
const DEC_STRIDES: [usize; 5] = [1, 2, 1, 2, 2];

/// One training or evaluation example: Bob's encrypted observation (with
/// his true schedule), the key of the matrix used, and the gesture label.
#[derive(Clone, Debug)]
pub struct SubmodelSample {
    pub series: EncryptedCsiSeries,
    pub key: KeyPhi,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubmodelF {
    cfg: SubmodelConfig,
    packets: usize,
    gate_in: Sequential,
    gate_res: Sequential,
    gate_head: Sequential,
    encoders: Vec<Sequential>,
    decoder: Sequential,
    demix_a: Vec<Vec<Complex64>>,
    demix_b: Vec<Vec<Complex64>>,
    trained: bool,
}

struct GateOut {
    gates: Vec<f64>,
    sig: Vec<f64>,
    input: Vec<f64>,
    t_in: Trace,
    h1: Vec<f64>,
    t_res: Trace,
    t_head: Trace,
}

struct Forward {
    x: Vec<Complex64>,
    z: Vec<Option<Vec<Complex64>>>,
    c: Vec<Option<Vec<f64>>>,
    enc_traces: Vec<Option<Trace>>,
    mask: Option<Vec<f64>>,
    dec_trace: Trace,
    out: Vec<Complex64>,
}

/// Parameter gradients of F.
struct Grads {
    nets: Vec<Vec<LayerGrad>>,
    a: Vec<Vec<Complex64>>,
    b: Vec<Vec<Complex64>>,
}

fn rms_normalize(x: &[Complex64]) -> Vec<Complex64> {
    let p = (x.iter().map(|v| v.norm_sqr()).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if p > 0.0 {
        x.iter().map(|v| v / p).collect()
    } else {
        x.to_vec()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SubmodelF {
    /// Freshly initialized (untrained) model for series of `packets`.
    pub fn new(cfg: &SubmodelConfig, packets: usize) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel;
        let pad = k / 2;
        let mut lens = vec![packets];
        for s in ENC_STRIDES {
            let l = *lens.last().unwrap();
            if l + 2 * pad < k {
                return invalid("series too short for the encoder");
            }
            lens.push((l + 2 * pad - k) / s + 1);
        }
        if lens.iter().any(|l| *l == 0) {
            return invalid("series too short for the encoder");
        }
        let ec = cfg.encoder_channels;
        let mut enc_kinds = Vec::new();
        let mut in_c = 2;
        for (i, &s) in ENC_STRIDES.iter().enumerate() {
            enc_kinds.push(LayerKind::Conv1d { in_c, out_c: ec[i], k, stride: s, pad });
            if i < 3 {
                enc_kinds.push(LayerKind::Relu);
            }
            in_c = ec[i];
        }
        // Decoder targets: lengths walk back up the encoder pyramid.
        let targets = [lens[4], lens[3], lens[3], lens[2], lens[1]];
        let mut dec_kinds = Vec::new();
        let mut cur = lens[4];
        let mut in_c = ec[3];
        for (i, &s) in DEC_STRIDES.iter().enumerate() {
            let base = (cur - 1) * s + k - 2 * pad;
            let out_pad = targets[i].checked_sub(base).filter(|p| *p < s.max(1) || (s == 1 && *p == 0));
            let Some(out_pad) = out_pad else {
                return invalid("decoder cannot reach the encoder lengths");
            };
            dec_kinds.push(LayerKind::ConvT1d { in_c, out_c: cfg.decoder_channels[i], k, stride: s, pad, out_pad });
            if i < 4 {
                dec_kinds.push(LayerKind::Relu);
            }
            in_c = cfg.decoder_channels[i];
            cur = targets[i];
        }
        let h = cfg.gate_hidden;
        let v = cfg.num_encoders;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut gate_in = Sequential::build(
            [cfg.embed_dim, 1, 1],
            &[LayerKind::Dense { inputs: cfg.embed_dim, outputs: h }, LayerKind::Relu],
        )?;
        let mut gate_res = Sequential::build(
            [h, 1, 1],
            &[LayerKind::Dense { inputs: h, outputs: h }, LayerKind::Relu, LayerKind::Dense { inputs: h, outputs: h }],
        )?;
        let mut gate_head = Sequential::build(
            [h, 1, 1],
            &[
                LayerKind::Relu,
                LayerKind::Dense { inputs: h, outputs: 32 },
                LayerKind::Relu,
                LayerKind::Dense { inputs: 32, outputs: 16 },
                LayerKind::Relu,
                LayerKind::Dense { inputs: 16, outputs: 16 },
                LayerKind::Relu,
                LayerKind::Dense { inputs: 16, outputs: v },
            ],
        )?;
        gate_in.xavier_init(&mut rng);
        gate_res.xavier_init(&mut rng);
        gate_head.xavier_init(&mut rng);
        let mut encoders = Vec::with_capacity(v);
        for _ in 0..v {
            let mut e = Sequential::build([2, 1, packets], &enc_kinds)?;
            e.xavier_init(&mut rng);
            encoders.push(e);
        }
        let mut decoder = Sequential::build([ec[3], 1, lens[4]], &dec_kinds)?;
        decoder.xavier_init(&mut rng);
        // The decoder is a residual branch on top of the demixed series; it
        // starts silent so the untrained sum passes the affine outputs through.
        if let Some(last) = decoder.layers.last_mut() {
            last.weights.fill(0.0);
        }
        if decoder.output_shape() != [2, 1, packets] {
            return invalid("decoder output shape mismatch");
        }
        // Affine layers start near a pass-through shared by all encoders.
        let scale = 1.0 / v as f64;
        let demix_a = (0..v)
            .map(|_| {
                (0..packets)
                    .map(|_| Complex64::new(scale * (1.0 + rng.gen_range(-0.1..0.1)), scale * rng.gen_range(-0.1..0.1)))
                    .collect()
            })
            .collect();
        let demix_b = vec![vec![Complex64::new(0.0, 0.0); packets]; v];
        Ok(Self {
            cfg: cfg.clone(),
            packets,
            gate_in,
            gate_res,
            gate_head,
            encoders,
            decoder,
            demix_a,
            demix_b,
            trained: false,
        })
    }

    pub fn config(&self) -> &SubmodelConfig {
        &self.cfg
    }

    pub fn packets(&self) -> usize {
        self.packets
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn num_encoders(&self) -> usize {
        self.encoders.len()
    }

    /// Layer counts: (gating dense layers, conv layers per encoder,
    /// transposed-conv layers in the decoder).
    pub fn architecture(&self) -> (usize, usize, usize) {
        let dense = |s: &Sequential| s.layers.iter().filter(|l| matches!(l.kind, LayerKind::Dense { .. })).count();
        let conv = self.encoders[0].layers.iter().filter(|l| matches!(l.kind, LayerKind::Conv1d { .. })).count();
        let deconv = self.decoder.layers.iter().filter(|l| matches!(l.kind, LayerKind::ConvT1d { .. })).count();
        (dense(&self.gate_in) + dense(&self.gate_res) + dense(&self.gate_head), conv, deconv)
    }

    fn nets(&self) -> Vec<&Sequential> {
        let mut v = vec![&self.gate_in, &self.gate_res, &self.gate_head];
        v.extend(self.encoders.iter());
        v.push(&self.decoder);
        v
    }

    fn nets_mut(&mut self) -> Vec<&mut Sequential> {
        let mut v = vec![&mut self.gate_in, &mut self.gate_res, &mut self.gate_head];
        v.extend(self.encoders.iter_mut());
        v.push(&mut self.decoder);
        v
    }

    pub fn num_params(&self) -> usize {
        self.nets().iter().map(|n| n.num_params()).sum::<usize>() + 4 * self.encoders.len() * self.packets
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for n in self.nets() {
            out.extend(n.flat_params());
        }
        for ab in [&self.demix_a, &self.demix_b] {
            for row in ab {
                for c in row {
                    out.push(c.re);
                    out.push(c.im);
                }
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return invalid("parameter vector length mismatch");
        }
        let mut i = 0;
        for n in self.nets_mut() {
            let k = n.num_params();
            n.set_flat_params(&p[i..i + k])?;
            i += k;
        }
        for ab in [&mut self.demix_a, &mut self.demix_b] {
            for row in ab.iter_mut() {
                for c in row.iter_mut() {
                    *c = Complex64::new(p[i], p[i + 1]);
                    i += 2;
                }
            }
        }
        Ok(())
    }

    fn zero_grads(&self) -> Grads {
        let z = vec![vec![Complex64::new(0.0, 0.0); self.packets]; self.encoders.len()];
        Grads { nets: self.nets().iter().map(|n| n.zero_grads()).collect(), a: z.clone(), b: z }
    }

    fn flatten(&self, g: &Grads) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for lg in &g.nets {
            out.extend(super::nn::flatten_grads(lg));
        }
        for ab in [&g.a, &g.b] {
            for row in ab {
                for c in row {
                    out.push(c.re);
                    out.push(c.im);
                }
            }
        }
        out
    }

    fn gate_forward(&self, key: &KeyPhi) -> GateOut {
        let input = self.gate_input(key);
        let (h1, t_in) = self.gate_in.forward(&input, None);
        let (r, t_res) = self.gate_res.forward(&h1, None);
        let h2: Vec<f64> = h1.iter().zip(&r).map(|(a, b)| a + b).collect();
        let (logits, t_head) = self.gate_head.forward(&h2, None);
        let sig: Vec<f64> = logits.iter().map(|l| sigmoid(*l)).collect();
        let mut gates: Vec<f64> = sig.iter().map(|s| if *s >= 0.5 { 1.0 } else { 0.0 }).collect();
        if gates.iter().all(|g| *g == 0.0) {
            gates[argmax(&sig)] = 1.0;
        }
        GateOut { gates, sig, input, t_in, h1, t_res, t_head }
    }

    /// Key embedding standardized to zero mean and unit variance for a
    /// uniformly random key.
    fn gate_input(&self, key: &KeyPhi) -> Vec<f64> {
        let per_entry = (KEY_BITS as f64 / self.cfg.embed_dim as f64).max(1.0);
        let scale = (4.0 * per_entry).sqrt();
        key_embed(key, self.cfg.embed_dim).iter().map(|e| (e - 0.5) * scale).collect()
    }

    fn gate_logits(&self, key: &KeyPhi) -> Vec<f64> {
        let input = self.gate_input(key);
        let h1 = self.gate_in.infer(&input);
        let r = self.gate_res.infer(&h1);
        let h2: Vec<f64> = h1.iter().zip(&r).map(|(a, b)| a + b).collect();
        self.gate_head.infer(&h2)
    }

    /// Binary gate vector selected by `key`.
    pub fn gates(&self, key: &KeyPhi) -> Vec<f64> {
        self.gate_forward(key).gates
    }

    /// Forward pass. `all_encoders` also evaluates closed encoders (needed
    /// for straight-through gate gradients).
    fn forward(
        &self,
        series: &[Complex64],
        gates: &[f64],
        all_encoders: bool,
        train: Option<&mut ChaCha8Rng>,
    ) -> Forward {
        let m = self.packets;
        let x = rms_normalize(series);
        let v = self.encoders.len();
        let l4 = self.decoder.input_shape();
        let mut zsum = vec![Complex64::new(0.0, 0.0); m];
        let mut csum = vec![0.0; l4[0] * l4[2]];
        let mut z = Vec::with_capacity(v);
        let mut c = Vec::with_capacity(v);
        let mut traces = Vec::with_capacity(v);
        for i in 0..v {
            let open = gates[i] != 0.0;
            if !open && !all_encoders {
                z.push(None);
                c.push(None);
                traces.push(None);
                continue;
            }
            let zi: Vec<Complex64> =
                (0..m).map(|k| self.demix_a[i][k] * x[k] + self.demix_b[i][k]).collect();
            let mut inp = Vec::with_capacity(2 * m);
            inp.extend(zi.iter().map(|v| v.re));
            inp.extend(zi.iter().map(|v| v.im));
            let (ci, tr) = self.encoders[i].forward(&inp, None);
            if open {
                for (s, a) in zsum.iter_mut().zip(&zi) {
                    *s += a * gates[i];
                }
                for (s, a) in csum.iter_mut().zip(&ci) {
                    *s += a * gates[i];
                }
            }
            z.push(Some(zi));
            c.push(Some(ci));
            traces.push(Some(tr));
        }
        let mask = match train {
            Some(rng) if self.cfg.dropout > 0.0 => {
                let keep = 1.0 - self.cfg.dropout;
                let mk: Vec<f64> = csum.iter().map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                for (s, k) in csum.iter_mut().zip(&mk) {
                    *s *= k;
                }
                Some(mk)
            }
            _ => None,
        };
        let (d, dec_trace) = self.decoder.forward(&csum, None);
        let out = (0..m).map(|k| zsum[k] + Complex64::new(d[k], d[m + k])).collect();
        Forward { x, z, c, enc_traces: traces, mask, dec_trace, out }
    }

    /// Backward pass from the packed gradient `g_out` on the surrogate.
    /// Returns the gradient on each gate value.
    fn backward(&self, f: &Forward, gates: &[f64], g_out: &[Complex64], grads: &mut Grads) -> Vec<f64> {
        let m = self.packets;
        let v = self.encoders.len();
        let mut gd = Vec::with_capacity(2 * m);
        gd.extend(g_out.iter().map(|g| g.re));
        gd.extend(g_out.iter().map(|g| g.im));
        let dec_idx = 3 + v;
        let mut g_c = self.decoder.backward(&f.dec_trace, &gd, Some(&mut grads.nets[dec_idx]));
        if let Some(mk) = &f.mask {
            for (g, k) in g_c.iter_mut().zip(mk) {
                *g *= k;
            }
        }
        let mut g_gate = vec![0.0; v];
        for i in 0..v {
            let (Some(zi), Some(ci), Some(tr)) = (&f.z[i], &f.c[i], &f.enc_traces[i]) else {
                continue;
            };
            g_gate[i] = zi.iter().zip(g_out).map(|(a, g)| a.re * g.re + a.im * g.im).sum::<f64>()
                + ci.iter().zip(&g_c).map(|(a, g)| a * g).sum::<f64>();
            if gates[i] == 0.0 {
                continue;
            }
            let g_ci: Vec<f64> = g_c.iter().map(|g| g * gates[i]).collect();
            let gx = self.encoders[i].backward(tr, &g_ci, Some(&mut grads.nets[3 + i]));
            for k in 0..m {
                let gz = Complex64::new(gx[k], gx[m + k]) + g_out[k] * gates[i];
                grads.a[i][k] += gz * f.x[k].conj();
                grads.b[i][k] += gz;
            }
        }
        g_gate
    }

    fn gate_backward(&self, go: &GateOut, g_gate: &[f64], grads: &mut Grads) {
        let g_logit: Vec<f64> = g_gate.iter().zip(&go.sig).map(|(g, s)| g * s * (1.0 - s)).collect();
        let g_h2 = self.gate_head.backward(&go.t_head, &g_logit, Some(&mut grads.nets[2]));
        let g_r = self.gate_res.backward(&go.t_res, &g_h2, Some(&mut grads.nets[1]));
        let g_h1: Vec<f64> = g_h2.iter().zip(&g_r).map(|(a, b)| a + b).collect();
        let _ = (&go.input, &go.h1);
        self.gate_in.backward(&go.t_in, &g_h1, Some(&mut grads.nets[0]));
    }

    /// Surrogate CSI for an encrypted series under `phi`; gates are
    /// computed once per series.
    pub fn surrogate(&self, enc: &EncryptedCsiSeries, phi: &KeyPhi) -> Result<Vec<Complex64>> {
        if !self.trained {
            return Err(Error::Uninitialized("sub-model has not been trained".into()));
        }
        self.surrogate_untrained(enc, phi)
    }

    fn surrogate_untrained(&self, enc: &EncryptedCsiSeries, phi: &KeyPhi) -> Result<Vec<Complex64>> {
        if enc.values.len() != self.packets {
            return invalid(format!("series has {} packets, sub-model expects {}", enc.values.len(), self.packets));
        }
        let gates = self.gates(phi);
        Ok(self.forward(&enc.values, &gates, false, None).out)
    }

    /// End-to-end prediction through F, the feature extractor (with the
    /// receiver's true schedule) and R.
    pub fn predict(&self, r: &ClassifierR, sample: &EncryptedCsiSeries, phi: &KeyPhi, fc: &FeatureConfig) -> Result<usize> {
        let h = self.surrogate(sample, phi)?;
        r.predict(&extract_features(&h, &sample.schedule, fc)?)
    }

    /// Feature map of the surrogate series.
    pub fn surrogate_features(&self, enc: &EncryptedCsiSeries, phi: &KeyPhi, fc: &FeatureConfig) -> Result<FeatureMap> {
        extract_features(&self.surrogate(enc, phi)?, &enc.schedule, fc)
    }

    /// Cross-entropy of one sample and (optionally) accumulated gradients.
    /// `fixed_gates` freezes the gates and disables the straight-through path.
    fn sample_loss(
        &self,
        r: &ClassifierR,
        s: &SubmodelSample,
        fc: &FeatureConfig,
        fixed_gates: Option<&[f64]>,
        train: Option<&mut ChaCha8Rng>,
        grads: Option<&mut Grads>,
    ) -> Result<f64> {
        let go = self.gate_forward(&s.key);
        let gates = fixed_gates.map(<[f64]>::to_vec).unwrap_or_else(|| go.gates.clone());
        let want_grad = grads.is_some();
        let ste = want_grad && fixed_gates.is_none();
        let f = self.forward(&s.series.values, &gates, ste, train);
        let (fm, tape) = extract_features_tape(&f.out, &s.series.schedule, fc)?;
        let target = one_hot(s.label, NUM_CLASSES);
        let (loss, gx) = r.loss_and_input_grad(&fm.flat(), &target)?;
        if let Some(grads) = grads {
            let g_out = feature_backward(&tape, &gx);
            let g_gate = self.backward(&f, &gates, &g_out, grads);
            if ste {
                self.gate_backward(&go, &g_gate, grads);
            }
        }
        Ok(loss)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    /// Checkpoint: the networks, then the affine layers, then a metadata
    /// vector `[packets, trained, kernel, dropout]` and the config widths.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let flat = |ab: &Vec<Vec<Complex64>>| ab.iter().flatten().flat_map(|c| [c.re, c.im]).collect::<Vec<f64>>();
        let a = flat(&self.demix_a);
        let b = flat(&self.demix_b);
        let c = &self.cfg;
        let meta = vec![
            self.packets as f64,
            if self.trained { 1.0 } else { 0.0 },
            c.num_encoders as f64,
            c.embed_dim as f64,
            c.gate_hidden as f64,
            c.kernel as f64,
            c.dropout,
            c.learning_rate,
            c.batch_size as f64,
            c.epochs as f64,
            c.seed as f64,
            c.grad_probes as f64,
            if c.warm_start { 1.0 } else { 0.0 },
            c.gate_lr_scale,
        ];
        let widths: Vec<f64> = c.encoder_channels.iter().chain(&c.decoder_channels).map(|v| *v as f64).collect();
        write_checkpoint(w, &self.nets(), &[a.as_slice(), b.as_slice(), meta.as_slice(), widths.as_slice()])
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let (nets, extra) = read_checkpoint(r)?;
        let bad = || Error::Format("not a sub-model checkpoint".into());
        if extra.len() != 4 || extra[2].len() != 14 || extra[3].len() != 9 {
            return Err(bad());
        }
        let meta = &extra[2];
        let w = &extra[3];
        let cfg = SubmodelConfig {
            num_encoders: meta[2] as usize,
            embed_dim: meta[3] as usize,
            gate_hidden: meta[4] as usize,
            encoder_channels: [w[0] as usize, w[1] as usize, w[2] as usize, w[3] as usize],
            decoder_channels: [w[4] as usize, w[5] as usize, w[6] as usize, w[7] as usize, w[8] as usize],
            kernel: meta[5] as usize,
            dropout: meta[6],
            learning_rate: meta[7],
            batch_size: meta[8] as usize,
            epochs: meta[9] as usize,
            grad_probes: meta[11] as usize,
            warm_start: meta[12] != 0.0,
            gate_lr_scale: meta[13],
            seed: meta[10] as u64,
        };
        let mut f = SubmodelF::new(&cfg, meta[0] as usize)?;
        if nets.len() != f.nets().len() {
            return Err(bad());
        }
        for (dst, src) in f.nets_mut().into_iter().zip(nets) {
            if dst.layers.len() != src.layers.len() || dst.num_params() != src.num_params() {
                return Err(bad());
            }
            *dst = src;
        }
        let unflat = |v: &[f64], rows: usize, cols: usize| -> Result<Vec<Vec<Complex64>>> {
            if v.len() != 2 * rows * cols {
                return Err(bad());
            }
            Ok(v.chunks(2 * cols).map(|r| r.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect()).collect())
        };
        let v = f.encoders.len();
        f.demix_a = unflat(&extra[0], v, f.packets)?;
        f.demix_b = unflat(&extra[1], v, f.packets)?;
        f.trained = meta[1] != 0.0;
        Ok(f)
    }
}

/// Per-packet demixing estimated from encrypted series that share a key:
/// `x[m] ~ c1[m] + c2[m] u[m]` with `u` the moving reflection. `c1` is the
/// per-packet mean, `|c2|` the residual spread, and the phase of `c2` is
/// chained through lag-one cross-moments. Returns `(a, b)` with
/// `a x + b ~ u` up to a global complex factor.
pub fn moment_demix(series: &[&[Complex64]]) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    let n = series.len();
    let m = series.first().map(|s| s.len()).unwrap_or(0);
    if n < 2 || m == 0 || series.iter().any(|s| s.len() != m) {
        return invalid("moment demixing needs at least two equal-length series");
    }
    let xs: Vec<Vec<Complex64>> = series.iter().map(|s| rms_normalize(s)).collect();
    let zero = Complex64::new(0.0, 0.0);
    let mut c1 = vec![zero; m];
    for x in &xs {
        for (c, v) in c1.iter_mut().zip(x) {
            *c += v / n as f64;
        }
    }
    let mut power = vec![0.0; m];
    let mut lag = vec![zero; m];
    for x in &xs {
        for k in 0..m {
            let r = x[k] - c1[k];
            power[k] += r.norm_sqr() / n as f64;
            if k + 1 < m {
                lag[k] += (x[k + 1] - c1[k + 1]) * r.conj();
            }
        }
    }
    let mut a = vec![zero; m];
    let mut b = vec![zero; m];
    let mut phase = 0.0;
    for k in 0..m {
        let mag = power[k].sqrt().max(1e-12);
        let ak = Complex64::from_polar(1.0 / mag, -phase);
        a[k] = ak;
        b[k] = -ak * c1[k];
        phase += lag[k].arg();
    }
    Ok((a, b))
}

impl SubmodelF {
    /// Set the per-encoder demixing layers so that, for every key in
    /// `data`, the gated sum of affine outputs matches that key's moment
    /// estimate (least squares over the gate patterns).
    fn warm_start(&mut self, data: &[SubmodelSample]) -> Result<()> {
        let mut groups: Vec<(KeyPhi, Vec<&[Complex64]>)> = Vec::new();
        for s in data {
            match groups.iter_mut().find(|g| g.0 == s.key) {
                Some(g) => g.1.push(&s.series.values),
                None => groups.push((s.key.clone(), vec![&s.series.values])),
            }
        }
        groups.retain(|g| g.1.len() >= 2);
        if groups.is_empty() {
            return Ok(());
        }
        let v = self.encoders.len();
        let k = groups.len();
        // Centre each gate logit on its median over the training keys so
        // that every gate is open for about half of them.
        if k >= 2 {
            let logits: Vec<Vec<f64>> = groups.iter().map(|g| self.gate_logits(&g.0)).collect();
            let last = self.gate_head.layers.last_mut().expect("gate head has layers");
            for i in 0..v {
                let mut col: Vec<f64> = logits.iter().map(|l| l[i]).collect();
                col.sort_by(f64::total_cmp);
                let mid = if k % 2 == 1 { col[k / 2] } else { 0.5 * (col[k / 2 - 1] + col[k / 2]) };
                last.bias[i] -= mid;
            }
        }
        let mut gate_rows = Vec::with_capacity(k * v);
        let mut targets = Vec::with_capacity(k);
        for (key, series) in &groups {
            gate_rows.extend(self.gates(key));
            targets.push(moment_demix(series)?);
        }
        let g = nalgebra::DMatrix::from_row_slice(k, v, &gate_rows);
        let pinv = g.pseudo_inverse(1e-9).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for m in 0..self.packets {
            for i in 0..v {
                let mut a = Complex64::new(0.0, 0.0);
                let mut b = Complex64::new(0.0, 0.0);
                for (j, (ta, tb)) in targets.iter().enumerate() {
                    a += ta[m] * pinv[(i, j)];
                    b += tb[m] * pinv[(i, j)];
                }
                self.demix_a[i][m] = a;
                self.demix_b[i][m] = b;
            }
        }
        Ok(())
    }
}

/// Record of one sub-model training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    /// Mean cross-entropy over the training set after each epoch; entry 0
    /// is measured before the first update.
    pub loss_curve: Vec<f64>,
    /// Cross-entropy of every mini-batch, in order.
    pub batch_losses: Vec<f64>,
    /// Accuracy on the evaluation set after each epoch (entry 0 before training).
    pub eval_accuracy: Vec<f64>,
    pub grad_check: GradCheckReport,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate_schedule: Vec<f64>,
    pub seed: u64,
    pub classifier_digest_before: String,
    pub classifier_digest_after: String,
}

fn mean_loss(f: &SubmodelF, r: &ClassifierR, data: &[SubmodelSample], fc: &FeatureConfig) -> Result<f64> {
    let mut t = 0.0;
    for s in data {
        t += f.sample_loss(r, s, fc, None, None, None)?;
    }
    Ok(t / data.len().max(1) as f64)
}

/// End-to-end accuracy of F followed by R (no training flag check).
fn accuracy_untrained(f: &SubmodelF, r: &ClassifierR, data: &[SubmodelSample], fc: &FeatureConfig) -> Result<f64> {
    let mut ok = 0;
    for s in data {
        let h = f.surrogate_untrained(&s.series, &s.key)?;
        if r.predict(&extract_features(&h, &s.series.schedule, fc)?)? == s.label {
            ok += 1;
        }
    }
    Ok(ok as f64 / data.len().max(1) as f64)
}

/// Accuracy of F followed by R over samples with their own keys.
pub fn submodel_accuracy(f: &SubmodelF, r: &ClassifierR, data: &[SubmodelSample], fc: &FeatureConfig) -> Result<f64> {
    if !f.trained {
        return Err(Error::Uninitialized("sub-model has not been trained".into()));
    }
    accuracy_untrained(f, r, data, fc)
}

/// Train F through the frozen classifier R.
pub fn train_submodel(
    f: &mut SubmodelF,
    r: &ClassifierR,
    data: &[SubmodelSample],
    eval: Option<&[SubmodelSample]>,
    fc: &FeatureConfig,
) -> Result<TrainRun> {
    if !r.is_frozen() {
        return Err(Error::ContractViolation("classifier must be frozen before sub-model training".into()));
    }
    if data.is_empty() {
        return invalid("empty sub-model training set");
    }
    let mut keys: Vec<&KeyPhi> = data.iter().map(|s| &s.key).collect();
    keys.sort_by_key(|k| k.to_hex());
    keys.dedup();
    if keys.len() < 2 {
        return invalid("sub-model training needs at least two distinct encryption matrices");
    }
    if data.iter().any(|s| s.series.values.len() != f.packets || s.label >= NUM_CLASSES) {
        return invalid("sample shape or label does not match the sub-model");
    }
    let cfg = f.cfg.clone();
    let digest_before = r.digest();

    // Gradient check on a fixed batch with gates frozen and dropout off.
    let probe_batch: Vec<SubmodelSample> = data.iter().take(2).cloned().collect();
    let grad_check = grad_check_submodel(f, r, &probe_batch, fc, cfg.grad_probes, cfg.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf00d);
    let mut params = f.flat_params();
    let n_gate = f.gate_in.num_params() + f.gate_res.num_params() + f.gate_head.num_params();
    let mut opt_gate = Optimizer::rmsprop(cfg.learning_rate * cfg.gate_lr_scale, n_gate);
    let mut opt = Optimizer::rmsprop(cfg.learning_rate, params.len() - n_gate);
    let mut loss_curve = vec![mean_loss(f, r, data, fc)?];
    let mut eval_accuracy = Vec::new();
    if let Some(ev) = eval {
        eval_accuracy.push(accuracy_untrained(f, r, ev, fc)?);
    }
    let mut batch_losses = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        if epoch == 0 && cfg.warm_start {
            f.warm_start(data)?;
            params = f.flat_params();
        }
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = f.zero_grads();
            let mut total = 0.0;
            for &i in batch {
                total += f.sample_loss(r, &data[i], fc, None, Some(&mut rng), Some(&mut grads))?;
            }
            let mut g = f.flatten(&grads);
            let inv = 1.0 / batch.len() as f64;
            g.iter_mut().for_each(|v| *v *= inv);
            opt_gate.step(&mut params[..n_gate], &g[..n_gate]);
            opt.step(&mut params[n_gate..], &g[n_gate..]);
            f.set_flat_params(&params)?;
            batch_losses.push(total * inv);
        }
        let l = mean_loss(f, r, data, fc)?;
        if !l.is_finite() {
            return Err(Error::Diverged("sub-model loss became non-finite".into()));
        }
        loss_curve.push(l);
        if let Some(ev) = eval {
            eval_accuracy.push(accuracy_untrained(f, r, ev, fc)?);
        }
    }
    f.trained = true;
    let digest_after = r.digest();
    if digest_after != digest_before {
        return Err(Error::ContractViolation("classifier parameters changed during sub-model training".into()));
    }
    Ok(TrainRun {
        loss_curve,
        batch_losses,
        eval_accuracy,
        grad_check,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate_schedule: vec![cfg.learning_rate; cfg.epochs],
        seed: cfg.seed,
        classifier_digest_before: digest_before,
        classifier_digest_after: digest_after,
    })
}

/// Backprop check of all of F's parameters on a fixed batch, with gates
/// frozen at their forward values and dropout disabled.
pub fn grad_check_submodel(
    f: &SubmodelF,
    r: &ClassifierR,
    batch: &[SubmodelSample],
    fc: &FeatureConfig,
    probes: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let gates: Vec<Vec<f64>> = batch.iter().map(|s| f.gates(&s.key)).collect();
    let loss = |m: &SubmodelF| -> Result<f64> {
        let mut t = 0.0;
        for (s, g) in batch.iter().zip(&gates) {
            t += m.sample_loss(r, s, fc, Some(g), None, None)?;
        }
        Ok(t)
    };
    let mut grads = f.zero_grads();
    for (s, g) in batch.iter().zip(&gates) {
        f.sample_loss(r, s, fc, Some(g), None, Some(&mut grads))?;
    }
    let analytic = f.flatten(&grads);
    let mut work = f.clone();
    grad_check(
        &f.flat_params(),
        &analytic,
        |p| {
            work.set_flat_params(p).expect("same length");
            loss(&work).unwrap_or(f64::NAN)
        },
        probes,
        FD_STEP,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{hash_key, sample_psi, MagnitudeRange};
    use crate::schedule::TemporalSchedule;

    fn key(seed: u64) -> KeyPhi {
        hash_key(&sample_psi(2, 8, seed, MagnitudeRange::UNIT).unwrap())
    }

    #[test]
    fn key_embed_properties() {
        let zero = KeyPhi::from_bytes([0u8; KEY_BITS / 8]);
        assert!(key_embed(&zero, 128).iter().all(|v| *v == 0.0));
        assert_eq!(key_embed(&key(1), 128), key_embed(&key(1), 128));
        let mut collisions = 0;
        for i in 0..100 {
            let (a, b) = (key(1000 + 2 * i), key(1001 + 2 * i));
            assert!(a.hamming_distance(&b) > 512);
            let (ea, eb) = (key_embed(&a, 128), key_embed(&b, 128));
            let dot: f64 = ea.iter().zip(&eb).map(|(x, y)| x * y).sum();
            let na: f64 = ea.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = eb.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(dot / (na * nb) < 0.99);
            if ea == eb {
                collisions += 1;
            }
        }
        assert_eq!(collisions, 0);
    }

    fn small_cfg() -> SubmodelConfig {
        SubmodelConfig { num_encoders: 3, embed_dim: 16, gate_hidden: 8, grad_probes: 0, ..Default::default() }
    }

    fn fc() -> FeatureConfig {
        FeatureConfig { grid_rate_hz: 1000.0, window: 32, hop: 16, bins: 8 }
    }

    fn sample(seed: u64, label: usize, packets: usize) -> SubmodelSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..packets).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        SubmodelSample {
            series: EncryptedCsiSeries { values, schedule: TemporalSchedule::regular(packets, 1e-3).unwrap() },
            key: key(seed % 2),
            label,
        }
    }

    fn frozen_r() -> ClassifierR {
        let fc = fc();
        let mut r = ClassifierR::new(fc.frames_for(100), fc.bins, 0.5, 3).unwrap();
        r.freeze();
        r
    }

    #[test]
    fn gates_binary_with_one_open() {
        let f = SubmodelF::new(&SubmodelConfig::default(), 1500).unwrap();
        for s in 0..20 {
            let g = f.gates(&key(s));
            assert!(g.iter().all(|v| *v == 0.0 || *v == 1.0));
            assert!(g.iter().any(|v| *v == 1.0));
        }
        assert_eq!(f.architecture(), (7, 4, 5));
    }

    #[test]
    fn untrained_surrogate_is_an_error() {
        let f = SubmodelF::new(&small_cfg(), 100).unwrap();
        let s = sample(1, 0, 100);
        assert!(matches!(f.surrogate(&s.series, &s.key), Err(Error::Uninitialized(_))));
    }

    #[test]
    fn unfrozen_classifier_rejected() {
        let mut f = SubmodelF::new(&small_cfg(), 100).unwrap();
        let mut r = frozen_r();
        r.thaw();
        let data = vec![sample(0, 0, 100), sample(1, 1, 100)];
        assert!(matches!(train_submodel(&mut f, &r, &data, None, &fc()), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn single_matrix_rejected() {
        let mut f = SubmodelF::new(&small_cfg(), 100).unwrap();
        let data = vec![sample(0, 0, 100), sample(2, 1, 100)];
        assert!(train_submodel(&mut f, &frozen_r(), &data, None, &fc()).is_err());
    }

    #[test]
    fn gradients_match_with_gates_frozen() {
        let f = SubmodelF::new(&small_cfg(), 100).unwrap();
        let r = frozen_r();
        let batch = vec![sample(0, 2, 100), sample(1, 5, 100)];
        let rep = grad_check_submodel(&f, &r, &batch, &fc(), 150, 9).unwrap();
        assert!(rep.passed(1e-4), "{rep:?}");
    }

    #[test]
    fn training_keeps_classifier_digest_and_round_trips() {
        let mut f = SubmodelF::new(&SubmodelConfig { epochs: 2, batch_size: 2, ..small_cfg() }, 100).unwrap();
        let r = frozen_r();
        let data: Vec<_> = (0..4).map(|i| sample(i, i as usize, 100)).collect();
        let run = train_submodel(&mut f, &r, &data, None, &fc()).unwrap();
        assert_eq!(run.classifier_digest_before, run.classifier_digest_after);
        assert_eq!(run.loss_curve.len(), 3);
        assert!(run.loss_curve.iter().all(|l| l.is_finite()));
        let h = f.surrogate(&data[0].series, &data[0].key).unwrap();
        assert_eq!(h.len(), 100);
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        let g = SubmodelF::read_from(buf.as_slice()).unwrap();
        assert_eq!(f, g);
    }
}
