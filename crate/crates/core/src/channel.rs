//! Multipath CSI synthesis.
//!
//! Each transmit antenna sees a set of propagation paths. A path has a
//! complex attenuation, a fixed delay, and an optional time-varying delay
//! driven by a hand trajectory. CSI at packet time `t` is
//! `h(t) = sum_k a_k exp(-j 2 pi f_c (tau_k + tau_k^D(t)))`.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::schedule::TemporalSchedule;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Dense row-major complex matrix, rows = antennas, cols = packets.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![Complex64::new(0.0, 0.0); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return invalid(format!("grid data length {} != {rows}x{cols}", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<Complex64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return invalid("ragged rows");
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Complex64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [Complex64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// Sum over rows for every column (an all-ones combiner).
    pub fn column_sums(&self) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Static,
    Dynamic,
}

/// Time-varying part of a path delay.
#[derive(Clone, Debug)]
pub enum DelayProfile {
    Fixed,
    /// Reflector moving radially: `tau(t) = 2 (r0 + v t) / c`.
    ConstantVelocity { initial_range_m: f64, radial_speed_mps: f64 },
    /// Reflector following a hand trajectory: `tau(t) = 2 |p(t)| / c`.
    Trajectory(Arc<Trajectory>),
}

impl DelayProfile {
    pub fn delay_at(&self, t: f64) -> f64 {
        match self {
            DelayProfile::Fixed => 0.0,
            DelayProfile::ConstantVelocity { initial_range_m, radial_speed_mps } => {
                2.0 * (initial_range_m + radial_speed_mps * t).max(0.0) / SPEED_OF_LIGHT
            }
            DelayProfile::Trajectory(tr) => 2.0 * norm(tr.position(t)) / SPEED_OF_LIGHT,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PathComponent {
    pub attenuation: Complex64,
    pub static_delay_s: f64,
    pub dynamic: DelayProfile,
    pub kind: PathKind,
}

impl PathComponent {
    pub fn fixed(attenuation: Complex64, delay_s: f64) -> Self {
        Self { attenuation, static_delay_s: delay_s, dynamic: DelayProfile::Fixed, kind: PathKind::Static }
    }

    pub fn moving(attenuation: Complex64, delay_s: f64, dynamic: DelayProfile) -> Self {
        Self { attenuation, static_delay_s: delay_s, dynamic, kind: PathKind::Dynamic }
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.attenuation.norm();
        if !a.is_finite() || a > 1.0 + 1e-12 {
            return invalid(format!("path attenuation magnitude {a} outside [0, 1]"));
        }
        if !(self.static_delay_s.is_finite() && self.static_delay_s >= 0.0) {
            return invalid(format!("path delay {} must be finite and >= 0", self.static_delay_s));
        }
        if let DelayProfile::ConstantVelocity { initial_range_m, radial_speed_mps } = self.dynamic {
            if !(initial_range_m >= 0.0 && initial_range_m.is_finite() && radial_speed_mps.is_finite()) {
                return invalid("constant-velocity profile needs finite speed and range >= 0");
            }
        }
        match (self.kind, &self.dynamic) {
            (PathKind::Static, DelayProfile::Fixed) => Ok(()),
            (PathKind::Static, _) => invalid("static path with a time-varying delay"),
            (PathKind::Dynamic, DelayProfile::Fixed) => invalid("dynamic path without a delay profile"),
            (PathKind::Dynamic, _) => Ok(()),
        }
    }

    /// Complex gain of this path at time `t` and carrier `fc`.
    pub fn response(&self, fc: f64, t: f64) -> Complex64 {
        let tau = self.static_delay_s + self.dynamic.delay_at(t);
        self.attenuation * Complex64::from_polar(1.0, -2.0 * PI * fc * tau)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GestureKind {
    PushPull,
    Clap,
    Slide,
    Tap,
    PinchSpread,
    DrawCircle,
    DrawSquare,
    DrawZigzag,
}

impl GestureKind {
    pub const ALL: [GestureKind; 8] = [
        GestureKind::PushPull,
        GestureKind::Clap,
        GestureKind::Slide,
        GestureKind::Tap,
        GestureKind::PinchSpread,
        GestureKind::DrawCircle,
        GestureKind::DrawSquare,
        GestureKind::DrawZigzag,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|g| *g == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            GestureKind::PushPull => "push_pull",
            GestureKind::Clap => "clap",
            GestureKind::Slide => "slide",
            GestureKind::Tap => "tap",
            GestureKind::PinchSpread => "pinch_spread",
            GestureKind::DrawCircle => "draw_circle",
            GestureKind::DrawSquare => "draw_square",
            GestureKind::DrawZigzag => "draw_zigzag",
        }
    }
}

impl FromStr for GestureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', ' '], "_");
        let key = match key.as_str() {
            "circle" => "draw_circle",
            "square" => "draw_square",
            "zigzag" => "draw_zigzag",
            "pushpull" => "push_pull",
            "pinchspread" | "pinch" => "pinch_spread",
            k => k,
        }
        .to_string();
        Self::ALL
            .into_iter()
            .find(|g| g.name() == key)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown gesture '{s}'")))
    }
}

/// Piece of a hand trajectory. Motion along each piece is eased with a
/// smoothstep so velocity is zero at segment boundaries.
#[derive(Clone, Debug)]
pub enum Segment {
    Hold { at: [f64; 3], duration: f64 },
    Line { from: [f64; 3], to: [f64; 3], duration: f64 },
    /// Arc in the horizontal plane around `center`.
    Arc { center: [f64; 3], radius: f64, phase0: f64, sweep: f64, duration: f64 },
}

impl Segment {
    fn duration(&self) -> f64 {
        match self {
            Segment::Hold { duration, .. } | Segment::Line { duration, .. } | Segment::Arc { duration, .. } => *duration,
        }
    }

    fn at(&self, u: f64) -> [f64; 3] {
        let s = smoothstep(u);
        match self {
            Segment::Hold { at, .. } => *at,
            Segment::Line { from, to, .. } => [
                from[0] + s * (to[0] - from[0]),
                from[1] + s * (to[1] - from[1]),
                from[2] + s * (to[2] - from[2]),
            ],
            Segment::Arc { center, radius, phase0, sweep, .. } => {
                let phi = phase0 + s * sweep;
                [center[0] + radius * phi.cos(), center[1] + radius * phi.sin(), center[2]]
            }
        }
    }
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

fn norm(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

/// Hand position over time; coordinates in metres with the transmit array
/// centre at the origin and `x` pointing away from the array.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub start_s: f64,
    pub segments: Vec<Segment>,
}

impl Trajectory {
    pub fn position(&self, t: f64) -> [f64; 3] {
        let mut local = t - self.start_s;
        if local <= 0.0 || self.segments.is_empty() {
            return self.segments.first().map_or([0.0; 3], |s| s.at(0.0));
        }
        for seg in &self.segments {
            let d = seg.duration();
            if local <= d {
                return seg.at(if d > 0.0 { local / d } else { 1.0 });
            }
            local -= d;
        }
        self.segments.last().unwrap().at(1.0)
    }

    pub fn end_s(&self) -> f64 {
        self.start_s + self.segments.iter().map(Segment::duration).sum::<f64>()
    }

    /// Radial velocity `d|p|/dt` by central difference.
    pub fn radial_velocity(&self, t: f64) -> f64 {
        let h = 1e-4;
        (norm(self.position(t + h)) - norm(self.position(t - h))) / (2.0 * h)
    }
}

fn offset(rest: [f64; 3], dx: f64, dy: f64) -> [f64; 3] {
    [rest[0] + dx, rest[1] + dy, rest[2]]
}

/// Build the moving reflector paths for one gesture instance.
///
/// Returned paths carry a unit-scale attenuation with random phase and zero
/// fixed delay; [`RoomLayout::scenario`] rescales them per antenna. Per-seed
/// variation covers amplitude, tempo, onset, rest-point jitter and phase.
pub fn synthesize_gesture_paths(
    gesture: GestureKind,
    duration_s: f64,
    distance_m: f64,
    seed: u64,
) -> Result<Vec<PathComponent>> {
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return invalid(format!("gesture duration must be positive, got {duration_s}"));
    }
    if !(distance_m.is_finite() && distance_m > 0.0) {
        return invalid(format!("gesture distance must be positive, got {distance_m}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e57_0000 ^ (gesture.index() as u64) << 40);
    let amp = rng.gen_range(0.16..0.24);
    let active = duration_s * rng.gen_range(0.72..0.86);
    let start = rng.gen_range(0.03..(duration_s - active).max(0.031));
    let rest = [distance_m + rng.gen_range(-0.03..0.03), rng.gen_range(-0.04..0.04), rng.gen_range(-0.03..0.03)];
    let phase = rng.gen_range(0.0..2.0 * PI);
    let a = amp;
    let line = |from, to, frac: f64| Segment::Line { from, to, duration: active * frac };
    let hold = |at, frac: f64| Segment::Hold { at, duration: active * frac };

    let mut trajectories: Vec<(f64, Vec<Segment>)> = Vec::new();
    match gesture {
        GestureKind::PushPull => {
            let near = offset(rest, -a, 0.0);
            trajectories.push((1.0, vec![line(rest, near, 0.5), line(near, rest, 0.5)]));
        }
        GestureKind::Clap => {
            let near = offset(rest, -0.5 * a, 0.0);
            trajectories.push((
                1.0,
                vec![line(rest, near, 0.25), line(near, rest, 0.25), line(rest, near, 0.25), line(near, rest, 0.25)],
            ));
        }
        GestureKind::Slide => {
            let from = offset(rest, -0.6 * a, -0.8 * a);
            let to = offset(rest, 0.6 * a, 0.8 * a);
            trajectories.push((1.0, vec![line(from, to, 1.0)]));
        }
        GestureKind::Tap => {
            let near = offset(rest, -0.5 * a, 0.0);
            trajectories.push((
                1.0,
                vec![hold(rest, 0.3), line(rest, near, 0.2), line(near, rest, 0.2), hold(rest, 0.3)],
            ));
        }
        GestureKind::PinchSpread => {
            let f1a = offset(rest, -0.35 * a, 0.02);
            let f1b = offset(rest, 0.0, 0.02);
            let f2a = offset(rest, 0.35 * a, -0.02);
            let f2b = offset(rest, 0.0, -0.02);
            trajectories.push((0.7, vec![line(f1a, f1b, 0.5), line(f1b, f1a, 0.5)]));
            trajectories.push((0.7, vec![line(f2a, f2b, 0.5), line(f2b, f2a, 0.5)]));
        }
        GestureKind::DrawCircle => {
            let r = 0.5 * a;
            trajectories.push((
                1.0,
                vec![Segment::Arc { center: rest, radius: r, phase0: -0.5 * PI, sweep: 2.0 * PI, duration: active }],
            ));
        }
        GestureKind::DrawSquare => {
            let p0 = rest;
            let p1 = offset(rest, 0.5 * a, 0.0);
            let p2 = offset(rest, 0.5 * a, a);
            let p3 = offset(rest, 0.0, a);
            trajectories.push((1.0, vec![line(p0, p1, 0.25), line(p1, p2, 0.25), line(p2, p3, 0.25), line(p3, p0, 0.25)]));
        }
        GestureKind::DrawZigzag => {
            let p0 = offset(rest, 0.5 * a, -0.5 * a);
            let p1 = offset(rest, -0.5 * a, -a / 6.0);
            let p2 = offset(rest, 0.5 * a, a / 6.0);
            let p3 = offset(rest, -0.5 * a, 0.5 * a);
            trajectories.push((1.0, vec![line(p0, p1, 1.0 / 3.0), line(p1, p2, 1.0 / 3.0), line(p2, p3, 1.0 / 3.0)]));
        }
    }

    Ok(trajectories
        .into_iter()
        .enumerate()
        .map(|(i, (weight, segments))| {
            let tr = Trajectory { start_s: start, segments };
            let att = Complex64::from_polar(weight, phase + 1.3 * i as f64);
            PathComponent::moving(att, 0.0, DelayProfile::Trajectory(Arc::new(tr)))
        })
        .collect())
}

/// Per-antenna propagation paths plus receiver noise level.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub carrier_freq_hz: f64,
    pub antenna_paths: Vec<Vec<PathComponent>>,
    pub noise_std: f64,
}

impl Scenario {
    pub fn new(carrier_freq_hz: f64, antenna_paths: Vec<Vec<PathComponent>>, noise_std: f64) -> Result<Self> {
        let s = Self { carrier_freq_hz, antenna_paths, noise_std };
        s.validate()?;
        Ok(s)
    }

    pub fn num_antennas(&self) -> usize {
        self.antenna_paths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.carrier_freq_hz.is_finite() && self.carrier_freq_hz > 0.0) {
            return invalid("carrier frequency must be positive");
        }
        if self.antenna_paths.is_empty() {
            return invalid("scenario needs at least one antenna");
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return invalid("noise std must be finite and >= 0");
        }
        for paths in &self.antenna_paths {
            for p in paths {
                p.validate()?;
            }
        }
        Ok(())
    }
}

/// CSI realisation for one gesture instance.
#[derive(Clone, Debug)]
pub struct CsiTensor {
    pub clean: ComplexGrid,
    pub static_part: ComplexGrid,
    pub dynamic_part: ComplexGrid,
    pub noisy: ComplexGrid,
    pub sigma: f64,
    pub carrier_freq_hz: f64,
    pub schedule: TemporalSchedule,
}

impl CsiTensor {
    pub fn num_antennas(&self) -> usize {
        self.clean.rows()
    }

    pub fn num_packets(&self) -> usize {
        self.clean.cols()
    }
}

/// Evaluate the multipath model on `schedule` and add receiver noise.
pub fn generate_csi(
    scenario: &Scenario,
    num_packets: usize,
    schedule: &TemporalSchedule,
    seed: u64,
) -> Result<CsiTensor> {
    generate_csi_at(scenario, scenario.carrier_freq_hz, num_packets, schedule, seed)
}

/// Multi-subcarrier generation: one tensor per subcarrier `fc + n * spacing`.
/// Noise seeds are derived per subcarrier.
pub fn generate_csi_subcarriers(
    scenario: &Scenario,
    num_subcarriers: usize,
    spacing_hz: f64,
    num_packets: usize,
    schedule: &TemporalSchedule,
    seed: u64,
) -> Result<Vec<CsiTensor>> {
    (0..num_subcarriers)
        .map(|n| {
            let fc = scenario.carrier_freq_hz + n as f64 * spacing_hz;
            generate_csi_at(scenario, fc, num_packets, schedule, seed.wrapping_add(n as u64 * 0x9e37_79b9))
        })
        .collect()
}

fn generate_csi_at(
    scenario: &Scenario,
    fc: f64,
    num_packets: usize,
    schedule: &TemporalSchedule,
    seed: u64,
) -> Result<CsiTensor> {
    scenario.validate()?;
    if num_packets == 0 {
        return invalid("number of packets must be positive");
    }
    if schedule.len() != num_packets {
        return invalid(format!("schedule length {} != packets {num_packets}", schedule.len()));
    }
    let q = scenario.num_antennas();
    let mut static_part = ComplexGrid::zeros(q, num_packets);
    let mut dynamic_part = ComplexGrid::zeros(q, num_packets);
    for (a, paths) in scenario.antenna_paths.iter().enumerate() {
        for p in paths {
            let target = match p.kind {
                PathKind::Static => &mut static_part,
                PathKind::Dynamic => &mut dynamic_part,
            };
            if p.kind == PathKind::Static {
                let v = p.response(fc, 0.0);
                for x in target.row_mut(a) {
                    *x += v;
                }
            } else {
                for (x, &t) in target.row_mut(a).iter_mut().zip(&schedule.timestamps) {
                    *x += p.response(fc, t);
                }
            }
        }
    }
    let mut clean = static_part.clone();
    for (c, d) in clean.as_mut_slice().iter_mut().zip(dynamic_part.as_slice()) {
        *c += d;
    }
    let noisy = add_noise(&clean, scenario.noise_std, seed)?;
    Ok(CsiTensor {
        clean,
        static_part,
        dynamic_part,
        noisy,
        sigma: scenario.noise_std,
        carrier_freq_hz: fc,
        schedule: schedule.clone(),
    })
}

/// Add circular complex Gaussian noise with total variance `sigma^2`.
pub fn add_noise(grid: &ComplexGrid, sigma: f64, seed: u64) -> Result<ComplexGrid> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return invalid(format!("noise std must be finite and >= 0, got {sigma}"));
    }
    let mut out = grid.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = sigma / 2f64.sqrt();
    for v in out.as_mut_slice() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *v += Complex64::new(s * re, s * im);
    }
    Ok(out)
}

/// Noise vector with total variance `sigma^2` per entry.
pub fn complex_noise(len: usize, sigma: f64, rng: &mut impl Rng) -> Vec<Complex64> {
    let s = sigma / 2f64.sqrt();
    (0..len)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(s * re, s * im)
        })
        .collect()
}

/// Point reflector in the room.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reflector {
    pub position: [f64; 3],
    pub reflectivity: f64,
}

/// Geometry used to derive per-antenna paths: a uniform linear transmit
/// array along `y`, a single-antenna receiver, static reflectors and a hand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomLayout {
    pub carrier_freq_hz: f64,
    pub num_antennas: usize,
    /// Element spacing in wavelengths.
    pub spacing_wavelengths: f64,
    pub receiver: [f64; 3],
    pub reflectors: Vec<Reflector>,
    /// Line-of-sight amplitude scale (1 for LoS, < 1 for blocked LoS).
    pub los_scale: f64,
    pub hand_reflectivity: f64,
    pub noise_std: f64,
}

impl RoomLayout {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq_hz
    }

    pub fn antenna_position(&self, q: usize) -> [f64; 3] {
        let d = self.spacing_wavelengths * self.wavelength();
        [0.0, (q as f64 - (self.num_antennas as f64 - 1.0) / 2.0) * d, 0.0]
    }

    /// Place the receiver at `distance_m` from the array centre at bearing
    /// `angle_deg` from the array broadside.
    pub fn with_receiver_polar(mut self, distance_m: f64, angle_deg: f64) -> Self {
        let a = angle_deg.to_radians();
        self.receiver = [distance_m * a.cos(), distance_m * a.sin(), 0.0];
        self
    }

    /// Static paths only.
    pub fn static_paths(&self, q: usize) -> Vec<PathComponent> {
        let c = SPEED_OF_LIGHT;
        let aq = self.antenna_position(q);
        let mut out = Vec::with_capacity(1 + self.reflectors.len());
        let d_los = dist(aq, self.receiver);
        if self.los_scale > 0.0 {
            let amp = (self.los_scale / d_los.max(1.0)).min(1.0);
            out.push(PathComponent::fixed(Complex64::new(amp, 0.0), d_los / c));
        }
        for r in &self.reflectors {
            let d1 = dist(aq, r.position);
            let d2 = dist(r.position, self.receiver);
            let amp = (r.reflectivity / (d1 * d2).max(1.0)).min(1.0);
            out.push(PathComponent::fixed(Complex64::new(amp, 0.0), (d1 + d2) / c));
        }
        out
    }

    /// Full scenario: static paths plus the gesture paths re-anchored per
    /// antenna, using the bistatic rest-point geometry for amplitude and
    /// fixed delay offset.
    pub fn scenario(&self, gesture_paths: &[PathComponent], hand_rest: [f64; 3]) -> Result<Scenario> {
        let c = SPEED_OF_LIGHT;
        let mut antenna_paths = Vec::with_capacity(self.num_antennas);
        for q in 0..self.num_antennas {
            let aq = self.antenna_position(q);
            let mut paths = self.static_paths(q);
            let d1 = dist(aq, hand_rest);
            let d2 = dist(hand_rest, self.receiver);
            let gain = (self.hand_reflectivity / (d1 * d2).max(0.25)).min(1.0);
            let extra = ((d1 + d2 - 2.0 * norm(hand_rest)) / c).max(0.0);
            for p in gesture_paths {
                let mut p = p.clone();
                p.attenuation *= gain;
                if p.attenuation.norm() > 1.0 {
                    p.attenuation /= p.attenuation.norm();
                }
                p.static_delay_s += extra;
                paths.push(p);
            }
            antenna_paths.push(paths);
        }
        Scenario::new(self.carrier_freq_hz, antenna_paths, self.noise_std)
    }
}

/// Write a CSI tensor as CSV with one row per (antenna, packet).
pub fn write_csi_csv<W: Write>(csi: &CsiTensor, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "q", "m", "t", "re_clean", "im_clean", "re_noisy", "im_noisy", "re_dyn", "im_dyn", "re_stat", "im_stat",
    ])?;
    for q in 0..csi.num_antennas() {
        for m in 0..csi.num_packets() {
            let (c, n, d, s) =
                (csi.clean.get(q, m), csi.noisy.get(q, m), csi.dynamic_part.get(q, m), csi.static_part.get(q, m));
            w.write_record(&[
                q.to_string(),
                m.to_string(),
                csi.schedule.timestamps[m].to_string(),
                c.re.to_string(),
                c.im.to_string(),
                n.re.to_string(),
                n.im.to_string(),
                d.re.to_string(),
                d.im.to_string(),
                s.re.to_string(),
                s.im.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_csi_csv(csi: &CsiTensor, path: &Path) -> Result<()> {
    write_csi_csv(csi, std::fs::File::create(path)?)
}

/// One explicitly listed path in a scenario file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathParams {
    /// Antenna index; `None` applies the path to every antenna.
    #[serde(default)]
    pub antenna: Option<usize>,
    pub kind: PathKind,
    pub magnitude: f64,
    #[serde(default)]
    pub phase_rad: f64,
    pub delay_s: f64,
    #[serde(default)]
    pub initial_range_m: f64,
    #[serde(default)]
    pub radial_speed_mps: f64,
}

/// Structured-text scenario description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub carrier_freq_hz: f64,
    pub antennas: usize,
    #[serde(default)]
    pub paths: Vec<PathParams>,
    pub noise_std: f64,
    #[serde(default)]
    pub gesture: Option<GestureKind>,
    pub duration_s: f64,
    #[serde(default = "default_rate")]
    pub packet_rate_hz: f64,
    #[serde(default = "default_gesture_distance")]
    pub gesture_distance_m: f64,
    #[serde(default = "default_gesture_magnitude")]
    pub gesture_magnitude: f64,
}

fn default_rate() -> f64 {
    1000.0
}
fn default_gesture_distance() -> f64 {
    0.5
}
fn default_gesture_magnitude() -> f64 {
    0.1
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn num_packets(&self) -> usize {
        (self.duration_s * self.packet_rate_hz).round() as usize
    }

    pub fn build(&self, seed: u64) -> Result<Scenario> {
        if self.antennas == 0 {
            return invalid("antennas must be >= 1");
        }
        let mut antenna_paths = vec![Vec::new(); self.antennas];
        for params in &self.paths {
            let att = Complex64::from_polar(params.magnitude, params.phase_rad);
            let path = match params.kind {
                PathKind::Static => PathComponent::fixed(att, params.delay_s),
                PathKind::Dynamic => PathComponent::moving(
                    att,
                    params.delay_s,
                    DelayProfile::ConstantVelocity {
                        initial_range_m: params.initial_range_m,
                        radial_speed_mps: params.radial_speed_mps,
                    },
                ),
            };
            match params.antenna {
                Some(q) if q >= self.antennas => return invalid(format!("path antenna {q} out of range")),
                Some(q) => antenna_paths[q].push(path),
                None => antenna_paths.iter_mut().for_each(|v| v.push(path.clone())),
            }
        }
        if let Some(g) = self.gesture {
            let gp = synthesize_gesture_paths(g, self.duration_s, self.gesture_distance_m, seed)?;
            for paths in antenna_paths.iter_mut() {
                for p in &gp {
                    let mut p = p.clone();
                    p.attenuation *= self.gesture_magnitude;
                    paths.push(p);
                }
            }
        }
        Scenario::new(self.carrier_freq_hz, antenna_paths, self.noise_std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(m: usize) -> TemporalSchedule {
        TemporalSchedule::regular(m, 1e-3).unwrap()
    }

    #[test]
    fn single_static_path_is_constant() {
        let s = Scenario::new(2.4e9, vec![vec![PathComponent::fixed(Complex64::new(1.0, 0.0), 0.0)]], 0.0).unwrap();
        let csi = generate_csi(&s, 100, &sched(100), 0).unwrap();
        for m in 0..100 {
            assert_eq!(csi.clean.get(0, m), Complex64::new(1.0, 0.0));
            assert_eq!(csi.noisy.get(0, m), Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn constant_velocity_gives_doppler_ramp() {
        // Oracle: phase advances by 2 pi fc * 2 v dt / c per packet.
        let fc = 2.4e9;
        let v = 1.0;
        let p = PathComponent::moving(
            Complex64::new(0.5, 0.0),
            0.0,
            DelayProfile::ConstantVelocity { initial_range_m: 0.5, radial_speed_mps: v },
        );
        let s = Scenario::new(fc, vec![vec![p]], 0.0).unwrap();
        let csi = generate_csi(&s, 200, &sched(200), 0).unwrap();
        let expected = -2.0 * PI * fc * 2.0 * v * 1e-3 / SPEED_OF_LIGHT;
        for m in 1..200 {
            let r = csi.dynamic_part.get(0, m) / csi.dynamic_part.get(0, m - 1);
            let diff = (r.arg() - expected + PI).rem_euclid(2.0 * PI) - PI;
            assert!(diff.abs() < 1e-6, "m={m} diff={diff}");
        }
    }

    #[test]
    fn noise_zero_and_seeded() {
        let g = ComplexGrid::zeros(2, 50);
        assert_eq!(add_noise(&g, 0.0, 1).unwrap(), g);
        assert_eq!(add_noise(&g, 0.3, 9).unwrap(), add_noise(&g, 0.3, 9).unwrap());
        assert_ne!(add_noise(&g, 0.3, 9).unwrap(), add_noise(&g, 0.3, 10).unwrap());
        assert!(add_noise(&g, -1.0, 0).is_err());
    }

    #[test]
    fn noise_variance_matches_sigma() {
        let g = ComplexGrid::zeros(1, 200_000);
        let n = add_noise(&g, 0.5, 4).unwrap();
        let p: f64 = n.as_slice().iter().map(|v| v.norm_sqr()).sum::<f64>() / 200_000.0;
        assert!((p - 0.25).abs() < 0.01, "{p}");
    }

    #[test]
    fn rejects_bad_paths() {
        let bad = PathComponent::fixed(Complex64::new(1.5, 0.0), 0.0);
        assert!(Scenario::new(2.4e9, vec![vec![bad]], 0.0).is_err());
        let neg = PathComponent::fixed(Complex64::new(0.5, 0.0), -1e-9);
        assert!(Scenario::new(2.4e9, vec![vec![neg]], 0.0).is_err());
        let s = Scenario::new(2.4e9, vec![vec![]], 0.0).unwrap();
        assert!(generate_csi(&s, 0, &sched(0), 0).is_err());
    }

    fn sign_changes(v: &[f64], eps: f64) -> usize {
        let signs: Vec<f64> = v.iter().filter(|x| x.abs() > eps).map(|x| x.signum()).collect();
        signs.windows(2).filter(|w| w[0] != w[1]).count()
    }

    fn radial_profile(g: GestureKind, dur: f64, seed: u64) -> Vec<f64> {
        let paths = synthesize_gesture_paths(g, dur, 0.5, seed).unwrap();
        let DelayProfile::Trajectory(tr) = &paths[0].dynamic else { panic!() };
        (0..300).map(|i| tr.radial_velocity(dur * i as f64 / 300.0)).collect()
    }

    #[test]
    fn zigzag_changes_direction_twice() {
        let v = radial_profile(GestureKind::DrawZigzag, 1.5, 7);
        let peak = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert_eq!(sign_changes(&v, 0.1 * peak), 2);
    }

    #[test]
    fn circle_seeds_differ_but_share_signature() {
        let a = radial_profile(GestureKind::DrawCircle, 2.0, 3);
        let b = radial_profile(GestureKind::DrawCircle, 2.0, 4);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-3));
        let pa = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let pb = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert_eq!(sign_changes(&a, 0.1 * pa), sign_changes(&b, 0.1 * pb));
        // Same sign pattern: positive, negative, positive.
        let first = a.iter().find(|x| x.abs() > 0.1 * pa).unwrap();
        assert!(*first > 0.0);
    }

    #[test]
    fn gesture_delays_non_negative() {
        for g in GestureKind::ALL {
            for p in synthesize_gesture_paths(g, 1.5, 0.5, 1).unwrap() {
                p.validate().unwrap();
                for i in 0..100 {
                    assert!(p.dynamic.delay_at(i as f64 * 0.015) >= 0.0);
                }
            }
        }
        assert!(synthesize_gesture_paths(GestureKind::Tap, 0.0, 0.5, 1).is_err());
    }

    #[test]
    fn gesture_names_round_trip() {
        for g in GestureKind::ALL {
            assert_eq!(g.name().parse::<GestureKind>().unwrap(), g);
        }
        assert_eq!("zigzag".parse::<GestureKind>().unwrap(), GestureKind::DrawZigzag);
        assert!("wave".parse::<GestureKind>().is_err());
    }

    #[test]
    fn config_parses_and_builds() {
        let text = r#"
carrier_freq_hz = 2.4e9
antennas = 2
noise_std = 0.0
gesture = "draw_zigzag"
duration_s = 0.1
[[paths]]
kind = "static"
magnitude = 0.5
delay_s = 1e-8
[[paths]]
antenna = 1
kind = "dynamic"
magnitude = 0.1
delay_s = 0.0
initial_range_m = 0.5
radial_speed_mps = 1.0
"#;
        let cfg = ScenarioConfig::from_toml(text).unwrap();
        assert_eq!(cfg.num_packets(), 100);
        let s = cfg.build(1).unwrap();
        assert_eq!(s.antenna_paths[0].len(), 2);
        assert_eq!(s.antenna_paths[1].len(), 3);
    }

    #[test]
    fn csv_export_header_and_rows() {
        let s = Scenario::new(2.4e9, vec![vec![PathComponent::fixed(Complex64::new(0.5, 0.0), 0.0)]; 2], 0.1).unwrap();
        let csi = generate_csi(&s, 3, &sched(3), 0).unwrap();
        let mut buf = Vec::new();
        write_csi_csv(&csi, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "q,m,t,re_clean,im_clean,re_noisy,im_noisy,re_dyn,im_dyn,re_stat,im_stat");
        assert_eq!(lines.count(), 6);
    }
}
