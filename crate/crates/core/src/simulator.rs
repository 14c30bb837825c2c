//! Deterministic labeled traces of a cold-aisle sensor network.
//!
//! Values are built additively: baseline (setpoint, diurnal sinusoid, AR(1)
//! noise) plus one signal per injection, so the injection-free trace for the
//! same seed is an exact counterfactual.
//!
//! Randomness comes from a single xoshiro256** stream seeded with
//! `seed_from_u64(seed)`. Normal variates use the Box–Muller transform on
//! two 53-bit uniforms, consuming both outputs. Draw order: every baseline
//! series in layout order, then each injection in list order.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::telemetry::{Height, Label, LabeledTrace, Location, SensorKind, SensorMeta, SensorReading};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("setpoint {0} °C outside [15, 35]")]
    SetpointOutOfRange(f64),
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("unknown target `{0}`")]
    UnknownTarget(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

/// Epoch seconds of the first simulated sample.
pub const START_TIME: i64 = 1_596_628_800;
pub const DAY_SECONDS: f64 = 86_400.0;
/// Every n-th rack position carries an ambient sensor and intake sensors.
pub const INSTRUMENT_EVERY: u32 = 4;
pub const AMBIENT_BLEED: f64 = 0.3;
pub const RANDOM_FLIPS: usize = 2;
/// θ + 5 with the default classifier threshold θ = 5.
pub const MALFUNCTION_FLIPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutParams {
    pub aisles: u32,
    pub racks_per_aisle: u32,
    pub setpoint: f64,
    pub period: i64,
}

impl Default for LayoutParams {
    fn default() -> Self {
        LayoutParams { aisles: 3, racks_per_aisle: 50, setpoint: 24.0, period: 60 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoomLayout {
    pub params: LayoutParams,
    pub sensors: Vec<SensorMeta>,
}

pub fn aisle_id(aisle: u32) -> String {
    format!("a{aisle}")
}

pub fn rack_id(aisle: u32, rack: u32) -> String {
    format!("a{aisle}-r{rack:02}")
}

pub fn ambient_id(aisle: u32, rack: u32) -> String {
    format!("amb-{}", rack_id(aisle, rack))
}

pub fn intake_id(aisle: u32, rack: u32, height: Height) -> String {
    format!("in-{}-{}", rack_id(aisle, rack), height.as_str())
}

pub fn build_layout(aisles: u32, racks_per_aisle: u32, setpoint: f64, period: i64) -> Result<RoomLayout, SimError> {
    build_layout_from(LayoutParams { aisles, racks_per_aisle, setpoint, period })
}

pub fn build_layout_from(params: LayoutParams) -> Result<RoomLayout, SimError> {
    if params.aisles == 0 || params.racks_per_aisle == 0 {
        return Err(SimError::InvalidLayout("aisles and racks_per_aisle must be positive".into()));
    }
    if params.period <= 0 {
        return Err(SimError::InvalidLayout(format!("period {} must be positive", params.period)));
    }
    if !(15.0..=35.0).contains(&params.setpoint) {
        return Err(SimError::SetpointOutOfRange(params.setpoint));
    }
    let mut sensors = Vec::new();
    for a in 0..params.aisles {
        for r in (0..params.racks_per_aisle).step_by(INSTRUMENT_EVERY as usize) {
            sensors.push(SensorMeta {
                sensor_id: ambient_id(a, r),
                kind: SensorKind::AmbientTemp,
                location: Some(Location { aisle: a, rack: r, height: Height::Middle }),
            });
            for h in [Height::Top, Height::Middle, Height::Bottom] {
                sensors.push(SensorMeta {
                    sensor_id: intake_id(a, r, h),
                    kind: SensorKind::RackInletTemp,
                    location: Some(Location { aisle: a, rack: r, height: h }),
                });
            }
        }
    }
    Ok(RoomLayout { params, sensors })
}

impl RoomLayout {
    /// Ids of racks that carry intake sensors.
    pub fn instrumented_racks(&self) -> Vec<String> {
        let mut out = Vec::new();
        for a in 0..self.params.aisles {
            for r in (0..self.params.racks_per_aisle).step_by(INSTRUMENT_EVERY as usize) {
                out.push(rack_id(a, r));
            }
        }
        out
    }

    pub fn intake_sensors(&self) -> Vec<String> {
        self.sensors
            .iter()
            .filter(|s| s.kind == SensorKind::RackInletTemp)
            .map(|s| s.sensor_id.clone())
            .collect()
    }

    fn indices_where(&self, pred: impl Fn(&SensorMeta, &Location) -> bool) -> Vec<usize> {
        self.sensors
            .iter()
            .enumerate()
            .filter(|(_, s)| s.location.as_ref().is_some_and(|l| pred(s, l)))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Baseline {
    /// Overrides the layout setpoint; must lie in [22, 26] °C when given.
    #[serde(default)]
    pub setpoint: Option<f64>,
    pub sigma: f64,
    pub diurnal_amplitude: f64,
    pub ar_coefficient: f64,
}

impl Default for Baseline {
    fn default() -> Self {
        Baseline { setpoint: None, sigma: 0.3, diurnal_amplitude: 0.5, ar_coefficient: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionKind {
    Random,
    Malfunction,
    Bias,
    Drift,
    HotspotAttack,
    CoolingDegradation,
}

impl InjectionKind {
    pub const SENSOR_FAULTS: [InjectionKind; 4] =
        [InjectionKind::Bias, InjectionKind::Drift, InjectionKind::Random, InjectionKind::Malfunction];

    pub fn label(self) -> Label {
        match self {
            InjectionKind::Random => Label::Random,
            InjectionKind::Malfunction => Label::Malfunction,
            InjectionKind::Bias => Label::Bias,
            InjectionKind::Drift => Label::Drift,
            InjectionKind::HotspotAttack => Label::HotspotAttack,
            InjectionKind::CoolingDegradation => Label::CoolingDegradation,
        }
    }

    pub fn default_magnitude(self) -> f64 {
        match self {
            InjectionKind::Random | InjectionKind::Malfunction | InjectionKind::Bias => 5.0,
            InjectionKind::Drift | InjectionKind::HotspotAttack => 8.0,
            InjectionKind::CoolingDegradation => 3.0,
        }
    }
}

/// Targets are sensor ids for sensor faults, rack ids (`a0-r04`) for
/// hotspots and aisle ids (`a0`) for cooling degradation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    pub kind: InjectionKind,
    pub targets: Vec<String>,
    pub start: usize,
    pub duration: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub duration: usize,
    pub seed: u64,
    #[serde(default)]
    pub baseline: Baseline,
    #[serde(default)]
    pub injections: Vec<Injection>,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if self.duration == 0 {
            return bad("duration must be positive".into());
        }
        let b = &self.baseline;
        if let Some(sp) = b.setpoint {
            if !(22.0..=26.0).contains(&sp) {
                return bad(format!("baseline setpoint {sp} outside [22, 26]"));
            }
        }
        if !(b.sigma.is_finite() && b.sigma >= 0.0) {
            return bad(format!("noise sigma {} must be finite and non-negative", b.sigma));
        }
        if !(b.diurnal_amplitude.is_finite() && b.diurnal_amplitude >= 0.0) {
            return bad(format!("diurnal amplitude {} must be finite and non-negative", b.diurnal_amplitude));
        }
        if !(b.ar_coefficient > -1.0 && b.ar_coefficient < 1.0) {
            return bad(format!("AR coefficient {} outside (-1, 1)", b.ar_coefficient));
        }
        for (i, inj) in self.injections.iter().enumerate() {
            if !(inj.magnitude.is_finite() && inj.magnitude > 0.0) {
                return bad(format!("injection {i}: magnitude must be positive"));
            }
            if inj.duration == 0 || inj.start + inj.duration > self.duration {
                return bad(format!(
                    "injection {i}: window [{}, {}) outside trace of {} samples",
                    inj.start,
                    inj.start + inj.duration,
                    self.duration
                ));
            }
            let flips = match inj.kind {
                InjectionKind::Random => RANDOM_FLIPS,
                InjectionKind::Malfunction => MALFUNCTION_FLIPS,
                _ => 0,
            };
            if flips > 0 && inj.duration < 2 * flips - 1 {
                return bad(format!("injection {i}: {} samples cannot hold {flips} isolated flips", inj.duration));
            }
            if inj.targets.is_empty() {
                return bad(format!("injection {i}: no targets"));
            }
        }
        Ok(())
    }
}

struct Stream(Xoshiro256StarStar);

impl Stream {
    fn new(seed: u64) -> Self {
        Stream(Xoshiro256StarStar::seed_from_u64(seed))
    }

    /// Uniform on [0, 1) with 53 bits.
    fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal pair.
    fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        (r * (2.0 * PI * u2).cos(), r * (2.0 * PI * u2).sin())
    }

    fn normals(&mut self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n + 1);
        while out.len() < n {
            let (a, b) = self.normal_pair();
            out.push(a);
            out.push(b);
        }
        out.truncate(n);
        out
    }

    /// Uniform integer in [0, n) by rejection.
    fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = self.0.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// `count` distinct sorted offsets in [0, len), no two adjacent.
    fn isolated_positions(&mut self, len: usize, count: usize) -> Vec<usize> {
        let slots = len - (count - 1);
        let mut chosen = BTreeSet::new();
        // Floyd's sampling
        for j in (slots - count)..slots {
            let t = self.below(j as u64 + 1) as usize;
            if !chosen.insert(t) {
                chosen.insert(j);
            }
        }
        chosen.into_iter().enumerate().map(|(k, p)| p + k).collect()
    }
}

/// One seeded choice helper for scenario presets, independent of the
/// simulation stream.
pub fn choose_distinct(seed: u64, n: usize, count: usize) -> Vec<usize> {
    let mut s = Stream::new(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count.min(n) {
        let j = i + s.below((n - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(count.min(n));
    idx.sort_unstable();
    idx
}

/// Simulates the scenario. Readings come out sorted by (sensor, timestamp)
/// and every cell carries a label (normal unless an injection touched it;
/// with overlapping injections the later one's label wins).
pub fn simulate(layout: &RoomLayout, scenario: &ScenarioSpec) -> Result<LabeledTrace, SimError> {
    scenario.validate()?;
    let n = scenario.duration;
    let b = &scenario.baseline;
    let setpoint = b.setpoint.unwrap_or(layout.params.setpoint);
    let period = layout.params.period;
    let mut rng = Stream::new(scenario.seed);

    let diurnal: Vec<f64> = (0..n)
        .map(|i| b.diurnal_amplitude * (2.0 * PI * (i as i64 * period) as f64 / DAY_SECONDS).sin())
        .collect();
    let innovation = b.sigma * (1.0 - b.ar_coefficient * b.ar_coefficient).sqrt();
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(layout.sensors.len());
    for _ in &layout.sensors {
        let z = rng.normals(n);
        let mut noise = z[0] * b.sigma;
        let mut series = Vec::with_capacity(n);
        for i in 0..n {
            if i > 0 {
                noise = b.ar_coefficient * noise + innovation * z[i];
            }
            series.push(setpoint + diurnal[i] + noise);
        }
        values.push(series);
    }

    let mut labels: Vec<Vec<Label>> = vec![vec![Label::Normal; n]; layout.sensors.len()];
    for inj in &scenario.injections {
        apply_injection(layout, inj, &mut rng, &mut values, &mut labels)?;
    }

    let mut trace = LabeledTrace::default();
    for (s, meta) in layout.sensors.iter().enumerate() {
        for i in 0..n {
            let t = START_TIME + i as i64 * period;
            trace.readings.push(SensorReading::new(meta.sensor_id.clone(), t, values[s][i]));
            trace.labels.insert((meta.sensor_id.clone(), t), labels[s][i]);
        }
    }
    trace.normalize();
    Ok(trace)
}

fn apply_injection(
    layout: &RoomLayout,
    inj: &Injection,
    rng: &mut Stream,
    values: &mut [Vec<f64>],
    labels: &mut [Vec<Label>],
) -> Result<(), SimError> {
    let label = inj.kind.label();
    let (start, d, mag) = (inj.start, inj.duration, inj.magnitude);
    let mut add = |s: usize, offset: usize, delta: f64| {
        values[s][start + offset] += delta;
        labels[s][start + offset] = label;
    };
    let sensor_index = |id: &str| {
        layout
            .sensors
            .iter()
            .position(|m| m.sensor_id == id)
            .ok_or_else(|| SimError::UnknownTarget(id.to_string()))
    };
    match inj.kind {
        InjectionKind::Bias | InjectionKind::Drift => {
            for id in &inj.targets {
                let s = sensor_index(id)?;
                for o in 0..d {
                    let delta = if inj.kind == InjectionKind::Bias { mag } else { mag * o as f64 / d as f64 };
                    add(s, o, delta);
                }
            }
        }
        InjectionKind::Random | InjectionKind::Malfunction => {
            let count = if inj.kind == InjectionKind::Random { RANDOM_FLIPS } else { MALFUNCTION_FLIPS };
            for id in &inj.targets {
                let s = sensor_index(id)?;
                let flips = rng.isolated_positions(d, count);
                let signs: Vec<f64> = flips.iter().map(|_| if rng.0.next_u64() >> 63 == 0 { 1.0 } else { -1.0 }).collect();
                for o in 0..d {
                    add(s, o, 0.0);
                }
                for (o, sign) in flips.into_iter().zip(signs) {
                    add(s, o, sign * mag);
                }
            }
        }
        InjectionKind::HotspotAttack => {
            let ramp = (d / 3).max(1) as f64;
            for id in &inj.targets {
                let loc = layout
                    .sensors
                    .iter()
                    .filter(|m| m.kind == SensorKind::RackInletTemp)
                    .filter_map(|m| m.location)
                    .find(|l| rack_id(l.aisle, l.rack) == *id)
                    .ok_or_else(|| SimError::UnknownTarget(id.clone()))?;
                let intakes = layout.indices_where(|m, l| {
                    m.kind == SensorKind::RackInletTemp && l.aisle == loc.aisle && l.rack == loc.rack
                });
                let ambients =
                    layout.indices_where(|m, l| m.kind == SensorKind::AmbientTemp && l.aisle == loc.aisle);
                for o in 0..d {
                    let shape = ((o + 1) as f64 / ramp).min((d - o) as f64 / ramp).min(1.0);
                    for &s in &intakes {
                        add(s, o, mag * shape);
                    }
                    for &s in &ambients {
                        add(s, o, AMBIENT_BLEED * mag * shape);
                    }
                }
            }
        }
        InjectionKind::CoolingDegradation => {
            for id in &inj.targets {
                let aisle = (0..layout.params.aisles)
                    .find(|a| aisle_id(*a) == *id)
                    .ok_or_else(|| SimError::UnknownTarget(id.clone()))?;
                let members = layout.indices_where(|_, l| l.aisle == aisle);
                for o in 0..d {
                    for &s in &members {
                        add(s, o, mag * (o + 1) as f64 / d as f64);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Share of racks targeted by the default hotspot scenario.
pub const HOTSPOT_RACK_FRACTION: f64 = 0.02;

/// Default evaluation scenario: 3 × 50 racks, 600 samples, ΔT = 8 °C over 30
/// samples on 2% of racks (3 instrumented racks picked by seed), starting at
/// a seed-dependent instant in [270, 330).
pub fn default_hotspot(seed: u64) -> (RoomLayout, ScenarioSpec) {
    let layout = build_layout_from(LayoutParams::default()).expect("default layout is valid");
    let total_racks = (layout.params.aisles * layout.params.racks_per_aisle) as f64;
    let count = (HOTSPOT_RACK_FRACTION * total_racks).ceil() as usize;
    let racks = layout.instrumented_racks();
    let picked = choose_distinct(seed ^ 0x9e37_79b9_7f4a_7c15, racks.len(), count);
    let start = 270 + choose_distinct(seed.rotate_left(17), 60, 1)[0];
    let scenario = ScenarioSpec {
        duration: 600,
        seed,
        baseline: Baseline::default(),
        injections: vec![Injection {
            kind: InjectionKind::HotspotAttack,
            targets: picked.into_iter().map(|i| racks[i].clone()).collect(),
            start,
            duration: 30,
            magnitude: InjectionKind::HotspotAttack.default_magnitude(),
        }],
    };
    (layout, scenario)
}

/// The default hotspot layout and duration with no injections.
pub fn quiet(seed: u64) -> (RoomLayout, ScenarioSpec) {
    let (layout, mut scenario) = default_hotspot(seed);
    scenario.injections.clear();
    (layout, scenario)
}

pub const FAULT_TRIAL_START: usize = 150;
pub const FAULT_TRIAL_LEN: usize = 60;

/// Single sensor-fault trial on a 1 × 8 layout: one intake sensor, picked by
/// seed, carries `kind` at its default magnitude over
/// [`FAULT_TRIAL_START`, `FAULT_TRIAL_START` + `FAULT_TRIAL_LEN`).
/// Returns the faulty sensor id as well.
pub fn fault_trial(kind: InjectionKind, seed: u64) -> (RoomLayout, ScenarioSpec, String) {
    let layout = build_layout(1, 8, 24.0, 60).expect("trial layout is valid");
    let intakes = layout.intake_sensors();
    let target = intakes[choose_distinct(seed ^ 0x5851_f42d_4c95_7f2d, intakes.len(), 1)[0]].clone();
    let scenario = ScenarioSpec {
        duration: FAULT_TRIAL_START + FAULT_TRIAL_LEN + 30,
        seed,
        baseline: Baseline::default(),
        injections: vec![Injection {
            kind,
            targets: vec![target.clone()],
            start: FAULT_TRIAL_START,
            duration: FAULT_TRIAL_LEN,
            magnitude: kind.default_magnitude(),
        }],
    };
    (layout, scenario, target)
}
