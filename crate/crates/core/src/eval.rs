//! Scoring predictions against simulator ground truth.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::faultclass::{FaultClass, FaultRecord};
use crate::fusion::AnomalyRegion;
use crate::telemetry::Label;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("predictions do not match the labeled trace: {0}")]
    TraceMismatch(String),
}

/// Maximal run of grid instants where some sensor carries an attack label.
/// Both ends inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub t_start: i64,
    pub t_end: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl ClassMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        ClassMetrics { tp, fp, fn_, precision, recall, f1: f1(precision, recall) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub predicted: usize,
    pub matched_predicted: usize,
    pub events: usize,
    pub detected_events: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// Per event, samples from event start to the first matching region;
    /// `None` when undetected.
    pub latencies: Vec<Option<i64>>,
    pub max_latency: Option<i64>,
}

impl RegionMetrics {
    fn from_counts(predicted: usize, matched_predicted: usize, events: usize, detected_events: usize, latencies: Vec<Option<i64>>) -> Self {
        let precision = ratio(matched_predicted, predicted);
        let recall = ratio(detected_events, events);
        let max_latency = latencies.iter().flatten().copied().max();
        RegionMetrics {
            predicted,
            matched_predicted,
            events,
            detected_events,
            precision,
            recall,
            f1: f1(precision, recall),
            latencies,
            max_latency,
        }
    }

    /// Micro-average: counts summed over runs.
    pub fn pool(runs: &[RegionMetrics]) -> RegionMetrics {
        let sum = |f: fn(&RegionMetrics) -> usize| runs.iter().map(f).sum::<usize>();
        RegionMetrics::from_counts(
            sum(|r| r.predicted),
            sum(|r| r.matched_predicted),
            sum(|r| r.events),
            sum(|r| r.detected_events),
            runs.iter().flat_map(|r| r.latencies.iter().copied()).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fault_windows: usize,
    pub fault_classes: BTreeMap<String, ClassMetrics>,
    pub regions: RegionMetrics,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn f1(p: Option<f64>, r: Option<f64>) -> Option<f64> {
    match (p, r) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    }
}

/// Attack events on the grid implied by `period`: instants closer than one
/// period apart belong to the same event.
pub fn attack_events(labels: &BTreeMap<(String, i64), Label>, period: i64) -> Vec<Event> {
    let times: BTreeSet<i64> = labels.iter().filter(|(_, l)| l.is_attack()).map(|((_, t), _)| *t).collect();
    let mut events: Vec<Event> = Vec::new();
    for t in times {
        match events.last_mut() {
            Some(e) if t - e.t_end <= period => e.t_end = t,
            _ => events.push(Event { t_start: t, t_end: t }),
        }
    }
    events
}

fn overlap_samples(a: (i64, i64), b: (i64, i64), period: i64) -> i64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    if hi < lo {
        0
    } else {
        (hi - lo) / period + 1
    }
}

fn matches(region: &AnomalyRegion, event: &Event, period: i64, iou: Option<f64>) -> bool {
    let r = (region.t_start, region.t_end);
    let e = (event.t_start, event.t_end);
    let inter = overlap_samples(r, e, period);
    if inter == 0 {
        return false;
    }
    match iou {
        None => true,
        Some(threshold) => {
            let len = |s: (i64, i64)| (s.1 - s.0) / period + 1;
            let union = len(r) + len(e) - inter;
            inter as f64 / union as f64 >= threshold
        }
    }
}

pub fn region_metrics(regions: &[AnomalyRegion], events: &[Event], period: i64, iou: Option<f64>) -> RegionMetrics {
    let matched_predicted = regions.iter().filter(|r| events.iter().any(|e| matches(r, e, period, iou))).count();
    let latencies: Vec<Option<i64>> = events
        .iter()
        .map(|e| {
            regions
                .iter()
                .filter(|r| matches(r, e, period, iou))
                .map(|r| r.t_start)
                .min()
                .map(|start| ((start - e.t_start) / period).max(0))
        })
        .collect();
    let detected = latencies.iter().filter(|l| l.is_some()).count();
    RegionMetrics::from_counts(regions.len(), matched_predicted, events.len(), detected, latencies)
}

fn fault_class_of(label: Label) -> Option<FaultClass> {
    match label {
        Label::Random => Some(FaultClass::Random),
        Label::Malfunction => Some(FaultClass::Malfunction),
        Label::Bias => Some(FaultClass::Bias),
        Label::Drift => Some(FaultClass::Drift),
        _ => None,
    }
}

/// Most frequent sensor-fault label over the `window` instants ending at
/// `t_end`; ties go to the label declared first. `None` when the window has
/// no fault label.
pub fn window_truth(
    labels: &BTreeMap<(String, i64), Label>,
    sensor: &str,
    t_end: i64,
    window: usize,
    period: i64,
) -> FaultClass {
    let t_start = t_end - (window as i64 - 1) * period;
    let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
    for ((_, _), l) in labels.range((sensor.to_string(), t_start)..=(sensor.to_string(), t_end)) {
        if l.is_sensor_fault() {
            *counts.entry(*l).or_default() += 1;
        }
    }
    let mut best: Option<(Label, usize)> = None;
    for (l, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((l, c));
        }
    }
    best.and_then(|(l, _)| fault_class_of(l)).unwrap_or(FaultClass::None)
}

pub const SCORED_CLASSES: [FaultClass; 4] = [FaultClass::Random, FaultClass::Malfunction, FaultClass::Bias, FaultClass::Drift];

pub fn fault_metrics(
    faults: &[FaultRecord],
    labels: &BTreeMap<(String, i64), Label>,
    window: usize,
    period: i64,
) -> BTreeMap<String, ClassMetrics> {
    let pairs: Vec<(FaultClass, FaultClass)> =
        faults.iter().map(|f| (f.class, window_truth(labels, &f.sensor, f.t, window, period))).collect();
    SCORED_CLASSES
        .iter()
        .map(|&c| {
            let tp = pairs.iter().filter(|(p, t)| *p == c && *t == c).count();
            let fp = pairs.iter().filter(|(p, t)| *p == c && *t != c).count();
            let fn_ = pairs.iter().filter(|(p, t)| *p != c && *t == c).count();
            (c.as_str().to_string(), ClassMetrics::from_counts(tp, fp, fn_))
        })
        .collect()
}

pub fn evaluate(
    regions: &[AnomalyRegion],
    faults: &[FaultRecord],
    labels: &BTreeMap<(String, i64), Label>,
    period: i64,
    window: usize,
    iou: Option<f64>,
) -> Result<EvalReport, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::TraceMismatch("no labels".into()));
    }
    let sensors: BTreeSet<&str> = labels.keys().map(|(s, _)| s.as_str()).collect();
    let t_min = labels.keys().map(|(_, t)| *t).min().unwrap_or_default();
    let t_max = labels.keys().map(|(_, t)| *t).max().unwrap_or_default();
    if let Some(f) = faults.iter().find(|f| !sensors.contains(f.sensor.as_str())) {
        return Err(EvalError::TraceMismatch(format!("fault report for unknown sensor `{}`", f.sensor)));
    }
    if let Some(f) = faults.iter().find(|f| f.t < t_min || f.t > t_max) {
        return Err(EvalError::TraceMismatch(format!("fault report at {} outside [{t_min}, {t_max}]", f.t)));
    }
    if let Some(r) = regions.iter().find(|r| r.t_start < t_min || r.t_end > t_max || r.t_end < r.t_start) {
        return Err(EvalError::TraceMismatch(format!("region [{}, {}] outside [{t_min}, {t_max}]", r.t_start, r.t_end)));
    }
    let events = attack_events(labels, period);
    Ok(EvalReport {
        fault_windows: faults.len(),
        fault_classes: fault_metrics(faults, labels, window, period),
        regions: region_metrics(regions, &events, period, iou),
    })
}

impl EvalReport {
    /// Fixed-width summary for terminals.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        let mut out = String::new();
        out.push_str(&format!("{:<12} {:>6} {:>6} {:>6} {:>9} {:>9} {:>9}\n", "class", "tp", "fp", "fn", "precision", "recall", "f1"));
        for (name, m) in &self.fault_classes {
            out.push_str(&format!(
                "{:<12} {:>6} {:>6} {:>6} {:>9} {:>9} {:>9}\n",
                name,
                m.tp,
                m.fp,
                m.fn_,
                fmt(m.precision),
                fmt(m.recall),
                fmt(m.f1)
            ));
        }
        let r = &self.regions;
        out.push_str(&format!(
            "regions: predicted {} (matched {}), events {} (detected {}), precision {}, recall {}, f1 {}, max latency {}\n",
            r.predicted,
            r.matched_predicted,
            r.events,
            r.detected_events,
            fmt(r.precision),
            fmt(r.recall),
            fmt(r.f1),
            r.max_latency.map_or_else(|| "-".to_string(), |l| l.to_string())
        ));
        out
    }
}
