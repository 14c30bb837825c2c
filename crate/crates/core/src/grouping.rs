//! Sensor groups, neighbourhood voting and per-group aggregation.
//!
//! A reading is compared against the median of its group peers at the same
//! aligned instant. If the absolute deviation reaches the group threshold
//! the reading is faulty and its deviation becomes the fault residual.
//! Faulty readings never enter the aggregated group series.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::telemetry::SensorMeta;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GroupingError {
    #[error("topology is empty")]
    EmptyTopology,
    #[error("sensor `{0}` has no location")]
    UnlocatedSensor(String),
    #[error("median of an empty set")]
    EmptyInput,
    #[error("no neighbours to vote against")]
    NoNeighbours,
    #[error("threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("group `{group}`: {reason}")]
    InvalidGroup { group: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBasis {
    Phenomenon,
    Spatial,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub group_id: String,
    pub members: BTreeSet<String>,
    pub basis: GroupBasis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingStrategy {
    /// One group per sensor kind.
    ByKind,
    /// One group per (aisle, height) among located sensors.
    ByAisleHeight,
    /// One group per (aisle, rack) position: a rack's intake sensors together
    /// with the ambient sensor placed at the same position.
    #[default]
    ByRack,
}

pub fn build_groups(topology: &[SensorMeta], strategy: GroupingStrategy) -> Result<Vec<GroupSpec>, GroupingError> {
    if topology.is_empty() {
        return Err(GroupingError::EmptyTopology);
    }
    let mut keyed: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let basis = match strategy {
        GroupingStrategy::ByKind => GroupBasis::Phenomenon,
        _ => GroupBasis::Spatial,
    };
    for meta in topology {
        let key = match strategy {
            GroupingStrategy::ByKind => meta.kind.to_string(),
            GroupingStrategy::ByAisleHeight | GroupingStrategy::ByRack => {
                let loc = meta
                    .location
                    .ok_or_else(|| GroupingError::UnlocatedSensor(meta.sensor_id.clone()))?;
                if strategy == GroupingStrategy::ByAisleHeight {
                    format!("a{}-{}", loc.aisle, loc.height.as_str())
                } else {
                    format!("a{}-r{:02}", loc.aisle, loc.rack)
                }
            }
        };
        keyed.entry(key).or_default().insert(meta.sensor_id.clone());
    }
    Ok(keyed
        .into_iter()
        .map(|(group_id, members)| GroupSpec { group_id, members, basis })
        .collect())
}

/// Checks membership against the topology and the overlap rule: two groups
/// may share a sensor only when their bases differ.
pub fn validate_groups(groups: &[GroupSpec], topology: &[SensorMeta]) -> Result<(), GroupingError> {
    let known: BTreeSet<&str> = topology.iter().map(|m| m.sensor_id.as_str()).collect();
    let mut seen_ids = BTreeSet::new();
    let mut owner: BTreeMap<(GroupBasis, &str), &str> = BTreeMap::new();
    for g in groups {
        let invalid = |reason: String| GroupingError::InvalidGroup { group: g.group_id.clone(), reason };
        if !seen_ids.insert(g.group_id.as_str()) {
            return Err(invalid("duplicate group id".into()));
        }
        if g.members.is_empty() {
            return Err(invalid("no members".into()));
        }
        for m in &g.members {
            if !known.contains(m.as_str()) {
                return Err(invalid(format!("unknown sensor `{m}`")));
            }
            if let Some(other) = owner.insert((g.basis, m.as_str()), g.group_id.as_str()) {
                return Err(invalid(format!("sensor `{m}` also in group `{other}` with the same basis")));
            }
        }
    }
    Ok(())
}

pub fn median(values: &[f64]) -> Result<f64, GroupingError> {
    if values.is_empty() {
        return Err(GroupingError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Good,
    Faulty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vote {
    pub verdict: Verdict,
    /// |r_i - median(R)|
    pub deviation: f64,
    pub neighbour_count: usize,
}

/// Vote outcome attached to a reading. `verdict` is `None` when the sensor
/// had no neighbours at that instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    #[serde(rename = "t")]
    pub timestamp: i64,
    #[serde(rename = "sensor")]
    pub sensor_id: String,
    pub group: String,
    pub verdict: Option<Verdict>,
    #[serde(rename = "D")]
    pub deviation: f64,
    #[serde(rename = "neighbours")]
    pub neighbour_count: usize,
}

pub fn neighbourhood_vote(reading: f64, neighbours: &[f64], tau: f64) -> Result<Vote, GroupingError> {
    if !(tau > 0.0) {
        return Err(GroupingError::InvalidThreshold(tau));
    }
    if neighbours.is_empty() {
        return Err(GroupingError::NoNeighbours);
    }
    let deviation = (reading - median(neighbours)?).abs();
    let verdict = if deviation >= tau { Verdict::Faulty } else { Verdict::Good };
    Ok(Vote { verdict, deviation, neighbour_count: neighbours.len() })
}

/// Votes every present member of a group at one instant. Missing members are
/// skipped as both voters and neighbours.
pub fn vote_instant(values: &[Option<f64>], tau: f64) -> Vec<Option<Result<Vote, GroupingError>>> {
    let present: Vec<(usize, f64)> = values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i, v)))
        .collect();
    let mut out: Vec<Option<Result<Vote, GroupingError>>> = vec![None; values.len()];
    let mut neighbours = Vec::with_capacity(present.len());
    for &(i, v) in &present {
        neighbours.clear();
        neighbours.extend(present.iter().filter(|(j, _)| *j != i).map(|(_, w)| *w));
        out[i] = Some(neighbourhood_vote(v, &neighbours, tau));
    }
    out
}

/// Median of the readings not voted faulty; `None` when nothing is left.
/// Readings without a verdict count as good.
pub fn group_aggregate(readings: &[(f64, Option<Verdict>)]) -> Option<f64> {
    let good: Vec<f64> = readings
        .iter()
        .filter(|(_, v)| *v != Some(Verdict::Faulty))
        .map(|(x, _)| *x)
        .collect();
    median(&good).ok()
}

/// Threshold derived from a warm-up sample of signed peer deviations:
/// `multiplier * std`, never below `floor`.
pub fn auto_tau(deviations: &[f64], multiplier: f64, floor: f64) -> f64 {
    if deviations.is_empty() {
        return floor;
    }
    let n = deviations.len() as f64;
    let mean = deviations.iter().sum::<f64>() / n;
    let var = deviations.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    (multiplier * var.sqrt()).max(floor)
}

/// Signed deviation of each present member from the median of the others.
pub fn peer_deviations(values: &[Option<f64>]) -> Vec<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.len() < 2 {
        return Vec::new();
    }
    (0..present.len())
        .map(|i| {
            let others: Vec<f64> = present
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| *v)
                .collect();
            present[i] - median(&others).unwrap_or(present[i])
        })
        .collect()
}
