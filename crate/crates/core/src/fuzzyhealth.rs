//! Mamdani fuzzy inference from group anomaly scores to a crisp health value.
//!
//! AND is min, implication clips the consequent at the firing strength,
//! aggregation is pointwise max, and the crisp value is the centroid of the
//! aggregated set by trapezoidal quadrature.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FuzzyError {
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("variable `{var}` has no set `{label}`")]
    UnknownLabel { var: String, label: String },
    #[error("no rule fired")]
    NoRuleFired,
    #[error("invalid fuzzy set `{label}`: {reason}")]
    InvalidSet { label: String, reason: String },
    #[error("invalid variable `{name}`: {reason}")]
    InvalidVariable { name: String, reason: String },
    #[error("rule base is empty")]
    EmptyRuleBase,
    #[error("rule {index}: weight {weight} outside (0, 1]")]
    InvalidWeight { index: usize, weight: f64 },
}

pub const INPUT_LABELS: [&str; 5] = ["very low", "low", "medium", "high", "very high"];
pub const HEALTH_LABELS: [&str; 5] = ["very bad", "bad", "average", "good", "very good"];
pub const HEALTH: &str = "Health";
pub const QUADRATURE_POINTS: usize = 1001;

/// Piecewise-linear membership on [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuzzySet {
    pub label: String,
    pub points: Vec<[f64; 2]>,
}

impl FuzzySet {
    pub fn new(label: impl Into<String>, points: Vec<[f64; 2]>) -> Result<Self, FuzzyError> {
        let set = FuzzySet { label: label.into(), points };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), FuzzyError> {
        let bad = |reason: &str| FuzzyError::InvalidSet { label: self.label.clone(), reason: reason.into() };
        if self.points.is_empty() {
            return Err(bad("no breakpoints"));
        }
        if self.points.windows(2).any(|w| !(w[0][0] < w[1][0])) {
            return Err(bad("breakpoint abscissae must increase strictly"));
        }
        if self.points.iter().any(|[x, mu]| !x.is_finite() || !(0.0..=1.0).contains(mu)) {
            return Err(bad("memberships must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Linear interpolation; outside the breakpoints the membership is zero,
    /// except that a first or last breakpoint with nonzero membership
    /// extends as a shoulder.
    pub fn membership(&self, x: f64) -> f64 {
        let pts = &self.points;
        let first = pts[0];
        let last = pts[pts.len() - 1];
        if x <= first[0] {
            return if x == first[0] || first[1] > 0.0 { first[1] } else { 0.0 };
        }
        if x >= last[0] {
            return if x == last[0] || last[1] > 0.0 { last[1] } else { 0.0 };
        }
        let i = pts.partition_point(|p| p[0] <= x);
        let ([x0, y0], [x1, y1]) = (pts[i - 1], pts[i]);
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinguisticVariable {
    pub name: String,
    pub sets: Vec<FuzzySet>,
}

impl LinguisticVariable {
    pub fn new(name: impl Into<String>, sets: Vec<FuzzySet>) -> Result<Self, FuzzyError> {
        let var = LinguisticVariable { name: name.into(), sets };
        var.validate()?;
        Ok(var)
    }

    pub fn validate(&self) -> Result<(), FuzzyError> {
        let bad = |reason: String| FuzzyError::InvalidVariable { name: self.name.clone(), reason };
        if self.sets.len() != 5 {
            return Err(bad(format!("expected 5 sets, found {}", self.sets.len())));
        }
        for s in &self.sets {
            s.validate()?;
        }
        for i in 0..QUADRATURE_POINTS {
            let x = grid_x(i);
            if self.sets.iter().all(|s| s.membership(x) == 0.0) {
                return Err(bad(format!("no set covers x = {x}")));
            }
        }
        Ok(())
    }

    pub fn set(&self, label: &str) -> Option<&FuzzySet> {
        self.sets.iter().find(|s| s.label == label)
    }

    /// Five evenly spaced sets: shoulders at both ends, triangles peaking at
    /// 0.25, 0.5 and 0.75, each foot 0.25 from its peak.
    pub fn five_even(name: impl Into<String>, labels: [&str; 5]) -> Self {
        let sets = labels
            .iter()
            .enumerate()
            .map(|(i, label)| {
                let c = i as f64 * 0.25;
                let points = match i {
                    0 => vec![[0.0, 1.0], [0.25, 0.0]],
                    4 => vec![[0.75, 0.0], [1.0, 1.0]],
                    _ => vec![[c - 0.25, 0.0], [c, 1.0], [c + 0.25, 0.0]],
                };
                FuzzySet { label: label.to_string(), points }
            })
            .collect();
        LinguisticVariable { name: name.into(), sets }
    }

    /// Input variable for the default rule base. Same as [`Self::five_even`]
    /// except that low and high keep full membership out to their end of
    /// the range, so each is monotone in the score.
    pub fn default_input(name: impl Into<String>) -> Self {
        let mut var = Self::five_even(name, INPUT_LABELS);
        var.sets[1].points = vec![[0.0, 1.0], [0.25, 1.0], [0.5, 0.0]];
        var.sets[3].points = vec![[0.5, 0.0], [0.75, 1.0], [1.0, 1.0]];
        var
    }
}

/// Weight of the default rules that conclude good or bad. Small enough that
/// an all-zero score vector still defuzzifies above 0.9.
pub const SHOULDER_RULE_WEIGHT: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyRule {
    pub antecedent: Vec<(String, String)>,
    pub consequent: String,
    pub weight: f64,
}

impl FuzzyRule {
    pub fn describe(&self) -> String {
        let terms: Vec<String> = self.antecedent.iter().map(|(v, l)| format!("{v} IS {l}")).collect();
        format!("IF {} THEN {HEALTH} IS {}", terms.join(" AND "), self.consequent)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleBase {
    pub inputs: BTreeMap<String, LinguisticVariable>,
    pub output: LinguisticVariable,
    pub rules: Vec<FuzzyRule>,
}

impl RuleBase {
    pub fn validate(&self) -> Result<(), FuzzyError> {
        if self.rules.is_empty() {
            return Err(FuzzyError::EmptyRuleBase);
        }
        self.output.validate()?;
        for v in self.inputs.values() {
            v.validate()?;
        }
        for (index, r) in self.rules.iter().enumerate() {
            if !(r.weight > 0.0 && r.weight <= 1.0) {
                return Err(FuzzyError::InvalidWeight { index, weight: r.weight });
            }
            for (var, label) in &r.antecedent {
                let v = self.inputs.get(var).ok_or_else(|| FuzzyError::UnknownVariable(var.clone()))?;
                if v.set(label).is_none() {
                    return Err(FuzzyError::UnknownLabel { var: var.clone(), label: label.clone() });
                }
            }
            if self.output.set(&r.consequent).is_none() {
                return Err(FuzzyError::UnknownLabel { var: HEALTH.into(), label: r.consequent.clone() });
            }
        }
        Ok(())
    }

    /// Default rule base over the given input variables: five consensus
    /// rules (every input at the same level maps to the mirrored health
    /// level), then for each input four dominance rules (very high → very
    /// bad, high → bad, low → good, very low → very good). Rules into
    /// good and bad carry [`SHOULDER_RULE_WEIGHT`].
    pub fn default_for(names: &[String]) -> Self {
        let inputs: BTreeMap<String, LinguisticVariable> =
            names.iter().map(|n| (n.clone(), LinguisticVariable::default_input(n.clone()))).collect();
        let weight = |level: usize| if level == 1 || level == 3 { SHOULDER_RULE_WEIGHT } else { 1.0 };
        let output = LinguisticVariable::five_even(HEALTH, HEALTH_LABELS);
        let mut rules = Vec::with_capacity(5 + 4 * names.len());
        for level in 0..5 {
            rules.push(FuzzyRule {
                antecedent: names.iter().map(|n| (n.clone(), INPUT_LABELS[level].to_string())).collect(),
                consequent: HEALTH_LABELS[4 - level].to_string(),
                weight: weight(level),
            });
        }
        for n in names {
            for level in [4, 3, 1, 0] {
                rules.push(FuzzyRule {
                    antecedent: vec![(n.clone(), INPUT_LABELS[level].to_string())],
                    consequent: HEALTH_LABELS[4 - level].to_string(),
                    weight: weight(level),
                });
            }
        }
        RuleBase { inputs, output, rules }
    }
}

pub fn evaluate_rule(rb: &RuleBase, rule: &FuzzyRule, inputs: &BTreeMap<String, f64>) -> Result<f64, FuzzyError> {
    let mut strength = 1.0f64;
    for (var, label) in &rule.antecedent {
        let x = *inputs.get(var).ok_or_else(|| FuzzyError::UnknownVariable(var.clone()))?;
        let set = rb
            .inputs
            .get(var)
            .ok_or_else(|| FuzzyError::UnknownVariable(var.clone()))?
            .set(label)
            .ok_or_else(|| FuzzyError::UnknownLabel { var: var.clone(), label: label.clone() })?;
        strength = strength.min(set.membership(x.clamp(0.0, 1.0)));
    }
    Ok(rule.weight * strength)
}

/// Output sets paired with the level each is clipped at.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedSet {
    pub clipped: Vec<(FuzzySet, f64)>,
}

impl AggregatedSet {
    pub fn membership(&self, x: f64) -> f64 {
        self.clipped
            .iter()
            .map(|(s, level)| s.membership(x).min(*level))
            .fold(0.0, f64::max)
    }
}

/// Firing strengths for every rule, in declaration order.
pub fn activations(rb: &RuleBase, inputs: &BTreeMap<String, f64>) -> Result<Vec<f64>, FuzzyError> {
    rb.rules.iter().map(|r| evaluate_rule(rb, r, inputs)).collect()
}

pub fn infer(rb: &RuleBase, inputs: &BTreeMap<String, f64>) -> Result<AggregatedSet, FuzzyError> {
    Ok(aggregate(rb, &activations(rb, inputs)?))
}

fn aggregate(rb: &RuleBase, strengths: &[f64]) -> AggregatedSet {
    let clipped = rb
        .output
        .sets
        .iter()
        .map(|set| {
            let level = rb
                .rules
                .iter()
                .zip(strengths)
                .filter(|(r, _)| r.consequent == set.label)
                .map(|(_, s)| *s)
                .fold(0.0, f64::max);
            (set.clone(), level)
        })
        .collect();
    AggregatedSet { clipped }
}

fn grid_x(i: usize) -> f64 {
    i as f64 / (QUADRATURE_POINTS - 1) as f64
}

fn trapezoid(f: impl Fn(f64) -> f64) -> f64 {
    let h = 1.0 / (QUADRATURE_POINTS - 1) as f64;
    let mut sum = 0.0;
    for i in 0..QUADRATURE_POINTS {
        let w = if i == 0 || i == QUADRATURE_POINTS - 1 { 0.5 } else { 1.0 };
        sum += w * f(grid_x(i));
    }
    sum * h
}

pub fn defuzzify_centroid(set: &AggregatedSet) -> Result<f64, FuzzyError> {
    let (mut area, mut moment) = (0.0, 0.0);
    for i in 0..QUADRATURE_POINTS {
        let w = if i == 0 || i == QUADRATURE_POINTS - 1 { 0.5 } else { 1.0 };
        let x = grid_x(i);
        let mu = set.membership(x);
        area += w * mu;
        moment += w * x * mu;
    }
    if area <= 0.0 {
        return Err(FuzzyError::NoRuleFired);
    }
    Ok((moment / area).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HealthAssessment {
    pub health: f64,
    /// Output set with the largest clipped area.
    pub label: String,
    /// Firing strength per rule, in declaration order.
    pub activations: Vec<f64>,
}

pub fn assess_health(rb: &RuleBase, inputs: &BTreeMap<String, f64>) -> Result<HealthAssessment, FuzzyError> {
    let strengths = activations(rb, inputs)?;
    let agg = aggregate(rb, &strengths);
    let health = defuzzify_centroid(&agg)?;
    let mut label = None;
    let mut best = 0.0;
    for (set, level) in &agg.clipped {
        if *level <= 0.0 {
            continue;
        }
        let area = trapezoid(|x| set.membership(x).min(*level));
        if area > best {
            best = area;
            label = Some(set.label.clone());
        }
    }
    Ok(HealthAssessment { health, label: label.ok_or(FuzzyError::NoRuleFired)?, activations: strengths })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HealthRecord {
    pub t: i64,
    pub health: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleFileEntry {
    #[serde(rename = "if")]
    pub antecedent: Vec<(String, String)>,
    #[serde(rename = "then")]
    pub consequent: String,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

/// On-disk rule base. The output variable is stored under `Health`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleFile {
    pub variables: BTreeMap<String, Vec<FuzzySet>>,
    pub rules: Vec<RuleFileEntry>,
}

impl From<&RuleBase> for RuleFile {
    fn from(rb: &RuleBase) -> Self {
        let mut variables: BTreeMap<String, Vec<FuzzySet>> =
            rb.inputs.iter().map(|(k, v)| (k.clone(), v.sets.clone())).collect();
        variables.insert(HEALTH.to_string(), rb.output.sets.clone());
        RuleFile {
            variables,
            rules: rb
                .rules
                .iter()
                .map(|r| RuleFileEntry {
                    antecedent: r.antecedent.clone(),
                    consequent: r.consequent.clone(),
                    weight: r.weight,
                })
                .collect(),
        }
    }
}

impl TryFrom<RuleFile> for RuleBase {
    type Error = FuzzyError;

    fn try_from(mut file: RuleFile) -> Result<Self, FuzzyError> {
        let output_sets = file
            .variables
            .remove(HEALTH)
            .ok_or_else(|| FuzzyError::UnknownVariable(HEALTH.into()))?;
        let output = LinguisticVariable { name: HEALTH.into(), sets: output_sets };
        let inputs = file
            .variables
            .into_iter()
            .map(|(name, sets)| (name.clone(), LinguisticVariable { name, sets }))
            .collect();
        let rules = file
            .rules
            .into_iter()
            .map(|r| FuzzyRule { antecedent: r.antecedent, consequent: r.consequent, weight: r.weight })
            .collect();
        let rb = RuleBase { inputs, output, rules };
        rb.validate()?;
        Ok(rb)
    }
}
