//! Bayesian fusion of group scores into a system-level anomaly posterior.
//!
//! The network is a star: one binary root (system anomaly) with one
//! three-state evidence child per group. Inference is exact by Bayes rule in
//! log space. Regions are maximal runs of high posterior, merged across short
//! gaps and filtered by duration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("group `{0}`: P(high | anomaly) must exceed P(high | normal)")]
    OrientationViolation(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid thresholds: {0}")]
    InvalidParams(String),
    #[error("evidence history is empty")]
    EmptyHistory,
    #[error("history and labels differ in length ({history} vs {labels})")]
    LengthMismatch { history: usize, labels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceState {
    Low = 0,
    Med = 1,
    High = 2,
}

impl EvidenceState {
    pub const ALL: [EvidenceState; 3] = [EvidenceState::Low, EvidenceState::Med, EvidenceState::High];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub low: f64,
    pub high: f64,
}

impl Thresholds {
    pub fn new(low: f64, high: f64) -> Result<Self, FusionError> {
        if !(0.0 < low && low < high && high < 1.0) {
            return Err(FusionError::InvalidParams(format!("need 0 < low ({low}) < high ({high}) < 1")));
        }
        Ok(Thresholds { low, high })
    }
}

pub fn discretize(score: f64, t: Thresholds) -> EvidenceState {
    if score < t.low {
        EvidenceState::Low
    } else if score < t.high {
        EvidenceState::Med
    } else {
        EvidenceState::High
    }
}

/// Conditional distribution of one group's evidence, ordered [low, med, high].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupCpt {
    pub id: String,
    pub cpt_true: [f64; 3],
    pub cpt_false: [f64; 3],
}

impl GroupCpt {
    pub fn likelihood(&self, anomaly: bool, s: EvidenceState) -> f64 {
        if anomaly {
            self.cpt_true[s.index()]
        } else {
            self.cpt_false[s.index()]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnModel {
    pub prior: f64,
    pub groups: Vec<GroupCpt>,
}

impl BnModel {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(FusionError::InvalidModel(format!("prior {} outside (0, 1)", self.prior)));
        }
        for g in &self.groups {
            for (name, col) in [("cpt_true", &g.cpt_true), ("cpt_false", &g.cpt_false)] {
                if col.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
                    return Err(FusionError::InvalidModel(format!("{}: {name} entries must lie in (0, 1)", g.id)));
                }
                let sum: f64 = col.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(FusionError::InvalidModel(format!("{}: {name} sums to {sum}", g.id)));
                }
            }
            if g.cpt_true[2] <= g.cpt_false[2] {
                return Err(FusionError::OrientationViolation(g.id.clone()));
            }
        }
        Ok(())
    }

    pub fn group_ids(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.id.clone()).collect()
    }

    /// Same CPT for every group.
    pub fn uniform(group_ids: &[String], defaults: &CptDefaults) -> Result<Self, FusionError> {
        let model = BnModel {
            prior: defaults.prior,
            groups: group_ids
                .iter()
                .map(|id| GroupCpt { id: id.clone(), cpt_true: defaults.cpt_true, cpt_false: defaults.cpt_false })
                .collect(),
        };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CptDefaults {
    pub prior: f64,
    pub cpt_true: [f64; 3],
    pub cpt_false: [f64; 3],
}

impl Default for CptDefaults {
    fn default() -> Self {
        CptDefaults { prior: 0.05, cpt_true: [0.1, 0.2, 0.7], cpt_false: [0.7, 0.2, 0.1] }
    }
}

/// Fits CPTs from discretised history. With labels, counts are maximum
/// likelihood with add-one smoothing and the prior is the labeled anomaly
/// fraction clamped to [0.01, 0.5]. Without labels (or with an empty label
/// column) the defaults are returned for every group.
pub fn fit_cpts(
    group_ids: &[String],
    history: &[Vec<Option<EvidenceState>>],
    labels: Option<&[bool]>,
    defaults: &CptDefaults,
) -> Result<BnModel, FusionError> {
    if history.is_empty() {
        return Err(FusionError::EmptyHistory);
    }
    let labels = match labels {
        Some(l) if !l.is_empty() => l,
        _ => return BnModel::uniform(group_ids, defaults),
    };
    if labels.len() != history.len() {
        return Err(FusionError::LengthMismatch { history: history.len(), labels: labels.len() });
    }
    let positives = labels.iter().filter(|l| **l).count();
    let prior = (positives as f64 / labels.len() as f64).clamp(0.01, 0.5);
    let mut groups = Vec::with_capacity(group_ids.len());
    for (j, id) in group_ids.iter().enumerate() {
        let mut counts = [[0usize; 3]; 2];
        for (row, &label) in history.iter().zip(labels) {
            if let Some(s) = row.get(j).copied().flatten() {
                counts[label as usize][s.index()] += 1;
            }
        }
        let smooth = |c: [usize; 3]| {
            let n: usize = c.iter().sum();
            c.map(|k| (k + 1) as f64 / (n + 3) as f64)
        };
        groups.push(GroupCpt { id: id.clone(), cpt_true: smooth(counts[1]), cpt_false: smooth(counts[0]) });
    }
    let model = BnModel { prior, groups };
    model.validate()?;
    Ok(model)
}

/// P(anomaly | evidence). `evidence[j]` belongs to `model.groups[j]`;
/// `None` entries and entries beyond the model are left out.
pub fn posterior(model: &BnModel, evidence: &[Option<EvidenceState>]) -> f64 {
    let mut log_true = model.prior.ln();
    let mut log_false = (1.0 - model.prior).ln();
    for (g, e) in model.groups.iter().zip(evidence) {
        if let Some(s) = e {
            log_true += g.likelihood(true, *s).ln();
            log_false += g.likelihood(false, *s).ln();
        }
    }
    1.0 / (1.0 + (log_false - log_true).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionParams {
    pub rho: f64,
    pub min_dur: usize,
    pub merge_gap: usize,
}

impl Default for RegionParams {
    fn default() -> Self {
        RegionParams { rho: 0.9, min_dur: 3, merge_gap: 2 }
    }
}

impl RegionParams {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(FusionError::InvalidParams(format!("rho {} outside (0, 1)", self.rho)));
        }
        if self.min_dur < 1 {
            return Err(FusionError::InvalidParams("min_dur must be >= 1".into()));
        }
        Ok(())
    }
}

/// Inclusive index span with its peak posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub peak: f64,
}

pub fn detect_regions(posteriors: &[f64], params: &RegionParams) -> Vec<Span> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &p) in posteriors.iter().enumerate() {
        match (p >= params.rho, open) {
            (true, None) => open = Some(i),
            (false, Some(s)) => {
                runs.push((s, i - 1));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        runs.push((s, posteriors.len() - 1));
    }
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (s, e) in runs {
        match merged.last_mut() {
            Some(last) if s - last.1 - 1 <= params.merge_gap => last.1 = e,
            _ => merged.push((s, e)),
        }
    }
    merged
        .into_iter()
        .filter(|(s, e)| e - s + 1 >= params.min_dur)
        .map(|(start, end)| Span {
            start,
            end,
            peak: posteriors[start..=end].iter().cloned().fold(f64::MIN, f64::max),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyRegion {
    pub t_start: i64,
    pub t_end: i64,
    pub peak: f64,
    /// Groups observed high anywhere in the region.
    pub groups: Vec<String>,
}

pub fn describe_region(
    span: &Span,
    grid: &[i64],
    states: &[Vec<Option<EvidenceState>>],
    group_ids: &[String],
) -> AnomalyRegion {
    let groups = group_ids
        .iter()
        .enumerate()
        .filter(|(j, _)| {
            states[span.start..=span.end]
                .iter()
                .any(|row| row.get(*j).copied().flatten() == Some(EvidenceState::High))
        })
        .map(|(_, id)| id.clone())
        .collect();
    AnomalyRegion { t_start: grid[span.start], t_end: grid[span.end], peak: span.peak, groups }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use EvidenceState::*;

    fn one_group(t: [f64; 3], f: [f64; 3], prior: f64) -> BnModel {
        BnModel { prior, groups: vec![GroupCpt { id: "a".into(), cpt_true: t, cpt_false: f }] }
    }

    #[test]
    fn discretize_examples() {
        let t = Thresholds::new(0.5, 0.9).unwrap();
        assert_eq!(discretize(0.2, t), Low);
        assert_eq!(discretize(0.7, t), Med);
        assert_eq!(discretize(0.95, t), High);
        assert_eq!(discretize(0.5, t), Med);
        assert_eq!(discretize(0.9, t), High);
        assert!(Thresholds::new(0.9, 0.5).is_err());
    }

    #[test]
    fn posterior_examples() {
        let m = one_group([0.1, 0.0, 0.9], [0.9, 0.0, 0.1], 0.5);
        assert_eq!(posterior(&m, &[]), 0.5);
        assert_eq!(posterior(&m, &[None]), 0.5);
        let d = BnModel::uniform(&["a".to_string(), "b".to_string()], &CptDefaults::default()).unwrap();
        assert!((posterior(&d, &[None, None]) - 0.05).abs() < 1e-15);
        assert!((posterior(&m, &[Some(High)]) - 0.9).abs() < 1e-12);
        assert!((posterior(&m, &[Some(Low)]) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn fit_supervised_counts() {
        let ids = vec!["a".to_string()];
        let mut history = vec![vec![Some(High)]; 8];
        history.extend(vec![vec![Some(Low)]; 8]);
        let mut labels = vec![true; 8];
        labels.extend(vec![false; 8]);
        let m = fit_cpts(&ids, &history, Some(&labels), &CptDefaults::default()).unwrap();
        assert!((m.groups[0].cpt_true[2] - 9.0 / 11.0).abs() < 1e-15);
        assert!((m.groups[0].cpt_false[0] - 9.0 / 11.0).abs() < 1e-15);
        assert_eq!(m.prior, 0.5);
    }

    #[test]
    fn fit_without_labels_uses_defaults() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let history = vec![vec![Some(Med), None]; 4];
        let d = CptDefaults::default();
        let m = fit_cpts(&ids, &history, Some(&[]), &d).unwrap();
        assert_eq!(m, BnModel::uniform(&ids, &d).unwrap());
        assert_eq!(m.groups[1].cpt_true, d.cpt_true);
        assert_eq!(fit_cpts(&ids, &history, None, &d).unwrap(), m);
        assert_eq!(fit_cpts(&ids, &[], None, &d), Err(FusionError::EmptyHistory));
    }

    #[test]
    fn fit_constant_group_violates_orientation() {
        let ids = vec!["flat".to_string()];
        let history = vec![vec![Some(Med)]; 10];
        let labels: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let err = fit_cpts(&ids, &history, Some(&labels), &CptDefaults::default()).unwrap_err();
        assert_eq!(err, FusionError::OrientationViolation("flat".into()));
    }

    #[test]
    fn model_validation() {
        let mut m = BnModel::uniform(&["a".to_string()], &CptDefaults::default()).unwrap();
        m.groups[0].cpt_true = [0.5, 0.5, 0.1];
        assert!(matches!(m.validate(), Err(FusionError::InvalidModel(_))));
        m.groups[0].cpt_true = [0.8, 0.1, 0.1];
        assert!(matches!(m.validate(), Err(FusionError::OrientationViolation(_))));
    }

    #[test]
    fn model_json_shape() {
        let m = BnModel::uniform(&["g1".to_string()], &CptDefaults::default()).unwrap();
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["groups"][0]["cpt_true"].as_array().unwrap().len(), 3);
        assert!(v["prior"].is_number());
        let back: BnModel = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn region_examples() {
        let p = RegionParams { rho: 0.9, min_dur: 2, merge_gap: 0 };
        let spans = detect_regions(&[0.1, 0.95, 0.96, 0.2], &p);
        assert_eq!(spans.len(), 1);
        assert_eq!((spans[0].start, spans[0].end, spans[0].peak), (1, 2, 0.96));
        assert!(detect_regions(&[0.1, 0.2, 0.3], &p).is_empty());

        let p = RegionParams { rho: 0.9, min_dur: 1, merge_gap: 1 };
        let spans = detect_regions(&[0.0, 0.0, 0.95, 0.95, 0.0, 0.95, 0.95, 0.0], &p);
        assert_eq!(spans.iter().map(|s| (s.start, s.end)).collect::<Vec<_>>(), vec![(2, 6)]);
    }

    #[test]
    fn region_short_runs_dropped_after_merge() {
        let p = RegionParams { rho: 0.9, min_dur: 3, merge_gap: 2 };
        // two singles two apart merge to length 4
        assert_eq!(detect_regions(&[0.95, 0.0, 0.0, 0.95], &p).len(), 1);
        assert!(detect_regions(&[0.95, 0.0, 0.0, 0.0, 0.95], &p).is_empty());
    }

    #[test]
    fn describe_lists_high_groups() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let states = vec![vec![Some(High), Some(Med)], vec![Some(High), None], vec![Some(Low), Some(Med)]];
        let r = describe_region(&Span { start: 0, end: 1, peak: 0.97 }, &[60, 120, 180], &states, &ids);
        assert_eq!(r, AnomalyRegion { t_start: 60, t_end: 120, peak: 0.97, groups: vec!["a".into()] });
    }

    fn arb_cpt() -> impl Strategy<Value = [f64; 3]> {
        (0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0).prop_map(|(a, b, c)| {
            let s = a + b + c;
            [a / s, b / s, c / s]
        })
    }

    /// Valid model whose likelihood ratio rises from low to high, the
    /// orientation under which posterior monotonicity is defined.
    fn arb_monotone_group() -> impl Strategy<Value = GroupCpt> {
        (arb_cpt(), arb_cpt()).prop_filter_map("ratio not increasing", |(t, f)| {
            let r: Vec<f64> = (0..3).map(|i| t[i] / f[i]).collect();
            (r[0] <= r[1] && r[1] <= r[2] && t[2] > f[2]).then(|| GroupCpt { id: "g".into(), cpt_true: t, cpt_false: f })
        })
    }

    proptest! {
        #[test]
        fn posterior_monotone_in_evidence(
            groups in prop::collection::vec(arb_monotone_group(), 1..6),
            prior in 0.01f64..0.99,
            ev in prop::collection::vec(prop::option::of(0usize..3), 6),
            which in 0usize..6,
        ) {
            let k = groups.len();
            let model = BnModel { prior, groups };
            let which = which % k;
            let mut evidence: Vec<Option<EvidenceState>> = ev[..k].iter().map(|e| e.map(|i| EvidenceState::ALL[i])).collect();
            let mut last = f64::MIN;
            for s in EvidenceState::ALL {
                evidence[which] = Some(s);
                let p = posterior(&model, &evidence);
                prop_assert!(p >= last - 1e-15);
                last = p;
            }
        }

        #[test]
        fn no_underflow_for_many_groups(
            k in 1usize..=64,
            cpt_t in arb_cpt(),
            cpt_f in arb_cpt(),
            ev in prop::collection::vec(0usize..3, 64),
            prior in 0.001f64..0.999,
        ) {
            // smoothed CPTs never go below 1/(n+3); use a realistic floor
            let fix = |c: [f64; 3]| {
                let c = c.map(|v| v.max(1e-3));
                let s: f64 = c.iter().sum();
                c.map(|v| v / s)
            };
            let groups = (0..k).map(|j| GroupCpt { id: format!("g{j}"), cpt_true: fix(cpt_t), cpt_false: fix(cpt_f) }).collect();
            let model = BnModel { prior, groups };
            let evidence: Vec<_> = ev[..k].iter().map(|i| Some(EvidenceState::ALL[*i])).collect();
            let p = posterior(&model, &evidence);
            prop_assert!(p.is_finite() && (0.0..=1.0).contains(&p));
        }

        #[test]
        fn regions_disjoint_and_ordered(
            post in prop::collection::vec(0.0f64..1.0, 0..200),
            rho in 0.05f64..0.95,
            min_dur in 1usize..5,
            merge_gap in 0usize..4,
        ) {
            let spans = detect_regions(&post, &RegionParams { rho, min_dur, merge_gap });
            for s in &spans {
                prop_assert!(s.start <= s.end);
                prop_assert!(s.end - s.start + 1 >= min_dur);
                prop_assert!(s.peak >= rho);
            }
            for w in spans.windows(2) {
                prop_assert!(w[0].end + merge_gap + 1 < w[1].start);
            }
        }
    }
}
