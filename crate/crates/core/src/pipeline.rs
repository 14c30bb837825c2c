//! End-to-end detection: align → vote → classify and aggregate → score →
//! fuse → fuzzy health, plus artifact I/O and region explanations.
//!
//! Each stage is a plain function over the previous stage's artifacts, so a
//! downstream stage can be rerun from files written by an earlier run.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{FaultClassConfig, PipelineConfig, TauConfig};
use crate::eval::{evaluate, EvalReport};
use crate::faultclass::{classify_fault, ClassifierParams, FaultRecord, FaultWindow};
use crate::fusion::{describe_region, detect_regions, discretize, posterior, AnomalyRegion, BnModel, EvidenceState, RegionParams, Thresholds};
use crate::fuzzyhealth::{assess_health, HealthRecord, RuleBase, RuleFile};
use crate::grouping::{
    auto_tau, build_groups, group_aggregate, peer_deviations, validate_groups, vote_instant, GroupSpec, GroupingError,
    Verdict, VoteResult,
};
use crate::scorer::{score_stream, AnomalyScoreSeries, ScoreRecord, ScorerParams};
use crate::telemetry::{
    align, parse_csv, read_jsonl, read_readings, write_jsonl, write_readings, AlignedTable, LabeledTrace, SensorMeta,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("invariant `{name}` violated: {detail}")]
    Invariant { name: &'static str, detail: String },
    #[error("output error: {0}")]
    Output(#[from] std::io::Error),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Input(_) => 3,
            PipelineError::Invariant { .. } => 4,
            PipelineError::Output(_) => 1,
        }
    }
}

fn input_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Input(e.to_string())
}

fn config_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Config(e.to_string())
}

/// Reads a trace from a `.csv` file, a JSON Lines file, or a directory
/// holding `readings.jsonl`.
pub fn load_trace(path: &Path, cfg: &PipelineConfig) -> Result<LabeledTrace, PipelineError> {
    let path = if path.is_dir() { path.join(READINGS) } else { path.to_path_buf() };
    let file = File::open(&path).map_err(|e| input_err(format!("{}: {e}", path.display())))?;
    let trace = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let parsed = parse_csv(file, &cfg.io.column_mapping, cfg.io.timestamp_format, cfg.io.malformed_threshold)
            .map_err(input_err)?;
        if !parsed.malformed.is_empty() {
            log::warn!("{}: skipped {} malformed rows", path.display(), parsed.malformed.len());
        }
        parsed.trace
    } else {
        read_readings(BufReader::new(file)).map_err(input_err)?
    };
    trace.validate().map_err(input_err)?;
    if trace.is_empty() {
        return Err(input_err(format!("{}: no readings", path.display())));
    }
    Ok(trace)
}

/// Most frequent positive step between consecutive readings of a sensor;
/// the smaller step wins ties.
pub fn infer_period(trace: &LabeledTrace) -> Option<i64> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for w in trace.readings.windows(2) {
        if w[0].sensor_id == w[1].sensor_id {
            let d = w[1].timestamp - w[0].timestamp;
            if d > 0 {
                *counts.entry(d).or_default() += 1;
            }
        }
    }
    let mut best: Option<(i64, usize)> = None;
    for (d, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((d, c));
        }
    }
    best.map(|(d, _)| d)
}

/// Groups from the config (explicit list or strategy) checked against the
/// topology.
pub fn resolve_groups(cfg: &PipelineConfig, topology: &[SensorMeta]) -> Result<Vec<GroupSpec>, PipelineError> {
    let groups = match &cfg.grouping.groups {
        Some(g) => g.clone(),
        None => build_groups(topology, cfg.grouping.strategy).map_err(|e| match e {
            GroupingError::UnlocatedSensor(_) | GroupingError::EmptyTopology => input_err(e),
            other => config_err(other),
        })?,
    };
    validate_groups(&groups, topology).map_err(config_err)?;
    let mut groups = groups;
    groups.sort_by(|a, b| a.group_id.cmp(&b.group_id));
    Ok(groups)
}

/// Members of `g` present in the table, in id order.
fn member_rows(table: &AlignedTable, g: &GroupSpec) -> Vec<(usize, String)> {
    g.members.iter().filter_map(|m| table.sensor_index(m).map(|i| (i, m.clone()))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteStage {
    pub taus: BTreeMap<String, f64>,
    /// Ordered by (t, group, sensor).
    pub votes: Vec<VoteResult>,
}

pub fn group_taus(table: &AlignedTable, groups: &[GroupSpec], cfg: &TauConfig) -> BTreeMap<String, f64> {
    groups
        .iter()
        .map(|g| {
            let tau = cfg.per_group.get(&g.group_id).copied().or(cfg.value).unwrap_or_else(|| {
                let rows = member_rows(table, g);
                let mut devs = Vec::new();
                for i in 0..table.len().min(cfg.warmup) {
                    let values: Vec<Option<f64>> = rows.iter().map(|(r, _)| table.value(*r, i)).collect();
                    devs.extend(peer_deviations(&values));
                }
                auto_tau(&devs, cfg.multiplier, cfg.min)
            });
            (g.group_id.clone(), tau)
        })
        .collect()
}

pub fn stage_vote(table: &AlignedTable, groups: &[GroupSpec], tau_cfg: &TauConfig) -> VoteStage {
    let taus = group_taus(table, groups, tau_cfg);
    let rows: Vec<Vec<(usize, String)>> = groups.iter().map(|g| member_rows(table, g)).collect();
    for (g, members) in groups.iter().zip(&rows) {
        if members.len() < 2 {
            log::warn!("group {} has fewer than two sensors; its readings pass unvoted", g.group_id);
        }
    }
    let mut votes = Vec::new();
    for (i, &t) in table.grid.iter().enumerate() {
        for (g, members) in groups.iter().zip(&rows) {
            let values: Vec<Option<f64>> = members.iter().map(|(r, _)| table.value(*r, i)).collect();
            for ((_, id), vote) in members.iter().zip(vote_instant(&values, taus[&g.group_id])) {
                let Some(vote) = vote else { continue };
                let (verdict, deviation, neighbour_count) = match vote {
                    Ok(v) => (Some(v.verdict), v.deviation, v.neighbour_count),
                    Err(_) => (None, 0.0, 0),
                };
                votes.push(VoteResult {
                    timestamp: t,
                    sensor_id: id.clone(),
                    group: g.group_id.clone(),
                    verdict,
                    deviation,
                    neighbour_count,
                });
            }
        }
    }
    VoteStage { taus, votes }
}

/// Per-group median of non-faulty readings on the grid.
pub fn stage_aggregate(
    table: &AlignedTable,
    groups: &[GroupSpec],
    votes: &[VoteResult],
) -> Result<BTreeMap<String, Vec<Option<f64>>>, PipelineError> {
    let index = grid_index(&table.grid);
    let mut cells: BTreeMap<&str, Vec<Vec<(f64, Option<Verdict>)>>> =
        groups.iter().map(|g| (g.group_id.as_str(), vec![Vec::new(); table.len()])).collect();
    for v in votes {
        let i = *index.get(&v.timestamp).ok_or_else(|| bad_vote(v, "timestamp off the grid"))?;
        let s = table.sensor_index(&v.sensor_id).ok_or_else(|| bad_vote(v, "unknown sensor"))?;
        let value = table.value(s, i).ok_or_else(|| bad_vote(v, "vote on a missing cell"))?;
        cells
            .get_mut(v.group.as_str())
            .ok_or_else(|| bad_vote(v, "unknown group"))?[i]
            .push((value, v.verdict));
    }
    Ok(cells
        .into_iter()
        .map(|(g, per_instant)| (g.to_string(), per_instant.iter().map(|c| group_aggregate(c)).collect()))
        .collect())
}

fn bad_vote(v: &VoteResult, what: &str) -> PipelineError {
    input_err(format!("vote for {} in {} at {}: {what}", v.sensor_id, v.group, v.timestamp))
}

fn grid_index(grid: &[i64]) -> BTreeMap<i64, usize> {
    grid.iter().enumerate().map(|(i, t)| (*t, i)).collect()
}

/// Fault flags and residuals per sensor on the grid: a cell is faulty when
/// any of its groups voted it faulty, and its residual is the largest such
/// deviation.
fn fault_matrix(table: &AlignedTable, votes: &[VoteResult]) -> Vec<Vec<Option<f64>>> {
    let index = grid_index(&table.grid);
    let mut residual = vec![vec![None; table.len()]; table.sensors.len()];
    for v in votes.iter().filter(|v| v.verdict == Some(Verdict::Faulty)) {
        if let (Some(s), Some(&i)) = (table.sensor_index(&v.sensor_id), index.get(&v.timestamp)) {
            let cell: &mut Option<f64> = &mut residual[s][i];
            *cell = Some(cell.map_or(v.deviation, |d: f64| d.max(v.deviation)));
        }
    }
    residual
}

/// Algorithm-1 reports for every full window of every sensor, ordered by
/// (window end, sensor). Windows with fewer than `min_run` present cells
/// are skipped.
pub fn stage_classify(
    table: &AlignedTable,
    groups: &[GroupSpec],
    votes: &[VoteResult],
    cfg: &FaultClassConfig,
) -> Result<Vec<FaultRecord>, PipelineError> {
    let residual = fault_matrix(table, votes);
    let base = cfg.params();
    let theta_of = |sensor: &str| -> ClassifierParams {
        groups
            .iter()
            .filter(|g| g.members.contains(sensor))
            .find_map(|g| cfg.per_group_theta.get(&g.group_id))
            .map_or(base, |&theta| ClassifierParams { theta, ..base })
    };
    let mut out = Vec::new();
    let n = table.len();
    let mut start = 0;
    while start + cfg.window <= n {
        let end = start + cfg.window;
        for (s, id) in table.sensors.iter().enumerate() {
            let present: Vec<usize> = (start..end).filter(|&i| table.cells[s][i].is_some()).collect();
            let params = theta_of(id);
            if present.len() < params.min_run {
                continue;
            }
            let window = FaultWindow::new(
                present.iter().map(|&i| table.value(s, i).unwrap_or_default()).collect(),
                present.iter().map(|&i| residual[s][i].is_some()).collect(),
                present.iter().map(|&i| residual[s][i]).collect(),
            )
            .map_err(|e| PipelineError::Invariant { name: "fault_window_shape", detail: e.to_string() })?;
            let c = classify_fault(&window, &params)
                .map_err(|e| PipelineError::Invariant { name: "fault_window_shape", detail: e.to_string() })?;
            out.push(FaultRecord {
                t: table.grid[end - 1],
                sensor: id.clone(),
                class: c.class,
                count: c.evidence.fault_count,
                continuous: c.evidence.continuous,
                constant: c.evidence.constant,
            });
        }
        start += cfg.slide;
    }
    Ok(out)
}

pub fn stage_score(
    grid: &[i64],
    aggregates: &BTreeMap<String, Vec<Option<f64>>>,
    params: &ScorerParams,
) -> Result<Vec<AnomalyScoreSeries>, PipelineError> {
    aggregates
        .iter()
        .map(|(g, series)| score_stream(g, grid, series, params).map_err(input_err))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseStage {
    pub states: Vec<Vec<Option<EvidenceState>>>,
    pub posteriors: Vec<f64>,
    pub regions: Vec<AnomalyRegion>,
}

/// Model groups must match the score series one-to-one.
pub fn stage_fuse(
    grid: &[i64],
    scores: &[AnomalyScoreSeries],
    model: &BnModel,
    thresholds: Thresholds,
    region_params: &RegionParams,
) -> Result<FuseStage, PipelineError> {
    let by_id: BTreeMap<&str, &AnomalyScoreSeries> = scores.iter().map(|s| (s.group_id.as_str(), s)).collect();
    let model_ids: BTreeSet<&str> = model.groups.iter().map(|g| g.id.as_str()).collect();
    if model_ids != by_id.keys().copied().collect() {
        return Err(config_err(format!(
            "model groups {:?} do not match pipeline groups {:?}",
            model_ids,
            by_id.keys().collect::<Vec<_>>()
        )));
    }
    let ordered: Vec<&AnomalyScoreSeries> = model.groups.iter().map(|g| by_id[g.id.as_str()]).collect();
    let states: Vec<Vec<Option<EvidenceState>>> = (0..grid.len())
        .map(|i| ordered.iter().map(|s| s.scores.get(i).map(|&x| discretize(x, thresholds))).collect())
        .collect();
    let posteriors: Vec<f64> = states.iter().map(|row| posterior(model, row)).collect();
    let group_ids = model.group_ids();
    let regions = detect_regions(&posteriors, region_params)
        .iter()
        .map(|span| describe_region(span, grid, &states, &group_ids))
        .collect();
    Ok(FuseStage { states, posteriors, regions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationRecord {
    pub t: i64,
    pub activations: Vec<f64>,
}

pub fn stage_health(
    grid: &[i64],
    scores: &[AnomalyScoreSeries],
    rulebase: &RuleBase,
) -> Result<(Vec<HealthRecord>, Vec<ActivationRecord>), PipelineError> {
    let mut health = Vec::with_capacity(grid.len());
    let mut acts = Vec::with_capacity(grid.len());
    for (i, &t) in grid.iter().enumerate() {
        let inputs: BTreeMap<String, f64> =
            scores.iter().filter_map(|s| s.scores.get(i).map(|x| (s.group_id.clone(), *x))).collect();
        let a = assess_health(rulebase, &inputs).map_err(|e| PipelineError::Invariant {
            name: "fuzzy_coverage",
            detail: format!("at t = {t}: {e}"),
        })?;
        health.push(HealthRecord { t, health: a.health, label: a.label });
        acts.push(ActivationRecord { t, activations: a.activations });
    }
    Ok((health, acts))
}

/// Score records ordered by (t, group).
pub fn score_records(scores: &[AnomalyScoreSeries]) -> Vec<ScoreRecord> {
    let n = scores.iter().map(|s| s.scores.len()).max().unwrap_or(0);
    let mut out = Vec::with_capacity(n * scores.len());
    for i in 0..n {
        for s in scores {
            if let Some(&score) = s.scores.get(i) {
                out.push(ScoreRecord { t: s.timestamps[i], group: s.group_id.clone(), score });
            }
        }
    }
    out
}

/// Inverse of [`score_records`] for a known grid.
pub fn series_from_records(grid: &[i64], records: &[ScoreRecord]) -> Result<Vec<AnomalyScoreSeries>, PipelineError> {
    let index = grid_index(grid);
    let mut by_group: BTreeMap<&str, Vec<Option<f64>>> = BTreeMap::new();
    for r in records {
        let i = *index.get(&r.t).ok_or_else(|| input_err(format!("score at {} off the grid", r.t)))?;
        by_group.entry(r.group.as_str()).or_insert_with(|| vec![None; grid.len()])[i] = Some(r.score);
    }
    by_group
        .into_iter()
        .map(|(g, v)| {
            let scores = v
                .into_iter()
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| input_err(format!("score series for {g} has gaps")))?;
            Ok(AnomalyScoreSeries { group_id: g.to_string(), timestamps: grid.to_vec(), scores })
        })
        .collect()
}

/// Externally supplied pieces that would otherwise be derived.
#[derive(Debug, Clone, Default)]
pub struct Resources {
    pub topology: Option<Vec<SensorMeta>>,
    pub model: Option<BnModel>,
    pub rulebase: Option<RuleBase>,
}

impl Resources {
    /// Loads the files named in the config.
    pub fn load(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        fn read<T: for<'de> Deserialize<'de>>(p: &Path) -> Result<T, PipelineError> {
            let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))
        }
        let topology = cfg.io.topology.as_deref().map(read::<Vec<SensorMeta>>).transpose()?;
        let model = match cfg.fusion.model.as_deref() {
            Some(p) => {
                let m: BnModel = read(p)?;
                m.validate().map_err(config_err)?;
                Some(m)
            }
            None => None,
        };
        let rulebase = match cfg.fuzzy.rules.as_deref() {
            Some(p) => Some(RuleBase::try_from(read::<RuleFile>(p)?).map_err(config_err)?),
            None => None,
        };
        Ok(Resources { topology, model, rulebase })
    }
}

#[derive(Debug, Clone)]
pub struct DetectOutput {
    pub period: i64,
    pub grid: Vec<i64>,
    /// Input readings with fault flags from voting.
    pub readings: LabeledTrace,
    pub groups: Vec<GroupSpec>,
    pub taus: BTreeMap<String, f64>,
    pub votes: Vec<VoteResult>,
    pub faults: Vec<FaultRecord>,
    pub scores: Vec<AnomalyScoreSeries>,
    pub posteriors: Vec<f64>,
    pub regions: Vec<AnomalyRegion>,
    pub health: Vec<HealthRecord>,
    pub activations: Vec<ActivationRecord>,
    pub model: BnModel,
    pub rulebase: RuleBase,
    /// Present when the input carries labels.
    pub eval: Option<EvalReport>,
}

fn check(name: &'static str, ok: bool, detail: impl FnOnce() -> String) -> Result<(), PipelineError> {
    if ok {
        Ok(())
    } else {
        Err(PipelineError::Invariant { name, detail: detail() })
    }
}

fn check_unit(name: &'static str, values: impl IntoIterator<Item = f64>) -> Result<(), PipelineError> {
    for (i, v) in values.into_iter().enumerate() {
        check(name, (0.0..=1.0).contains(&v), || format!("value {v} at position {i}"))?;
    }
    Ok(())
}

pub fn run_detect(cfg: &PipelineConfig, trace: &LabeledTrace, res: &Resources) -> Result<DetectOutput, PipelineError> {
    cfg.validate().map_err(config_err)?;
    let period = match cfg.io.period {
        Some(p) => p,
        None => infer_period(trace).ok_or_else(|| input_err("cannot infer the sample period; set io.period"))?,
    };
    let table = align(trace, period, cfg.io.max_gap).map_err(input_err)?;

    let topology: Vec<SensorMeta> = match &res.topology {
        Some(t) => {
            let known: BTreeSet<&str> = t.iter().map(|m| m.sensor_id.as_str()).collect();
            if let Some(s) = table.sensors.iter().find(|s| !known.contains(s.as_str())) {
                return Err(input_err(format!("sensor `{s}` missing from the topology")));
            }
            t.clone()
        }
        None => table.sensors.iter().map(|s| SensorMeta::infer(s)).collect(),
    };
    let groups = resolve_groups(cfg, &topology)?;
    let group_ids: Vec<String> = groups.iter().map(|g| g.group_id.clone()).collect();

    let vote = stage_vote(&table, &groups, &cfg.grouping.tau);
    let faults = stage_classify(&table, &groups, &vote.votes, &cfg.faultclass)?;
    let aggregates = stage_aggregate(&table, &groups, &vote.votes)?;
    let scores = stage_score(&table.grid, &aggregates, &cfg.scorer)?;
    check_unit("scores_in_unit_interval", scores.iter().flat_map(|s| s.scores.iter().copied()))?;

    let model = match &res.model {
        Some(m) => m.clone(),
        None => BnModel::uniform(&group_ids, &cfg.fusion.cpt_defaults()).map_err(config_err)?,
    };
    let fused = stage_fuse(&table.grid, &scores, &model, cfg.fusion.thresholds().map_err(config_err)?, &cfg.fusion.region_params())?;
    check_unit("posterior_in_unit_interval", fused.posteriors.iter().copied())?;
    for w in fused.regions.windows(2) {
        check("regions_ordered_disjoint", w[0].t_end < w[1].t_start, || {
            format!("[{}, {}] then [{}, {}]", w[0].t_start, w[0].t_end, w[1].t_start, w[1].t_end)
        })?;
    }

    let rulebase = match &res.rulebase {
        Some(rb) => {
            let vars: BTreeSet<&String> = rb.inputs.keys().collect();
            if let Some(v) = vars.iter().find(|v| !group_ids.contains(v)) {
                return Err(config_err(format!("rule variable `{v}` is not a group")));
            }
            rb.clone()
        }
        None => RuleBase::default_for(&group_ids),
    };
    let (health, activations) = stage_health(&table.grid, &scores, &rulebase)?;
    check_unit("health_in_unit_interval", health.iter().map(|h| h.health))?;

    let mut readings = trace.clone();
    let faulty = fault_matrix(&table, &vote.votes);
    let voted: BTreeSet<(&str, i64)> = vote.votes.iter().map(|v| (v.sensor_id.as_str(), v.timestamp)).collect();
    let index = grid_index(&table.grid);
    for r in &mut readings.readings {
        r.fault_flag = None;
        r.residual = None;
        let (Some(s), Some(&i)) = (table.sensor_index(&r.sensor_id), index.get(&r.timestamp)) else { continue };
        if table.cells[s][i].is_some_and(|c| c.observed_at == r.timestamp) && voted.contains(&(r.sensor_id.as_str(), r.timestamp)) {
            r.residual = faulty[s][i];
            r.fault_flag = Some(faulty[s][i].is_some());
        }
    }

    let eval = if trace.labels.is_empty() {
        None
    } else {
        Some(
            evaluate(&fused.regions, &faults, &trace.labels, period, cfg.faultclass.window, cfg.eval.iou_threshold)
                .map_err(input_err)?,
        )
    };

    Ok(DetectOutput {
        period,
        grid: table.grid,
        readings,
        groups,
        taus: vote.taus,
        votes: vote.votes,
        faults,
        scores,
        posteriors: fused.posteriors,
        regions: fused.regions,
        health,
        activations,
        model,
        rulebase,
        eval,
    })
}

pub const READINGS: &str = "readings.jsonl";
pub const LABELS: &str = "labels.jsonl";
pub const VOTES: &str = "votes.jsonl";
pub const FAULTS: &str = "faults.jsonl";
pub const SCORES: &str = "scores.jsonl";
pub const POSTERIOR: &str = "posterior.jsonl";
pub const REGIONS: &str = "regions.jsonl";
pub const HEALTH: &str = "health.jsonl";
pub const ACTIVATIONS: &str = "activations.jsonl";
pub const GROUPS: &str = "groups.json";
pub const MODEL: &str = "model.json";
pub const RULEBASE: &str = "rulebase.json";
pub const EVAL: &str = "eval.json";
pub const EXPLAIN: &str = "explain.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorRecord {
    pub t: i64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupRecord {
    pub group_id: String,
    pub members: BTreeSet<String>,
    pub tau: f64,
}

fn create(dir: &Path, name: &str) -> std::io::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> std::io::Result<()> {
    let mut out = create(dir, name)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()
}

fn write_lines<T: Serialize>(dir: &Path, name: &str, records: impl IntoIterator<Item = T>) -> std::io::Result<()> {
    let mut out = create(dir, name)?;
    write_jsonl(&mut out, records)?;
    out.flush()
}

pub fn read_lines<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<Vec<T>, PipelineError> {
    let path = dir.join(name);
    let file = File::open(&path).map_err(|e| input_err(format!("{}: {e}", path.display())))?;
    read_jsonl(BufReader::new(file)).map_err(|e| input_err(format!("{}: {e}", path.display())))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<T, PipelineError> {
    let path = dir.join(name);
    let text = std::fs::read_to_string(&path).map_err(|e| input_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| input_err(format!("{}: {e}", path.display())))
}

/// Writes a simulated trace: readings with labels, plus the parallel labels file.
pub fn write_trace(dir: &Path, trace: &LabeledTrace) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut out = create(dir, READINGS)?;
    write_readings(&mut out, trace)?;
    out.flush()?;
    let mut out = create(dir, LABELS)?;
    crate::telemetry::write_labels(&mut out, trace)?;
    out.flush()
}

pub fn write_outputs(dir: &Path, out: &DetectOutput) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = create(dir, READINGS)?;
    write_readings(&mut w, &out.readings)?;
    w.flush()?;
    write_lines(dir, VOTES, &out.votes)?;
    write_lines(dir, FAULTS, &out.faults)?;
    write_lines(dir, SCORES, score_records(&out.scores))?;
    write_lines(dir, POSTERIOR, out.grid.iter().zip(&out.posteriors).map(|(t, p)| PosteriorRecord { t: *t, p: *p }))?;
    write_lines(dir, REGIONS, &out.regions)?;
    write_lines(dir, HEALTH, &out.health)?;
    write_lines(dir, ACTIVATIONS, &out.activations)?;
    let groups: Vec<GroupRecord> = out
        .groups
        .iter()
        .map(|g| GroupRecord { group_id: g.group_id.clone(), members: g.members.clone(), tau: out.taus[&g.group_id] })
        .collect();
    write_json(dir, GROUPS, &groups)?;
    write_json(dir, MODEL, &out.model)?;
    write_json(dir, RULEBASE, &RuleFile::from(&out.rulebase))?;
    if let Some(e) = &out.eval {
        write_json(dir, EVAL, e)?;
    }
    Ok(())
}

/// Evaluates a detect output directory against the labels stored with its
/// readings.
pub fn run_eval(dir: &Path, cfg: &PipelineConfig) -> Result<EvalReport, PipelineError> {
    let trace = load_trace(dir, cfg)?;
    if trace.labels.is_empty() {
        return Err(input_err("readings carry no labels"));
    }
    let period = match cfg.io.period {
        Some(p) => p,
        None => infer_period(&trace).ok_or_else(|| input_err("cannot infer the sample period"))?,
    };
    let regions: Vec<AnomalyRegion> = read_lines(dir, REGIONS)?;
    let faults: Vec<FaultRecord> = read_lines(dir, FAULTS)?;
    evaluate(&regions, &faults, &trace.labels, period, cfg.faultclass.window, cfg.eval.iou_threshold)
        .map_err(input_err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleActivation {
    pub index: usize,
    pub rule: String,
    pub mean_activation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainRecord {
    pub t_start: i64,
    pub t_end: i64,
    pub peak: f64,
    /// Most frequent health label inside the region; ties go to the worse label.
    pub label: String,
    pub top_rules: Vec<RuleActivation>,
    pub groups: Vec<String>,
}

pub const TOP_RULES: usize = 3;

pub fn run_explain(
    health: &[HealthRecord],
    activations: &[ActivationRecord],
    regions: &[AnomalyRegion],
    rulebase: &RuleBase,
) -> Vec<ExplainRecord> {
    let order: BTreeMap<&str, usize> = rulebase.output.sets.iter().enumerate().map(|(i, s)| (s.label.as_str(), i)).collect();
    regions
        .iter()
        .map(|r| {
            let inside = |t: i64| r.t_start <= t && t <= r.t_end;
            let mut label_counts: BTreeMap<(usize, &str), usize> = BTreeMap::new();
            for h in health.iter().filter(|h| inside(h.t)) {
                *label_counts.entry((order.get(h.label.as_str()).copied().unwrap_or(usize::MAX), &h.label)).or_default() += 1;
            }
            let mut label = String::new();
            let mut best = 0;
            for ((_, l), c) in label_counts {
                if c > best {
                    best = c;
                    label = l.to_string();
                }
            }

            let rows: Vec<&ActivationRecord> = activations.iter().filter(|a| inside(a.t)).collect();
            let mut means: Vec<(usize, f64)> = (0..rulebase.rules.len())
                .map(|k| {
                    let sum: f64 = rows.iter().filter_map(|a| a.activations.get(k)).sum();
                    (k, if rows.is_empty() { 0.0 } else { sum / rows.len() as f64 })
                })
                .filter(|(_, m)| *m > 0.0)
                .collect();
            means.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let top_rules = means
                .into_iter()
                .take(TOP_RULES)
                .map(|(index, mean_activation)| RuleActivation {
                    index,
                    rule: rulebase.rules[index].describe(),
                    mean_activation,
                })
                .collect();
            ExplainRecord { t_start: r.t_start, t_end: r.t_end, peak: r.peak, label, top_rules, groups: r.groups.clone() }
        })
        .collect()
}

/// Explains the regions of a detect output directory.
pub fn explain_dir(dir: &Path) -> Result<Vec<ExplainRecord>, PipelineError> {
    let health: Vec<HealthRecord> = read_lines(dir, HEALTH)?;
    let activations: Vec<ActivationRecord> = read_lines(dir, ACTIVATIONS)?;
    let regions: Vec<AnomalyRegion> = read_lines(dir, REGIONS)?;
    let rules: RuleFile = read_json(dir, RULEBASE)?;
    let rulebase = RuleBase::try_from(rules).map_err(input_err)?;
    Ok(run_explain(&health, &activations, &regions, &rulebase))
}

pub fn write_explain(dir: &Path, records: &[ExplainRecord]) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    write_lines(dir, EXPLAIN, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{default_hotspot, fault_trial, quiet, simulate, InjectionKind};

    #[test]
    fn period_inference() {
        let (l, mut s) = quiet(1);
        s.duration = 10;
        let t = simulate(&l, &s).unwrap();
        assert_eq!(infer_period(&t), Some(60));
        assert_eq!(infer_period(&LabeledTrace::default()), None);
    }

    #[test]
    fn explain_ranks_and_breaks_ties() {
        let names: Vec<String> = vec!["g0".into(), "g1".into()];
        let rb = RuleBase::default_for(&names);
        let inputs: BTreeMap<String, f64> = names.iter().map(|n| (n.clone(), 0.75)).collect();
        let a = assess_health(&rb, &inputs).unwrap();
        let health = vec![HealthRecord { t: 5, health: a.health, label: a.label.clone() }];
        let acts = vec![ActivationRecord { t: 5, activations: a.activations.clone() }];
        let region = AnomalyRegion { t_start: 5, t_end: 5, peak: 0.95, groups: names.clone() };
        let out = run_explain(&health, &acts, &[region], &rb);
        assert_eq!(out.len(), 1);
        // all-high consensus ties the per-group high rules and is declared first
        assert_eq!(out[0].top_rules[0].index, 3);
        assert!(out[0].top_rules[0].rule.contains("g0 IS high AND g1 IS high"));
        assert!(out[0].top_rules.windows(2).all(|w| w[0].mean_activation >= w[1].mean_activation));
        assert!(out[0].top_rules.windows(2).all(|w| w[0].mean_activation > w[1].mean_activation || w[0].index < w[1].index));
        assert!(run_explain(&health, &acts, &[], &rb).is_empty());
    }

    #[test]
    fn quiet_trace_has_no_regions() {
        let (l, s) = quiet(3);
        let t = simulate(&l, &s).unwrap();
        let out = run_detect(&PipelineConfig::default(), &t, &Resources::default()).unwrap();
        assert!(out.regions.is_empty(), "{:?}", out.regions);
        assert!(out.eval.is_some());
        // max aggregation over 39 inputs lets the most extreme group set the
        // level, so the series wanders but stays away from both ends
        let late: Vec<f64> = out.health.iter().skip(60).map(|h| h.health).collect();
        let mean = late.iter().sum::<f64>() / late.len() as f64;
        assert!((0.3..=0.6).contains(&mean), "mean {mean}");
        assert!(late.iter().all(|h| *h > 0.1 && *h < 0.9));
    }

    #[test]
    fn hotspot_trace_has_overlapping_region() {
        let (l, s) = default_hotspot(3);
        let inj = s.injections[0].clone();
        let t = simulate(&l, &s).unwrap();
        let out = run_detect(&PipelineConfig::default(), &t, &Resources::default()).unwrap();
        let t0 = crate::simulator::START_TIME + inj.start as i64 * 60;
        let t1 = t0 + (inj.duration as i64 - 1) * 60;
        assert!(out.regions.iter().any(|r| r.t_start <= t1 && r.t_end >= t0), "{:?}", out.regions);
    }

    #[test]
    fn single_sensor_bias_is_classified_without_region() {
        let (l, s, target) = fault_trial(InjectionKind::Bias, 4);
        let t = simulate(&l, &s).unwrap();
        let out = run_detect(&PipelineConfig::default(), &t, &Resources::default()).unwrap();
        let window_end = crate::simulator::START_TIME + 209 * 60;
        let rep = out.faults.iter().find(|f| f.sensor == target && f.t == window_end).unwrap();
        assert_eq!(rep.class, crate::faultclass::FaultClass::Bias);
        assert!(out.regions.is_empty());
    }
}
