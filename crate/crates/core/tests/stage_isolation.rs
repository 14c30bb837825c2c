//! Downstream stages rerun from persisted artifacts reproduce the single-pass
//! run bit for bit.

use thermsentry_core::config::PipelineConfig;
use thermsentry_core::faultclass::FaultRecord;
use thermsentry_core::fusion::AnomalyRegion;
use thermsentry_core::fuzzyhealth::HealthRecord;
use thermsentry_core::grouping::VoteResult;
use thermsentry_core::pipeline::*;
use thermsentry_core::scorer::ScoreRecord;
use thermsentry_core::simulator::{default_hotspot, simulate};
use thermsentry_core::telemetry::align;

#[test]
fn rerun_from_artifacts_matches_single_pass() {
    let cfg = PipelineConfig::default();
    let (layout, scenario) = default_hotspot(11);
    let trace = simulate(&layout, &scenario).unwrap();
    let out = run_detect(&cfg, &trace, &Resources::default()).unwrap();
    assert!(!out.regions.is_empty());

    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &out).unwrap();

    let readings = load_trace(dir.path(), &cfg).unwrap();
    let table = align(&readings, infer_period(&readings).unwrap(), cfg.io.max_gap).unwrap();
    let votes: Vec<VoteResult> = read_lines(dir.path(), VOTES).unwrap();
    assert_eq!(votes, out.votes);

    let faults = stage_classify(&table, &out.groups, &votes, &cfg.faultclass).unwrap();
    assert_eq!(faults, read_lines::<FaultRecord>(dir.path(), FAULTS).unwrap());

    let aggregates = stage_aggregate(&table, &out.groups, &votes).unwrap();
    let scores = stage_score(&table.grid, &aggregates, &cfg.scorer).unwrap();
    assert_eq!(scores, out.scores);

    let persisted: Vec<ScoreRecord> = read_lines(dir.path(), SCORES).unwrap();
    let series = series_from_records(&table.grid, &persisted).unwrap();
    assert_eq!(series, out.scores);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    for (a, b) in series.iter().zip(&out.scores) {
        assert_eq!(bits(&a.scores), bits(&b.scores));
    }

    let fused = stage_fuse(&table.grid, &series, &out.model, cfg.fusion.thresholds().unwrap(), &cfg.fusion.region_params()).unwrap();
    assert_eq!(bits(&fused.posteriors), bits(&out.posteriors));
    assert_eq!(fused.regions, read_lines::<AnomalyRegion>(dir.path(), REGIONS).unwrap());

    let (health, activations) = stage_health(&table.grid, &series, &out.rulebase).unwrap();
    assert_eq!(health, read_lines::<HealthRecord>(dir.path(), HEALTH).unwrap());
    assert_eq!(activations, read_lines::<ActivationRecord>(dir.path(), ACTIVATIONS).unwrap());

    let explained = explain_dir(dir.path()).unwrap();
    assert_eq!(explained, run_explain(&out.health, &out.activations, &out.regions, &out.rulebase));
    assert_eq!(explained.len(), out.regions.len());
}

#[test]
fn eval_from_directory_matches_in_memory() {
    let cfg = PipelineConfig::default();
    let (layout, scenario) = default_hotspot(12);
    let trace = simulate(&layout, &scenario).unwrap();
    let out = run_detect(&cfg, &trace, &Resources::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &out).unwrap();
    assert_eq!(run_eval(dir.path(), &cfg).unwrap(), out.eval.unwrap());
}

#[test]
fn fault_flags_written_onto_readings() {
    let cfg = PipelineConfig::default();
    let (layout, scenario, target) = thermsentry_core::simulator::fault_trial(thermsentry_core::simulator::InjectionKind::Bias, 2);
    let trace = simulate(&layout, &scenario).unwrap();
    let out = run_detect(&cfg, &trace, &Resources::default()).unwrap();
    let flagged: Vec<_> = out.readings.readings.iter().filter(|r| r.fault_flag == Some(true)).collect();
    assert!(!flagged.is_empty());
    assert!(flagged.iter().filter(|r| r.sensor_id == target).count() >= 50);
    assert!(flagged.iter().all(|r| r.residual.is_some_and(|d| d > 0.0)));
    assert!(out.readings.readings.iter().all(|r| r.fault_flag.is_some()));
}
