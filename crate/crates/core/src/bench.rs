//! The shipped benchmark suite: five seeded paths, each carrying one
//! injection of every detectable kind, scored with the default stack.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::alarmdesk::Alarm;
use crate::capture::MemorySink;
use crate::eval::{evaluate, EvalReport};
use crate::simbot::{plan_injections, GroundTruthLabel, InjectionKind, Scenario};
use crate::system::{MonitorConfig, System, SystemError};

pub const SCENARIO_FILES: [(&str, &str); 5] = [
    ("square", include_str!("../../../bench/square.yaml")),
    ("figure8", include_str!("../../../bench/figure8.yaml")),
    ("zigzag", include_str!("../../../bench/zigzag.yaml")),
    ("corridor", include_str!("../../../bench/corridor.yaml")),
    ("pentagon", include_str!("../../../bench/pentagon.yaml")),
];

pub const MONITOR_YAML: &str = include_str!("../../../bench/monitor.yaml");

pub fn monitor_config() -> MonitorConfig {
    MonitorConfig::from_yaml(MONITOR_YAML).expect("shipped monitor config parses")
}

pub fn scenarios() -> Vec<Scenario> {
    SCENARIO_FILES
        .iter()
        .map(|(_, y)| Scenario::from_yaml(y).expect("shipped scenario parses"))
        .collect()
}

/// The same paths with only invalid-data (splash) injections.
pub fn splash_scenarios() -> Vec<Scenario> {
    scenarios()
        .into_iter()
        .map(|mut s| {
            s.injections = plan_injections(&[InjectionKind::SensorSplash; 3], s.duration_ms, 30_000, s.seed);
            s
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseResult {
    pub name: String,
    pub report: EvalReport,
    pub labels: Vec<GroundTruthLabel>,
    pub alarms: Vec<Alarm>,
    pub validity_events: u64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
    pub overall: EvalReport,
    pub wall_s: f64,
}

/// Run one scenario through the full stack and score it.
pub fn run_case(scenario: &Scenario, cfg: &MonitorConfig) -> Result<CaseResult, SystemError> {
    let started = Instant::now();
    let mut sys = System::with_scenario(cfg.clone(), scenario.clone(), None::<MemorySink>)?;
    sys.run_to_end()?;
    let labels = sys.labels();
    let alarms = sys.desk().alarms().to_vec();
    let report = evaluate(&labels, &alarms, scenario.duration_ms, cfg.features.window_ms);
    Ok(CaseResult {
        name: scenario.name.clone(),
        report,
        labels,
        alarms,
        validity_events: sys.counters().validity_by_topic.values().sum(),
        wall_s: started.elapsed().as_secs_f64(),
    })
}

pub fn run_suite(scenarios: &[Scenario], cfg: &MonitorConfig) -> Result<SuiteReport, SystemError> {
    let started = Instant::now();
    let cases = scenarios.iter().map(|s| run_case(s, cfg)).collect::<Result<Vec<_>, _>>()?;
    let overall = EvalReport::combine(cases.iter().map(|c| &c.report));
    Ok(SuiteReport {
        cases,
        overall,
        wall_s: started.elapsed().as_secs_f64(),
    })
}
