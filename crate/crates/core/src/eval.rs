//! Scoring presented alarms against injection ground truth.
//!
//! An injection counts as detected iff at least one presented alarm falls in
//! `[start - W, end + W]` (W = one feature window) and names a topic the
//! injection perturbs. Presented alarms matching no detectable injection are
//! false alarms.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alarmdesk::Alarm;
use crate::capture::load_trace;
use crate::simbot::GroundTruthLabel;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{file}:{line}: {reason}")]
    MalformedInput { file: String, line: usize, reason: String },
    #[error("{file}: {source}")]
    Io { file: String, source: std::io::Error },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KindStats {
    pub injections: usize,
    pub detected: usize,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub injections: usize,
    pub detected: usize,
    /// `None` when there were no detectable injections.
    pub recall: Option<f64>,
    pub presented_alarms: usize,
    pub false_alarms: usize,
    pub duration_s: f64,
    pub false_alarm_rate_per_min: f64,
    pub per_kind: BTreeMap<String, KindStats>,
    /// Labels not meant to be detected (invalid data) that drew an alarm anyway.
    pub non_detectable_labels: usize,
    pub non_detectable_alarmed: usize,
}

impl EvalReport {
    /// Pool several runs: counts add up, rates are recomputed.
    pub fn combine<'a, I: IntoIterator<Item = &'a EvalReport>>(reports: I) -> EvalReport {
        let mut out = EvalReport::default();
        for r in reports {
            out.injections += r.injections;
            out.detected += r.detected;
            out.presented_alarms += r.presented_alarms;
            out.false_alarms += r.false_alarms;
            out.duration_s += r.duration_s;
            out.non_detectable_labels += r.non_detectable_labels;
            out.non_detectable_alarmed += r.non_detectable_alarmed;
            for (k, s) in &r.per_kind {
                let e = out.per_kind.entry(k.clone()).or_default();
                e.injections += s.injections;
                e.detected += s.detected;
            }
        }
        out.finish_rates();
        out
    }

    fn finish_rates(&mut self) {
        self.recall = ratio(self.detected, self.injections);
        for s in self.per_kind.values_mut() {
            s.recall = ratio(s.detected, s.injections);
        }
        self.false_alarm_rate_per_min = if self.duration_s > 0.0 {
            self.false_alarms as f64 / (self.duration_s / 60.0)
        } else {
            0.0
        };
    }

    pub fn table(&self) -> String {
        let pct = |r: Option<f64>| r.map_or("n/a".to_string(), |r| format!("{:.2}", r));
        let mut s = String::new();
        s.push_str(&format!("{:<24} {:>10} {:>9} {:>7}\n", "kind", "injections", "detected", "recall"));
        for (k, v) in &self.per_kind {
            s.push_str(&format!("{:<24} {:>10} {:>9} {:>7}\n", k, v.injections, v.detected, pct(v.recall)));
        }
        s.push_str(&format!("{:<24} {:>10} {:>9} {:>7}\n", "all", self.injections, self.detected, pct(self.recall)));
        s.push_str(&format!(
            "presented alarms {}, false alarms {} over {:.1} s ({:.3}/min)\n",
            self.presented_alarms, self.false_alarms, self.duration_s, self.false_alarm_rate_per_min
        ));
        if self.non_detectable_labels > 0 {
            s.push_str(&format!(
                "non-detectable labels alarmed: {} of {}\n",
                self.non_detectable_alarmed, self.non_detectable_labels
            ));
        }
        s
    }
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

fn alarm_topics(a: &Alarm) -> Vec<String> {
    if a.topics.is_empty() {
        a.source.topics()
    } else {
        a.topics.clone()
    }
}

fn matches(label: &GroundTruthLabel, alarm: &Alarm, window_ms: i64) -> bool {
    if alarm.t_ms < label.start_ms - window_ms || alarm.t_ms > label.end_ms + window_ms {
        return false;
    }
    let perturbed = label.kind.perturbed_topics();
    alarm_topics(alarm).iter().any(|t| perturbed.contains(&t.as_str()))
}

/// Score `alarms` (all of them; only presented ones count) against `labels`
/// over a run lasting `duration_ms`.
pub fn evaluate(labels: &[GroundTruthLabel], alarms: &[Alarm], duration_ms: i64, window_ms: i64) -> EvalReport {
    let presented: Vec<&Alarm> = alarms.iter().filter(|a| a.was_presented()).collect();
    let mut r = EvalReport {
        presented_alarms: presented.len(),
        duration_s: duration_ms.max(0) as f64 / 1000.0,
        ..Default::default()
    };
    for l in labels {
        let hit = presented.iter().any(|a| matches(l, a, window_ms));
        if l.expected_detection {
            r.injections += 1;
            let k = r.per_kind.entry(l.kind.as_str().to_string()).or_default();
            k.injections += 1;
            if hit {
                r.detected += 1;
                k.detected += 1;
            }
        } else {
            r.non_detectable_labels += 1;
            if hit {
                r.non_detectable_alarmed += 1;
            }
        }
    }
    r.false_alarms = presented
        .iter()
        .filter(|a| !labels.iter().any(|l| l.expected_detection && matches(l, a, window_ms)))
        .count();
    r.finish_rates();
    r
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        file: file.clone(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::MalformedInput {
                file: file.clone(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn read_labels(path: &Path) -> Result<Vec<GroundTruthLabel>, EvalError> {
    read_jsonl(path)
}

pub fn read_alarms(path: &Path) -> Result<Vec<Alarm>, EvalError> {
    read_jsonl(path)
}

/// Evaluate from the three run files. The run length is the trace's time span.
pub fn evaluate_files(trace: &Path, labels: &Path, alarms: &Path, window_ms: i64) -> Result<EvalReport, EvalError> {
    let records = load_trace(trace).map_err(|e| EvalError::MalformedInput {
        file: trace.display().to_string(),
        line: 0,
        reason: e.to_string(),
    })?;
    let duration = match (records.iter().map(|r| r.t_ms).min(), records.iter().map(|r| r.t_ms).max()) {
        (Some(a), Some(b)) => b - a,
        _ => 0,
    };
    Ok(evaluate(&read_labels(labels)?, &read_alarms(alarms)?, duration, window_ms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alarmdesk::{AlarmDesk, AlarmDeskConfig, AlarmSource};
    use crate::detectors::{AnomalyEvent, DetectorKind};
    use crate::simbot::InjectionKind;

    fn label(kind: InjectionKind, start: i64) -> GroundTruthLabel {
        GroundTruthLabel {
            start_ms: start,
            end_ms: start + 3000,
            kind,
            expected_detection: kind.expected_detection(),
        }
    }

    fn alarms_at(ts: &[(i64, &str)]) -> Vec<Alarm> {
        let mut desk = AlarmDesk::new(AlarmDeskConfig::default()).unwrap();
        for (t, target) in ts {
            desk.ingest(AlarmSource::Anomaly(AnomalyEvent {
                t_ms: *t,
                detector_id: "d".into(),
                target: target.to_string(),
                score: 9.0,
                kind: DetectorKind::Extreme,
                evidence: Default::default(),
            }));
        }
        desk.alarms().to_vec()
    }

    #[test]
    fn seven_of_ten() {
        let labels: Vec<_> = (0..10).map(|i| label(InjectionKind::JerkyDirection, i * 10_000)).collect();
        let hits: Vec<(i64, &str)> = (0..7).map(|i| (i * 10_000 + 1000, "std:/cmd_vel.angular")).collect();
        let r = evaluate(&labels, &alarms_at(&hits), 100_000, 1000);
        assert_eq!(r.recall, Some(0.7));
        assert_eq!(r.false_alarms, 0);
    }

    #[test]
    fn empty_run() {
        let r = evaluate(&[], &[], 60_000, 1000);
        assert_eq!(r.recall, None);
        assert_eq!(r.false_alarm_rate_per_min, 0.0);
        let v = serde_json::to_value(&r).unwrap();
        assert!(v["recall"].is_null());
    }

    #[test]
    fn topic_and_window_must_match() {
        let labels = vec![label(InjectionKind::ControllerDisconnect, 10_000)];
        // wrong topic, then too late, then a match at the window edge
        let r = evaluate(&labels, &alarms_at(&[(11_000, "mean:/odom.x"), (14_001, "rate:/cmd_vel")]), 60_000, 1000);
        assert_eq!(r.detected, 0);
        assert_eq!(r.false_alarms, 2);
        assert!((r.false_alarm_rate_per_min - 2.0).abs() < 1e-12);
        let r = evaluate(&labels, &alarms_at(&[(9_000, "rate:/cmd_vel")]), 60_000, 1000);
        assert_eq!(r.detected, 1);
    }

    #[test]
    fn splash_alarm_is_false() {
        let labels = vec![label(InjectionKind::SensorSplash, 10_000)];
        let r = evaluate(&labels, &alarms_at(&[(10_000, "mean:/scan_summary.range")]), 60_000, 1000);
        assert_eq!(r.non_detectable_alarmed, 1);
        assert_eq!(r.false_alarms, 1);
        assert_eq!(r.recall, None);
    }
}
