//! Alarm lifecycle: rate thresholding, learned suppression from operator
//! feedback, and the alarm log.

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::{AnomalyEvent, AssumptionChange, Target};
use crate::features::Selector;
use crate::envelope::EStopDecision;

pub const DEFAULT_Q: f64 = 0.8;
pub const DEFAULT_N_MIN: u32 = 4;
pub const DEFAULT_HALF_LIFE_MS: i64 = 3_600_000;
pub const DEFAULT_ALARM_WINDOW_MS: i64 = 10_000;

/// Decayed confirm mass below this counts as zero.
const BETA_EPS: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlarmError {
    #[error("no alarm with id {0}")]
    UnknownAlarm(u64),
    #[error("alarm {0} was already resolved")]
    AlreadyResolved(u64),
    #[error("alarm {0} was never presented")]
    NotPresented(u64),
    #[error("invalid alarm desk config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Warning,
    Critical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlarmState {
    Raised,
    Presented,
    Dismissed,
    Confirmed,
    Suppressed,
    Escalated,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AlarmSignature {
    pub detector_id: String,
    pub target: String,
    pub kind: String,
}

impl AlarmSignature {
    pub fn new(detector_id: &str, target: &str, kind: &str) -> Self {
        Self {
            detector_id: detector_id.into(),
            target: target.into(),
            kind: kind.into(),
        }
    }

    pub fn key(&self) -> String {
        format!("{}|{}|{}", self.detector_id, self.target, self.kind)
    }
}

/// Raised when the recovery cycle guard gives up on automatic restores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Escalation {
    pub t_ms: i64,
    pub node: String,
    pub detector_id: String,
    pub kind: String,
    pub restores: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AlarmSource {
    Anomaly(AnomalyEvent),
    Assumption(AssumptionChange),
    Estop(EStopDecision),
    Escalation(Escalation),
}

impl AlarmSource {
    pub fn t_ms(&self) -> i64 {
        match self {
            AlarmSource::Anomaly(e) => e.t_ms,
            AlarmSource::Assumption(c) => c.t_ms,
            AlarmSource::Estop(d) => d.t_ms,
            AlarmSource::Escalation(e) => e.t_ms,
        }
    }

    pub fn signature(&self) -> AlarmSignature {
        match self {
            AlarmSource::Anomaly(e) => {
                let kind = serde_json::to_value(e.kind)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default();
                AlarmSignature::new(&e.detector_id, &e.target, &kind)
            }
            AlarmSource::Assumption(c) => AlarmSignature::new(&format!("assumption:{}", c.name), &c.target, "assumption"),
            AlarmSource::Estop(d) => {
                let dims: Vec<&str> = d.contributing.iter().map(|x| x.name.as_str()).collect();
                AlarmSignature::new("envelope", &dims.join(","), "estop")
            }
            AlarmSource::Escalation(e) => AlarmSignature::new("recovery", &e.node, "escalation"),
        }
    }

    /// Topics named by the source itself; e-stops and escalations name none.
    pub fn topics(&self) -> Vec<String> {
        match self {
            AlarmSource::Anomaly(e) => Target::parse(e.kind, &e.target).map(|t| t.topics()).unwrap_or_default(),
            AlarmSource::Assumption(c) => Selector::parse(&c.target).map(|s| s.topics()).unwrap_or_default(),
            _ => Vec::new(),
        }
    }

    pub fn severity(&self) -> Severity {
        match self {
            AlarmSource::Estop(_) | AlarmSource::Escalation(_) => Severity::Critical,
            _ => Severity::Warning,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub t_ms: i64,
    pub state: AlarmState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alarm {
    pub id: u64,
    pub t_ms: i64,
    pub signature: AlarmSignature,
    pub severity: Severity,
    pub state: AlarmState,
    pub source: AlarmSource,
    pub transitions: Vec<Transition>,
    /// Topics the alarm is about, used for matching against ground truth.
    #[serde(default)]
    pub topics: Vec<String>,
}

impl Alarm {
    fn mark(&mut self, t_ms: i64, state: AlarmState, reason: Option<String>) {
        self.state = state;
        self.transitions.push(Transition { t_ms, state, reason });
    }

    pub fn was_presented(&self) -> bool {
        self.transitions
            .iter()
            .any(|t| matches!(t.state, AlarmState::Presented | AlarmState::Escalated))
    }

    pub fn suppression_reason(&self) -> Option<&str> {
        self.transitions
            .iter()
            .find(|t| t.state == AlarmState::Suppressed)
            .and_then(|t| t.reason.as_deref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackAction {
    Dismiss,
    Confirm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlarmDeskConfig {
    pub q: f64,
    pub n_min: u32,
    pub half_life_ms: i64,
    pub window_ms: i64,
    pub h: u32,
    pub dynamic: bool,
    pub c: f64,
    pub h_min: u32,
    pub h_max: u32,
}

impl Default for AlarmDeskConfig {
    fn default() -> Self {
        Self {
            q: DEFAULT_Q,
            n_min: DEFAULT_N_MIN,
            half_life_ms: DEFAULT_HALF_LIFE_MS,
            window_ms: DEFAULT_ALARM_WINDOW_MS,
            h: 1,
            dynamic: false,
            c: 0.5,
            h_min: 1,
            h_max: 10,
        }
    }
}

impl AlarmDeskConfig {
    pub fn validate(&self) -> Result<(), AlarmError> {
        let bad = |m: &str| Err(AlarmError::InvalidConfig(m.into()));
        if !(0.0..1.0).contains(&self.q) {
            return bad("q must lie in [0, 1)");
        }
        if self.h < 1 || self.h_min < 1 || self.h_min > self.h_max {
            return bad("thresholds need 1 <= h and 1 <= h_min <= h_max");
        }
        if self.window_ms <= 0 || self.half_life_ms <= 0 {
            return bad("window and half-life must be positive");
        }
        if !(self.c.is_finite() && self.c >= 0.0) {
            return bad("c must be non-negative");
        }
        Ok(())
    }
}

/// Beta(1,1)-prior dismissal model for one signature.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SignatureModel {
    /// Decayed dismissal count α'.
    pub alpha: f64,
    /// Decayed confirm count β'.
    pub beta: f64,
    /// Feedback events since the last reset, undecayed.
    pub feedback_since_reset: u32,
    pub updated_ms: i64,
}

impl SignatureModel {
    fn decay_to(&mut self, t_ms: i64, half_life_ms: i64) {
        let dt = (t_ms - self.updated_ms).max(0) as f64;
        let f = 0.5f64.powf(dt / half_life_ms as f64);
        self.alpha *= f;
        self.beta *= f;
        if self.beta < BETA_EPS {
            self.beta = 0.0;
        }
        self.updated_ms = self.updated_ms.max(t_ms);
    }

    pub fn posterior_mean(&self) -> f64 {
        (1.0 + self.alpha) / (2.0 + self.alpha + self.beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChange {
    pub t_ms: i64,
    pub signature: AlarmSignature,
    pub from: u32,
    pub to: u32,
}

/// `clamp(round(c × trailing), h_min, h_max)`.
pub fn adapt_threshold(trailing_raises: usize, c: f64, h_min: u32, h_max: u32) -> u32 {
    let h = (c * trailing_raises as f64).round();
    (h.max(0.0) as u32).clamp(h_min, h_max)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct SignatureState {
    model: SignatureModel,
    raises: VecDeque<i64>,
    h: Option<u32>,
}

/// The alarm state machine. Every ingested event is kept in the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmDesk {
    cfg: AlarmDeskConfig,
    alarms: Vec<Alarm>,
    signatures: BTreeMap<String, SignatureState>,
    threshold_log: Vec<ThresholdChange>,
}

impl AlarmDesk {
    pub fn new(cfg: AlarmDeskConfig) -> Result<Self, AlarmError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            alarms: Vec::new(),
            signatures: BTreeMap::new(),
            threshold_log: Vec::new(),
        })
    }

    pub fn config(&self) -> &AlarmDeskConfig {
        &self.cfg
    }

    pub fn alarms(&self) -> &[Alarm] {
        &self.alarms
    }

    pub fn alarm(&self, id: u64) -> Option<&Alarm> {
        self.alarms.get(id as usize)
    }

    pub fn presented(&self) -> impl Iterator<Item = &Alarm> {
        self.alarms.iter().filter(|a| a.was_presented())
    }

    pub fn threshold_log(&self) -> &[ThresholdChange] {
        &self.threshold_log
    }

    pub fn model(&self, sig: &AlarmSignature) -> Option<&SignatureModel> {
        self.signatures.get(&sig.key()).map(|s| &s.model)
    }

    /// Whether the learned model would suppress `sig` at `t_ms`.
    pub fn is_suppressed(&self, sig: &AlarmSignature, t_ms: i64) -> bool {
        let Some(st) = self.signatures.get(&sig.key()) else {
            return false;
        };
        let mut m = st.model.clone();
        m.decay_to(t_ms, self.cfg.half_life_ms);
        self.suppressing(&m)
    }

    fn suppressing(&self, m: &SignatureModel) -> bool {
        m.posterior_mean() > self.cfg.q && m.feedback_since_reset >= self.cfg.n_min && m.beta == 0.0
    }

    pub fn ingest(&mut self, source: AlarmSource) -> &Alarm {
        let topics = source.topics();
        self.ingest_with_topics(source, topics)
    }

    pub fn ingest_with_topics(&mut self, source: AlarmSource, topics: Vec<String>) -> &Alarm {
        let t = source.t_ms();
        let signature = source.signature();
        let severity = source.severity();
        let id = self.alarms.len() as u64;
        let mut alarm = Alarm {
            id,
            t_ms: t,
            signature: signature.clone(),
            severity,
            state: AlarmState::Raised,
            source,
            transitions: vec![Transition {
                t_ms: t,
                state: AlarmState::Raised,
                reason: None,
            }],
            topics,
        };

        let cfg = self.cfg.clone();
        let st = self.signatures.entry(signature.key()).or_default();
        st.raises.push_back(t);
        while st.raises.front().is_some_and(|r| *r <= t - cfg.window_ms) {
            st.raises.pop_front();
        }
        let h = if cfg.dynamic {
            let new_h = adapt_threshold(st.raises.len(), cfg.c, cfg.h_min, cfg.h_max);
            let old = st.h.unwrap_or(cfg.h_min);
            if st.h != Some(new_h) {
                if st.h.is_some() {
                    tracing::debug!(signature = %signature.key(), from = old, to = new_h, "alarm threshold adapted");
                    self.threshold_log.push(ThresholdChange {
                        t_ms: t,
                        signature: signature.clone(),
                        from: old,
                        to: new_h,
                    });
                }
                st.h = Some(new_h);
            }
            new_h
        } else {
            cfg.h
        };
        st.model.decay_to(t, cfg.half_life_ms);
        let model = st.model.clone();
        let count = st.raises.len();

        if severity == Severity::Critical {
            let state = match alarm.source {
                AlarmSource::Escalation(_) => AlarmState::Escalated,
                _ => AlarmState::Presented,
            };
            alarm.mark(t, state, None);
        } else if (count as u32) < h {
            alarm.mark(t, AlarmState::Suppressed, Some(format!("rate_threshold: {count} of {h} raises in window")));
        } else if self.suppressing(&model) {
            alarm.mark(
                t,
                AlarmState::Suppressed,
                Some(format!("learned: posterior {:.3} > q {}", model.posterior_mean(), cfg.q)),
            );
        } else {
            alarm.mark(t, AlarmState::Presented, None);
        }
        self.alarms.push(alarm);
        &self.alarms[id as usize]
    }

    pub fn feedback(&mut self, id: u64, action: FeedbackAction, t_ms: i64) -> Result<&Alarm, AlarmError> {
        let alarm = self.alarms.get(id as usize).ok_or(AlarmError::UnknownAlarm(id))?;
        match alarm.state {
            AlarmState::Dismissed | AlarmState::Confirmed => return Err(AlarmError::AlreadyResolved(id)),
            AlarmState::Presented | AlarmState::Escalated => {}
            AlarmState::Raised | AlarmState::Suppressed => return Err(AlarmError::NotPresented(id)),
        }
        let key = alarm.signature.key();
        let critical = alarm.severity == Severity::Critical;
        let half_life = self.cfg.half_life_ms;
        let st = self.signatures.entry(key).or_default();
        st.model.decay_to(t_ms, half_life);
        let state = match action {
            FeedbackAction::Dismiss => {
                if !critical {
                    st.model.alpha += 1.0;
                    st.model.feedback_since_reset += 1;
                }
                AlarmState::Dismissed
            }
            FeedbackAction::Confirm => {
                st.model.beta += 1.0;
                st.model.alpha = 0.0;
                st.model.feedback_since_reset = 0;
                AlarmState::Confirmed
            }
        };
        let alarm = &mut self.alarms[id as usize];
        alarm.mark(t_ms, state, None);
        Ok(alarm)
    }

    /// Write every alarm with its transition history, one JSON object per line.
    pub fn write_log<W: Write>(&self, mut out: W) -> io::Result<()> {
        for a in &self.alarms {
            serde_json::to_writer(&mut out, a)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}
