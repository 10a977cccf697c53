//! The assembled runtime: simulator, bus, capture and the full detection
//! stack, advanced one simulator tick at a time.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::alarmdesk::{Alarm, AlarmDesk, AlarmDeskConfig, AlarmError, AlarmSource, AlarmState, FeedbackAction};
use crate::capture::{
    infer_schemas, replay, start_capture, CaptureConfig, CaptureError, CaptureHandle, CaptureStats, ReplayStats, TraceRecord, TraceSink,
};
use crate::detectors::{AssumptionSet, AssumptionSpec, Detector, DetectorConfig, DetectorError, GroupValues};
use crate::envelope::{Envelope, EnvelopeError, EnvelopeMonitor, RiskModel, RiskReport};
use crate::features::{FeatureConfig, FeatureError, FeatureFrame, FeatureState, PartialAggregate};
use crate::hierarchy::{apply_grouping, build_graph, group_values, GroupAttribute, GroupPredicate, GroupingScheme, HierarchyError, SystemGraph};
use crate::msgbus::{Bus, BusError, Message, Subscription, Validity, WILDCARD};
use crate::recovery::{
    capture_state, restore_state, CycleGuard, FaultSignature, HealthTracker, Recovery, RecoveryError, RestoreReport, SafeModeReason,
    SafeModeReport, Snapshot, SnapshotStore,
};
use crate::simbot::{InjectionKind, SafeLimits, Scenario, SimError, Simulator, ODOM};

pub const DETECTORS_NODE: &str = "detectors";
pub const ENVELOPE_NODE: &str = "envelope";
pub const SIMBOT_NODE: &str = "simbot";
const MONITOR_NODE: &str = "monitor";
const MONITOR_QUEUE: usize = 1 << 20;
const RECENT_FRAMES: usize = 600;
const STREAM_CAP: usize = 20_000;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
    #[error(transparent)]
    Alarm(#[from] AlarmError),
    #[error("already in safe mode")]
    AlreadySafe,
    #[error("not in safe mode")]
    NotSafe,
    #[error("no scenario is running")]
    NoScenario,
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("invalid monitor config: {0}")]
    InvalidConfig(String),
}

fn default_true() -> bool {
    true
}

fn default_snapshot_every() -> u32 {
    5
}

fn default_health_window() -> i64 {
    crate::recovery::DEFAULT_HEALTH_WINDOW_MS
}

fn default_capture_depth() -> usize {
    1 << 16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub detectors: Vec<DetectorConfig>,
    #[serde(default)]
    pub assumptions: Vec<AssumptionSpec>,
    #[serde(default)]
    pub envelope: Option<Envelope>,
    #[serde(default)]
    pub risk: RiskModel,
    #[serde(default)]
    pub alarms: AlarmDeskConfig,
    #[serde(default = "default_true")]
    pub validity_filter: bool,
    #[serde(default)]
    pub groups: Vec<GroupPredicate>,
    #[serde(default)]
    pub group_attributes: Vec<GroupAttribute>,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every_windows: u32,
    #[serde(default = "default_health_window")]
    pub health_window_ms: i64,
    /// Restore the detector node from its last snapshot on every anomaly.
    #[serde(default)]
    pub auto_restore: bool,
    #[serde(default)]
    pub cycle_guard: Option<(usize, i64)>,
    #[serde(default = "default_true")]
    pub safe_mode_on_estop: bool,
    #[serde(default = "default_capture_depth")]
    pub capture_queue_depth: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            detectors: Vec::new(),
            assumptions: Vec::new(),
            envelope: None,
            risk: RiskModel::default(),
            alarms: AlarmDeskConfig::default(),
            validity_filter: true,
            groups: Vec::new(),
            group_attributes: Vec::new(),
            snapshot_every_windows: default_snapshot_every(),
            health_window_ms: default_health_window(),
            auto_restore: false,
            cycle_guard: None,
            safe_mode_on_estop: true,
            capture_queue_depth: default_capture_depth(),
        }
    }
}

impl MonitorConfig {
    pub fn from_yaml(text: &str) -> Result<Self, SystemError> {
        serde_yaml::from_str(text).map_err(|e| SystemError::InvalidConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub seq: u64,
    pub channel: String,
    pub t_ms: i64,
    pub data: Value,
}

/// Ordered event log that stream clients read from by sequence cursor.
#[derive(Debug, Clone, Default)]
pub struct EventLog {
    next_seq: u64,
    events: VecDeque<StreamEvent>,
}

impl EventLog {
    pub fn push(&mut self, channel: &str, t_ms: i64, data: Value) -> u64 {
        self.next_seq += 1;
        self.events.push_back(StreamEvent {
            seq: self.next_seq,
            channel: channel.to_string(),
            t_ms,
            data,
        });
        while self.events.len() > STREAM_CAP {
            self.events.pop_front();
        }
        self.next_seq
    }

    /// Events after `cursor` on any of `channels` (all when empty), oldest first.
    pub fn since(&self, cursor: u64, channels: &[String]) -> Vec<StreamEvent> {
        self.events
            .iter()
            .filter(|e| e.seq > cursor && (channels.is_empty() || channels.iter().any(|c| *c == e.channel)))
            .cloned()
            .collect()
    }

    pub fn last_seq(&self) -> u64 {
        self.next_seq
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCounters {
    pub messages: u64,
    pub filtered_invalid: u64,
    pub frames: u64,
    pub anomaly_events: u64,
    pub assumption_changes: u64,
    pub estops: u64,
    pub snapshots: u64,
    pub snapshots_refused: u64,
    pub auto_restores: u64,
    pub validity_by_topic: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetectorNodeState {
    detectors: Vec<Detector>,
    assumptions: AssumptionSet,
}

pub struct System {
    cfg: MonitorConfig,
    bus: Bus,
    sim: Option<Simulator>,
    sub: Subscription,
    capture: Option<CaptureHandle>,
    features: FeatureState,
    detectors: Vec<Detector>,
    assumptions: AssumptionSet,
    envelope: Option<EnvelopeMonitor>,
    desk: AlarmDesk,
    recovery: Recovery,
    safe: crate::recovery::SafeMode,
    scheme: Option<GroupingScheme>,
    frames: VecDeque<FeatureFrame>,
    stream: EventLog,
    counters: RunCounters,
    windows_since_snapshot: u32,
    last_epoch: u64,
    now_ms: i64,
    scenario_stopped: bool,
    final_capture: Option<CaptureStats>,
}

impl System {
    /// A system with no scenario attached: bus and detection stack only.
    pub fn new(cfg: MonitorConfig) -> Result<Self, SystemError> {
        Self::build(cfg, Bus::new(), SnapshotStore::in_memory())
    }

    pub fn with_snapshot_store(cfg: MonitorConfig, store: SnapshotStore) -> Result<Self, SystemError> {
        Self::build(cfg, Bus::new(), store)
    }

    fn build(cfg: MonitorConfig, bus: Bus, store: SnapshotStore) -> Result<Self, SystemError> {
        let features = FeatureState::new(cfg.features.clone())?;
        let detectors = cfg.detectors.iter().cloned().map(Detector::new).collect::<Result<Vec<_>, _>>()?;
        let assumptions = AssumptionSet::new(cfg.assumptions.clone())?;
        for d in &cfg.detectors {
            if let Some(r) = d.requires.iter().find(|r| !cfg.assumptions.iter().any(|a| &a.name == *r)) {
                return Err(SystemError::InvalidConfig(format!("detector {} requires unknown assumption {r}", d.id)));
            }
        }
        let envelope = match &cfg.envelope {
            Some(env) => Some(EnvelopeMonitor::new(env.clone(), cfg.risk.clone())?),
            None => None,
        };
        let desk = AlarmDesk::new(cfg.alarms.clone())?;
        let guard = match cfg.cycle_guard {
            Some((k, w)) => CycleGuard::new(k, w),
            None => CycleGuard::default(),
        };
        let recovery = Recovery::new(store, HealthTracker::new(cfg.health_window_ms, 0), guard);
        bus.register_node(MONITOR_NODE, ["monitor"]);
        let sub = bus.subscribe_with(MONITOR_NODE, WILDCARD, MONITOR_QUEUE, true)?;
        Ok(Self {
            cfg,
            bus,
            sim: None,
            sub,
            capture: None,
            features,
            detectors,
            assumptions,
            envelope,
            desk,
            recovery,
            safe: Default::default(),
            scheme: None,
            frames: VecDeque::new(),
            stream: EventLog::default(),
            counters: RunCounters::default(),
            windows_since_snapshot: 0,
            last_epoch: 0,
            now_ms: 0,
            scenario_stopped: false,
            final_capture: None,
        })
    }

    /// Attach a scenario and start capturing into `sink`.
    pub fn with_scenario<S: TraceSink>(cfg: MonitorConfig, scenario: Scenario, sink: Option<S>) -> Result<Self, SystemError> {
        let mut sys = Self::new(cfg)?;
        sys.attach(scenario, sink)?;
        Ok(sys)
    }

    pub fn attach<S: TraceSink>(&mut self, scenario: Scenario, sink: Option<S>) -> Result<(), SystemError> {
        if let Some(sink) = sink {
            let cap = start_capture(
                &self.bus,
                sink,
                CaptureConfig {
                    queue_depth: self.cfg.capture_queue_depth,
                    ..Default::default()
                },
            )?;
            self.capture = Some(cap);
        }
        let sim = Simulator::new(scenario, &self.bus)?;
        for t in self.bus.directory().topics.keys() {
            self.features.register_topic(t);
        }
        self.features.start_at(0);
        self.sim = Some(sim);
        self.scenario_stopped = false;
        self.refresh_grouping()?;
        self.stream.push("status", 0, json!({"scenario": "started"}));
        Ok(())
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.cfg
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn simulator(&self) -> Option<&Simulator> {
        self.sim.as_ref()
    }

    pub fn now_ms(&self) -> i64 {
        self.now_ms
    }

    pub fn desk(&self) -> &AlarmDesk {
        &self.desk
    }

    pub fn recovery(&self) -> &Recovery {
        &self.recovery
    }

    pub fn detectors(&self) -> &[Detector] {
        &self.detectors
    }

    pub fn envelope(&self) -> Option<&EnvelopeMonitor> {
        self.envelope.as_ref()
    }

    pub fn counters(&self) -> &RunCounters {
        &self.counters
    }

    pub fn stream(&self) -> &EventLog {
        &self.stream
    }

    pub fn is_safe(&self) -> bool {
        self.safe.is_active()
    }

    pub fn safe_mode(&self) -> &crate::recovery::SafeMode {
        &self.safe
    }

    pub fn capture_stats(&self) -> Option<CaptureStats> {
        self.capture.as_ref().map(|c| c.stats())
    }

    pub fn is_running(&self) -> bool {
        !self.scenario_stopped && self.sim.as_ref().is_some_and(|s| s.is_running())
    }

    fn refresh_grouping(&mut self) -> Result<(), SystemError> {
        if self.cfg.groups.is_empty() {
            return Ok(());
        }
        let graph = build_graph(&self.bus.directory());
        self.scheme = Some(apply_grouping(&graph, &self.cfg.groups)?);
        Ok(())
    }

    /// Advance one simulator tick and process everything it published.
    /// Returns `false` once the scenario is over.
    pub fn step(&mut self) -> Result<bool, SystemError> {
        let running = match (&mut self.sim, self.scenario_stopped) {
            (Some(sim), false) => {
                let r = sim.step()?;
                self.now_ms = sim.now_ms();
                r
            }
            _ => false,
        };
        self.pump()?;
        let closed = self.features.advance_to(self.now_ms);
        self.close_partials(closed)?;
        let epoch = self.bus.epoch();
        if epoch != self.last_epoch {
            self.last_epoch = epoch;
            self.refresh_grouping()?;
            let g = self.graph();
            self.stream.push("graph", self.now_ms, serde_json::to_value(g).unwrap_or(Value::Null));
        }
        if !running && !self.scenario_stopped && self.sim.is_some() {
            self.scenario_stopped = true;
            self.stream.push("status", self.now_ms, json!({"scenario": "finished"}));
        }
        Ok(running)
    }

    /// Process whatever is queued on the monitor subscription.
    pub fn pump(&mut self) -> Result<(), SystemError> {
        for msg in self.sub.drain() {
            self.process_message(&msg)?;
        }
        Ok(())
    }

    /// Run until the scenario ends, then close the last windows.
    pub fn run_to_end(&mut self) -> Result<(), SystemError> {
        while self.step()? {}
        self.finish()
    }

    /// Close open windows and stop capture. Idempotent.
    pub fn finish(&mut self) -> Result<(), SystemError> {
        self.pump()?;
        let closed = self.features.flush();
        self.close_partials(closed)?;
        if let Some(cap) = self.capture.take() {
            let stats = cap.stop();
            self.stream.push("status", self.now_ms, json!({"capture": stats}));
            self.final_capture = Some(stats);
        }
        Ok(())
    }

    /// Feed a recorded trace through the detection stack in recorded order,
    /// then close the last windows. Validity flags are kept, so the filter
    /// behaves as it did live.
    pub fn replay(&mut self, records: &[TraceRecord]) -> Result<ReplayStats, SystemError> {
        let Some(first) = records.first() else {
            return Ok(ReplayStats::default());
        };
        for s in infer_schemas(records) {
            self.features.register_topic(&s.name);
        }
        self.features.start_at(first.t_ms);
        let bus = self.bus.clone();
        let mut failed = None;
        let stats = replay(records, &bus, &[], |r| {
            if failed.is_some() {
                return;
            }
            let res = self.pump().and_then(|_| {
                self.now_ms = self.now_ms.max(r.t_ms);
                let closed = self.features.advance_to(r.t_ms);
                self.close_partials(closed)
            });
            failed = res.err();
        })?;
        if let Some(e) = failed {
            return Err(e);
        }
        self.refresh_grouping()?;
        self.finish()?;
        Ok(stats)
    }

    pub fn final_capture_stats(&self) -> Option<&CaptureStats> {
        self.final_capture.as_ref()
    }

    fn process_message(&mut self, msg: &Message) -> Result<(), SystemError> {
        self.counters.messages += 1;
        self.now_ms = self.now_ms.max(msg.t_ms);
        if msg.validity != Validity::Ok {
            *self.counters.validity_by_topic.entry(msg.topic.clone()).or_insert(0) += 1;
            if self.cfg.validity_filter {
                self.counters.filtered_invalid += 1;
                return Ok(());
            }
        }
        if let Some(env) = &mut self.envelope {
            if let Some(decision) = env.observe(msg)? {
                self.counters.estops += 1;
                self.recovery.health.note_anomaly(ENVELOPE_NODE, msg.t_ms);
                let topics = decision
                    .contributing
                    .iter()
                    .filter_map(|d| env.envelope().dims.iter().find(|x| x.name == d.name))
                    .filter_map(|d| d.source.as_deref().and_then(|s| s.rsplit_once('.')).map(|(t, _)| t.to_string()))
                    .collect();
                let alarm = self.desk.ingest_with_topics(AlarmSource::Estop(decision), topics).clone();
                self.push_alarm(&alarm);
                if self.cfg.safe_mode_on_estop && !self.safe.is_active() {
                    self.enter_safe_mode(SafeModeReason::Estop)?;
                }
            }
        }
        let closed = self.features.ingest(msg)?;
        self.close_partials(closed)
    }

    fn close_partials(&mut self, closed: Vec<PartialAggregate>) -> Result<(), SystemError> {
        for p in closed {
            let frame = p.finalize()?;
            self.process_frame(frame)?;
        }
        Ok(())
    }

    fn process_frame(&mut self, frame: FeatureFrame) -> Result<(), SystemError> {
        self.counters.frames += 1;
        let t = frame.window.start_ms;
        if !self.safe.is_active() {
            let groups = match &self.scheme {
                Some(s) => group_values(&frame, s, &self.cfg.group_attributes),
                None => GroupValues::new(),
            };
            let mut events = Vec::new();
            let mut changes = self.assumptions.check(&frame);
            for d in &mut self.detectors {
                if !self.assumptions.all_hold(&d.config().requires) {
                    continue;
                }
                let out = d.process(&frame, &groups);
                events.extend(out.event);
                changes.extend(out.change);
            }
            for c in changes {
                self.counters.assumption_changes += 1;
                let alarm = self.desk.ingest(AlarmSource::Assumption(c)).clone();
                self.push_alarm(&alarm);
            }
            let mut restore_for = None;
            for e in events {
                self.counters.anomaly_events += 1;
                self.recovery.health.note_anomaly(DETECTORS_NODE, e.t_ms);
                self.recovery.health.note_anomaly(SIMBOT_NODE, e.t_ms);
                if self.cfg.auto_restore && restore_for.is_none() {
                    restore_for = Some(FaultSignature::new(DETECTORS_NODE, &e.detector_id, &format!("{:?}", e.kind).to_lowercase()));
                }
                let alarm = self.desk.ingest(AlarmSource::Anomaly(e)).clone();
                self.push_alarm(&alarm);
            }
            if let Some(sig) = restore_for {
                self.auto_restore(&sig, frame.window.end_ms)?;
            }
            self.windows_since_snapshot += 1;
            if self.cfg.snapshot_every_windows > 0 && self.windows_since_snapshot >= self.cfg.snapshot_every_windows {
                self.windows_since_snapshot = 0;
                self.periodic_snapshots(frame.window.end_ms)?;
            }
        }
        if let Some(env) = &self.envelope {
            if let Some(r) = env.accumulator().last_report() {
                self.stream.push(
                    "risk",
                    frame.window.end_ms,
                    json!({"risk": finite(r.risk), "accumulated": finite(env.accumulator().accumulated()), "report": r}),
                );
            }
        }
        self.stream.push("frames", t, serde_json::to_value(&frame).unwrap_or(Value::Null));
        self.frames.push_back(frame);
        while self.frames.len() > RECENT_FRAMES {
            self.frames.pop_front();
        }
        Ok(())
    }

    fn auto_restore(&mut self, sig: &FaultSignature, t_ms: i64) -> Result<(), SystemError> {
        match self.recovery.restore(DETECTORS_NODE, sig, t_ms) {
            Ok((snap, _)) => {
                self.apply_snapshot(&snap)?;
                self.counters.auto_restores += 1;
            }
            Err(RecoveryError::NoSnapshot(_)) => {}
            Err(RecoveryError::CycleGuardTripped { escalation, .. }) => {
                if let Some(esc) = escalation {
                    let alarm = self.desk.ingest(AlarmSource::Escalation(esc)).clone();
                    self.push_alarm(&alarm);
                    if !self.safe.is_active() {
                        self.enter_safe_mode(SafeModeReason::Escalation)?;
                    }
                }
            }
            Err(e) => return Err(e.into()),
        }
        Ok(())
    }

    fn periodic_snapshots(&mut self, t_ms: i64) -> Result<(), SystemError> {
        for node in [DETECTORS_NODE, ENVELOPE_NODE, SIMBOT_NODE] {
            match self.snapshot(node, t_ms) {
                Ok(_) => self.counters.snapshots += 1,
                Err(SystemError::Recovery(RecoveryError::NodeUnhealthy { .. })) => self.counters.snapshots_refused += 1,
                Err(SystemError::UnknownNode(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    fn node_state(&self, node: &str) -> Result<Value, SystemError> {
        let v = match node {
            DETECTORS_NODE => capture_state(&DetectorNodeState {
                detectors: self.detectors.clone(),
                assumptions: self.assumptions.clone(),
            })?,
            ENVELOPE_NODE => match &self.envelope {
                Some(e) => capture_state(e.accumulator())?,
                None => return Err(SystemError::UnknownNode(node.into())),
            },
            SIMBOT_NODE => match &self.sim {
                Some(s) => capture_state(&s.controller_state())?,
                None => return Err(SystemError::UnknownNode(node.into())),
            },
            _ => return Err(SystemError::UnknownNode(node.into())),
        };
        Ok(v)
    }

    pub fn snapshot(&mut self, node: &str, t_ms: i64) -> Result<Snapshot, SystemError> {
        let state = self.node_state(node)?;
        Ok(self.recovery.take_snapshot(node, t_ms, state)?)
    }

    /// Snapshot at the current time (between ticks, so at a window-consistent point).
    pub fn snapshot_now(&mut self, node: &str) -> Result<Snapshot, SystemError> {
        self.snapshot(node, self.now_ms)
    }

    fn apply_snapshot(&mut self, snap: &Snapshot) -> Result<(), SystemError> {
        match snap.node.as_str() {
            DETECTORS_NODE => {
                let st: DetectorNodeState = restore_state(&snap.state)?;
                self.detectors = st.detectors;
                self.assumptions = st.assumptions;
            }
            ENVELOPE_NODE => {
                let acc = restore_state(&snap.state)?;
                if let Some(e) = &mut self.envelope {
                    *e.accumulator_mut() = acc;
                }
            }
            SIMBOT_NODE => {
                let st = restore_state(&snap.state)?;
                if let Some(s) = &mut self.sim {
                    s.restore_controller_state(st);
                }
            }
            other => return Err(SystemError::UnknownNode(other.into())),
        }
        Ok(())
    }

    /// Operator-initiated restore, accounted against the cycle guard like any other.
    pub fn restore(&mut self, node: &str) -> Result<RestoreReport, SystemError> {
        self.node_state(node)?;
        let sig = FaultSignature::new(node, "operator", "manual");
        let (snap, report) = self.recovery.restore(node, &sig, self.now_ms)?;
        self.apply_snapshot(&snap)?;
        Ok(report)
    }

    fn safe_limits(&self) -> Option<[f64; 2]> {
        let env = self.envelope.as_ref()?;
        let speed = env
            .envelope()
            .dims
            .iter()
            .find(|d| d.name == "speed")
            .or_else(|| env.envelope().dims.iter().find(|d| d.source.as_deref() == Some(&format!("{ODOM}.linear"))))?;
        Some([speed.n_lo.min(0.0), speed.n_hi])
    }

    pub fn enter_safe_mode(&mut self, reason: SafeModeReason) -> Result<SafeModeReport, SystemError> {
        let clamp = self.safe_limits();
        let paused = self.detectors.iter().map(|d| d.id().to_string()).collect();
        let report = self
            .safe
            .enter(self.now_ms, reason, clamp, paused)
            .ok_or(SystemError::AlreadySafe)?;
        if let (Some(sim), Some(c)) = (&mut self.sim, clamp) {
            sim.set_safe_mode(Some(SafeLimits { linear: c, angular: None }));
        }
        tracing::info!(?reason, "safe mode entered");
        self.stream.push("status", self.now_ms, json!({"mode": "safe", "report": report}));
        Ok(report)
    }

    /// Leave safe mode; detectors warm-restart from their last snapshot.
    pub fn exit_safe_mode(&mut self) -> Result<SafeModeReport, SystemError> {
        let report = self.safe.exit(self.now_ms).ok_or(SystemError::NotSafe)?;
        if let Some(sim) = &mut self.sim {
            sim.set_safe_mode(None);
        }
        if let Some(snap) = self.recovery.store.latest(DETECTORS_NODE).cloned() {
            self.apply_snapshot(&snap)?;
        }
        self.stream.push("status", self.now_ms, json!({"mode": "full"}));
        Ok(report)
    }

    /// Operator e-stop: straight to safe mode, with a critical alarm.
    pub fn estop(&mut self) -> Result<SafeModeReport, SystemError> {
        if self.safe.is_active() {
            return Err(SystemError::AlreadySafe);
        }
        let report = self.enter_safe_mode(SafeModeReason::Operator)?;
        let decision = crate::envelope::EStopDecision {
            t_ms: self.now_ms,
            accumulated_risk: self.envelope.as_ref().map_or(0.0, |e| e.accumulator().accumulated()),
            triggering_rule: crate::envelope::TriggerRule::Integral,
            contributing: vec![],
            out_of_envelope: vec![],
        };
        self.counters.estops += 1;
        let alarm = self.desk.ingest(AlarmSource::Estop(decision)).clone();
        self.push_alarm(&alarm);
        Ok(report)
    }

    pub fn inject(&mut self, kind: InjectionKind, magnitude: Option<f64>, duration_ms: Option<i64>) -> Result<usize, SystemError> {
        let sim = self.sim.as_mut().ok_or(SystemError::NoScenario)?;
        let m = magnitude.unwrap_or(kind.default_magnitude());
        let d = duration_ms.unwrap_or(kind.default_duration_ms());
        Ok(sim.inject_live(kind, m, d)?)
    }

    pub fn stop_scenario(&mut self) -> Result<(), SystemError> {
        if self.sim.is_none() || self.scenario_stopped {
            return Err(SystemError::NoScenario);
        }
        self.scenario_stopped = true;
        self.stream.push("status", self.now_ms, json!({"scenario": "stopped"}));
        self.finish()
    }

    pub fn feedback(&mut self, id: u64, action: FeedbackAction) -> Result<Alarm, SystemError> {
        let alarm = self.desk.feedback(id, action, self.now_ms)?.clone();
        self.push_alarm(&alarm);
        Ok(alarm)
    }

    fn push_alarm(&mut self, alarm: &Alarm) {
        let suppressed = self.desk.is_suppressed(&alarm.signature, self.now_ms);
        let mut v = serde_json::to_value(alarm).unwrap_or(Value::Null);
        v["signature_suppressed"] = json!(suppressed);
        self.stream.push("alarms", alarm.t_ms, v);
    }

    pub fn alarms(&self, state: Option<AlarmState>) -> Vec<&Alarm> {
        self.desk.alarms().iter().filter(|a| state.is_none_or(|s| a.state == s)).collect()
    }

    pub fn frames(&self, topic: Option<&str>) -> Vec<&FeatureFrame> {
        self.frames
            .iter()
            .filter(|f| topic.is_none_or(|t| f.per_topic_rate.contains_key(t)))
            .collect()
    }

    pub fn graph(&self) -> GraphView {
        GraphView {
            graph: build_graph(&self.bus.directory()),
            groups: self.scheme.clone(),
        }
    }

    pub fn risk(&self) -> Option<RiskView> {
        let env = self.envelope.as_ref()?;
        Some(RiskView {
            accumulated: finite(env.accumulator().accumulated()),
            r_star: env.accumulator().model().r_star,
            fired: env.accumulator().fired(),
            last: env.accumulator().last_report().cloned(),
        })
    }

    pub fn health(&self) -> Value {
        json!({
            "status": "ok",
            "mode": if self.safe.is_active() { "safe" } else { "full" },
            "t_ms": self.now_ms,
            "scenario": match (&self.sim, self.scenario_stopped) {
                (None, _) => "none",
                (Some(_), true) => "stopped",
                (Some(_), false) => "running",
            },
        })
    }

    /// Profiling view: bus counters, queue depths, drops, capture and pipeline stats.
    pub fn metrics(&self) -> Value {
        let rates = self.frames.back().map(|f| f.per_topic_rate.clone()).unwrap_or_default();
        let mut node_rates: BTreeMap<String, f64> = BTreeMap::new();
        let dir = self.bus.directory();
        for (topic, pubs) in &dir.publishers {
            for p in pubs {
                *node_rates.entry(p.clone()).or_insert(0.0) += rates.get(topic).copied().unwrap_or(0.0);
            }
        }
        json!({
            "t_ms": self.now_ms,
            "bus": self.bus.stats(),
            "topic_rates": rates,
            "node_rates": node_rates,
            "capture": self.capture.as_ref().map(|c| c.stats()).or(self.final_capture.clone()),
            "pipeline": self.counters,
            "alarms": {
                "total": self.desk.alarms().len(),
                "presented": self.desk.presented().count(),
            },
        })
    }

    /// Everything needed to score the run.
    pub fn labels(&self) -> Vec<crate::simbot::GroundTruthLabel> {
        self.sim.as_ref().map(|s| s.labels()).unwrap_or_default()
    }
}

/// JSON has no infinity; report it as a large sentinel instead of null.
fn finite(x: f64) -> f64 {
    if x.is_finite() {
        x
    } else {
        f64::MAX
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphView {
    pub graph: SystemGraph,
    pub groups: Option<GroupingScheme>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskView {
    pub accumulated: f64,
    pub r_star: f64,
    pub fired: u64,
    pub last: Option<RiskReport>,
}
