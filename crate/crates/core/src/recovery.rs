//! Best-known-state snapshots, restore with cycle breaking, decimated shadow
//! nodes with promotion, and the safe-mode state machine.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::alarmdesk::Escalation;
use crate::detectors::{AnomalyEvent, Detector, DetectorConfig, DetectorError, GroupValues};
use crate::features::{FeatureConfig, FeatureError, FeatureFrame, FeatureState};
use crate::msgbus::Message;

pub const DEFAULT_HEALTH_WINDOW_MS: i64 = 5_000;
pub const DEFAULT_K_MAX: usize = 3;
pub const DEFAULT_CYCLE_WINDOW_MS: i64 = 60_000;
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error("node {node} is unhealthy: anomaly at {last_anomaly_ms} ms")]
    NodeUnhealthy { node: String, last_anomaly_ms: i64 },
    #[error("no snapshot for node {0}")]
    NoSnapshot(String),
    #[error("cycle guard tripped for {signature}: {restores} restores in window")]
    CycleGuardTripped {
        signature: String,
        restores: usize,
        /// Present only on the attempt that tripped the guard.
        escalation: Option<Escalation>,
    },
    #[error("shadow has not processed a full window yet")]
    ShadowCold,
    #[error("invalid shadow spec: {0}")]
    InvalidShadow(String),
    #[error("state does not match the node: {0}")]
    StateMismatch(String),
    #[error("snapshot io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

/// Serialize any module state into a snapshot blob.
pub fn capture_state<T: Serialize>(state: &T) -> Result<Value, RecoveryError> {
    serde_json::to_value(state).map_err(|e| RecoveryError::StateMismatch(e.to_string()))
}

pub fn restore_state<T: DeserializeOwned>(blob: &Value) -> Result<T, RecoveryError> {
    serde_json::from_value(blob.clone()).map_err(|e| RecoveryError::StateMismatch(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u32,
    pub node: String,
    pub t_ms: i64,
    pub state: Value,
    /// Anomaly-free time preceding the capture.
    pub health_ms: i64,
}

/// Tracks the last anomaly involving each node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthTracker {
    pub window_ms: i64,
    origin_ms: i64,
    last_anomaly: BTreeMap<String, i64>,
}

impl HealthTracker {
    pub fn new(window_ms: i64, origin_ms: i64) -> Self {
        Self {
            window_ms,
            origin_ms,
            last_anomaly: BTreeMap::new(),
        }
    }

    pub fn note_anomaly(&mut self, node: &str, t_ms: i64) {
        let e = self.last_anomaly.entry(node.to_string()).or_insert(t_ms);
        *e = (*e).max(t_ms);
    }

    pub fn last_anomaly(&self, node: &str) -> Option<i64> {
        self.last_anomaly.get(node).copied()
    }

    pub fn health_ms(&self, node: &str, t_ms: i64) -> i64 {
        let since = self.last_anomaly(node).unwrap_or(self.origin_ms).max(self.origin_ms);
        (t_ms - since).max(0)
    }

    /// Healthy iff no anomaly in `(t - window, t]`.
    pub fn check(&self, node: &str, t_ms: i64) -> Result<i64, RecoveryError> {
        match self.last_anomaly(node) {
            Some(a) if a > t_ms - self.window_ms => Err(RecoveryError::NodeUnhealthy {
                node: node.to_string(),
                last_anomaly_ms: a,
            }),
            _ => Ok(self.health_ms(node, t_ms)),
        }
    }
}

/// Snapshots kept in memory and, when a directory is given, as
/// `<dir>/<node>/<t_ms>.json`.
#[derive(Debug, Clone, Default)]
pub struct SnapshotStore {
    dir: Option<PathBuf>,
    snaps: BTreeMap<String, BTreeMap<i64, Snapshot>>,
}

impl SnapshotStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open a directory store, loading anything already there.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, RecoveryError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut store = Self {
            dir: Some(dir.clone()),
            snaps: BTreeMap::new(),
        };
        for node_dir in fs::read_dir(&dir)? {
            let node_dir = node_dir?.path();
            if !node_dir.is_dir() {
                continue;
            }
            for f in fs::read_dir(&node_dir)? {
                let p = f?.path();
                if p.extension().is_some_and(|e| e == "json") {
                    let snap: Snapshot = serde_json::from_slice(&fs::read(&p)?)
                        .map_err(|e| RecoveryError::StateMismatch(format!("{}: {e}", p.display())))?;
                    store.snaps.entry(snap.node.clone()).or_default().insert(snap.t_ms, snap);
                }
            }
        }
        Ok(store)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn save(&mut self, snap: Snapshot) -> Result<(), RecoveryError> {
        if let Some(dir) = &self.dir {
            let node_dir = dir.join(sanitize(&snap.node));
            fs::create_dir_all(&node_dir)?;
            let body = serde_json::to_vec_pretty(&snap).map_err(|e| RecoveryError::StateMismatch(e.to_string()))?;
            fs::write(node_dir.join(format!("{}.json", snap.t_ms)), body)?;
        }
        self.snaps.entry(snap.node.clone()).or_default().insert(snap.t_ms, snap);
        Ok(())
    }

    pub fn latest(&self, node: &str) -> Option<&Snapshot> {
        self.snaps.get(node).and_then(|m| m.values().next_back())
    }

    pub fn list(&self, node: &str) -> Vec<&Snapshot> {
        self.snaps.get(node).map(|m| m.values().collect()).unwrap_or_default()
    }

    pub fn nodes(&self) -> Vec<String> {
        self.snaps.keys().cloned().collect()
    }
}

fn sanitize(node: &str) -> String {
    node.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FaultSignature {
    pub node: String,
    pub detector_id: String,
    pub kind: String,
}

impl FaultSignature {
    pub fn new(node: &str, detector_id: &str, kind: &str) -> Self {
        Self {
            node: node.into(),
            detector_id: detector_id.into(),
            kind: kind.into(),
        }
    }
}

impl std::fmt::Display for FaultSignature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.node, self.detector_id, self.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuardVerdict {
    /// Restore allowed; count includes this one.
    Allowed(usize),
    /// Guard tripped on this attempt: raise the escalation.
    Tripped(usize),
    /// Guard was already tripped earlier.
    Disabled(usize),
}

/// Caps automatic restores per fault signature within a sliding window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleGuard {
    pub k_max: usize,
    pub window_ms: i64,
    history: BTreeMap<FaultSignature, VecDeque<i64>>,
    tripped: BTreeSet<FaultSignature>,
}

impl Default for CycleGuard {
    fn default() -> Self {
        Self::new(DEFAULT_K_MAX, DEFAULT_CYCLE_WINDOW_MS)
    }
}

impl CycleGuard {
    pub fn new(k_max: usize, window_ms: i64) -> Self {
        Self {
            k_max,
            window_ms,
            history: BTreeMap::new(),
            tripped: BTreeSet::new(),
        }
    }

    pub fn attempt(&mut self, sig: &FaultSignature, t_ms: i64) -> GuardVerdict {
        let h = self.history.entry(sig.clone()).or_default();
        while h.front().is_some_and(|r| *r <= t_ms - self.window_ms) {
            h.pop_front();
        }
        if self.tripped.contains(sig) {
            return GuardVerdict::Disabled(h.len());
        }
        if h.len() >= self.k_max {
            self.tripped.insert(sig.clone());
            return GuardVerdict::Tripped(h.len());
        }
        h.push_back(t_ms);
        GuardVerdict::Allowed(h.len())
    }

    pub fn is_tripped(&self, sig: &FaultSignature) -> bool {
        self.tripped.contains(sig)
    }

    /// Operator re-arm after an escalation was handled.
    pub fn reset(&mut self, sig: &FaultSignature) {
        self.tripped.remove(sig);
        self.history.remove(sig);
    }

    pub fn restores_in_window(&self, sig: &FaultSignature) -> usize {
        self.history.get(sig).map_or(0, |h| h.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestoreReport {
    pub node: String,
    pub t_ms: i64,
    pub snapshot_t_ms: i64,
    pub signature: FaultSignature,
    pub restores_in_window: usize,
}

/// Snapshot bookkeeping for all nodes of one system.
#[derive(Debug, Clone)]
pub struct Recovery {
    pub health: HealthTracker,
    pub store: SnapshotStore,
    pub guard: CycleGuard,
    restores: Vec<RestoreReport>,
    escalations: Vec<Escalation>,
}

impl Recovery {
    pub fn new(store: SnapshotStore, health: HealthTracker, guard: CycleGuard) -> Self {
        Self {
            health,
            store,
            guard,
            restores: Vec::new(),
            escalations: Vec::new(),
        }
    }

    pub fn in_memory() -> Self {
        Self::new(
            SnapshotStore::in_memory(),
            HealthTracker::new(DEFAULT_HEALTH_WINDOW_MS, 0),
            CycleGuard::default(),
        )
    }

    pub fn take_snapshot(&mut self, node: &str, t_ms: i64, state: Value) -> Result<Snapshot, RecoveryError> {
        let health_ms = self.health.check(node, t_ms)?;
        let snap = Snapshot {
            version: SNAPSHOT_VERSION,
            node: node.to_string(),
            t_ms,
            state,
            health_ms,
        };
        self.store.save(snap.clone())?;
        Ok(snap)
    }

    /// Pick the latest snapshot for `node` and account the restore against
    /// the cycle guard. The caller applies `Snapshot::state`.
    pub fn restore(&mut self, node: &str, sig: &FaultSignature, t_ms: i64) -> Result<(Snapshot, RestoreReport), RecoveryError> {
        let snap = self
            .store
            .latest(node)
            .cloned()
            .ok_or_else(|| RecoveryError::NoSnapshot(node.to_string()))?;
        match self.guard.attempt(sig, t_ms) {
            GuardVerdict::Allowed(n) => {
                let report = RestoreReport {
                    node: node.to_string(),
                    t_ms,
                    snapshot_t_ms: snap.t_ms,
                    signature: sig.clone(),
                    restores_in_window: n,
                };
                self.restores.push(report.clone());
                Ok((snap, report))
            }
            GuardVerdict::Tripped(n) => {
                let esc = Escalation {
                    t_ms,
                    node: node.to_string(),
                    detector_id: sig.detector_id.clone(),
                    kind: sig.kind.clone(),
                    restores: n,
                };
                tracing::warn!(signature = %sig, restores = n, "cycle guard tripped");
                self.escalations.push(esc.clone());
                Err(RecoveryError::CycleGuardTripped {
                    signature: sig.to_string(),
                    restores: n,
                    escalation: Some(esc),
                })
            }
            GuardVerdict::Disabled(n) => Err(RecoveryError::CycleGuardTripped {
                signature: sig.to_string(),
                restores: n,
                escalation: None,
            }),
        }
    }

    pub fn restores(&self) -> &[RestoreReport] {
        &self.restores
    }

    pub fn escalations(&self) -> &[Escalation] {
        &self.escalations
    }
}

/// One frame emitted by a detector node, tagged with who produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFrame {
    pub lineage: String,
    pub frame: FeatureFrame,
    pub events: Vec<AnomalyEvent>,
    /// Frame was computed from decimated input.
    pub degraded: bool,
}

/// A feature extractor plus detectors fed from one input stream, optionally
/// decimated to every d-th message.
#[derive(Debug, Clone)]
pub struct DetectorNode {
    pub id: String,
    lineage: String,
    features: FeatureState,
    detectors: Vec<Detector>,
    decimation: u64,
    /// Windows starting at or after this run at full rate.
    full_rate_from_ms: Option<i64>,
    pending_full_rate: bool,
    seen: u64,
    processed: u64,
    windows_closed: u64,
    poisoned: bool,
}

impl DetectorNode {
    pub fn new(id: &str, feature_cfg: FeatureConfig, detectors: &[DetectorConfig], decimation: u64) -> Result<Self, RecoveryError> {
        if decimation == 0 {
            return Err(RecoveryError::InvalidShadow("decimation must be >= 1".into()));
        }
        let dets = detectors.iter().cloned().map(Detector::new).collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            id: id.to_string(),
            lineage: id.to_string(),
            features: FeatureState::new(feature_cfg)?,
            detectors: dets,
            decimation,
            full_rate_from_ms: None,
            pending_full_rate: false,
            seen: 0,
            processed: 0,
            windows_closed: 0,
            poisoned: false,
        })
    }

    pub fn lineage(&self) -> &str {
        &self.lineage
    }

    pub fn decimation(&self) -> u64 {
        self.decimation
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn windows_closed(&self) -> u64 {
        self.windows_closed
    }

    pub fn detectors(&self) -> &[Detector] {
        &self.detectors
    }

    pub fn set_detectors(&mut self, dets: Vec<Detector>) {
        self.detectors = dets;
    }

    /// Test hook: the node stops emitting frames.
    pub fn poison(&mut self) {
        self.poisoned = true;
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    fn is_full_rate(&self, window_start: i64) -> bool {
        self.decimation == 1 || self.full_rate_from_ms.is_some_and(|t| window_start >= t)
    }

    pub fn process(&mut self, msg: &Message) -> Result<Vec<NodeFrame>, RecoveryError> {
        if self.pending_full_rate {
            match self.features.open_window() {
                Some(w) if msg.t_ms >= w.end_ms => {
                    self.full_rate_from_ms = Some(w.end_ms);
                    self.pending_full_rate = false;
                }
                None => {
                    self.full_rate_from_ms = Some(i64::MIN);
                    self.pending_full_rate = false;
                }
                _ => {}
            }
        }
        self.seen += 1;
        let take = match self.full_rate_from_ms {
            Some(t) if msg.t_ms >= t => true,
            _ => self.seen % self.decimation == 0,
        };
        if !take {
            // keep windows moving even on skipped input
            let closed = self.features.advance_to(msg.t_ms);
            return self.close(closed);
        }
        self.processed += 1;
        let closed = self.features.ingest(msg)?;
        self.close(closed)
    }

    pub fn flush(&mut self) -> Result<Vec<NodeFrame>, RecoveryError> {
        let closed = self.features.flush();
        self.close(closed)
    }

    fn close(&mut self, closed: Vec<crate::features::PartialAggregate>) -> Result<Vec<NodeFrame>, RecoveryError> {
        let mut out = Vec::new();
        for p in closed {
            let mut frame = p.finalize()?;
            let full = self.is_full_rate(frame.window.start_ms);
            if !full {
                let d = self.decimation as f64;
                for r in frame.per_topic_rate.values_mut() {
                    *r *= d;
                }
                frame.total_rate *= d;
            }
            self.windows_closed += 1;
            let groups = GroupValues::new();
            let events = self
                .detectors
                .iter_mut()
                .filter_map(|d| d.process(&frame, &groups).event)
                .collect();
            if !self.poisoned {
                out.push(NodeFrame {
                    lineage: self.lineage.clone(),
                    frame,
                    events,
                    degraded: !full,
                });
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromotionReport {
    pub t_ms: i64,
    pub promoted: String,
    pub demoted: String,
    /// First window guaranteed to run at full rate.
    pub full_rate_from_window_after_ms: i64,
}

/// A primary detector node with a decimated shadow on the same input.
#[derive(Debug, Clone)]
pub struct ShadowPair {
    pub divisor: u64,
    primary: DetectorNode,
    shadow: DetectorNode,
    feature_cfg: FeatureConfig,
    detector_cfgs: Vec<DetectorConfig>,
    generation: u32,
    promotions: Vec<PromotionReport>,
}

impl ShadowPair {
    pub fn new(id: &str, feature_cfg: FeatureConfig, detectors: &[DetectorConfig], divisor: u64) -> Result<Self, RecoveryError> {
        if divisor < 2 {
            return Err(RecoveryError::InvalidShadow("shadow divisor must be >= 2".into()));
        }
        Ok(Self {
            divisor,
            primary: DetectorNode::new(&format!("{id}/primary"), feature_cfg.clone(), detectors, 1)?,
            shadow: DetectorNode::new(&format!("{id}/shadow"), feature_cfg.clone(), detectors, divisor)?,
            feature_cfg,
            detector_cfgs: detectors.to_vec(),
            generation: 0,
            promotions: Vec::new(),
        })
    }

    pub fn primary(&self) -> &DetectorNode {
        &self.primary
    }

    pub fn primary_mut(&mut self) -> &mut DetectorNode {
        &mut self.primary
    }

    pub fn shadow(&self) -> &DetectorNode {
        &self.shadow
    }

    pub fn promotions(&self) -> &[PromotionReport] {
        &self.promotions
    }

    /// Feed both nodes; only the primary's frames are returned.
    pub fn process(&mut self, msg: &Message) -> Result<Vec<NodeFrame>, RecoveryError> {
        let out = self.primary.process(msg)?;
        self.shadow.process(msg)?;
        Ok(out)
    }

    pub fn flush(&mut self) -> Result<Vec<NodeFrame>, RecoveryError> {
        let out = self.primary.flush()?;
        self.shadow.flush()?;
        Ok(out)
    }

    /// Swap the shadow in. It switches to full rate at its next window
    /// boundary; the old primary restarts as the new shadow, seeded with the
    /// promoted node's baselines.
    pub fn promote(&mut self, t_ms: i64) -> Result<PromotionReport, RecoveryError> {
        if self.shadow.windows_closed == 0 {
            return Err(RecoveryError::ShadowCold);
        }
        self.generation += 1;
        let base = self.primary.id.rsplit_once('/').map_or(self.primary.id.as_str(), |(b, _)| b).to_string();
        let mut promoted = self.shadow.clone();
        promoted.lineage = format!("{}/promoted-{}", base, self.generation);
        promoted.pending_full_rate = true;
        let boundary = promoted.features.open_window().map_or(t_ms, |w| w.end_ms);

        let mut restarted = DetectorNode::new(&self.primary.id, self.feature_cfg.clone(), &self.detector_cfgs, self.divisor)?;
        restarted.lineage = format!("{}/shadow-{}", base, self.generation);
        restarted.set_detectors(promoted.detectors.clone());
        if let Some(w) = promoted.features.open_window() {
            restarted.features.start_at(w.start_ms);
        }
        let report = PromotionReport {
            t_ms,
            promoted: promoted.lineage.clone(),
            demoted: self.primary.lineage.clone(),
            full_rate_from_window_after_ms: boundary,
        };
        self.primary = promoted;
        self.shadow = restarted;
        self.promotions.push(report.clone());
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafeModeReason {
    Estop,
    Escalation,
    Operator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeModeReport {
    pub t_ms: i64,
    pub active: bool,
    pub reason: Option<SafeModeReason>,
    /// Linear speed clamp applied to teleop commands.
    pub linear_clamp: Option<[f64; 2]>,
    pub paused_detectors: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SafeMode {
    active: Option<(i64, SafeModeReason)>,
    history: Vec<SafeModeReport>,
}

impl SafeMode {
    pub fn is_active(&self) -> bool {
        self.active.is_some()
    }

    pub fn entered_at(&self) -> Option<i64> {
        self.active.map(|(t, _)| t)
    }

    pub fn reason(&self) -> Option<SafeModeReason> {
        self.active.map(|(_, r)| r)
    }

    /// Returns `None` if already in safe mode.
    pub fn enter(&mut self, t_ms: i64, reason: SafeModeReason, linear_clamp: Option<[f64; 2]>, paused: Vec<String>) -> Option<SafeModeReport> {
        if self.active.is_some() {
            return None;
        }
        self.active = Some((t_ms, reason));
        let r = SafeModeReport {
            t_ms,
            active: true,
            reason: Some(reason),
            linear_clamp,
            paused_detectors: paused,
        };
        self.history.push(r.clone());
        Some(r)
    }

    pub fn exit(&mut self, t_ms: i64) -> Option<SafeModeReport> {
        self.active.take()?;
        let r = SafeModeReport {
            t_ms,
            active: false,
            reason: None,
            linear_clamp: None,
            paused_detectors: vec![],
        };
        self.history.push(r.clone());
        Some(r)
    }

    pub fn history(&self) -> &[SafeModeReport] {
        &self.history
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msgbus::{payload, Validity};

    fn msg(t_ms: i64, seq: u64) -> Message {
        Message {
            t_ms,
            topic: "/cmd_vel".into(),
            seq,
            payload: payload([("linear", 0.5)]),
            validity: Validity::Ok,
        }
    }

    #[test]
    fn health_rule() {
        let mut r = Recovery::in_memory();
        r.health.note_anomaly("det", 8000);
        assert!(matches!(
            r.take_snapshot("det", 10_000, Value::Null),
            Err(RecoveryError::NodeUnhealthy { .. })
        ));
        let s = r.take_snapshot("det", 13_000, Value::Null).unwrap();
        assert_eq!(s.health_ms, 5000);
    }

    #[test]
    fn detector_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut det = Detector::new(DetectorConfig::extreme("d", "rate:/cmd_vel", 3.0)).unwrap();
        for frame in crate::features::extract_frames(
            (0..200).map(|i| msg(i * 50, i as u64)).collect::<Vec<_>>().iter(),
            FeatureConfig::default(),
        )
        .unwrap()
        {
            det.process(&frame, &GroupValues::new());
        }
        let mut r = Recovery::new(
            SnapshotStore::open(dir.path()).unwrap(),
            HealthTracker::new(5000, 0),
            CycleGuard::default(),
        );
        r.take_snapshot("det", 10_000, capture_state(&det).unwrap()).unwrap();
        assert!(dir.path().join("det").join("10000.json").exists());
        let reopened = SnapshotStore::open(dir.path()).unwrap();
        let back: Detector = restore_state(&reopened.latest("det").unwrap().state).unwrap();
        assert_eq!(back, det);
    }

    #[test]
    fn guard_trips_once() {
        let mut r = Recovery::in_memory();
        r.take_snapshot("n", 0, Value::Null).unwrap();
        let sig = FaultSignature::new("n", "d", "extreme");
        for i in 0..3 {
            r.restore("n", &sig, i * 1000).unwrap();
        }
        let e = r.restore("n", &sig, 4000).unwrap_err();
        assert!(matches!(e, RecoveryError::CycleGuardTripped { escalation: Some(_), .. }));
        let e = r.restore("n", &sig, 90_000).unwrap_err();
        assert!(matches!(e, RecoveryError::CycleGuardTripped { escalation: None, .. }));
        assert_eq!(r.escalations().len(), 1);
        assert_eq!(r.restores().len(), 3);
        assert!(matches!(
            r.restore("other", &sig, 0),
            Err(RecoveryError::NoSnapshot(_))
        ));
    }

    #[test]
    fn decimation_every_dth() {
        let mut node = DetectorNode::new("s", FeatureConfig::default(), &[], 2).unwrap();
        let mut seen = Vec::new();
        for i in 1..=10u64 {
            let before = node.processed();
            node.process(&msg(i as i64, i)).unwrap();
            if node.processed() > before {
                seen.push(i);
            }
        }
        assert_eq!(seen, vec![2, 4, 6, 8, 10]);
    }

    #[test]
    fn cold_shadow_refuses_promotion() {
        let mut pair = ShadowPair::new("rate", FeatureConfig::default(), &[], 4).unwrap();
        pair.process(&msg(0, 0)).unwrap();
        assert!(matches!(pair.promote(10), Err(RecoveryError::ShadowCold)));
        assert!(ShadowPair::new("x", FeatureConfig::default(), &[], 1).is_err());
    }

    #[test]
    fn safe_mode_state_machine() {
        let mut sm = SafeMode::default();
        assert!(sm.enter(5, SafeModeReason::Estop, Some([-0.5, 0.5]), vec!["d".into()]).is_some());
        assert!(sm.enter(6, SafeModeReason::Operator, None, vec![]).is_none());
        assert_eq!(sm.reason(), Some(SafeModeReason::Estop));
        assert!(sm.exit(10).is_some());
        assert!(!sm.is_active());
        assert!(sm.exit(11).is_none());
    }
}
