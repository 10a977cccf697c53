//! Where the feature/detector pipeline runs: at each site only, at a hub fed
//! raw records, or at a hub fed per-site partial aggregates. Links between
//! sites and the hub are simulated in-process.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::{AnomalyEvent, Detector, DetectorConfig, DetectorError, GroupValues};
use crate::envelope::{EStopDecision, Envelope, EnvelopeError, EnvelopeMonitor, RiskModel};
use crate::features::{FeatureConfig, FeatureError, FeatureFrame, FeatureState, PartialAggregate};
use crate::msgbus::Message;

pub const DEFAULT_BUFFER_CAP: usize = 60;

#[derive(Debug, Error)]
pub enum PlacementError {
    #[error("topic {0} is not assigned to any site")]
    UnassignedTopic(String),
    #[error("topic {topic} is assigned to more than one site")]
    DuplicateTopic { topic: String },
    #[error("invalid placement plan: {0}")]
    InvalidPlan(String),
    #[error("peer-to-peer placement is not supported")]
    PeerToPeerUnsupported,
    #[error("unknown site {0}")]
    UnknownSite(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementMode {
    LocalOnly,
    HubSpoke,
    LocalReduction,
    /// Reserved; rejected at run time.
    PeerToPeer,
}

impl PlacementMode {
    pub fn uses_hub(self) -> bool {
        matches!(self, PlacementMode::HubSpoke | PlacementMode::LocalReduction)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkModel {
    pub latency_ms: i64,
    pub drop_p: f64,
    /// Half-open `[start_ms, end_ms)` intervals during which the link is down.
    pub outages: Vec<[i64; 2]>,
}

impl LinkModel {
    pub fn is_up(&self, t_ms: i64) -> bool {
        !self.outages.iter().any(|[s, e]| t_ms >= *s && t_ms < *e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub name: String,
    pub topics: Vec<String>,
    #[serde(default)]
    pub link: LinkModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub mode: PlacementMode,
    pub sites: Vec<SiteSpec>,
    #[serde(default = "default_buffer_cap")]
    pub buffer_cap: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_buffer_cap() -> usize {
    DEFAULT_BUFFER_CAP
}

impl PlacementPlan {
    pub fn from_yaml(text: &str) -> Result<Self, PlacementError> {
        let plan: PlacementPlan = serde_yaml::from_str(text).map_err(|e| PlacementError::InvalidPlan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), PlacementError> {
        if self.sites.is_empty() {
            return Err(PlacementError::InvalidPlan("no sites".into()));
        }
        let mut names = BTreeSet::new();
        let mut topics = BTreeSet::new();
        for s in &self.sites {
            if !names.insert(s.name.as_str()) {
                return Err(PlacementError::InvalidPlan(format!("duplicate site {}", s.name)));
            }
            for t in &s.topics {
                if !topics.insert(t.as_str()) {
                    return Err(PlacementError::DuplicateTopic { topic: t.clone() });
                }
            }
            if !(0.0..=1.0).contains(&s.link.drop_p) {
                return Err(PlacementError::InvalidPlan(format!("site {}: drop_p outside [0, 1]", s.name)));
            }
            if s.link.latency_ms < 0 || s.link.outages.iter().any(|[a, b]| a >= b) {
                return Err(PlacementError::InvalidPlan(format!("site {}: bad link timing", s.name)));
            }
        }
        Ok(())
    }

    pub fn site_of(&self, topic: &str) -> Result<usize, PlacementError> {
        self.sites
            .iter()
            .position(|s| s.topics.iter().any(|t| t == topic))
            .ok_or_else(|| PlacementError::UnassignedTopic(topic.to_string()))
    }
}

/// What each site and the hub compute.
#[derive(Debug, Clone, Default)]
pub struct PipelineSetup {
    pub features: FeatureConfig,
    pub detectors: Vec<DetectorConfig>,
    pub envelope: Option<(Envelope, RiskModel)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteEvent {
    pub site: String,
    /// Emitted while the site was cut off from the hub.
    pub fallback: bool,
    pub event: AnomalyEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteEstop {
    pub site: String,
    pub decision: EStopDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkTransition {
    pub site: String,
    pub t_ms: i64,
    pub up: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationState {
    pub mode: PlacementMode,
    pub link_up: BTreeMap<String, bool>,
    pub fallback: BTreeMap<String, bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlacementMetrics {
    pub forwarded_bytes: u64,
    pub forwarded_messages: u64,
    pub merged_windows: u64,
    /// Hub windows finalized without every site's contribution.
    pub incomplete_windows: u64,
    pub fallback_seconds: f64,
    pub dropped_records: u64,
    pub dropped_partials: u64,
    pub backfilled_partials: u64,
    /// Partials still buffered when the input ended.
    pub stranded_partials: u64,
    pub max_delivery_delay_ms: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlacementOutcome {
    pub hub_frames: Vec<FeatureFrame>,
    pub hub_events: Vec<AnomalyEvent>,
    pub site_frames: BTreeMap<String, Vec<FeatureFrame>>,
    /// Site-local detector output in local-only mode or under fallback.
    pub site_events: Vec<SiteEvent>,
    pub estops: Vec<SiteEstop>,
    pub links: Vec<LinkTransition>,
    pub metrics: PlacementMetrics,
}

struct Site {
    spec: SiteSpec,
    features: FeatureState,
    detectors: Vec<Detector>,
    envelope: Option<EnvelopeMonitor>,
    up: bool,
    down_since: Option<i64>,
    buffer: VecDeque<(i64, PartialAggregate)>,
}

struct Hub {
    features: FeatureState,
    detectors: Vec<Detector>,
    pending: BTreeMap<i64, (PartialAggregate, BTreeSet<usize>)>,
    high_water: Vec<Option<i64>>,
}

impl Hub {
    fn emit(&mut self, frame: FeatureFrame, out: &mut PlacementOutcome) {
        let groups = GroupValues::new();
        for d in &mut self.detectors {
            if let Some(e) = d.process(&frame, &groups).event {
                out.hub_events.push(e);
            }
        }
        out.hub_frames.push(frame);
    }

    fn deliver(&mut self, site: usize, p: PartialAggregate) -> Result<(), PlacementError> {
        let w = p.window.start_ms;
        let hw = &mut self.high_water[site];
        *hw = Some(hw.map_or(w, |h| h.max(w)));
        match self.pending.get_mut(&w) {
            Some((acc, from)) => {
                *acc = acc.merge(&p)?;
                from.insert(site);
            }
            None => {
                self.pending.insert(w, (p, BTreeSet::from([site])));
            }
        }
        Ok(())
    }

    /// Finalize windows every site has moved past, in window order.
    fn release(&mut self, all: bool, out: &mut PlacementOutcome) -> Result<(), PlacementError> {
        while let Some((&w, _)) = self.pending.first_key_value() {
            let ready = all || self.high_water.iter().all(|h| h.is_some_and(|h| h >= w));
            if !ready {
                break;
            }
            let (p, from) = self.pending.remove(&w).expect("pending window");
            out.metrics.merged_windows += 1;
            if from.len() < self.high_water.len() {
                out.metrics.incomplete_windows += 1;
            }
            let frame = p.finalize()?;
            self.emit(frame, out);
        }
        Ok(())
    }
}

fn local_detectors(cfgs: &[DetectorConfig], topics: &[String]) -> Result<Vec<Detector>, PlacementError> {
    let mut out = Vec::new();
    for c in cfgs {
        let target = c.validate()?;
        let needed = target.topics();
        if !needed.is_empty() && needed.iter().all(|t| topics.contains(t)) {
            out.push(Detector::new(c.clone())?);
        }
    }
    Ok(out)
}

fn wire_len<T: Serialize>(v: &T) -> u64 {
    serde_json::to_vec(v).map(|b| b.len() as u64).unwrap_or(0)
}

/// Simulated transmission: serialize, maybe drop, deserialize at the far end.
fn transmit<T: Serialize + serde::de::DeserializeOwned>(v: &T, drop_p: f64, rng: &mut ChaCha8Rng, m: &mut PlacementMetrics) -> Option<T> {
    if drop_p > 0.0 && rng.random::<f64>() < drop_p {
        return None;
    }
    let bytes = serde_json::to_vec(v).expect("serializable");
    m.forwarded_bytes += bytes.len() as u64;
    m.forwarded_messages += 1;
    Some(serde_json::from_slice(&bytes).expect("round trip"))
}

/// Run `records` (time ordered) through `plan`.
pub fn run_placement(records: &[Message], plan: &PlacementPlan, setup: &PipelineSetup) -> Result<PlacementOutcome, PlacementError> {
    plan.validate()?;
    if plan.mode == PlacementMode::PeerToPeer {
        return Err(PlacementError::PeerToPeerUnsupported);
    }
    let assignment = records
        .iter()
        .map(|r| plan.site_of(&r.topic))
        .collect::<Result<Vec<_>, _>>()?;

    let mut out = PlacementOutcome::default();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut sites = Vec::with_capacity(plan.sites.len());
    for spec in &plan.sites {
        let mut features = FeatureState::new(setup.features.clone())?;
        for t in &spec.topics {
            features.register_topic(t);
        }
        let envelope = match &setup.envelope {
            Some((env, model)) => EnvelopeMonitor::restricted(env, model, &spec.topics)?,
            None => None,
        };
        out.site_frames.insert(spec.name.clone(), Vec::new());
        sites.push(Site {
            detectors: local_detectors(&setup.detectors, &spec.topics)?,
            spec: spec.clone(),
            features,
            envelope,
            up: true,
            down_since: None,
            buffer: VecDeque::new(),
        });
    }
    let mut hub = Hub {
        features: FeatureState::new(setup.features.clone())?,
        detectors: setup.detectors.iter().cloned().map(Detector::new).collect::<Result<_, _>>()?,
        pending: BTreeMap::new(),
        high_water: vec![None; sites.len()],
    };
    for s in &plan.sites {
        for t in &s.topics {
            hub.features.register_topic(t);
        }
    }
    let Some(first) = records.first() else {
        return Ok(out);
    };
    for s in &mut sites {
        s.features.start_at(first.t_ms);
    }
    hub.features.start_at(first.t_ms);

    let mode = plan.mode;
    let mut last_t = first.t_ms;
    for (rec, &si) in records.iter().zip(&assignment) {
        let t = rec.t_ms;
        // link schedule
        for (i, s) in sites.iter_mut().enumerate() {
            let up = s.spec.link.is_up(t);
            if up == s.up {
                continue;
            }
            s.up = up;
            out.links.push(LinkTransition {
                site: s.spec.name.clone(),
                t_ms: t,
                up,
            });
            if up {
                if let Some(since) = s.down_since.take() {
                    if mode.uses_hub() {
                        out.metrics.fallback_seconds += (t - since) as f64 / 1000.0;
                    }
                }
                while let Some((closed_at, p)) = s.buffer.pop_front() {
                    if let Some(p) = transmit(&p, s.spec.link.drop_p, &mut rng, &mut out.metrics) {
                        out.metrics.backfilled_partials += 1;
                        out.metrics.max_delivery_delay_ms = out.metrics.max_delivery_delay_ms.max(t - closed_at + s.spec.link.latency_ms);
                        hub.deliver(i, p)?;
                    } else {
                        out.metrics.dropped_partials += 1;
                    }
                }
            } else {
                s.down_since = Some(t);
            }
        }

        // close windows everywhere, then ingest at the owning site
        for (i, s) in sites.iter_mut().enumerate() {
            let mut closed = s.features.advance_to(t);
            if i == si {
                closed.extend(s.features.ingest(rec)?);
            }
            site_windows(i, s, closed, mode, plan.buffer_cap, &mut hub, &mut rng, &mut out)?;
        }
        if let Some(env) = &mut sites[si].envelope {
            if let Some(d) = env.observe(rec)? {
                out.estops.push(SiteEstop {
                    site: sites[si].spec.name.clone(),
                    decision: d,
                });
            }
        }

        match mode {
            PlacementMode::HubSpoke => {
                for f in hub.features.advance_to(t) {
                    let frame = f.finalize()?;
                    hub.emit(frame, &mut out);
                }
                let s = &sites[si];
                if !s.up {
                    out.metrics.dropped_records += 1;
                } else if let Some(r) = transmit(rec, s.spec.link.drop_p, &mut rng, &mut out.metrics) {
                    out.metrics.max_delivery_delay_ms = out.metrics.max_delivery_delay_ms.max(s.spec.link.latency_ms);
                    for f in hub.features.ingest(&r)? {
                        let frame = f.finalize()?;
                        hub.emit(frame, &mut out);
                    }
                } else {
                    out.metrics.dropped_records += 1;
                }
            }
            PlacementMode::LocalReduction => hub.release(false, &mut out)?,
            _ => {}
        }
        last_t = t;
    }

    // end of input: close what is open
    let flushed: Vec<Vec<PartialAggregate>> = sites.iter_mut().map(|s| s.features.flush()).collect();
    let last_window = flushed
        .iter()
        .flat_map(|v| v.iter().filter(|p| p.record_count() > 0).map(|p| p.window))
        .max_by_key(|w| w.start_ms);
    for (i, (s, mut closed)) in sites.iter_mut().zip(flushed).enumerate() {
        // every site reports every window that any site reports, so merged
        // frames carry the full topic set
        if let (Some(w), Some(last)) = (last_window, closed.last().map(|p| p.window)) {
            if last.start_ms < w.start_ms {
                let mut p = PartialAggregate::empty(w, setup.features.lag_ms, setup.features.calendar_epoch_ms);
                for t in &s.spec.topics {
                    p.note_topic(t);
                }
                closed.push(p);
            }
        }
        site_windows(i, s, closed, mode, plan.buffer_cap, &mut hub, &mut rng, &mut out)?;
    }
    for s in &mut sites {
        out.metrics.stranded_partials += s.buffer.len() as u64;
        if let Some(since) = s.down_since.take() {
            if mode.uses_hub() {
                out.metrics.fallback_seconds += (last_t - since) as f64 / 1000.0;
            }
        }
    }
    match mode {
        PlacementMode::HubSpoke => {
            for f in hub.features.flush() {
                let frame = f.finalize()?;
                hub.emit(frame, &mut out);
            }
        }
        PlacementMode::LocalReduction => hub.release(true, &mut out)?,
        _ => {}
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn site_windows(
    i: usize,
    s: &mut Site,
    closed: Vec<PartialAggregate>,
    mode: PlacementMode,
    buffer_cap: usize,
    hub: &mut Hub,
    rng: &mut ChaCha8Rng,
    out: &mut PlacementOutcome,
) -> Result<(), PlacementError> {
    let groups = GroupValues::new();
    let fallback = mode.uses_hub() && !s.up;
    for p in closed {
        let frame = p.finalize()?;
        // local detectors always run so their baselines are warm for fallback
        for d in &mut s.detectors {
            if let Some(e) = d.process(&frame, &groups).event {
                if mode == PlacementMode::LocalOnly || fallback {
                    out.site_events.push(SiteEvent {
                        site: s.spec.name.clone(),
                        fallback,
                        event: e,
                    });
                }
            }
        }
        out.site_frames.get_mut(&s.spec.name).expect("site").push(frame);
        if mode != PlacementMode::LocalReduction {
            continue;
        }
        let closed_at = p.window.end_ms + p.lag_ms;
        if s.up {
            match transmit(&p, s.spec.link.drop_p, rng, &mut out.metrics) {
                Some(p) => {
                    out.metrics.max_delivery_delay_ms = out.metrics.max_delivery_delay_ms.max(s.spec.link.latency_ms);
                    hub.deliver(i, p)?;
                }
                None => out.metrics.dropped_partials += 1,
            }
        } else {
            s.buffer.push_back((closed_at, p));
            while s.buffer.len() > buffer_cap {
                s.buffer.pop_front();
                out.metrics.dropped_partials += 1;
            }
        }
    }
    Ok(())
}

/// Link and fallback status at `t_ms` under `plan`.
pub fn degradation_at(plan: &PlacementPlan, t_ms: i64) -> DegradationState {
    let mut link_up = BTreeMap::new();
    let mut fallback = BTreeMap::new();
    for s in &plan.sites {
        let up = s.link.is_up(t_ms);
        link_up.insert(s.name.clone(), up);
        fallback.insert(s.name.clone(), plan.mode.uses_hub() && !up);
    }
    DegradationState {
        mode: plan.mode,
        link_up,
        fallback,
    }
}

/// Bytes one record or partial takes on the simulated wire.
pub fn record_wire_bytes(rec: &Message) -> u64 {
    wire_len(rec)
}

pub fn partial_wire_bytes(p: &PartialAggregate) -> u64 {
    wire_len(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msgbus::{payload, Validity};

    fn trace(n_windows: i64) -> Vec<Message> {
        let mut out = Vec::new();
        let mut seq = 0;
        for t in (0..n_windows * 1000).step_by(50) {
            out.push(Message {
                t_ms: t,
                topic: "/cmd_vel".into(),
                seq,
                payload: payload([("linear", 0.5 + (t % 7) as f64 * 0.01)]),
                validity: Validity::Ok,
            });
            seq += 1;
            if t % 100 == 0 {
                out.push(Message {
                    t_ms: t + 3,
                    topic: "/odom".into(),
                    seq,
                    payload: payload([("x", t as f64 / 1000.0)]),
                    validity: Validity::Ok,
                });
                seq += 1;
            }
        }
        out
    }

    fn plan(mode: PlacementMode) -> PlacementPlan {
        PlacementPlan {
            mode,
            sites: vec![
                SiteSpec {
                    name: "teleop".into(),
                    topics: vec!["/cmd_vel".into()],
                    link: LinkModel::default(),
                },
                SiteSpec {
                    name: "base".into(),
                    topics: vec!["/odom".into()],
                    link: LinkModel::default(),
                },
            ],
            buffer_cap: DEFAULT_BUFFER_CAP,
            seed: 1,
        }
    }

    #[test]
    fn reduction_matches_hub_spoke() {
        let recs = trace(10);
        let setup = PipelineSetup::default();
        let a = run_placement(&recs, &plan(PlacementMode::HubSpoke), &setup).unwrap();
        let b = run_placement(&recs, &plan(PlacementMode::LocalReduction), &setup).unwrap();
        assert_eq!(a.metrics.forwarded_messages, recs.len() as u64);
        assert_eq!(b.metrics.forwarded_messages, 20);
        assert_eq!(a.hub_frames, b.hub_frames);
        assert!(b.metrics.forwarded_bytes < a.metrics.forwarded_bytes);
        let c = run_placement(&recs, &plan(PlacementMode::LocalOnly), &setup).unwrap();
        assert!(c.hub_frames.is_empty());
        assert_eq!(c.metrics.forwarded_bytes, 0);
    }

    #[test]
    fn unassigned_and_p2p() {
        let mut recs = trace(1);
        recs[0].topic = "/nowhere".into();
        assert!(matches!(
            run_placement(&recs, &plan(PlacementMode::HubSpoke), &PipelineSetup::default()),
            Err(PlacementError::UnassignedTopic(_))
        ));
        assert!(matches!(
            run_placement(&trace(1), &plan(PlacementMode::PeerToPeer), &PipelineSetup::default()),
            Err(PlacementError::PeerToPeerUnsupported)
        ));
    }

    #[test]
    fn outage_backfills_within_cap() {
        let recs = trace(10);
        let mut p = plan(PlacementMode::LocalReduction);
        p.sites[1].link.outages = vec![[5000, 8000]];
        let base = run_placement(&recs, &plan(PlacementMode::LocalReduction), &PipelineSetup::default()).unwrap();
        let out = run_placement(&recs, &p, &PipelineSetup::default()).unwrap();
        assert_eq!(out.hub_frames, base.hub_frames);
        assert!(out.metrics.backfilled_partials >= 2);
        assert_eq!(out.metrics.dropped_partials, 0);
        assert!((out.metrics.fallback_seconds - 3.0).abs() < 0.1);

        p.buffer_cap = 1;
        let out = run_placement(&recs, &p, &PipelineSetup::default()).unwrap();
        assert!(out.metrics.dropped_partials >= 1);
        assert!(out.metrics.incomplete_windows >= 1);
    }

    #[test]
    fn plan_yaml() {
        let p = PlacementPlan::from_yaml(
            "mode: local_reduction\nsites:\n  - name: a\n    topics: [/x]\n    link: {latency_ms: 20, drop_p: 0.0, outages: [[1000, 2000]]}\n",
        )
        .unwrap();
        assert_eq!(p.buffer_cap, 60);
        assert!(!p.sites[0].link.is_up(1500));
        assert!(PlacementPlan::from_yaml("mode: hub_spoke\nsites:\n  - {name: a, topics: [/x]}\n  - {name: b, topics: [/x]}\n").is_err());
    }
}
