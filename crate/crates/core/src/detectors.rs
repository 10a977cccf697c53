//! Extreme, isolated and abnormal detectors over feature frames, plus the
//! validity filter and assumption monitor.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, FeatureFrame, Selector};
use crate::msgbus::{Message, TopicSchema, Validity};

/// Variance guard used when a detector sets no explicit `std_floor`.
pub const EPSILON: f64 = 1e-9;
pub const DEFAULT_BASELINE_WINDOWS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("invalid detector {id}: {reason}")]
    InvalidConfig { id: String, reason: String },
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Extreme,
    Isolated,
    Abnormal,
}

fn default_baseline() -> usize {
    DEFAULT_BASELINE_WINDOWS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub id: String,
    pub kind: DetectorKind,
    /// Feature selector. Isolated detectors take a comma-separated list,
    /// abnormal detectors `numerator / denominator`, and `group:<name>`
    /// reads a group attribute supplied by the caller.
    pub target: String,
    /// Threshold; unused by abnormal detectors.
    #[serde(default)]
    pub t: f64,
    #[serde(default)]
    pub n: usize,
    #[serde(default = "default_baseline")]
    pub baseline_window_count: usize,
    /// Frames to observe before any decision; defaults to `baseline_window_count`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_frames: Option<usize>,
    /// Lower bound on the baseline standard deviation. Isolated detectors
    /// apply it to every column before scaling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_floor: Option<f64>,
    /// Trusted ratio for abnormal detectors; learned during warm-up when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band: Option<f64>,
    /// Assumptions that must hold for this detector to run. While one is
    /// false or unknown the detector neither scores nor learns.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub requires: Vec<String>,
}

impl DetectorConfig {
    pub fn extreme(id: &str, target: &str, t: f64) -> Self {
        Self {
            id: id.into(),
            kind: DetectorKind::Extreme,
            target: target.into(),
            t,
            n: 0,
            baseline_window_count: DEFAULT_BASELINE_WINDOWS,
            warmup_frames: None,
            std_floor: None,
            expected_ratio: None,
            band: None,
            requires: Vec::new(),
        }
    }

    pub fn isolated(id: &str, target: &str, t: f64, n: usize) -> Self {
        Self {
            kind: DetectorKind::Isolated,
            n,
            ..Self::extreme(id, target, t)
        }
    }

    pub fn abnormal(id: &str, target: &str, expected_ratio: Option<f64>, band: f64) -> Self {
        Self {
            kind: DetectorKind::Abnormal,
            expected_ratio,
            band: Some(band),
            requires: Vec::new(),
            ..Self::extreme(id, target, 0.0)
        }
    }

    pub fn warmup(&self) -> usize {
        self.warmup_frames.unwrap_or(self.baseline_window_count)
    }

    fn invalid(&self, reason: &str) -> DetectorError {
        DetectorError::InvalidConfig {
            id: self.id.clone(),
            reason: reason.to_string(),
        }
    }

    pub fn validate(&self) -> Result<Target, DetectorError> {
        if !self.t.is_finite() {
            return Err(self.invalid("t must be finite"));
        }
        if self.baseline_window_count < 1 {
            return Err(self.invalid("baseline_window_count must be at least 1"));
        }
        if let Some(f) = self.std_floor {
            if !(f.is_finite() && f > 0.0) {
                return Err(self.invalid("std_floor must be positive"));
            }
        }
        let target = Target::parse(self.kind, &self.target)?;
        if self.kind == DetectorKind::Abnormal {
            match self.band {
                Some(b) if b.is_finite() && b > 0.0 => {}
                _ => return Err(self.invalid("abnormal detectors need a positive band")),
            }
            if let Some(r) = self.expected_ratio {
                if !r.is_finite() {
                    return Err(self.invalid("expected_ratio must be finite"));
                }
            }
        }
        Ok(target)
    }
}

/// What a detector reads from each frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Scalar(Selector),
    Group(String),
    Vector(Vec<Selector>),
    Ratio(Selector, Selector),
}

impl Target {
    pub fn parse(kind: DetectorKind, s: &str) -> Result<Self, DetectorError> {
        let s = s.trim();
        if let Some(g) = s.strip_prefix("group:") {
            if kind == DetectorKind::Extreme {
                return Ok(Target::Group(g.trim().to_string()));
            }
            return Err(FeatureError::BadSelector(s.into()).into());
        }
        Ok(match kind {
            DetectorKind::Extreme => Target::Scalar(Selector::parse(s)?),
            DetectorKind::Isolated => Target::Vector(
                s.split(',')
                    .map(Selector::parse)
                    .collect::<Result<Vec<_>, _>>()?,
            ),
            DetectorKind::Abnormal => {
                let (a, b) = s.split_once(" / ").ok_or_else(|| FeatureError::BadSelector(s.into()))?;
                Target::Ratio(Selector::parse(a)?, Selector::parse(b)?)
            }
        })
    }

    /// Topics whose traffic feeds this target (groups resolve elsewhere).
    pub fn topics(&self) -> Vec<String> {
        match self {
            Target::Scalar(s) => s.topics(),
            Target::Group(_) => vec![],
            Target::Vector(v) => v.iter().flat_map(Selector::topics).collect(),
            Target::Ratio(a, b) => a.topics().into_iter().chain(b.topics()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyEvent {
    pub t_ms: i64,
    pub detector_id: String,
    pub target: String,
    pub score: f64,
    pub kind: DetectorKind,
    pub evidence: BTreeMap<String, f64>,
}

/// Running mean and population variance over the most recent values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollingBaseline {
    capacity: usize,
    values: VecDeque<f64>,
}

impl RollingBaseline {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            values: VecDeque::new(),
        }
    }

    pub fn push(&mut self, v: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(v);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let n = self.values.len().max(1) as f64;
        (self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).max(0.0)
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }
}

/// Extreme rule: `|x - mean| / max(std, eps) > t`. Returns the score when it fires.
pub fn score_extreme(x: f64, mean: f64, std: f64, t: f64, eps: f64) -> Option<f64> {
    let z = ((x - mean) / std.max(eps)).abs();
    (z > t).then_some(z)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IsolatedVerdict {
    InsufficientHistory,
    Normal { neighbors: usize, score: f64 },
    Isolated { neighbors: usize, score: f64 },
}

impl IsolatedVerdict {
    pub fn fired(&self) -> bool {
        matches!(self, IsolatedVerdict::Isolated { .. })
    }
}

/// Isolated rule: at most `n` history points lie within distance `t`.
/// The score is the distance to the (n+1)-th nearest history point.
pub fn score_isolated(point: &[f64], history: &[Vec<f64>], t: f64, n: usize) -> IsolatedVerdict {
    if history.len() < n + 1 {
        return IsolatedVerdict::InsufficientHistory;
    }
    let mut d: Vec<f64> = history.iter().map(|h| dist(point, h)).collect();
    let neighbors = d.iter().filter(|x| **x <= t).count();
    let (_, kth, _) = d.select_nth_unstable_by(n, |a, b| a.total_cmp(b));
    let score = *kth;
    if neighbors <= n {
        IsolatedVerdict::Isolated { neighbors, score }
    } else {
        IsolatedVerdict::Normal { neighbors, score }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AbnormalVerdict {
    Undefined,
    Consistent { ratio: f64 },
    Inconsistent { ratio: f64, score: f64 },
}

/// Trusted-ratio rule: fires when `num / den` leaves `r_hat ± band`.
pub fn score_abnormal(num: f64, den: f64, r_hat: f64, band: f64) -> AbnormalVerdict {
    if den == 0.0 || !den.is_finite() || !num.is_finite() {
        return AbnormalVerdict::Undefined;
    }
    let ratio = num / den;
    let dev = (ratio - r_hat).abs();
    if dev > band {
        AbnormalVerdict::Inconsistent {
            ratio,
            score: dev / band,
        }
    } else {
        AbnormalVerdict::Consistent { ratio }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidityVerdict {
    Valid,
    Invalid { field: String, value: f64 },
}

/// Range check against the topic schema; messages already marked invalid by
/// the bus stay invalid.
pub fn filter_validity(msg: &Message, schema: &TopicSchema) -> ValidityVerdict {
    if let Some((field, value)) = schema.range_violation(&msg.payload) {
        return ValidityVerdict::Invalid { field, value };
    }
    if msg.validity != Validity::Ok {
        return ValidityVerdict::Invalid {
            field: String::new(),
            value: f64::NAN,
        };
    }
    ValidityVerdict::Valid
}

/// Values supplied for `group:` targets, keyed by group name.
pub type GroupValues = BTreeMap<String, f64>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorOutput {
    pub event: Option<AnomalyEvent>,
    pub change: Option<AssumptionChange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum DetectorState {
    Scalar { baseline: RollingBaseline },
    Vector { history: VecDeque<Vec<f64>>, capacity: usize },
    Ratio { learned: RollingBaseline, defined: Option<bool> },
}

/// A configured detector with its baseline. The whole value is serializable
/// so it can be snapshotted and restored field-for-field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    config: DetectorConfig,
    frames_seen: u64,
    state: DetectorState,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self, DetectorError> {
        config.validate()?;
        let state = match config.kind {
            DetectorKind::Extreme => DetectorState::Scalar {
                baseline: RollingBaseline::new(config.baseline_window_count),
            },
            DetectorKind::Isolated => DetectorState::Vector {
                history: VecDeque::new(),
                capacity: config.baseline_window_count,
            },
            DetectorKind::Abnormal => DetectorState::Ratio {
                learned: RollingBaseline::new(config.warmup().max(1)),
                defined: None,
            },
        };
        Ok(Self {
            config,
            frames_seen: 0,
            state,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn target(&self) -> Target {
        Target::parse(self.config.kind, &self.config.target).expect("validated at construction")
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames_seen
    }

    fn warm(&self, have: usize) -> bool {
        have >= self.config.warmup().max(2)
    }

    /// Current trusted ratio, if one is configured or has been learned.
    pub fn trusted_ratio(&self) -> Option<f64> {
        match &self.state {
            DetectorState::Ratio { learned, .. } => self.config.expected_ratio.or_else(|| {
                (learned.len() >= self.config.warmup().max(1)).then(|| learned.mean())
            }),
            _ => None,
        }
    }

    fn event(&self, frame: &FeatureFrame, score: f64, evidence: BTreeMap<String, f64>) -> AnomalyEvent {
        AnomalyEvent {
            t_ms: frame.window.start_ms,
            detector_id: self.config.id.clone(),
            target: self.config.target.clone(),
            score,
            kind: self.config.kind,
            evidence,
        }
    }

    /// Score one frame. Frames that fire never enter the baseline.
    pub fn process(&mut self, frame: &FeatureFrame, groups: &GroupValues) -> DetectorOutput {
        self.frames_seen += 1;
        match self.target() {
            Target::Scalar(sel) => {
                let x = frame.value(&sel);
                self.process_scalar(frame, sel.to_string(), x)
            }
            Target::Group(g) => {
                let x = groups.get(&g).copied();
                self.process_scalar(frame, format!("group:{g}"), x)
            }
            Target::Vector(sels) => {
                let point: Option<Vec<f64>> = sels.iter().map(|s| frame.value(s)).collect();
                match point {
                    Some(p) => self.process_vector(frame, &sels, p),
                    None => DetectorOutput::default(),
                }
            }
            Target::Ratio(a, b) => {
                let num = frame.value(&a).unwrap_or(0.0);
                let den = frame.value(&b).unwrap_or(0.0);
                self.process_ratio(frame, &a, &b, num, den)
            }
        }
    }

    fn process_scalar(&mut self, frame: &FeatureFrame, label: String, x: Option<f64>) -> DetectorOutput {
        let Some(x) = x.filter(|v| v.is_finite()) else {
            return DetectorOutput::default();
        };
        let eps = self.config.std_floor.unwrap_or(EPSILON);
        let t = self.config.t;
        let warm = {
            let DetectorState::Scalar { baseline } = &self.state else {
                unreachable!()
            };
            self.warm(baseline.len())
        };
        let DetectorState::Scalar { baseline } = &mut self.state else {
            unreachable!()
        };
        if !warm {
            baseline.push(x);
            return DetectorOutput::default();
        }
        let (mean, std) = (baseline.mean(), baseline.std());
        match score_extreme(x, mean, std, t, eps) {
            Some(score) => {
                let evidence = BTreeMap::from([(label, x), ("baseline_mean".into(), mean), ("baseline_std".into(), std)]);
                DetectorOutput {
                    event: Some(self.event(frame, score, evidence)),
                    change: None,
                }
            }
            None => {
                baseline.push(x);
                DetectorOutput::default()
            }
        }
    }

    fn process_vector(&mut self, frame: &FeatureFrame, sels: &[Selector], point: Vec<f64>) -> DetectorOutput {
        if point.iter().any(|v| !v.is_finite()) {
            return DetectorOutput::default();
        }
        let (t, n, floor) = (self.config.t, self.config.n, self.config.std_floor);
        let warmup = self.config.warmup().max(n + 1);
        let DetectorState::Vector { history, capacity } = &mut self.state else {
            unreachable!()
        };
        if history.len() < warmup {
            history.push_back(point);
            return DetectorOutput::default();
        }
        let dims = point.len();
        let (mu, mut sd) = column_scale(history.make_contiguous(), dims);
        if let Some(f) = floor {
            sd.iter_mut().for_each(|s| *s = s.max(f));
        }
        let scale = |p: &[f64]| -> Vec<f64> { (0..dims).map(|i| (p[i] - mu[i]) / sd[i]).collect() };
        let scaled_history: Vec<Vec<f64>> = history.iter().map(|h| scale(h)).collect();
        let scaled_point = scale(&point);
        let verdict = score_isolated(&scaled_point, &scaled_history, t, n);
        if let IsolatedVerdict::Isolated { score, .. } = verdict {
            let evidence = sels.iter().map(|s| s.to_string()).zip(point.iter().copied()).collect();
            return DetectorOutput {
                event: Some(self.event(frame, score, evidence)),
                change: None,
            };
        }
        if history.len() == *capacity {
            history.pop_front();
        }
        history.push_back(point);
        DetectorOutput::default()
    }

    fn process_ratio(&mut self, frame: &FeatureFrame, a: &Selector, b: &Selector, num: f64, den: f64) -> DetectorOutput {
        let r_hat = self.trusted_ratio();
        let band = self.config.band.unwrap_or(f64::INFINITY);
        let id = self.config.id.clone();
        let DetectorState::Ratio { learned, defined } = &mut self.state else {
            unreachable!()
        };
        let verdict = score_abnormal(num, den, r_hat.unwrap_or(0.0), band);
        let now_defined = !matches!(verdict, AbnormalVerdict::Undefined);
        let mut out = DetectorOutput::default();
        if *defined != Some(now_defined) {
            if defined.is_some() {
                out.change = Some(AssumptionChange {
                    t_ms: frame.window.start_ms,
                    name: format!("{id}:ratio-defined"),
                    value: now_defined,
                    target: b.to_string(),
                });
            }
            *defined = Some(now_defined);
        }
        let Some(r_hat) = r_hat else {
            if now_defined {
                learned.push(num / den);
            }
            return out;
        };
        if let AbnormalVerdict::Inconsistent { ratio, score } = verdict {
            let evidence = BTreeMap::from([
                (a.to_string(), num),
                (b.to_string(), den),
                ("ratio".into(), ratio),
                ("expected_ratio".into(), r_hat),
            ]);
            out.event = Some(self.event(frame, score, evidence));
        }
        out
    }
}

fn column_scale(rows: &[Vec<f64>], dims: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let mu: Vec<f64> = (0..dims).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
    let sd = (0..dims)
        .map(|i| {
            let var = rows.iter().map(|r| (r[i] - mu[i]).powi(2)).sum::<f64>() / n;
            var.sqrt().max(EPSILON)
        })
        .collect();
    (mu, sd)
}

/// Per-column z-scaling of a set of points.
pub fn standardize(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dims = rows.first().map_or(0, Vec::len);
    let (mu, sd) = column_scale(rows, dims);
    rows.iter()
        .map(|r| (0..dims).map(|i| (r[i] - mu[i]) / sd[i]).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
}

impl Comparison {
    fn holds(&self, x: f64, v: f64) -> bool {
        match self {
            Comparison::Gt => x > v,
            Comparison::Ge => x >= v,
            Comparison::Lt => x < v,
            Comparison::Le => x <= v,
        }
    }
}

fn default_hold() -> usize {
    1
}

/// `target op value` over a frame, e.g. `rate:/cmd_vel > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionSpec {
    pub name: String,
    pub target: String,
    pub op: Comparison,
    pub value: f64,
    /// Consecutive frames a new truth value must persist before it counts.
    #[serde(default = "default_hold")]
    pub min_hold: usize,
}

impl AssumptionSpec {
    pub fn new(name: &str, target: &str, op: Comparison, value: f64) -> Self {
        Self {
            name: name.into(),
            target: target.into(),
            op,
            value,
            min_hold: 1,
        }
    }

    pub fn topics(&self) -> Vec<String> {
        Selector::parse(&self.target).map(|s| s.topics()).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionChange {
    pub t_ms: i64,
    pub name: String,
    pub value: bool,
    /// Selector the assumption reads; used to attribute the change to topics.
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionStatus {
    pub name: String,
    pub value: Option<bool>,
    pub last_change_ms: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AssumptionEntry {
    spec: AssumptionSpec,
    value: Option<bool>,
    last_change_ms: Option<i64>,
    pending: Option<(bool, usize, i64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssumptionSet {
    entries: Vec<AssumptionEntry>,
}

impl AssumptionSet {
    pub fn new(specs: Vec<AssumptionSpec>) -> Result<Self, DetectorError> {
        let mut set = Self::default();
        for s in specs {
            set.register(s)?;
        }
        Ok(set)
    }

    pub fn register(&mut self, spec: AssumptionSpec) -> Result<(), DetectorError> {
        Selector::parse(&spec.target)?;
        if spec.min_hold == 0 || !spec.value.is_finite() {
            return Err(DetectorError::InvalidConfig {
                id: spec.name.clone(),
                reason: "min_hold must be at least 1 and value finite".into(),
            });
        }
        self.entries.push(AssumptionEntry {
            spec,
            value: None,
            last_change_ms: None,
            pending: None,
        });
        Ok(())
    }

    pub fn specs(&self) -> Vec<AssumptionSpec> {
        self.entries.iter().map(|e| e.spec.clone()).collect()
    }

    /// True iff every named assumption is currently known to hold.
    pub fn all_hold(&self, names: &[String]) -> bool {
        names.iter().all(|n| {
            self.entries
                .iter()
                .any(|e| &e.spec.name == n && e.value == Some(true))
        })
    }

    pub fn status(&self) -> Vec<AssumptionStatus> {
        self.entries
            .iter()
            .map(|e| AssumptionStatus {
                name: e.spec.name.clone(),
                value: e.value,
                last_change_ms: e.last_change_ms,
            })
            .collect()
    }

    /// Re-evaluate every assumption on `frame`. The first evaluation sets the
    /// value silently; later flips are reported once they have held for
    /// `min_hold` frames, stamped with the first frame of the new run.
    pub fn check(&mut self, frame: &FeatureFrame) -> Vec<AssumptionChange> {
        let mut out = Vec::new();
        let t = frame.window.start_ms;
        for e in &mut self.entries {
            let sel = Selector::parse(&e.spec.target).expect("validated on register");
            let now = frame
                .value(&sel)
                .is_some_and(|x| e.spec.op.holds(x, e.spec.value));
            match e.value {
                None => {
                    e.value = Some(now);
                    e.last_change_ms = Some(t);
                }
                Some(v) if v == now => e.pending = None,
                Some(_) => {
                    let (count, since) = match e.pending {
                        Some((p, c, since)) if p == now => (c + 1, since),
                        _ => (1, t),
                    };
                    if count >= e.spec.min_hold {
                        e.value = Some(now);
                        e.last_change_ms = Some(since);
                        e.pending = None;
                        out.push(AssumptionChange {
                            t_ms: since,
                            name: e.spec.name.clone(),
                            value: now,
                            target: e.spec.target.clone(),
                        });
                    } else {
                        e.pending = Some((now, count, since));
                    }
                }
            }
        }
        out
    }
}
