//! Windowed feature extraction over message streams.
//!
//! Records are folded into [`PartialAggregate`]s, one per tumbling window.
//! A partial keeps per-millisecond arrival multiplicities for each topic,
//! including arrivals in the lag window just past its end, so follow counts
//! can be computed exactly after any number of merges.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::msgbus::{Message, Scalar};

pub const DEFAULT_WINDOW_MS: i64 = 1000;
pub const DEFAULT_LAG_MS: i64 = 100;

const MS_PER_HOUR: i64 = 3_600_000;
const MS_PER_DAY: i64 = 24 * MS_PER_HOUR;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("record at {t_ms} ms is before the open window starting at {window_start_ms} ms")]
    TimeRegression { t_ms: i64, window_start_ms: i64 },
    #[error("cannot merge partials for windows {a:?} and {b:?}")]
    WindowMismatch { a: (i64, i64, i64), b: (i64, i64, i64) },
    #[error("window has zero length")]
    ZeroWindow,
    #[error("invalid feature config: {0}")]
    InvalidConfig(String),
    #[error("bad selector {0:?}")]
    BadSelector(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub window_ms: i64,
    pub lag_ms: i64,
    /// Calendar time (ms since 1970-01-01T00:00Z) corresponding to t_ms = 0.
    pub calendar_epoch_ms: i64,
    /// How far behind the open window a record may arrive and still be counted.
    pub tolerance_ms: i64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window_ms: DEFAULT_WINDOW_MS,
            lag_ms: DEFAULT_LAG_MS,
            calendar_epoch_ms: 0,
            tolerance_ms: 0,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.window_ms <= 0 {
            return Err(FeatureError::ZeroWindow);
        }
        if self.lag_ms < 0 || self.lag_ms >= self.window_ms {
            return Err(FeatureError::InvalidConfig("lag_ms must lie in [0, window_ms)".into()));
        }
        if self.tolerance_ms < 0 {
            return Err(FeatureError::InvalidConfig("tolerance_ms must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Window {
    pub start_ms: i64,
    pub end_ms: i64,
}

impl Window {
    pub fn len_ms(&self) -> i64 {
        self.end_ms - self.start_ms
    }

    pub fn contains(&self, t_ms: i64) -> bool {
        t_ms >= self.start_ms && t_ms < self.end_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeBucket {
    pub hour: u8,
    /// 0 = Monday.
    pub day_of_week: u8,
}

impl TimeBucket {
    pub fn at(calendar_ms: i64) -> Self {
        let days = calendar_ms.div_euclid(MS_PER_DAY);
        let hour = calendar_ms.rem_euclid(MS_PER_DAY) / MS_PER_HOUR;
        // 1970-01-01 was a Thursday
        let day_of_week = (days + 3).rem_euclid(7);
        Self {
            hour: hour as u8,
            day_of_week: day_of_week as u8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub count: u64,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldAccumulator {
    pub count: u64,
    pub sum: f64,
    pub sum_sq: f64,
    pub min: f64,
    pub max: f64,
}

impl FieldAccumulator {
    fn new(v: f64) -> Self {
        Self {
            count: 1,
            sum: v,
            sum_sq: v * v,
            min: v,
            max: v,
        }
    }

    fn push(&mut self, v: f64) {
        self.count += 1;
        self.sum += v;
        self.sum_sq += v * v;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    fn absorb(&mut self, o: &FieldAccumulator) {
        self.count += o.count;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
        self.min = self.min.min(o.min);
        self.max = self.max.max(o.max);
    }

    fn stats(&self) -> FieldStats {
        let n = self.count as f64;
        let mean = self.sum / n;
        let var = (self.sum_sq / n - mean * mean).max(0.0);
        FieldStats {
            count: self.count,
            mean,
            std: var.sqrt(),
            min: self.min,
            max: self.max,
        }
    }
}

/// Key used for co-occurrence entries: `"<a>|<b>"`.
pub fn pair_key(a: &str, b: &str) -> String {
    format!("{a}|{b}")
}

/// Key used for field statistics: `"<topic>.<field>"`.
pub fn field_key(topic: &str, field: &str) -> String {
    format!("{topic}.{field}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrame {
    pub window: Window,
    pub per_topic_rate: BTreeMap<String, f64>,
    pub total_rate: f64,
    pub time_bucket: TimeBucket,
    pub co_occurrence: BTreeMap<String, f64>,
    #[serde(default)]
    pub field_stats: BTreeMap<String, FieldStats>,
}

impl FeatureFrame {
    pub fn rate(&self, topic: &str) -> Option<f64> {
        self.per_topic_rate.get(topic).copied()
    }

    pub fn co_occurrence(&self, a: &str, b: &str) -> Option<f64> {
        self.co_occurrence.get(&pair_key(a, b)).copied()
    }

    pub fn value(&self, sel: &Selector) -> Option<f64> {
        match sel {
            Selector::Rate(t) => self.rate(t),
            Selector::TotalRate => Some(self.total_rate),
            Selector::Mean(k) => self.field_stats.get(k).map(|s| s.mean),
            Selector::Std(k) => self.field_stats.get(k).map(|s| s.std),
            Selector::Min(k) => self.field_stats.get(k).map(|s| s.min),
            Selector::Max(k) => self.field_stats.get(k).map(|s| s.max),
            Selector::Cooc(a, b) => self.co_occurrence(a, b),
        }
    }
}

/// Names a single scalar inside a [`FeatureFrame`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Selector {
    Rate(String),
    TotalRate,
    Mean(String),
    Std(String),
    Min(String),
    Max(String),
    Cooc(String, String),
}

impl Selector {
    pub fn parse(s: &str) -> Result<Self, FeatureError> {
        let bad = || FeatureError::BadSelector(s.to_string());
        let (kind, arg) = s.trim().split_once(':').ok_or_else(bad)?;
        let arg = arg.trim();
        if arg.is_empty() {
            return Err(bad());
        }
        Ok(match kind.trim() {
            "rate" if arg == "*" => Selector::TotalRate,
            "rate" => Selector::Rate(arg.into()),
            "mean" => Selector::Mean(arg.into()),
            "std" => Selector::Std(arg.into()),
            "min" => Selector::Min(arg.into()),
            "max" => Selector::Max(arg.into()),
            "cooc" => {
                let (a, b) = arg.split_once('|').ok_or_else(bad)?;
                Selector::Cooc(a.trim().into(), b.trim().into())
            }
            _ => return Err(bad()),
        })
    }

    /// Topics whose traffic this selector reads.
    pub fn topics(&self) -> Vec<String> {
        let topic_of = |k: &str| k.rsplit_once('.').map(|(t, _)| t.to_string()).unwrap_or_else(|| k.to_string());
        match self {
            Selector::Rate(t) => vec![t.clone()],
            Selector::TotalRate => vec![],
            Selector::Mean(k) | Selector::Std(k) | Selector::Min(k) | Selector::Max(k) => vec![topic_of(k)],
            Selector::Cooc(a, b) => vec![a.clone(), b.clone()],
        }
    }
}

impl std::fmt::Display for Selector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Selector::Rate(t) => write!(f, "rate:{t}"),
            Selector::TotalRate => write!(f, "rate:*"),
            Selector::Mean(k) => write!(f, "mean:{k}"),
            Selector::Std(k) => write!(f, "std:{k}"),
            Selector::Min(k) => write!(f, "min:{k}"),
            Selector::Max(k) => write!(f, "max:{k}"),
            Selector::Cooc(a, b) => write!(f, "cooc:{a}|{b}"),
        }
    }
}

/// Mergeable summary of one window's worth of records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialAggregate {
    pub window: Window,
    pub lag_ms: i64,
    pub calendar_epoch_ms: i64,
    /// Records inside the window per topic. Known but silent topics map to 0.
    pub per_topic_count: BTreeMap<String, u64>,
    /// Arrival multiplicities per topic and millisecond over `[start, end + lag)`.
    pub arrivals: BTreeMap<String, BTreeMap<i64, u32>>,
    #[serde(default)]
    pub fields: BTreeMap<String, FieldAccumulator>,
}

impl PartialAggregate {
    pub fn empty(window: Window, lag_ms: i64, calendar_epoch_ms: i64) -> Self {
        Self {
            window,
            lag_ms,
            calendar_epoch_ms,
            per_topic_count: BTreeMap::new(),
            arrivals: BTreeMap::new(),
            fields: BTreeMap::new(),
        }
    }

    fn identity(&self) -> (i64, i64, i64) {
        (self.window.start_ms, self.window.end_ms, self.lag_ms)
    }

    pub fn record_count(&self) -> u64 {
        self.per_topic_count.values().sum()
    }

    pub fn note_topic(&mut self, topic: &str) {
        self.per_topic_count.entry(topic.to_string()).or_insert(0);
    }

    /// Fold a record in. Records inside the window count fully; records in the
    /// lag tail only register their arrival time for follow counting.
    pub fn add(&mut self, msg: &Message) {
        let t = msg.t_ms;
        if t < self.window.start_ms || t >= self.window.end_ms + self.lag_ms {
            return;
        }
        *self.arrivals.entry(msg.topic.clone()).or_default().entry(t).or_insert(0) += 1;
        if !self.window.contains(t) {
            return;
        }
        *self.per_topic_count.entry(msg.topic.clone()).or_insert(0) += 1;
        for (field, value) in &msg.payload {
            let v = match value {
                Scalar::Int(i) => *i as f64,
                Scalar::Float(f) if f.is_finite() => *f,
                _ => continue,
            };
            self.fields
                .entry(field_key(&msg.topic, field))
                .and_modify(|a| a.push(v))
                .or_insert_with(|| FieldAccumulator::new(v));
        }
    }

    pub fn merge(&self, other: &PartialAggregate) -> Result<PartialAggregate, FeatureError> {
        if self.identity() != other.identity() {
            return Err(FeatureError::WindowMismatch {
                a: self.identity(),
                b: other.identity(),
            });
        }
        let mut out = self.clone();
        for (topic, n) in &other.per_topic_count {
            *out.per_topic_count.entry(topic.clone()).or_insert(0) += n;
        }
        for (topic, times) in &other.arrivals {
            let dst = out.arrivals.entry(topic.clone()).or_default();
            for (t, n) in times {
                *dst.entry(*t).or_insert(0) += n;
            }
        }
        for (key, acc) in &other.fields {
            out.fields
                .entry(key.clone())
                .and_modify(|a| a.absorb(acc))
                .or_insert(*acc);
        }
        Ok(out)
    }

    /// Number of `a` records in the window.
    pub fn source_count(&self) -> BTreeMap<String, u64> {
        self.per_topic_count
            .iter()
            .filter(|(_, n)| **n > 0)
            .map(|(k, n)| (k.clone(), *n))
            .collect()
    }

    /// For each ordered topic pair (a, b), the number of `a` records in the
    /// window followed by at least one `b` record within `(t, t + lag]`.
    pub fn follow_count(&self) -> BTreeMap<(String, String), u64> {
        let topics: BTreeSet<&String> = self.arrivals.keys().collect();
        let mut out = BTreeMap::new();
        for (a, a_times) in &self.arrivals {
            let in_window: Vec<(i64, u32)> = a_times
                .range(self.window.start_ms..self.window.end_ms)
                .map(|(t, n)| (*t, *n))
                .collect();
            if in_window.is_empty() {
                continue;
            }
            for b in &topics {
                if *b == a {
                    continue;
                }
                let b_times = &self.arrivals[*b];
                let follows: u64 = in_window
                    .iter()
                    .filter(|(t, _)| self.lag_ms > 0 && b_times.range(t + 1..=t + self.lag_ms).next().is_some())
                    .map(|(_, n)| u64::from(*n))
                    .sum();
                out.insert((a.clone(), (*b).clone()), follows);
            }
        }
        out
    }

    pub fn finalize(&self) -> Result<FeatureFrame, FeatureError> {
        let len = self.window.len_ms();
        if len <= 0 {
            return Err(FeatureError::ZeroWindow);
        }
        let per_topic_rate: BTreeMap<String, f64> = self
            .per_topic_count
            .iter()
            .map(|(k, n)| (k.clone(), *n as f64 * 1000.0 / len as f64))
            .collect();
        let total = self.record_count();
        let sources = self.source_count();
        let co_occurrence = self
            .follow_count()
            .into_iter()
            .filter_map(|((a, b), f)| {
                let s = *sources.get(&a)?;
                Some((pair_key(&a, &b), f as f64 / s as f64))
            })
            .collect();
        Ok(FeatureFrame {
            window: self.window,
            per_topic_rate,
            total_rate: total as f64 * 1000.0 / len as f64,
            time_bucket: TimeBucket::at(self.calendar_epoch_ms + self.window.start_ms),
            co_occurrence,
            field_stats: self.fields.iter().map(|(k, a)| (k.clone(), a.stats())).collect(),
        })
    }
}

/// Streaming state: routes records into tumbling-window partials and hands
/// back each partial once no further record can change it.
#[derive(Debug, Clone)]
pub struct FeatureState {
    cfg: FeatureConfig,
    known: BTreeSet<String>,
    open: Option<(PartialAggregate, PartialAggregate)>,
}

impl FeatureState {
    pub fn new(cfg: FeatureConfig) -> Result<Self, FeatureError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            known: BTreeSet::new(),
            open: None,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn open_window(&self) -> Option<Window> {
        self.open.as_ref().map(|(cur, _)| cur.window)
    }

    /// Make a topic appear (with rate 0) in frames even before it publishes.
    pub fn register_topic(&mut self, topic: &str) {
        if self.known.insert(topic.to_string()) {
            if let Some((cur, next)) = &mut self.open {
                cur.note_topic(topic);
                next.note_topic(topic);
            }
        }
    }

    fn window_at(&self, start_ms: i64) -> PartialAggregate {
        let mut p = PartialAggregate::empty(
            Window {
                start_ms,
                end_ms: start_ms + self.cfg.window_ms,
            },
            self.cfg.lag_ms,
            self.cfg.calendar_epoch_ms,
        );
        for t in &self.known {
            p.note_topic(t);
        }
        p
    }

    /// Open windows starting at the window that contains `t_ms`.
    pub fn start_at(&mut self, t_ms: i64) {
        let start = t_ms.div_euclid(self.cfg.window_ms) * self.cfg.window_ms;
        self.open = Some((self.window_at(start), self.window_at(start + self.cfg.window_ms)));
    }

    /// Fold one record in; returns any partials that closed as a result.
    pub fn ingest(&mut self, msg: &Message) -> Result<Vec<PartialAggregate>, FeatureError> {
        if self.open.is_none() {
            self.start_at(msg.t_ms);
        }
        self.register_topic(&msg.topic);
        let mut closed = Vec::new();
        let w = self.cfg.window_ms;
        let l = self.cfg.lag_ms;
        loop {
            let (cur, _) = self.open.as_ref().expect("window open");
            if msg.t_ms < cur.window.end_ms + l {
                break;
            }
            let next_start = cur.window.end_ms + w;
            let (cur, next) = self.open.take().expect("window open");
            closed.push(cur);
            self.open = Some((next, self.window_at(next_start)));
        }
        let (cur, next) = self.open.as_mut().expect("window open");
        let mut rec_t = msg.t_ms;
        if rec_t < cur.window.start_ms {
            if cur.window.start_ms - rec_t > self.cfg.tolerance_ms {
                return Err(FeatureError::TimeRegression {
                    t_ms: rec_t,
                    window_start_ms: cur.window.start_ms,
                });
            }
            rec_t = cur.window.start_ms;
        }
        if rec_t == msg.t_ms {
            cur.add(msg);
            next.add(msg);
        } else {
            let mut late = msg.clone();
            late.t_ms = rec_t;
            cur.add(&late);
            next.add(&late);
        }
        Ok(closed)
    }

    /// Close every open window, the following one only if it already holds records.
    pub fn flush(&mut self) -> Vec<PartialAggregate> {
        match self.open.take() {
            None => vec![],
            Some((cur, next)) => {
                let mut out = vec![cur];
                if next.record_count() > 0 {
                    out.push(next);
                }
                out
            }
        }
    }

    /// Close windows that end at or before `t_ms - lag`, as if a record at
    /// `t_ms` had arrived. Used to keep frames flowing when the stream goes quiet.
    pub fn advance_to(&mut self, t_ms: i64) -> Vec<PartialAggregate> {
        let mut closed = Vec::new();
        let w = self.cfg.window_ms;
        while let Some((cur, _)) = &self.open {
            if t_ms < cur.window.end_ms + self.cfg.lag_ms {
                break;
            }
            let next_start = cur.window.end_ms + w;
            let (cur, next) = self.open.take().expect("window open");
            closed.push(cur);
            self.open = Some((next, self.window_at(next_start)));
        }
        closed
    }
}

/// Single-pass frames over an ordered record stream.
pub fn extract_frames<'a, I>(records: I, cfg: FeatureConfig) -> Result<Vec<FeatureFrame>, FeatureError>
where
    I: IntoIterator<Item = &'a Message>,
{
    let mut state = FeatureState::new(cfg)?;
    let mut partials = Vec::new();
    for r in records {
        partials.extend(state.ingest(r)?);
    }
    partials.extend(state.flush());
    partials.iter().map(PartialAggregate::finalize).collect()
}
