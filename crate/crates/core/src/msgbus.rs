//! In-process publish/subscribe bus.
//!
//! Topics carry a schema with optional numeric value ranges. Publishing never
//! blocks on a slow subscriber: every subscription owns a bounded ring queue
//! and the oldest message is evicted (and counted) when it is full.
//!
//! Out-of-range payloads are rejected on the publisher side by default and
//! reported as [`ValidityEvent`]s. Topics declared with
//! [`RangePolicy::FlagAndDeliver`] deliver such messages marked
//! [`Validity::Flagged`] so downstream filtering can be exercised.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Condvar, Mutex, RwLock, Weak};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = String;

/// Queue depth used when a schema or subscription does not name one.
pub const DEFAULT_QUEUE_DEPTH: usize = 16;

/// Subscription pattern matching every topic, including ones created later.
pub const WILDCARD: &str = "*";

const VALIDITY_LOG_CAP: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BusError {
    #[error("topic {0} already registered")]
    DuplicateTopic(String),
    #[error("invalid schema for {topic}: {reason}")]
    InvalidSchema { topic: String, reason: String },
    #[error("unknown topic {0}")]
    UnknownTopic(String),
    #[error("time regression on {topic}: {t_ms} < {last_ms}")]
    TimeRegression { topic: String, last_ms: i64, t_ms: i64 },
    #[error("payload mismatch on {topic}.{field}: {reason}")]
    PayloadMismatch {
        topic: String,
        field: String,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarKind {
    Float,
    Int,
    Bool,
    String,
}

/// A single payload value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
}

impl Scalar {
    pub fn kind(&self) -> ScalarKind {
        match self {
            Scalar::Int(_) => ScalarKind::Int,
            Scalar::Float(_) => ScalarKind::Float,
            Scalar::Bool(_) => ScalarKind::Bool,
            Scalar::Str(_) => ScalarKind::String,
        }
    }

    /// Numeric view of the value; `None` for bools and strings.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Scalar::Int(v) => Some(*v as f64),
            Scalar::Float(v) => Some(*v),
            _ => None,
        }
    }
}

impl From<f64> for Scalar {
    fn from(v: f64) -> Self {
        Scalar::Float(v)
    }
}

impl From<i64> for Scalar {
    fn from(v: i64) -> Self {
        Scalar::Int(v)
    }
}

impl From<bool> for Scalar {
    fn from(v: bool) -> Self {
        Scalar::Bool(v)
    }
}

impl From<&str> for Scalar {
    fn from(v: &str) -> Self {
        Scalar::Str(v.to_string())
    }
}

pub type Payload = BTreeMap<String, Scalar>;

/// Build a payload from `(field, value)` pairs.
pub fn payload<I, K, V>(pairs: I) -> Payload
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: Into<Scalar>,
{
    pairs
        .into_iter()
        .map(|(k, v)| (k.into(), v.into()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: ScalarKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
}

impl FieldSpec {
    pub fn float(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: ScalarKind::Float,
            range: None,
        }
    }

    pub fn int(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: ScalarKind::Int,
            range: None,
        }
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.range = Some([lo, hi]);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangePolicy {
    /// Out-of-range messages are denied before enqueue.
    #[default]
    Reject,
    /// Out-of-range messages are delivered marked [`Validity::Flagged`].
    FlagAndDeliver,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Qos {
    pub depth: usize,
}

impl Default for Qos {
    fn default() -> Self {
        Self {
            depth: DEFAULT_QUEUE_DEPTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicSchema {
    pub name: String,
    pub fields: Vec<FieldSpec>,
    #[serde(default)]
    pub qos: Qos,
    #[serde(default)]
    pub range_policy: RangePolicy,
}

impl TopicSchema {
    pub fn new(name: &str, fields: Vec<FieldSpec>) -> Self {
        Self {
            name: name.to_string(),
            fields,
            qos: Qos::default(),
            range_policy: RangePolicy::Reject,
        }
    }

    pub fn flag_and_deliver(mut self) -> Self {
        self.range_policy = RangePolicy::FlagAndDeliver;
        self
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn validate(&self) -> Result<(), BusError> {
        let bad = |reason: String| BusError::InvalidSchema {
            topic: self.name.clone(),
            reason,
        };
        if !self.name.starts_with('/') || !self.name.is_ascii() || self.name.contains(char::is_whitespace) {
            return Err(bad("topic path must be /-separated ASCII".into()));
        }
        if self.qos.depth == 0 {
            return Err(bad("queue depth must be at least 1".into()));
        }
        let mut seen = BTreeSet::new();
        for f in &self.fields {
            if !seen.insert(f.name.as_str()) {
                return Err(bad(format!("duplicate field {}", f.name)));
            }
            if let Some([lo, hi]) = f.range {
                if matches!(f.kind, ScalarKind::Bool | ScalarKind::String) {
                    return Err(bad(format!("field {} is not numeric and cannot carry a range", f.name)));
                }
                if !(lo <= hi) {
                    return Err(bad(format!("range of {} has lo {lo} > hi {hi}", f.name)));
                }
            }
        }
        Ok(())
    }

    /// First field (in schema order) whose value falls outside its range.
    pub fn range_violation(&self, payload: &Payload) -> Option<(String, f64)> {
        self.fields.iter().find_map(|f| {
            let [lo, hi] = f.range?;
            let v = payload.get(&f.name)?.as_f64()?;
            if v >= lo && v <= hi {
                None
            } else {
                Some((f.name.clone(), v))
            }
        })
    }

    fn check_payload(&self, payload: &Payload) -> Result<(), BusError> {
        let mismatch = |field: &str, reason: &str| BusError::PayloadMismatch {
            topic: self.name.clone(),
            field: field.to_string(),
            reason: reason.to_string(),
        };
        for f in &self.fields {
            match payload.get(&f.name) {
                None => return Err(mismatch(&f.name, "missing")),
                Some(v) if v.kind() != f.kind => return Err(mismatch(&f.name, "wrong kind")),
                _ => {}
            }
        }
        if let Some(extra) = payload.keys().find(|k| self.field(k).is_none()) {
            return Err(mismatch(extra, "not declared in schema"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validity {
    #[default]
    Ok,
    RejectedRange,
    Flagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub t_ms: i64,
    pub topic: String,
    pub seq: u64,
    pub payload: Payload,
    #[serde(default)]
    pub validity: Validity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityEvent {
    pub t_ms: i64,
    pub topic: String,
    pub seq: u64,
    pub field: String,
    pub value: f64,
    pub validity: Validity,
}

pub type SubscriptionId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PublishStatus {
    Accepted,
    RejectedRange { field: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishReceipt {
    pub status: PublishStatus,
    pub seq: u64,
    /// Subscribers the message was enqueued to.
    pub delivered: Vec<SubscriptionId>,
    /// Subscribers whose queue evicted its oldest message to make room.
    pub dropped: Vec<SubscriptionId>,
    /// Set when a flag-and-deliver topic passed an out-of-range value through.
    pub flagged: Option<String>,
}

impl PublishReceipt {
    pub fn is_accepted(&self) -> bool {
        self.status == PublishStatus::Accepted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum DirectoryChange {
    NodeRegistered { node: NodeId, tags: BTreeSet<String> },
    TopicCreated { schema: TopicSchema },
    TopicRemoved { topic: String },
    PublisherAdded { node: NodeId, topic: String },
    SubscriberAdded { node: NodeId, topic: String },
    SubscriberRemoved { node: NodeId, topic: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectoryEvent {
    pub epoch: u64,
    #[serde(flatten)]
    pub change: DirectoryChange,
}

/// Serializable view of the bus graph: topics, who publishes and who
/// subscribes, node metadata, and the change counter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BusDirectory {
    pub topics: BTreeMap<String, TopicSchema>,
    pub publishers: BTreeMap<NodeId, BTreeSet<String>>,
    pub subscribers: BTreeMap<NodeId, BTreeSet<String>>,
    pub nodes: BTreeMap<NodeId, BTreeSet<String>>,
    pub epoch: u64,
}

impl BusDirectory {
    /// Apply one logged change. Replaying a bus's full event log onto an
    /// empty directory reproduces [`Bus::directory`].
    pub fn apply(&mut self, event: &DirectoryEvent) {
        match &event.change {
            DirectoryChange::NodeRegistered { node, tags } => {
                self.nodes.insert(node.clone(), tags.clone());
            }
            DirectoryChange::TopicCreated { schema } => {
                self.topics.insert(schema.name.clone(), schema.clone());
            }
            DirectoryChange::TopicRemoved { topic } => {
                self.topics.remove(topic);
                for set in self.publishers.values_mut().chain(self.subscribers.values_mut()) {
                    set.remove(topic);
                }
                self.publishers.retain(|_, s| !s.is_empty());
                self.subscribers.retain(|_, s| !s.is_empty());
            }
            DirectoryChange::PublisherAdded { node, topic } => {
                self.publishers.entry(node.clone()).or_default().insert(topic.clone());
            }
            DirectoryChange::SubscriberAdded { node, topic } => {
                self.subscribers.entry(node.clone()).or_default().insert(topic.clone());
            }
            DirectoryChange::SubscriberRemoved { node, topic } => {
                if let Some(set) = self.subscribers.get_mut(node) {
                    set.remove(topic);
                    if set.is_empty() {
                        self.subscribers.remove(node);
                    }
                }
            }
        }
        self.epoch = event.epoch;
    }

    /// All participants: registered nodes plus anything publishing or subscribing.
    pub fn participants(&self) -> BTreeSet<NodeId> {
        self.nodes
            .keys()
            .chain(self.publishers.keys())
            .chain(self.subscribers.keys())
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TopicStats {
    pub published: u64,
    pub rejected: u64,
    pub flagged: u64,
    pub subscribers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubscriptionStats {
    pub id: SubscriptionId,
    pub node: NodeId,
    pub pattern: String,
    pub depth: usize,
    pub queued: usize,
    pub delivered: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BusStats {
    pub topics: BTreeMap<String, TopicStats>,
    pub subscriptions: Vec<SubscriptionStats>,
    pub validity_events: u64,
}

struct SubQueue {
    id: SubscriptionId,
    node: NodeId,
    pattern: String,
    depth: usize,
    validity_tap: bool,
    queue: Mutex<VecDeque<Message>>,
    ready: Condvar,
    delivered: AtomicU64,
    dropped: AtomicU64,
}

impl SubQueue {
    /// Enqueue, evicting the oldest entry when full. Returns true on eviction.
    fn push(&self, msg: Message) -> bool {
        let mut q = self.queue.lock().unwrap();
        let evicted = if q.len() >= self.depth {
            q.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
            true
        } else {
            false
        };
        q.push_back(msg);
        self.delivered.fetch_add(1, Ordering::Relaxed);
        drop(q);
        self.ready.notify_one();
        evicted
    }
}

struct TopicState {
    next_seq: u64,
    last_t_ms: Option<i64>,
    subs: Vec<Arc<SubQueue>>,
    stats: TopicStats,
}

struct TopicSlot {
    schema: TopicSchema,
    removed: AtomicBool,
    state: Mutex<TopicState>,
}

#[derive(Default)]
struct Directory {
    view: BusDirectory,
    slots: BTreeMap<String, Arc<TopicSlot>>,
    wildcard: Vec<Arc<SubQueue>>,
    all_subs: BTreeMap<SubscriptionId, Arc<SubQueue>>,
    log: Vec<DirectoryEvent>,
    watchers: Vec<mpsc::Sender<DirectoryEvent>>,
}

impl Directory {
    fn record(&mut self, change: DirectoryChange) {
        let event = DirectoryEvent {
            epoch: self.view.epoch + 1,
            change,
        };
        self.view.apply(&event);
        self.watchers.retain(|w| w.send(event.clone()).is_ok());
        self.log.push(event);
    }
}

#[derive(Default)]
struct ValidityLog {
    recent: VecDeque<ValidityEvent>,
    total: u64,
    watchers: Vec<mpsc::Sender<ValidityEvent>>,
}

#[derive(Default)]
struct Inner {
    dir: RwLock<Directory>,
    validity: Mutex<ValidityLog>,
    next_sub: AtomicU64,
}

/// Handle to a registered topic, used for publishing.
#[derive(Clone)]
pub struct TopicHandle {
    slot: Arc<TopicSlot>,
}

impl TopicHandle {
    pub fn name(&self) -> &str {
        &self.slot.schema.name
    }

    pub fn schema(&self) -> &TopicSchema {
        &self.slot.schema
    }
}

impl std::fmt::Debug for TopicHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TopicHandle").field("topic", &self.name()).finish()
    }
}

/// A subscriber's end of the bus. Dropping it detaches the queue.
pub struct Subscription {
    queue: Arc<SubQueue>,
    bus: Weak<Inner>,
}

impl Subscription {
    pub fn id(&self) -> SubscriptionId {
        self.queue.id
    }

    pub fn node(&self) -> &str {
        &self.queue.node
    }

    pub fn try_recv(&self) -> Option<Message> {
        self.queue.queue.lock().unwrap().pop_front()
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<Message> {
        let q = self.queue.queue.lock().unwrap();
        let (mut q, _) = self
            .queue
            .ready
            .wait_timeout_while(q, timeout, |q| q.is_empty())
            .unwrap();
        q.pop_front()
    }

    pub fn drain(&self) -> Vec<Message> {
        self.queue.queue.lock().unwrap().drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.queue.queue.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Messages evicted from this subscription's queue so far.
    pub fn dropped(&self) -> u64 {
        self.queue.dropped.load(Ordering::Relaxed)
    }

    /// Messages enqueued to this subscription so far (including later-evicted ones).
    pub fn delivered(&self) -> u64 {
        self.queue.delivered.load(Ordering::Relaxed)
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        if let Some(inner) = self.bus.upgrade() {
            Bus { inner }.detach(&self.queue);
        }
    }
}

/// The bus. Cloning yields another handle to the same bus.
#[derive(Clone, Default)]
pub struct Bus {
    inner: Arc<Inner>,
}

impl Bus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register node metadata (tags drive hierarchy grouping).
    pub fn register_node<I, S>(&self, node: &str, tags: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tags = tags.into_iter().map(Into::into).collect();
        let mut dir = self.inner.dir.write().unwrap();
        dir.record(DirectoryChange::NodeRegistered {
            node: node.to_string(),
            tags,
        });
    }

    pub fn create_topic(&self, schema: TopicSchema) -> Result<TopicHandle, BusError> {
        schema.validate()?;
        let mut dir = self.inner.dir.write().unwrap();
        if dir.slots.contains_key(&schema.name) {
            return Err(BusError::DuplicateTopic(schema.name));
        }
        let slot = Arc::new(TopicSlot {
            schema: schema.clone(),
            removed: AtomicBool::new(false),
            state: Mutex::new(TopicState {
                next_seq: 0,
                last_t_ms: None,
                subs: dir.wildcard.clone(),
                stats: TopicStats::default(),
            }),
        });
        dir.slots.insert(schema.name.clone(), slot.clone());
        dir.record(DirectoryChange::TopicCreated { schema });
        Ok(TopicHandle { slot })
    }

    /// Create the topic (if absent) and record `node` as a publisher of it.
    pub fn advertise(&self, node: &str, schema: TopicSchema) -> Result<TopicHandle, BusError> {
        let name = schema.name.clone();
        let handle = match self.create_topic(schema) {
            Ok(h) => h,
            Err(BusError::DuplicateTopic(_)) => self.topic(&name)?,
            Err(e) => return Err(e),
        };
        let mut dir = self.inner.dir.write().unwrap();
        dir.record(DirectoryChange::PublisherAdded {
            node: node.to_string(),
            topic: name,
        });
        Ok(handle)
    }

    pub fn topic(&self, name: &str) -> Result<TopicHandle, BusError> {
        let dir = self.inner.dir.read().unwrap();
        dir.slots
            .get(name)
            .map(|slot| TopicHandle { slot: slot.clone() })
            .ok_or_else(|| BusError::UnknownTopic(name.to_string()))
    }

    pub fn remove_topic(&self, name: &str) -> Result<(), BusError> {
        let mut dir = self.inner.dir.write().unwrap();
        let slot = dir
            .slots
            .remove(name)
            .ok_or_else(|| BusError::UnknownTopic(name.to_string()))?;
        slot.removed.store(true, Ordering::SeqCst);
        slot.state.lock().unwrap().subs.clear();
        dir.record(DirectoryChange::TopicRemoved {
            topic: name.to_string(),
        });
        Ok(())
    }

    pub fn subscribe(&self, node: &str, pattern: &str) -> Result<Subscription, BusError> {
        let depth = if pattern == WILDCARD {
            DEFAULT_QUEUE_DEPTH
        } else {
            self.topic(pattern)?.schema().qos.depth
        };
        self.subscribe_with(node, pattern, depth, false)
    }

    /// Subscribe with an explicit queue depth. With `validity_tap` the
    /// subscription also receives copies of range-rejected messages, marked
    /// [`Validity::RejectedRange`]; the capture recorder uses this.
    pub fn subscribe_with(
        &self,
        node: &str,
        pattern: &str,
        depth: usize,
        validity_tap: bool,
    ) -> Result<Subscription, BusError> {
        let queue = Arc::new(SubQueue {
            id: self.inner.next_sub.fetch_add(1, Ordering::Relaxed),
            node: node.to_string(),
            pattern: pattern.to_string(),
            depth: depth.max(1),
            validity_tap,
            queue: Mutex::new(VecDeque::new()),
            ready: Condvar::new(),
            delivered: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
        });
        let mut dir = self.inner.dir.write().unwrap();
        if pattern == WILDCARD {
            for slot in dir.slots.values() {
                slot.state.lock().unwrap().subs.push(queue.clone());
            }
            dir.wildcard.push(queue.clone());
        } else {
            let slot = dir
                .slots
                .get(pattern)
                .ok_or_else(|| BusError::UnknownTopic(pattern.to_string()))?;
            slot.state.lock().unwrap().subs.push(queue.clone());
        }
        dir.all_subs.insert(queue.id, queue.clone());
        dir.record(DirectoryChange::SubscriberAdded {
            node: node.to_string(),
            topic: pattern.to_string(),
        });
        Ok(Subscription {
            queue,
            bus: Arc::downgrade(&self.inner),
        })
    }

    fn detach(&self, queue: &Arc<SubQueue>) {
        let mut dir = self.inner.dir.write().unwrap();
        if dir.all_subs.remove(&queue.id).is_none() {
            return;
        }
        dir.wildcard.retain(|q| q.id != queue.id);
        for slot in dir.slots.values() {
            slot.state.lock().unwrap().subs.retain(|q| q.id != queue.id);
        }
        let still_present = dir.slots.contains_key(&queue.pattern) || queue.pattern == WILDCARD;
        let other_same = dir
            .all_subs
            .values()
            .any(|q| q.node == queue.node && q.pattern == queue.pattern);
        if still_present && !other_same {
            dir.record(DirectoryChange::SubscriberRemoved {
                node: queue.node.clone(),
                topic: queue.pattern.clone(),
            });
        }
    }

    pub fn publish(&self, handle: &TopicHandle, payload: Payload, t_ms: i64) -> Result<PublishReceipt, BusError> {
        self.publish_inner(handle, payload, t_ms, None)
    }

    /// Publish while carrying over a validity verdict recorded elsewhere
    /// (trace replay). `RejectedRange` only produces a validity event.
    pub fn publish_with_validity(
        &self,
        handle: &TopicHandle,
        payload: Payload,
        t_ms: i64,
        validity: Validity,
    ) -> Result<PublishReceipt, BusError> {
        self.publish_inner(handle, payload, t_ms, Some(validity))
    }

    fn publish_inner(
        &self,
        handle: &TopicHandle,
        payload: Payload,
        t_ms: i64,
        forced: Option<Validity>,
    ) -> Result<PublishReceipt, BusError> {
        let slot = &handle.slot;
        let schema = &slot.schema;
        if slot.removed.load(Ordering::SeqCst) {
            return Err(BusError::UnknownTopic(schema.name.clone()));
        }
        schema.check_payload(&payload)?;

        let mut state = slot.state.lock().unwrap();
        if let Some(last) = state.last_t_ms {
            if t_ms < last {
                return Err(BusError::TimeRegression {
                    topic: schema.name.clone(),
                    last_ms: last,
                    t_ms,
                });
            }
        }
        let seq = state.next_seq;
        state.next_seq += 1;
        state.last_t_ms = Some(t_ms);
        state.stats.published += 1;

        let violation = schema.range_violation(&payload);
        let validity = match (forced, &violation, schema.range_policy) {
            (Some(v), _, _) if v != Validity::Ok => v,
            (_, Some(_), RangePolicy::Reject) => Validity::RejectedRange,
            (_, Some(_), RangePolicy::FlagAndDeliver) => Validity::Flagged,
            _ => Validity::Ok,
        };
        let msg = Message {
            topic: schema.name.clone(),
            t_ms,
            seq,
            payload,
            validity,
        };

        if validity != Validity::Ok {
            let (field, value) = violation.clone().unwrap_or_else(|| ("?".to_string(), f64::NAN));
            self.emit_validity(ValidityEvent {
                t_ms,
                topic: schema.name.clone(),
                seq,
                field,
                value,
                validity,
            });
        }

        let mut receipt = PublishReceipt {
            status: PublishStatus::Accepted,
            seq,
            delivered: Vec::new(),
            dropped: Vec::new(),
            flagged: None,
        };
        match validity {
            Validity::RejectedRange => {
                state.stats.rejected += 1;
                for q in state.subs.iter().filter(|q| q.validity_tap) {
                    q.push(msg.clone());
                }
                receipt.status = PublishStatus::RejectedRange {
                    field: violation.map(|(f, _)| f).unwrap_or_default(),
                };
                return Ok(receipt);
            }
            Validity::Flagged => {
                state.stats.flagged += 1;
                receipt.flagged = violation.map(|(f, _)| f);
            }
            Validity::Ok => {}
        }
        for q in &state.subs {
            if q.push(msg.clone()) {
                receipt.dropped.push(q.id);
            }
            receipt.delivered.push(q.id);
        }
        Ok(receipt)
    }

    fn emit_validity(&self, event: ValidityEvent) {
        let mut log = self.inner.validity.lock().unwrap();
        log.total += 1;
        if log.recent.len() >= VALIDITY_LOG_CAP {
            log.recent.pop_front();
        }
        log.watchers.retain(|w| w.send(event.clone()).is_ok());
        log.recent.push_back(event);
    }

    /// Stream of validity events from now on.
    pub fn watch_validity(&self) -> mpsc::Receiver<ValidityEvent> {
        let (tx, rx) = mpsc::channel();
        self.inner.validity.lock().unwrap().watchers.push(tx);
        rx
    }

    pub fn recent_validity_events(&self) -> Vec<ValidityEvent> {
        self.inner.validity.lock().unwrap().recent.iter().cloned().collect()
    }

    pub fn validity_event_count(&self) -> u64 {
        self.inner.validity.lock().unwrap().total
    }

    /// Stream of directory changes from now on.
    pub fn watch_directory(&self) -> mpsc::Receiver<DirectoryEvent> {
        let (tx, rx) = mpsc::channel();
        self.inner.dir.write().unwrap().watchers.push(tx);
        rx
    }

    pub fn directory(&self) -> BusDirectory {
        self.inner.dir.read().unwrap().view.clone()
    }

    pub fn directory_log(&self) -> Vec<DirectoryEvent> {
        self.inner.dir.read().unwrap().log.clone()
    }

    pub fn epoch(&self) -> u64 {
        self.inner.dir.read().unwrap().view.epoch
    }

    pub fn schema(&self, topic: &str) -> Option<TopicSchema> {
        self.inner.dir.read().unwrap().view.topics.get(topic).cloned()
    }

    pub fn stats(&self) -> BusStats {
        let dir = self.inner.dir.read().unwrap();
        let topics = dir
            .slots
            .iter()
            .map(|(name, slot)| {
                let st = slot.state.lock().unwrap();
                let mut stats = st.stats.clone();
                stats.subscribers = st.subs.len();
                (name.clone(), stats)
            })
            .collect();
        let subscriptions = dir
            .all_subs
            .values()
            .map(|q| SubscriptionStats {
                id: q.id,
                node: q.node.clone(),
                pattern: q.pattern.clone(),
                depth: q.depth,
                queued: q.queue.lock().unwrap().len(),
                delivered: q.delivered.load(Ordering::Relaxed),
                dropped: q.dropped.load(Ordering::Relaxed),
            })
            .collect();
        BusStats {
            topics,
            subscriptions,
            validity_events: self.validity_event_count(),
        }
    }
}
