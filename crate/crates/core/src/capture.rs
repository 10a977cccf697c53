//! All-topic recorder, trace formats and replay.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::msgbus::{Bus, BusError, FieldSpec, Message, Scalar, ScalarKind, Subscription, TopicHandle, TopicSchema, Validity, WILDCARD};

/// One line of the canonical trace. Serializes with keys in the order
/// `t_ms, topic, seq, payload, validity`.
pub type TraceRecord = Message;

pub const DEFAULT_CAPTURE_DEPTH: usize = 4096;
pub const CAPTURE_NODE: &str = "capture";
pub const TRACE_EXTENSION: &str = ".trace.jsonl";

const CSV_FIXED: [&str; 4] = ["t_ms", "topic", "seq", "validity"];

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("sink is not writable: {0}")]
    SinkUnwritable(String),
    #[error("unknown trace format {0:?} (supported: jsonl, csv, yaml)")]
    UnknownFormat(String),
    #[error("malformed trace at record {line}: {reason}")]
    MalformedTrace { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Bus(#[from] BusError),
}

fn malformed(line: usize, reason: impl ToString) -> CaptureError {
    CaptureError::MalformedTrace {
        line,
        reason: reason.to_string(),
    }
}

/// Destination for captured records. Implementations may be slow; they run
/// on the capture's own writer thread.
pub trait TraceSink: Send + 'static {
    fn write(&mut self, rec: &TraceRecord) -> io::Result<()>;

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl TraceSink for Box<dyn TraceSink> {
    fn write(&mut self, rec: &TraceRecord) -> io::Result<()> {
        (**self).write(rec)
    }

    fn flush(&mut self) -> io::Result<()> {
        (**self).flush()
    }
}

/// Line-delimited JSON file sink.
pub struct JsonlSink {
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> Result<Self, CaptureError> {
        let file = File::create(path).map_err(|e| CaptureError::SinkUnwritable(format!("{}: {e}", path.display())))?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }
}

impl TraceSink for JsonlSink {
    fn write(&mut self, rec: &TraceRecord) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")
    }

    fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

/// In-memory sink; clones share the same buffer.
#[derive(Clone, Default)]
pub struct MemorySink {
    records: Arc<Mutex<Vec<TraceRecord>>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> Vec<TraceRecord> {
        self.records.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TraceSink for MemorySink {
    fn write(&mut self, rec: &TraceRecord) -> io::Result<()> {
        self.records.lock().unwrap().push(rec.clone());
        Ok(())
    }
}

/// Wraps a sink and sleeps before every record, to emulate slow storage.
pub struct DelayedSink<S> {
    inner: S,
    delay: Duration,
}

impl<S: TraceSink> DelayedSink<S> {
    pub fn new(inner: S, delay: Duration) -> Self {
        Self { inner, delay }
    }
}

impl<S: TraceSink> TraceSink for DelayedSink<S> {
    fn write(&mut self, rec: &TraceRecord) -> io::Result<()> {
        std::thread::sleep(self.delay);
        self.inner.write(rec)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureStats {
    pub records_written: u64,
    pub capture_drops: u64,
    pub records_enqueued: u64,
    pub topics_seen: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sink_error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct CaptureConfig {
    pub queue_depth: usize,
    pub node: String,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        Self {
            queue_depth: DEFAULT_CAPTURE_DEPTH,
            node: CAPTURE_NODE.to_string(),
        }
    }
}

#[derive(Default)]
struct Shared {
    running: AtomicBool,
    processed: AtomicU64,
    written: AtomicU64,
    topics: Mutex<BTreeSet<String>>,
    error: Mutex<Option<String>>,
}

/// A running capture. Dropping it stops the writer after draining the queue.
pub struct CaptureHandle {
    sub: Arc<Subscription>,
    shared: Arc<Shared>,
    writer: Option<JoinHandle<()>>,
}

/// Wildcard-subscribe `bus` (including range-rejected copies) and stream
/// every record to `sink` from a dedicated writer thread.
pub fn start_capture<S: TraceSink>(bus: &Bus, sink: S, cfg: CaptureConfig) -> Result<CaptureHandle, CaptureError> {
    bus.register_node(&cfg.node, ["recorder"]);
    let sub = Arc::new(bus.subscribe_with(&cfg.node, WILDCARD, cfg.queue_depth, true)?);
    let shared = Arc::new(Shared::default());
    shared.running.store(true, Ordering::SeqCst);
    let writer = {
        let sub = Arc::clone(&sub);
        let shared = Arc::clone(&shared);
        std::thread::Builder::new()
            .name("capture-writer".into())
            .spawn(move || writer_loop(sub, shared, sink))
            .map_err(|e| CaptureError::SinkUnwritable(e.to_string()))?
    };
    Ok(CaptureHandle {
        sub,
        shared,
        writer: Some(writer),
    })
}

fn writer_loop<S: TraceSink>(sub: Arc<Subscription>, shared: Arc<Shared>, mut sink: S) {
    let mut failed = false;
    loop {
        let msg = sub.recv_timeout(Duration::from_millis(20));
        match msg {
            Some(rec) => {
                if !failed {
                    shared.topics.lock().unwrap().insert(rec.topic.clone());
                    match sink.write(&rec) {
                        Ok(()) => {
                            shared.written.fetch_add(1, Ordering::SeqCst);
                        }
                        Err(e) => {
                            tracing::error!("capture sink failed: {e}");
                            *shared.error.lock().unwrap() = Some(e.to_string());
                            failed = true;
                        }
                    }
                }
                shared.processed.fetch_add(1, Ordering::SeqCst);
            }
            None => {
                if !shared.running.load(Ordering::SeqCst) && sub.is_empty() {
                    break;
                }
                if let Err(e) = sink.flush() {
                    *shared.error.lock().unwrap() = Some(e.to_string());
                    failed = true;
                }
            }
        }
    }
    if let Err(e) = sink.flush() {
        *shared.error.lock().unwrap() = Some(e.to_string());
    }
}

impl CaptureHandle {
    pub fn stats(&self) -> CaptureStats {
        CaptureStats {
            records_written: self.shared.written.load(Ordering::SeqCst),
            capture_drops: self.sub.dropped(),
            records_enqueued: self.sub.delivered(),
            topics_seen: self.shared.topics.lock().unwrap().clone(),
            sink_error: self.shared.error.lock().unwrap().clone(),
        }
    }

    /// Block until every record enqueued so far has been written or dropped.
    pub fn wait_idle(&self) {
        loop {
            let delivered = self.sub.delivered();
            let done = self.shared.processed.load(Ordering::SeqCst) + self.sub.dropped();
            if done >= delivered || self.writer.as_ref().is_none_or(|w| w.is_finished()) {
                return;
            }
            std::thread::yield_now();
        }
    }

    /// Stop capturing, drain what is queued, and return final stats.
    pub fn stop(mut self) -> CaptureStats {
        self.finish();
        self.stats()
    }

    fn finish(&mut self) {
        self.shared.running.store(false, Ordering::SeqCst);
        if let Some(w) = self.writer.take() {
            let _ = w.join();
        }
    }
}

impl Drop for CaptureHandle {
    fn drop(&mut self) {
        self.finish();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Jsonl,
    Csv,
    Yaml,
}

impl TraceFormat {
    pub fn parse(s: &str) -> Result<Self, CaptureError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(TraceFormat::Jsonl),
            "csv" => Ok(TraceFormat::Csv),
            "yaml" | "yml" => Ok(TraceFormat::Yaml),
            other => Err(CaptureError::UnknownFormat(other.to_string())),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, CaptureError> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
        Self::parse(ext)
    }
}

fn validity_str(v: Validity) -> &'static str {
    match v {
        Validity::Ok => "ok",
        Validity::RejectedRange => "rejected_range",
        Validity::Flagged => "flagged",
    }
}

fn parse_validity(s: &str, line: usize) -> Result<Validity, CaptureError> {
    Ok(match s {
        "ok" | "" => Validity::Ok,
        "rejected_range" => Validity::RejectedRange,
        "flagged" => Validity::Flagged,
        other => return Err(malformed(line, format!("unknown validity {other:?}"))),
    })
}

pub fn write_trace<W: Write>(records: &[TraceRecord], format: TraceFormat, out: W) -> Result<(), CaptureError> {
    match format {
        TraceFormat::Jsonl => {
            let mut out = BufWriter::new(out);
            for r in records {
                serde_json::to_writer(&mut out, r).map_err(io::Error::from)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        TraceFormat::Yaml => {
            serde_yaml::to_writer(out, records).map_err(|e| malformed(0, e))?;
        }
        TraceFormat::Csv => write_csv(records, out)?,
    }
    Ok(())
}

fn write_csv<W: Write>(records: &[TraceRecord], out: W) -> Result<(), CaptureError> {
    let columns: BTreeSet<&str> = records.iter().flat_map(|r| r.payload.keys().map(String::as_str)).collect();
    if let Some(c) = columns.iter().find(|c| CSV_FIXED.contains(c)) {
        return Err(malformed(0, format!("payload field {c:?} collides with a fixed csv column")));
    }
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<&str> = CSV_FIXED.iter().copied().chain(columns.iter().copied()).collect();
    w.write_record(&header).map_err(|e| malformed(0, e))?;
    for (i, r) in records.iter().enumerate() {
        let mut row = vec![
            r.t_ms.to_string(),
            r.topic.clone(),
            r.seq.to_string(),
            validity_str(r.validity).to_string(),
        ];
        for c in &columns {
            row.push(match r.payload.get(*c) {
                Some(v) => serde_json::to_string(v).map_err(|e| malformed(i + 1, e))?,
                None => String::new(),
            });
        }
        w.write_record(&row).map_err(|e| malformed(i + 1, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: io::Read>(input: R, format: TraceFormat) -> Result<Vec<TraceRecord>, CaptureError> {
    match format {
        TraceFormat::Jsonl => {
            let mut out = Vec::new();
            for (i, line) in BufReader::new(input).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                out.push(serde_json::from_str(&line).map_err(|e| malformed(i + 1, e))?);
            }
            Ok(out)
        }
        TraceFormat::Yaml => serde_yaml::from_reader(input).map_err(|e| malformed(0, e)),
        TraceFormat::Csv => read_csv(input),
    }
}

fn read_csv<R: io::Read>(input: R) -> Result<Vec<TraceRecord>, CaptureError> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers().map_err(|e| malformed(0, e))?.iter().map(String::from).collect();
    if header.len() < CSV_FIXED.len() || header[..4] != CSV_FIXED {
        return Err(malformed(0, "csv header must start with t_ms,topic,seq,validity"));
    }
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let line = i + 1;
        let row = row.map_err(|e| malformed(line, e))?;
        let t_ms = row[0].parse().map_err(|e| malformed(line, e))?;
        let seq = row[2].parse().map_err(|e| malformed(line, e))?;
        let mut payload = BTreeMap::new();
        for (name, cell) in header.iter().zip(row.iter()).skip(4) {
            if cell.is_empty() {
                continue;
            }
            let v: Scalar = serde_json::from_str(cell).map_err(|e| malformed(line, format!("{name}: {e}")))?;
            payload.insert(name.clone(), v);
        }
        out.push(TraceRecord {
            t_ms,
            topic: row[1].to_string(),
            seq,
            payload,
            validity: parse_validity(&row[3], line)?,
        });
    }
    Ok(out)
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceRecord>, CaptureError> {
    let format = if path.to_string_lossy().ends_with(TRACE_EXTENSION) {
        TraceFormat::Jsonl
    } else {
        TraceFormat::from_path(path)?
    };
    read_trace(File::open(path)?, format)
}

/// Convert a trace file to another format; the target format comes from `format`.
pub fn export(trace: &Path, format: &str, out: &Path) -> Result<usize, CaptureError> {
    let format = TraceFormat::parse(format)?;
    let records = load_trace(trace)?;
    let file = File::create(out).map_err(|e| CaptureError::SinkUnwritable(format!("{}: {e}", out.display())))?;
    write_trace(&records, format, file)?;
    Ok(records.len())
}

/// Derive per-topic schemas from a trace: fields present in every record of
/// the topic with a consistent kind, no ranges.
pub fn infer_schemas(records: &[TraceRecord]) -> Vec<TopicSchema> {
    let mut fields: BTreeMap<&str, BTreeMap<&str, ScalarKind>> = BTreeMap::new();
    for r in records {
        match fields.get_mut(r.topic.as_str()) {
            None => {
                fields.insert(&r.topic, r.payload.iter().map(|(k, v)| (k.as_str(), v.kind())).collect());
            }
            Some(entry) => entry.retain(|k, kind| r.payload.get(*k).is_some_and(|v| v.kind() == *kind)),
        }
    }
    fields
        .into_iter()
        .map(|(topic, f)| {
            let specs = f
                .into_iter()
                .map(|(name, kind)| FieldSpec {
                    name: name.to_string(),
                    kind,
                    range: None,
                })
                .collect();
            TopicSchema::new(topic, specs)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayStats {
    pub published: u64,
    pub topics: usize,
}

/// Publish a trace into `bus`, keeping each record's validity mark. Topics
/// missing from the bus are created from `schemas` or inferred from the trace.
/// `on_record` runs after each publish so callers can pump consumers.
pub fn replay<F>(records: &[TraceRecord], bus: &Bus, schemas: &[TopicSchema], mut on_record: F) -> Result<ReplayStats, CaptureError>
where
    F: FnMut(&TraceRecord),
{
    let inferred = infer_schemas(records);
    let mut handles: BTreeMap<String, TopicHandle> = BTreeMap::new();
    bus.register_node("replay", ["replay"]);
    for s in &inferred {
        let schema = schemas.iter().find(|x| x.name == s.name).cloned().unwrap_or_else(|| s.clone());
        let h = match bus.topic(&s.name) {
            Ok(h) => h,
            Err(_) => bus.advertise("replay", schema)?,
        };
        handles.insert(s.name.clone(), h);
    }
    let mut published = 0;
    for r in records {
        bus.publish_with_validity(&handles[&r.topic], r.payload.clone(), r.t_ms, r.validity)?;
        published += 1;
        on_record(r);
    }
    Ok(ReplayStats {
        published,
        topics: handles.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msgbus::payload;

    fn sample() -> Vec<TraceRecord> {
        vec![
            TraceRecord {
                t_ms: 0,
                topic: "/a".into(),
                seq: 0,
                payload: payload([("x", Scalar::Float(1.5)), ("n", Scalar::Int(3))]),
                validity: Validity::Ok,
            },
            TraceRecord {
                t_ms: 5,
                topic: "/b".into(),
                seq: 0,
                payload: payload([("s", Scalar::Str("hi, \"there\"".into())), ("ok", Scalar::Bool(true))]),
                validity: Validity::Flagged,
            },
            TraceRecord {
                t_ms: 9,
                topic: "/a".into(),
                seq: 1,
                payload: payload([("x", Scalar::Float(2.0))]),
                validity: Validity::RejectedRange,
            },
        ]
    }

    #[test]
    fn jsonl_lines_have_fixed_key_order() {
        let mut buf = Vec::new();
        write_trace(&sample(), TraceFormat::Jsonl, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with(r#"{"t_ms":0,"topic":"/a","seq":0,"payload":{"#));
        assert!(lines[0].ends_with(r#""validity":"ok"}"#));
    }

    #[test]
    fn csv_header_and_round_trip() {
        let mut buf = Vec::new();
        write_trace(&sample(), TraceFormat::Csv, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t_ms,topic,seq,validity,n,ok,s,x");
        assert_eq!(read_trace(&buf[..], TraceFormat::Csv).unwrap(), sample());
    }

    #[test]
    fn yaml_round_trip() {
        let mut buf = Vec::new();
        write_trace(&sample(), TraceFormat::Yaml, &mut buf).unwrap();
        assert_eq!(read_trace(&buf[..], TraceFormat::Yaml).unwrap(), sample());
    }

    #[test]
    fn protobuf_is_unknown() {
        assert!(matches!(TraceFormat::parse("protobuf"), Err(CaptureError::UnknownFormat(_))));
    }

    #[test]
    fn malformed_jsonl_reports_line() {
        let text = "{\"t_ms\":0,\"topic\":\"/a\",\"seq\":0,\"payload\":{}}\nnot json\n";
        match read_trace(text.as_bytes(), TraceFormat::Jsonl) {
            Err(CaptureError::MalformedTrace { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn idle_bus_gives_empty_trace() {
        let bus = Bus::new();
        let sink = MemorySink::new();
        let cap = start_capture(&bus, sink.clone(), CaptureConfig::default()).unwrap();
        let stats = cap.stop();
        assert_eq!(stats.records_written, 0);
        assert_eq!(stats.capture_drops, 0);
        assert!(sink.is_empty());
    }

    #[test]
    fn unwritable_sink() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("x.trace.jsonl");
        assert!(matches!(JsonlSink::create(&path), Err(CaptureError::SinkUnwritable(_))));
    }

    #[test]
    fn replay_preserves_validity_marks() {
        let bus = Bus::new();
        let probe = bus.subscribe_with("probe", WILDCARD, 64, true).unwrap();
        let mut trace = sample();
        trace[2].payload.insert("n".into(), Scalar::Int(4));
        let stats = replay(&trace, &bus, &[], |_| {}).unwrap();
        assert_eq!(stats.published, 3);
        let got = probe.drain();
        assert_eq!(got.len(), 3);
        assert_eq!(got[2].validity, Validity::RejectedRange);
        assert_eq!(got[1].validity, Validity::Flagged);
    }
}
