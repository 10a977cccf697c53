//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Runs without the test harness so the lines always
//! reach stdout.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use busguard_core::alarmdesk::{AlarmDesk, AlarmDeskConfig, AlarmSource, AlarmState, FeedbackAction};
use busguard_core::bench::{monitor_config, run_suite, scenarios, splash_scenarios};
use busguard_core::capture::{read_trace, start_capture, write_trace, CaptureConfig, DelayedSink, MemorySink, TraceFormat, TraceRecord};
use busguard_core::detectors::{score_isolated, AnomalyEvent, Detector, DetectorConfig, DetectorKind};
use busguard_core::envelope::{assess, DimExceedance, EStopDecision, Envelope, EnvelopeDim, RiskAccumulator, RiskModel, TriggerRule};
use busguard_core::features::{FeatureConfig, FeatureFrame, FeatureState, FieldStats, PartialAggregate, TimeBucket, Window};
use busguard_core::hierarchy::{apply_grouping, decomposability_test, group_values, GroupAttribute, GroupPredicate, GroupingScheme, SystemGraph, DEFAULT_KAPPA, DEFAULT_TAU};
use busguard_core::msgbus::{payload, Bus, FieldSpec, Message, Scalar, TopicSchema, Validity};
use busguard_core::placement::{run_placement, LinkModel, PipelineSetup, PlacementMode, PlacementPlan, SiteSpec};
use busguard_core::recovery::ShadowPair;
use busguard_core::simbot::{run_scenario, Scenario, CMD_VEL, ODOM};
use busguard_core::system::{System, DETECTORS_NODE, ENVELOPE_NODE};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 11] = [
        ("benchmark recall and false-alarm rate", benchmark),
        ("non-blocking capture under a slow sink", capture_stress),
        ("dynamic topic pickup", dynamic_topic),
        ("export round-trip", export_round_trip),
        ("merge equivalence", merge_equivalence),
        ("envelope properties", envelope_properties),
        ("validity separation", validity_separation),
        ("operator-feedback suppression", hitl_suppression),
        ("recovery", recovery),
        ("hierarchy", hierarchy),
        ("isolated-detector oracle", isolated_oracle),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.1}s): {why}");
            }
        }
    }
    println!("acceptance: {} passed, {} failed", 11 - failed, failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn benchmark() -> Result<String, String> {
    let r = run_suite(&scenarios(), &monitor_config()).map_err(|e| e.to_string())?;
    let o = &r.overall;
    let recall = o.recall.unwrap_or(0.0);
    ensure(o.injections == 20, || format!("expected 20 injections, got {}", o.injections))?;
    ensure(recall >= 0.70, || format!("recall {recall:.2} < 0.70"))?;
    ensure(o.false_alarm_rate_per_min <= 0.5, || format!("false alarms {:.3}/min > 0.5", o.false_alarm_rate_per_min))?;
    ensure(r.wall_s < 120.0, || format!("suite took {:.1}s", r.wall_s))?;
    let kinds: Vec<String> = o.per_kind.iter().map(|(k, s)| format!("{k} {}/{}", s.detected, s.injections)).collect();
    Ok(format!(
        "recall {recall:.2}, {:.3} false alarms/min, wall {:.2}s [{}]",
        o.false_alarm_rate_per_min,
        r.wall_s,
        kinds.join(", ")
    ))
}

fn capture_stress() -> Result<String, String> {
    const N: usize = 10_000;
    let bus = Bus::new();
    let topic = bus
        .create_topic(TopicSchema::new("/load", vec![FieldSpec::float("v")]))
        .map_err(|e| e.to_string())?;
    let live = bus.subscribe_with("live", "/load", N, false).map_err(|e| e.to_string())?;
    let sink = MemorySink::new();
    let cap = start_capture(
        &bus,
        DelayedSink::new(sink.clone(), Duration::from_millis(10)),
        CaptureConfig {
            queue_depth: 256,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;

    let mut lat = Vec::with_capacity(N);
    let start = Instant::now();
    for i in 0..N {
        let due = start + Duration::from_millis(i as u64);
        while Instant::now() < due {
            std::thread::sleep(due - Instant::now());
        }
        let t0 = Instant::now();
        bus.publish(&topic, payload([("v", i as f64)]), i as i64).map_err(|e| e.to_string())?;
        lat.push(t0.elapsed());
    }
    let publish_wall = start.elapsed();
    let stats = cap.stop();

    lat.sort();
    let p99 = lat[N * 99 / 100];
    let max = *lat.last().unwrap();
    let got = live.drain();
    ensure(got.len() == N && live.dropped() == 0, || format!("live subscriber got {} of {N}", got.len()))?;
    ensure(got.iter().enumerate().all(|(i, m)| m.t_ms == i as i64), || "live subscriber order broken".into())?;
    ensure(max < Duration::from_millis(10), || format!("max publish latency {max:?} reaches the sink delay"))?;
    ensure(p99 < Duration::from_millis(1), || format!("p99 publish latency {p99:?}"))?;
    ensure(stats.records_written + stats.capture_drops == N as u64, || {
        format!("written {} + dropped {} != {N}", stats.records_written, stats.capture_drops)
    })?;
    ensure(sink.len() as u64 == stats.records_written, || "sink count differs from stats".into())?;
    Ok(format!(
        "publish p99 {p99:?}, max {max:?} over {:.1}s; live 100%; capture wrote {} and counted {} drops",
        publish_wall.as_secs_f64(),
        stats.records_written,
        stats.capture_drops
    ))
}

fn dynamic_topic() -> Result<String, String> {
    let bus = Bus::new();
    let early = bus
        .create_topic(TopicSchema::new("/early", vec![FieldSpec::float("v")]))
        .map_err(|e| e.to_string())?;
    let sink = MemorySink::new();
    let cap = start_capture(&bus, sink.clone(), CaptureConfig::default()).map_err(|e| e.to_string())?;
    for t in 0..100 {
        bus.publish(&early, payload([("v", t as f64)]), t).map_err(|e| e.to_string())?;
    }
    let late = bus
        .advertise("newcomer", TopicSchema::new("/late/topic", vec![FieldSpec::float("v")]))
        .map_err(|e| e.to_string())?;
    bus.publish(&late, payload([("v", 42.0)]), 100).map_err(|e| e.to_string())?;
    for t in 101..120 {
        bus.publish(&late, payload([("v", t as f64)]), t).map_err(|e| e.to_string())?;
    }
    let stats = cap.stop();
    let recs = sink.records();
    let first = recs.iter().find(|r| r.topic == "/late/topic").ok_or("late topic missing from trace")?;
    ensure(first.t_ms == 100 && first.payload["v"] == Scalar::Float(42.0), || format!("first late record is {first:?}"))?;
    ensure(recs.iter().filter(|r| r.topic == "/late/topic").count() == 20, || "late records lost".into())?;
    ensure(stats.topics_seen.contains("/late/topic"), || "stats miss the late topic".into())?;
    Ok(format!("first message of a topic created at t=100 ms is in the trace ({} records)", recs.len()))
}

fn random_scalar(rng: &mut ChaCha8Rng) -> Scalar {
    const WORDS: [&str; 10] = ["", "a,b", "say \"hi\"", "line\nbreak", "true", "null", "1.5", "~", "- x", "ünï"];
    match rng.random_range(0..6) {
        0 => Scalar::Int(rng.random_range(i64::MIN / 2..i64::MAX / 2)),
        1 => Scalar::Float(rng.random_range(-1e6..1e6)),
        2 => {
            let e: i32 = rng.random_range(-300..300);
            Scalar::Float(rng.random_range(-10.0..10.0) * 10f64.powi(e))
        }
        3 => Scalar::Float(rng.random_range(-100..100) as f64),
        4 => Scalar::Bool(rng.random()),
        _ => Scalar::Str(WORDS[rng.random_range(0..WORDS.len())].to_string()),
    }
}

fn random_trace(rng: &mut ChaCha8Rng) -> Vec<TraceRecord> {
    const TOPICS: [&str; 4] = ["/cmd_vel", "/odom", "/sys/cpu/a", "/odd name"];
    const FIELDS: [&str; 6] = ["linear", "angular", "x", "load", "label", "flag"];
    let n = rng.random_range(1..40);
    let mut t = rng.random_range(0..1000);
    (0..n)
        .map(|i| {
            t += rng.random_range(0..50);
            let mut p = BTreeMap::new();
            for _ in 0..rng.random_range(1..4) {
                p.insert(FIELDS[rng.random_range(0..FIELDS.len())].to_string(), random_scalar(rng));
            }
            Message {
                t_ms: t,
                topic: TOPICS[rng.random_range(0..TOPICS.len())].to_string(),
                seq: i as u64,
                payload: p,
                validity: [Validity::Ok, Validity::RejectedRange, Validity::Flagged][rng.random_range(0..3)],
            }
        })
        .collect()
}

fn through(records: &[TraceRecord], format: TraceFormat) -> Result<Vec<TraceRecord>, String> {
    let mut buf = Vec::new();
    write_trace(records, format, &mut buf).map_err(|e| e.to_string())?;
    read_trace(buf.as_slice(), format).map_err(|e| e.to_string())
}

fn export_round_trip() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut records = 0;
    for i in 0..1000 {
        let trace = random_trace(&mut rng);
        records += trace.len();
        let jsonl = through(&trace, TraceFormat::Jsonl)?;
        for format in [TraceFormat::Csv, TraceFormat::Yaml] {
            let back = through(&through(&jsonl, format)?, TraceFormat::Jsonl)?;
            ensure(back == trace, || {
                let at = back.iter().zip(&trace).position(|(a, b)| a != b);
                format!("trace {i} differs after {format:?} at record {at:?}")
            })?;
        }
    }
    Ok(format!("1000 random traces ({records} records) field-exact through csv and yaml"))
}

fn partials_by_window(records: &[&Message], cfg: &FeatureConfig, topics: &[&str], end_ms: i64) -> Result<BTreeMap<i64, PartialAggregate>, String> {
    let mut st = FeatureState::new(cfg.clone()).map_err(|e| e.to_string())?;
    for t in topics {
        st.register_topic(t);
    }
    st.start_at(0);
    let mut out = Vec::new();
    for r in records {
        out.extend(st.ingest(r).map_err(|e| e.to_string())?);
    }
    out.extend(st.advance_to(end_ms));
    out.extend(st.flush());
    Ok(out.into_iter().map(|p| (p.window.start_ms, p)).collect())
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

fn frames_match(a: &FeatureFrame, b: &FeatureFrame) -> bool {
    let maps = |x: &BTreeMap<String, f64>, y: &BTreeMap<String, f64>| {
        x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| close(*v, *w)))
    };
    a.window == b.window
        && close(a.total_rate, b.total_rate)
        && maps(&a.per_topic_rate, &b.per_topic_rate)
        && maps(&a.co_occurrence, &b.co_occurrence)
        && a.field_stats.len() == b.field_stats.len()
        && a.field_stats.iter().all(|(k, s)| {
            b.field_stats.get(k).is_some_and(|t| {
                s.count == t.count && close(s.mean, t.mean) && close(s.std, t.std) && s.min == t.min && s.max == t.max
            })
        })
}

fn merge_equivalence() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let topics = ["/a", "/b", "/c"];
    let cfg = FeatureConfig {
        window_ms: 1000,
        lag_ms: 100,
        ..Default::default()
    };
    let mut windows = 0;
    for case in 0..200 {
        let n = rng.random_range(0..400);
        let mut ts: Vec<i64> = (0..n).map(|_| rng.random_range(0..6000)).collect();
        ts.sort();
        let recs: Vec<Message> = ts
            .iter()
            .enumerate()
            .map(|(i, t)| Message {
                t_ms: *t,
                topic: topics[rng.random_range(0..3)].to_string(),
                seq: i as u64,
                payload: payload([("v", rng.random_range(-5.0..5.0))]),
                validity: Validity::Ok,
            })
            .collect();
        let parts = rng.random_range(2..6);
        let owner: Vec<usize> = recs.iter().map(|_| rng.random_range(0..parts)).collect();
        let all: Vec<&Message> = recs.iter().collect();
        let single = partials_by_window(&all, &cfg, &topics, 6000)?;
        let mut merged: BTreeMap<i64, PartialAggregate> = BTreeMap::new();
        for p in 0..parts {
            let mine: Vec<&Message> = recs.iter().zip(&owner).filter(|(_, o)| **o == p).map(|(r, _)| r).collect();
            for (w, part) in partials_by_window(&mine, &cfg, &topics, 6000)? {
                let next = match merged.get(&w) {
                    Some(acc) => acc.merge(&part).map_err(|e| e.to_string())?,
                    None => part,
                };
                merged.insert(w, next);
            }
        }
        ensure(merged.keys().eq(single.keys()), || format!("case {case}: window sets differ"))?;
        for (w, s) in &single {
            let m = &merged[w];
            ensure(m.per_topic_count == s.per_topic_count, || format!("case {case} window {w}: counts differ"))?;
            let (fm, fs) = (m.finalize().map_err(|e| e.to_string())?, s.finalize().map_err(|e| e.to_string())?);
            ensure(frames_match(&fm, &fs), || format!("case {case} window {w}: frames differ\n{fm:?}\n{fs:?}"))?;
            windows += 1;
        }
    }

    // placement: identical hub decisions over lossless links
    let mut sc = scenarios()[0].clone();
    sc.duration_ms = 120_000;
    sc.injections.retain(|i| i.end_ms < sc.duration_ms);
    let bus = Bus::new();
    let sink = MemorySink::new();
    let cap = start_capture(&bus, sink.clone(), CaptureConfig::default()).map_err(|e| e.to_string())?;
    run_scenario(&sc, &bus).map_err(|e| e.to_string())?;
    cap.stop();
    let trace: Vec<Message> = sink.records().into_iter().filter(|r| r.validity == Validity::Ok).collect();
    let mon = monitor_config();
    let setup = PipelineSetup {
        features: mon.features.clone(),
        detectors: mon.detectors.clone(),
        envelope: None,
    };
    let topics_seen: BTreeSet<String> = trace.iter().map(|r| r.topic.clone()).collect();
    let plan = |mode| PlacementPlan {
        mode,
        sites: vec![
            SiteSpec {
                name: "teleop".into(),
                topics: vec![CMD_VEL.into()],
                link: LinkModel::default(),
            },
            SiteSpec {
                name: "robot".into(),
                topics: topics_seen.iter().filter(|t| t.as_str() != CMD_VEL).cloned().collect(),
                link: LinkModel::default(),
            },
        ],
        buffer_cap: 60,
        seed: 3,
    };
    let hub = run_placement(&trace, &plan(PlacementMode::HubSpoke), &setup).map_err(|e| e.to_string())?;
    let red = run_placement(&trace, &plan(PlacementMode::LocalReduction), &setup).map_err(|e| e.to_string())?;
    let key = |e: &AnomalyEvent| (e.t_ms, e.detector_id.clone());
    let a: Vec<_> = hub.hub_events.iter().map(key).collect();
    let b: Vec<_> = red.hub_events.iter().map(key).collect();
    ensure(!a.is_empty(), || "placement run produced no decisions to compare".into())?;
    ensure(a == b, || format!("hub_spoke {} events vs local_reduction {}", a.len(), b.len()))?;
    ensure(hub.hub_frames.len() == red.hub_frames.len(), || "frame counts differ".into())?;
    ensure(hub.hub_frames.iter().zip(&red.hub_frames).all(|(x, y)| frames_match(x, y)), || "placement frames differ".into())?;
    Ok(format!(
        "200 partitions ({windows} windows) exact; placement decisions identical ({} events, {} vs {} bytes forwarded)",
        a.len(),
        hub.metrics.forwarded_bytes,
        red.metrics.forwarded_bytes
    ))
}

fn random_envelope(rng: &mut ChaCha8Rng) -> Envelope {
    let dims = rng.random_range(1..5);
    Envelope::new(
        (0..dims)
            .map(|i| {
                let mut b: Vec<f64> = (0..6).map(|_| rng.random_range(-50.0..50.0)).collect();
                b.sort_by(f64::total_cmp);
                // keep FOS to OE spans open so exceedance is defined
                b[0] -= 1.0;
                b[5] += 1.0;
                EnvelopeDim::new(&format!("d{i}"), "u", [b[2], b[3]], [b[1], b[4]], [b[0], b[5]])
            })
            .collect(),
    )
    .expect("sorted bounds nest")
}

fn random_model(rng: &mut ChaCha8Rng, dims: usize) -> RiskModel {
    RiskModel {
        combine: if rng.random() {
            busguard_core::envelope::Combine::Max
        } else {
            busguard_core::envelope::Combine::Sum
        },
        p: rng.random_range(1.0..4.0),
        weights: (0..dims).map(|_| rng.random_range(0.1..3.0)).collect(),
        lambda_per_s: rng.random_range(0.0..1.0),
        r_star: rng.random_range(0.05..2.0),
        count_m: usize::MAX,
        count_window_ms: 10_000,
    }
}

fn oracle_exceedance(d: &EnvelopeDim, x: f64) -> f64 {
    if x > d.fos_hi {
        ((x - d.fos_hi) / (d.oe_hi - d.fos_hi)).min(1.0)
    } else if x < d.fos_lo {
        ((d.fos_lo - x) / (d.fos_lo - d.oe_lo)).min(1.0)
    } else {
        0.0
    }
}

fn envelope_properties() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..10_000 {
        let env = random_envelope(&mut rng);
        let model = random_model(&mut rng, env.dims.len());
        let phi: Vec<f64> = env.dims.iter().map(|d| rng.random_range(d.fos_lo..=d.fos_hi)).collect();
        let r = assess(&phi, &env, &model).map_err(|e| e.to_string())?;
        ensure(r.risk == 0.0, || format!("point {i} inside FOS has risk {}", r.risk))?;
    }
    for i in 0..10_000 {
        let env = random_envelope(&mut rng);
        let model = random_model(&mut rng, env.dims.len());
        let mut phi: Vec<f64> = env.dims.iter().map(|d| rng.random_range(d.oe_lo..=d.oe_hi)).collect();
        let k = rng.random_range(0..env.dims.len());
        let d = &env.dims[k];
        let up = rng.random::<bool>();
        let start = rng.random_range(d.fos_lo..=d.fos_hi);
        let far = if up { d.oe_hi + 5.0 } else { d.oe_lo - 5.0 };
        let mut last = -1.0;
        for s in 0..=40 {
            phi[k] = start + (far - start) * s as f64 / 40.0;
            let r = assess(&phi, &env, &model).map_err(|e| e.to_string())?.risk;
            ensure(r >= last, || format!("ray {i}: risk fell from {last} to {r}"))?;
            last = r;
        }
    }
    // lambda = 0: constant risk r triggers at R*/r
    let mut worst_ticks = 0.0f64;
    for i in 0..500 {
        let env = random_envelope(&mut rng);
        let mut model = random_model(&mut rng, env.dims.len());
        model.lambda_per_s = 0.0;
        let phi: Vec<f64> = env.dims.iter().map(|d| rng.random_range(d.fos_hi..d.oe_hi)).collect();
        let report = assess(&phi, &env, &model).map_err(|e| e.to_string())?;
        if report.risk <= 1e-3 {
            continue;
        }
        let tick = 10;
        let expect_ms = model.r_star / report.risk * 1000.0;
        let mut acc = RiskAccumulator::new(model).map_err(|e| e.to_string())?;
        let mut t = 0;
        let fired = loop {
            t += tick;
            if acc.accumulate(&report, t, tick).is_some() {
                break t;
            }
            if t > 10_000_000 {
                return Err(format!("case {i} never fired"));
            }
        };
        let off = (fired as f64 - expect_ms).abs() / tick as f64;
        worst_ticks = worst_ticks.max(off);
        ensure(off <= 1.0, || format!("case {i}: fired at {fired} ms, expected {expect_ms:.1} ms"))?;
    }
    // every decision names exactly the dims with nonzero exceedance
    let mut decisions = 0;
    for _ in 0..500 {
        let env = random_envelope(&mut rng);
        let model = random_model(&mut rng, env.dims.len());
        let mut acc = RiskAccumulator::new(model.clone()).map_err(|e| e.to_string())?;
        for step in 1..200 {
            let phi: Vec<f64> = env.dims.iter().map(|d| rng.random_range(d.oe_lo - 1.0..d.oe_hi + 1.0)).collect();
            let report = assess(&phi, &env, &model).map_err(|e| e.to_string())?;
            if let Some(dec) = acc.accumulate(&report, step * 50, 50) {
                decisions += 1;
                let want: Vec<&str> = env
                    .dims
                    .iter()
                    .zip(&phi)
                    .filter(|(d, x)| oracle_exceedance(d, **x) > 0.0)
                    .map(|(d, _)| d.name.as_str())
                    .collect();
                let got: Vec<&str> = dec.contributing.iter().map(|c| c.name.as_str()).collect();
                ensure(got == want && !got.is_empty(), || format!("decision lists {got:?}, oracle {want:?}"))?;
            }
        }
    }
    Ok(format!(
        "10^4 FOS points at zero risk, 10^4 monotone rays, trigger time within {worst_ticks:.2} ticks, {decisions} decisions list their dims"
    ))
}

fn validity_separation() -> Result<String, String> {
    let mut cfg = monitor_config();
    let mut summary = Vec::new();
    for on in [false, true] {
        cfg.validity_filter = on;
        let r = run_suite(&splash_scenarios(), &cfg).map_err(|e| e.to_string())?;
        for c in &r.cases {
            let anomaly_alarms = c.alarms.iter().filter(|a| matches!(a.source, AlarmSource::Anomaly(_))).count();
            ensure(c.validity_events > 0, || format!("{}: no validity counts (filter {on})", c.name))?;
            if on {
                ensure(anomaly_alarms == 0, || format!("{}: {anomaly_alarms} anomaly alarms with the filter on", c.name))?;
            } else {
                ensure(anomaly_alarms >= 1, || format!("{}: no anomaly alarm with the filter off", c.name))?;
            }
            summary.push(anomaly_alarms);
        }
    }
    Ok(format!("anomaly alarms per run, filter off {:?}, filter on {:?}", &summary[..5], &summary[5..]))
}

fn anomaly(t_ms: i64, detector: &str) -> AlarmSource {
    AlarmSource::Anomaly(AnomalyEvent {
        t_ms,
        detector_id: detector.into(),
        target: "rate:/cmd_vel".into(),
        score: 5.0,
        kind: DetectorKind::Extreme,
        evidence: BTreeMap::new(),
    })
}

fn estop(t_ms: i64) -> AlarmSource {
    AlarmSource::Estop(EStopDecision {
        t_ms,
        accumulated_risk: 1.0,
        triggering_rule: TriggerRule::Integral,
        contributing: vec![DimExceedance {
            name: "speed".into(),
            value: 2.0,
            exceedance: 0.5,
        }],
        out_of_envelope: vec![],
    })
}

fn hitl_suppression() -> Result<String, String> {
    let mut desk = AlarmDesk::new(AlarmDeskConfig::default()).map_err(|e| e.to_string())?;
    let ids: Vec<u64> = (0..5).map(|i| desk.ingest(anomaly(i * 1000, "d")).id).collect();
    ensure(ids.iter().all(|id| desk.alarm(*id).unwrap().state == AlarmState::Presented), || "cold start must present".into())?;
    for (k, id) in ids[..4].iter().enumerate() {
        desk.feedback(*id, FeedbackAction::Dismiss, 5000 + k as i64).map_err(|e| e.to_string())?;
    }
    let s = desk.ingest(anomaly(6000, "d")).state;
    ensure(s == AlarmState::Suppressed, || format!("raise after 4 dismissals is {s:?}"))?;
    desk.feedback(ids[4], FeedbackAction::Confirm, 6500).map_err(|e| e.to_string())?;
    let s = desk.ingest(anomaly(7000, "d")).state;
    ensure(s == AlarmState::Presented, || format!("raise after a confirm is {s:?}"))?;

    // repeated false alarm, operator dismisses everything shown
    let mut desk = AlarmDesk::new(AlarmDeskConfig::default()).map_err(|e| e.to_string())?;
    let mut per_window = Vec::new();
    for w in 0..12 {
        let mut shown = 0;
        for k in 0..5 {
            let t = w * 10_000 + k * 1500;
            let a = desk.ingest(anomaly(t, "flappy"));
            if a.state == AlarmState::Presented {
                shown += 1;
                let id = a.id;
                desk.feedback(id, FeedbackAction::Dismiss, t + 100).map_err(|e| e.to_string())?;
            }
        }
        per_window.push(shown);
    }
    ensure(per_window.windows(2).all(|p| p[1] <= p[0]), || format!("presented per window {per_window:?}"))?;

    // critical alarms under random suppression states
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..1000 {
        let cfg = AlarmDeskConfig {
            h: rng.random_range(1..6),
            dynamic: rng.random(),
            ..Default::default()
        };
        let mut desk = AlarmDesk::new(cfg).map_err(|e| e.to_string())?;
        let mut t = 0;
        for _ in 0..rng.random_range(0..60) {
            t += rng.random_range(1..3000);
            let src = match rng.random_range(0..4) {
                0 => estop(t),
                _ => anomaly(t, ["a", "b", "c"][rng.random_range(0..3)]),
            };
            let a = desk.ingest(src);
            let id = a.id;
            if a.state == AlarmState::Presented && rng.random::<f64>() < 0.8 {
                let act = if rng.random::<f64>() < 0.9 { FeedbackAction::Dismiss } else { FeedbackAction::Confirm };
                desk.feedback(id, act, t + 1).map_err(|e| e.to_string())?;
            }
        }
        let s = desk.ingest(estop(t + 10)).state;
        ensure(s == AlarmState::Presented, || format!("trial {trial}: e-stop alarm {s:?}"))?;
    }
    Ok(format!("suppressed after 4 dismissals, confirm restores; per-window presented {per_window:?}; 1000/1000 e-stops presented"))
}

fn square(duration_ms: i64) -> Scenario {
    Scenario {
        name: "probe".into(),
        path: vec![[0.0, 0.0], [3.0, 0.0], [3.0, 3.0], [0.0, 3.0]],
        nominal_speed: 0.5,
        duration_ms,
        tick_ms: 50,
        seed: 21,
        injections: vec![],
    }
}

fn run_until(sys: &mut System, t_ms: i64) -> Result<(), String> {
    while sys.now_ms() < t_ms && sys.step().map_err(|e| e.to_string())? {}
    Ok(())
}

fn recovery() -> Result<String, String> {
    let err = |e: busguard_core::system::SystemError| e.to_string();
    // snapshot fidelity
    let mut cfg = monitor_config();
    cfg.snapshot_every_windows = 0;
    let mut sys = System::with_scenario(cfg, square(60_000), None::<MemorySink>).map_err(err)?;
    run_until(&mut sys, 30_000)?;
    let det = sys.snapshot_now(DETECTORS_NODE).map_err(err)?;
    let env = sys.snapshot_now(ENVELOPE_NODE).map_err(err)?;
    let det_before = serde_json::to_value(sys.detectors()).unwrap();
    let env_before = serde_json::to_value(sys.envelope().unwrap().accumulator()).unwrap();
    run_until(&mut sys, 45_000)?;
    ensure(serde_json::to_value(sys.detectors()).unwrap() != det_before, || "detector state did not move".into())?;
    let r1 = sys.restore(DETECTORS_NODE).map_err(err)?;
    let r2 = sys.restore(ENVELOPE_NODE).map_err(err)?;
    ensure(r1.snapshot_t_ms == 30_000 && r2.snapshot_t_ms == 30_000, || "restored the wrong snapshot".into())?;
    ensure(serde_json::to_value(sys.detectors()).unwrap() == det_before, || "detector state differs after restore".into())?;
    ensure(serde_json::to_value(sys.envelope().unwrap().accumulator()).unwrap() == env_before, || {
        "envelope state differs after restore".into()
    })?;
    ensure(det.t_ms == 30_000 && env.t_ms == 30_000, || "snapshot time".into())?;

    // persistent fault
    let mut cfg = monitor_config();
    let mut always = DetectorConfig::extreme("stuck", "mean:/odom.x", 1e-9);
    always.baseline_window_count = 3;
    always.warmup_frames = Some(3);
    cfg.detectors = vec![always];
    cfg.assumptions.clear();
    cfg.envelope = None;
    cfg.auto_restore = true;
    cfg.snapshot_every_windows = 1;
    cfg.cycle_guard = Some((3, 60_000));
    let mut sys = System::with_scenario(cfg, square(60_000), None::<MemorySink>).map_err(err)?;
    sys.run_to_end().map_err(err)?;
    let restores = sys.counters().auto_restores;
    let escalations = sys.recovery().escalations().len();
    ensure(restores <= 3 && restores > 0, || format!("{restores} auto-restores"))?;
    ensure(escalations == 1, || format!("{escalations} escalations"))?;

    // safe mode probes: capture, envelope, clamped teleop
    let mut cfg = monitor_config();
    cfg.envelope.as_mut().unwrap().dims[0].n_hi = 0.3;
    let sink = MemorySink::new();
    let mut sys = System::with_scenario(cfg, square(40_000), Some(sink.clone())).map_err(err)?;
    run_until(&mut sys, 15_000)?;
    let report = sys.estop().map_err(err)?;
    let entered = sys.now_ms();
    let env_t0 = sys.envelope().unwrap().phi();
    let msgs0 = sys.counters().messages;
    run_until(&mut sys, 30_000)?;
    sys.finish().map_err(err)?;
    let recs = sink.records();
    let captured_after = recs.iter().filter(|r| r.t_ms > entered).count();
    let speeds: Vec<f64> = recs
        .iter()
        .filter(|r| r.topic == ODOM && r.t_ms > entered + 500)
        .filter_map(|r| r.payload.get("linear").and_then(Scalar::as_f64))
        .collect();
    let cmd_max = recs
        .iter()
        .filter(|r| r.topic == CMD_VEL && r.t_ms > entered)
        .filter_map(|r| r.payload.get("linear").and_then(Scalar::as_f64))
        .fold(f64::MIN, f64::max);
    let captured_before = recs.iter().filter(|r| r.t_ms <= entered).count();
    let rate_before = captured_before as f64 / entered as f64;
    let rate_after = captured_after as f64 / (30_000 - entered) as f64;
    ensure(rate_after >= 0.8 * rate_before, || {
        format!("capture slowed in safe mode ({:.1}/s before, {:.1}/s after)", rate_before * 1e3, rate_after * 1e3)
    })?;
    ensure(sys.envelope().unwrap().phi() != env_t0 && sys.counters().messages > msgs0, || "envelope stalled".into())?;
    ensure(report.linear_clamp == Some([-0.1, 0.3]), || format!("clamp {:?}", report.linear_clamp))?;
    ensure(!speeds.is_empty() && speeds.iter().all(|v| *v <= 0.3 + 0.05), || "odometry exceeds the clamp".into())?;
    ensure(sys.is_safe(), || "left safe mode".into())?;

    // shadow promotion gap
    let mon = monitor_config();
    let mut sc = square(40_000);
    sc.seed = 4;
    let bus = Bus::new();
    let sink = MemorySink::new();
    let cap = start_capture(&bus, sink.clone(), CaptureConfig::default()).map_err(|e| e.to_string())?;
    run_scenario(&sc, &bus).map_err(|e| e.to_string())?;
    cap.stop();
    let window = mon.features.window_ms;
    let mut worst_gap = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..20 {
        let crash = rng.random_range(10_000..30_000);
        let mut pair = ShadowPair::new("detectors", mon.features.clone(), &mon.detectors, 4).map_err(|e| e.to_string())?;
        let mut frames = Vec::new();
        let mut crashed = false;
        for r in sink.records().iter().filter(|r| r.validity == Validity::Ok) {
            if !crashed && r.t_ms >= crash {
                crashed = true;
                pair.primary_mut().poison();
                pair.promote(r.t_ms).map_err(|e| e.to_string())?;
            }
            frames.extend(pair.process(r).map_err(|e| e.to_string())?);
        }
        frames.extend(pair.flush().map_err(|e| e.to_string())?);
        let first_full = frames
            .iter()
            .find(|f| f.lineage.contains("promoted") && !f.degraded)
            .ok_or("promoted node never reached full rate")?;
        let last_old = frames.iter().filter(|f| !f.lineage.contains("promoted")).map(|f| f.frame.window.end_ms).max().unwrap_or(0);
        let gap = first_full.frame.window.start_ms - crash;
        worst_gap = worst_gap.max(gap);
        ensure(gap <= window, || format!("crash at {crash}: full rate from {}", first_full.frame.window.start_ms))?;
        // every window is covered by some frame, degraded or not
        let starts: BTreeSet<i64> = frames.iter().map(|f| f.frame.window.start_ms).collect();
        let missing = (last_old..first_full.frame.window.start_ms).step_by(window as usize).filter(|s| !starts.contains(s)).count();
        ensure(missing <= 1, || format!("crash at {crash}: {missing} windows uncovered"))?;
    }
    Ok(format!(
        "fidelity exact, {restores} restores then {escalations} escalation, safe mode keeps capture ({captured_after} records) and envelope with cmd max {cmd_max:.2} m/s, worst promotion gap {worst_gap} ms"
    ))
}

fn frame_with(values: &[(String, f64)]) -> FeatureFrame {
    FeatureFrame {
        window: Window { start_ms: 0, end_ms: 1000 },
        per_topic_rate: BTreeMap::new(),
        total_rate: 0.0,
        time_bucket: TimeBucket::at(0),
        co_occurrence: BTreeMap::new(),
        field_stats: values
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    FieldStats {
                        count: 1,
                        mean: *v,
                        std: 0.0,
                        min: *v,
                        max: *v,
                    },
                )
            })
            .collect(),
    }
}

fn oracle_extreme(series: &[f64], t: f64, cap: usize, warmup: usize) -> Vec<bool> {
    let mut base: VecDeque<f64> = VecDeque::new();
    let mut out = Vec::new();
    for &x in series {
        if base.len() < warmup.max(2) {
            base.push_back(x);
            if base.len() > cap {
                base.pop_front();
            }
            out.push(false);
            continue;
        }
        let n = base.len() as f64;
        let mean = base.iter().sum::<f64>() / n;
        let sd = (base.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-9);
        let fire = ((x - mean) / sd).abs() > t;
        if !fire {
            base.push_back(x);
            if base.len() > cap {
                base.pop_front();
            }
        }
        out.push(fire);
    }
    out
}

fn hierarchy() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    // partition
    for case in 0..500 {
        let n = rng.random_range(1..30);
        let tags = ["sensor", "actuator", "compute", "teleop", "arm"];
        let mut g = SystemGraph::default();
        for i in 0..n {
            let t: BTreeSet<String> = tags.iter().filter(|_| rng.random::<f64>() < 0.3).map(|s| s.to_string()).collect();
            g.nodes.insert(format!("n{i}"), t);
        }
        let preds: Vec<GroupPredicate> = (0..rng.random_range(0..5))
            .map(|k| {
                let a = tags[rng.random_range(0..tags.len())];
                let b = tags[rng.random_range(0..tags.len())];
                let expr = match rng.random_range(0..4) {
                    0 => format!("tag:{a}"),
                    1 => format!("tag:{a} & !tag:{b}"),
                    2 => format!("tag:{a} | tag:{b}"),
                    _ => format!("id:n{}", rng.random_range(0..n)),
                };
                GroupPredicate::new(&format!("g{k}"), &expr)
            })
            .collect();
        let s = apply_grouping(&g, &preds).map_err(|e| e.to_string())?;
        for id in g.nodes.keys() {
            let homes = s.groups.values().filter(|m| m.contains(id)).count() + usize::from(s.ungrouped.contains(id));
            ensure(homes == 1, || format!("case {case}: {id} sits in {homes} places"))?;
        }
        let total: usize = s.groups.values().map(BTreeSet::len).sum::<usize>() + s.ungrouped.len();
        ensure(total == g.nodes.len(), || format!("case {case}: node count changed"))?;
    }

    // group extreme vs pre-summed oracle
    let mut fires = 0;
    for case in 0..1000 {
        let k = rng.random_range(2..7);
        let members: Vec<String> = (0..k).map(|i| format!("n{i}")).collect();
        let scheme = GroupingScheme {
            groups: BTreeMap::from([("cpu".to_string(), members.iter().cloned().collect())]),
            ..Default::default()
        };
        let attr = GroupAttribute {
            name: "cpu_total".into(),
            group: "cpu".into(),
            selector: "mean:/sys/cpu/{node}.load".into(),
            phi: None,
        };
        let t = rng.random_range(1.5..4.0);
        let cap = rng.random_range(5..30);
        let warmup = rng.random_range(2..cap + 1);
        let mut cfg = DetectorConfig::extreme("group", "group:cpu_total", t);
        cfg.baseline_window_count = cap;
        cfg.warmup_frames = Some(warmup);
        let mut det = Detector::new(cfg).map_err(|e| e.to_string())?;
        let len = rng.random_range(20..80);
        let mut summed = Vec::new();
        let mut got = Vec::new();
        for _ in 0..len {
            let spike = rng.random::<f64>() < 0.08;
            let vals: Vec<(String, f64)> = members
                .iter()
                .map(|m| {
                    let v = rng.random_range(0.0..1.0) + if spike { rng.random_range(0.0..3.0) } else { 0.0 };
                    (format!("/sys/cpu/{m}.load"), v)
                })
                .collect();
            summed.push(vals.iter().fold(0.0, |acc, (_, v)| acc + v));
            let frame = frame_with(&vals);
            let groups = group_values(&frame, &scheme, std::slice::from_ref(&attr));
            got.push(det.process(&frame, &groups).event.is_some());
        }
        let want = oracle_extreme(&summed, t, cap, warmup);
        fires += want.iter().filter(|f| **f).count();
        ensure(got == want, || format!("case {case}: decisions differ"))?;
    }

    // coupled pair b2 = b1^2
    let b1: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b2: Vec<f64> = b1.iter().map(|x| x * x).collect();
    let total: Vec<f64> = b1.iter().zip(&b2).map(|(a, b)| a + b).collect();
    let v = decomposability_test(&[b1, b2], &total, &[1.0, 1.0], DEFAULT_TAU, DEFAULT_KAPPA).map_err(|e| e.to_string())?;
    ensure(!v.is_linear(), || format!("coupled pair judged {v:?}"))?;
    Ok(format!("500 random groupings partition; 1000 additive streams match the oracle ({fires} firings); coupled pair nonlinear"))
}

fn isolated_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut fired = 0;
    for case in 0..500 {
        let dims = rng.random_range(1..5);
        let len = rng.random_range(0..=1000);
        let n = rng.random_range(0..6);
        let t = rng.random_range(0.05..1.5);
        let mut history: Vec<Vec<f64>> = (0..len).map(|_| (0..dims).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        history.shuffle(&mut rng);
        let point: Vec<f64> = (0..dims).map(|_| rng.random_range(-1.5..1.5)).collect();
        let verdict = score_isolated(&point, &history, t, n);
        let want = if history.len() < n + 1 {
            None
        } else {
            let mut d: Vec<f64> = history
                .iter()
                .map(|h| h.iter().zip(&point).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .collect();
            d.sort_by(f64::total_cmp);
            Some(d.iter().take_while(|x| **x <= t).count() <= n)
        };
        let got = match verdict {
            busguard_core::detectors::IsolatedVerdict::InsufficientHistory => None,
            v => Some(v.fired()),
        };
        ensure(got == want, || format!("case {case}: detector {got:?}, brute force {want:?}"))?;
        fired += usize::from(want == Some(true));
    }
    Ok(format!("500 random histories agree with all-pairs kNN ({fired} isolated)"))
}
