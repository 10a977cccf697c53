//! Deterministic differential-drive robot scenario.
//!
//! A teleop-equivalent controller drives a unicycle-model base around a
//! waypoint loop and publishes telemetry on the bus at fixed rates. Seeded
//! injectors perturb the streams and every injection is recorded as a
//! ground-truth label for scoring.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::msgbus::{payload, Bus, BusError, FieldSpec, Scalar, Subscription, TopicHandle, TopicSchema};

pub const CMD_VEL: &str = "/cmd_vel";
pub const ODOM: &str = "/odom";
pub const BATTERY: &str = "/battery";
pub const SCAN: &str = "/scan_summary";
pub const CPU_PREFIX: &str = "/sys/cpu/";

/// Upper bound of the `/scan_summary.range` schema.
pub const SCAN_RANGE_HI: f64 = 13.0;

pub const TELEOP: &str = "teleop";
pub const BASE: &str = "base";
pub const LIDAR: &str = "lidar";

const CMD_PERIOD_MS: i64 = 50;
const ODOM_PERIOD_MS: i64 = 50;
const SCAN_PERIOD_MS: i64 = 100;
const SLOW_PERIOD_MS: i64 = 1000;
const SPEED_SEGMENT_MS: i64 = 500;

const HEADING_GAIN: f64 = 2.0;
const MAX_TURN_RATE: f64 = 1.0;
const REACH_RADIUS: f64 = 0.3;
const CMD_TIMEOUT_MS: i64 = 300;
const ROOM_MARGIN: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("scenario topic {0} already exists on the bus")]
    TopicCollision(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("scenario is not running")]
    ScenarioNotRunning,
    #[error(transparent)]
    Bus(#[from] BusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionKind {
    JerkyDirection,
    ControllerDisconnect,
    CounterintuitivePath,
    VaryingSpeed,
    SensorSplash,
}

impl InjectionKind {
    pub const ALL: [InjectionKind; 5] = [
        InjectionKind::JerkyDirection,
        InjectionKind::ControllerDisconnect,
        InjectionKind::CounterintuitivePath,
        InjectionKind::VaryingSpeed,
        InjectionKind::SensorSplash,
    ];

    /// The kinds a detector is expected to flag.
    pub const DETECTABLE: [InjectionKind; 4] = [
        InjectionKind::JerkyDirection,
        InjectionKind::ControllerDisconnect,
        InjectionKind::CounterintuitivePath,
        InjectionKind::VaryingSpeed,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            InjectionKind::JerkyDirection => "jerky_direction",
            InjectionKind::ControllerDisconnect => "controller_disconnect",
            InjectionKind::CounterintuitivePath => "counterintuitive_path",
            InjectionKind::VaryingSpeed => "varying_speed",
            InjectionKind::SensorSplash => "sensor_splash",
        }
    }

    /// Accepts the canonical names and the short CLI aliases.
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.trim() {
            "jerky_direction" | "jerky" => InjectionKind::JerkyDirection,
            "controller_disconnect" | "disconnect" => InjectionKind::ControllerDisconnect,
            "counterintuitive_path" | "counterintuitive" | "path" => InjectionKind::CounterintuitivePath,
            "varying_speed" | "speed" | "varying" => InjectionKind::VaryingSpeed,
            "sensor_splash" | "splash" => InjectionKind::SensorSplash,
            _ => return None,
        })
    }

    /// Topics this injector is allowed to perturb.
    pub fn perturbed_topics(&self) -> &'static [&'static str] {
        match self {
            InjectionKind::JerkyDirection
            | InjectionKind::VaryingSpeed
            | InjectionKind::CounterintuitivePath => &[CMD_VEL, ODOM],
            InjectionKind::ControllerDisconnect => &[CMD_VEL],
            InjectionKind::SensorSplash => &[SCAN],
        }
    }

    /// Invalid sensor data must be filtered, not alarmed on.
    pub fn expected_detection(&self) -> bool {
        !matches!(self, InjectionKind::SensorSplash)
    }

    pub fn default_magnitude(&self) -> f64 {
        match self {
            InjectionKind::JerkyDirection => 2.0,
            InjectionKind::ControllerDisconnect => 1.0,
            InjectionKind::CounterintuitivePath => 1.0,
            InjectionKind::VaryingSpeed => 0.6,
            InjectionKind::SensorSplash => 1.2,
        }
    }

    pub fn default_duration_ms(&self) -> i64 {
        match self {
            InjectionKind::JerkyDirection => 3000,
            InjectionKind::ControllerDisconnect => 4000,
            InjectionKind::CounterintuitivePath => 8000,
            InjectionKind::VaryingSpeed => 5000,
            InjectionKind::SensorSplash => 3000,
        }
    }
}

impl std::fmt::Display for InjectionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub kind: InjectionKind,
    pub start_ms: i64,
    pub end_ms: i64,
    pub magnitude: f64,
}

impl Injection {
    fn active_at(&self, t_ms: i64) -> bool {
        t_ms >= self.start_ms && t_ms < self.end_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    pub start_ms: i64,
    pub end_ms: i64,
    pub kind: InjectionKind,
    pub expected_detection: bool,
}

impl From<&Injection> for GroundTruthLabel {
    fn from(inj: &Injection) -> Self {
        Self {
            start_ms: inj.start_ms,
            end_ms: inj.end_ms,
            kind: inj.kind,
            expected_detection: inj.kind.expected_detection(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    pub path: Vec<[f64; 2]>,
    pub nominal_speed: f64,
    pub duration_ms: i64,
    pub tick_ms: i64,
    pub seed: u64,
    #[serde(default)]
    pub injections: Vec<Injection>,
}

impl Scenario {
    pub fn from_yaml(text: &str) -> Result<Self, SimError> {
        let s: Scenario = serde_yaml::from_str(text).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("scenario serializes")
    }

    /// Replace the injections with one per kind, placed by `plan_injections`
    /// after a warm-up of `INJECTION_WARMUP_MS` (capped at a third of the run).
    pub fn with_planned_injections(mut self, kinds: &[InjectionKind], seed: u64) -> Self {
        let warmup = INJECTION_WARMUP_MS.min(self.duration_ms / 3);
        self.injections = plan_injections(kinds, self.duration_ms, warmup, seed);
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if self.tick_ms < 1 {
            return bad("tick_ms must be at least 1".into());
        }
        if self.duration_ms <= 0 || self.duration_ms % self.tick_ms != 0 {
            return bad("duration_ms must be a positive multiple of tick_ms".into());
        }
        if self.path.len() < 2 {
            return bad("path needs at least two waypoints".into());
        }
        if self.path.iter().flatten().any(|c| !c.is_finite()) {
            return bad("waypoints must be finite".into());
        }
        if !(self.nominal_speed > 0.0 && self.nominal_speed <= 3.0) {
            return bad("nominal_speed must lie in (0, 3]".into());
        }
        for inj in &self.injections {
            check_injection(inj, self.duration_ms)?;
        }
        Ok(())
    }
}

fn check_injection(inj: &Injection, duration_ms: i64) -> Result<(), SimError> {
    if !(0 <= inj.start_ms && inj.start_ms < inj.end_ms && inj.end_ms <= duration_ms) {
        return Err(SimError::InvalidScenario(format!(
            "injection {} has bad interval [{}, {}]",
            inj.kind, inj.start_ms, inj.end_ms
        )));
    }
    if !inj.magnitude.is_finite() || inj.magnitude < 0.0 {
        return Err(SimError::InvalidScenario(format!("injection {} has bad magnitude", inj.kind)));
    }
    Ok(())
}

pub const INJECTION_WARMUP_MS: i64 = 60_000;

/// Parse a comma-separated kind list such as `jerky,disconnect`.
pub fn parse_kinds(list: &str) -> Result<Vec<InjectionKind>, SimError> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| InjectionKind::parse(s).ok_or_else(|| SimError::InvalidScenario(format!("unknown injection kind {}", s.trim()))))
        .collect()
}

/// Place one injection per requested kind at seeded random, non-overlapping
/// times. The first `warmup_ms` of the run stay clean so baselines can form.
pub fn plan_injections(kinds: &[InjectionKind], duration_ms: i64, warmup_ms: i64, seed: u64) -> Vec<Injection> {
    if kinds.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1f3a_55c9_0e6b_d2a7);
    let mut order = kinds.to_vec();
    order.shuffle(&mut rng);
    let span_start = warmup_ms.min(duration_ms);
    let slot = (duration_ms - span_start) / order.len() as i64;
    order
        .iter()
        .enumerate()
        .map(|(i, kind)| {
            let dur = kind.default_duration_ms().min(slot.max(1));
            let lo = span_start + i as i64 * slot;
            // keep a tail after every injection so recovery is not mistaken for the next one
            let room = (slot - dur - slot / 3).max(0);
            let start = (lo + if room > 0 { rng.random_range(0..=room) } else { 0 }) / 10 * 10;
            Injection {
                kind: *kind,
                start_ms: start,
                end_ms: (start + dur).min(duration_ms),
                magnitude: kind.default_magnitude(),
            }
        })
        .collect()
}

pub fn cpu_topic(node: &str) -> String {
    format!("{CPU_PREFIX}{node}")
}

/// Schemas for every topic the simulated robot publishes.
pub fn standard_schemas() -> Vec<(&'static str, TopicSchema)> {
    let cmd = TopicSchema::new(
        CMD_VEL,
        vec![
            FieldSpec::float("linear").with_range(-3.0, 3.0),
            FieldSpec::float("angular").with_range(-PI, PI),
        ],
    );
    let odom = TopicSchema::new(
        ODOM,
        vec![
            FieldSpec::float("x").with_range(-100.0, 100.0),
            FieldSpec::float("y").with_range(-100.0, 100.0),
            FieldSpec::float("theta").with_range(-PI, PI),
            FieldSpec::float("linear").with_range(-3.0, 3.0),
            FieldSpec::float("angular").with_range(-4.0, 4.0),
            FieldSpec::float("vx").with_range(-3.0, 3.0),
            FieldSpec::float("vy").with_range(-3.0, 3.0),
        ],
    );
    let battery = TopicSchema::new(
        BATTERY,
        vec![
            FieldSpec::float("voltage").with_range(10.0, 17.0),
            FieldSpec::float("percent").with_range(0.0, 100.0),
        ],
    );
    let scan = TopicSchema::new(
        SCAN,
        vec![
            FieldSpec::float("range").with_range(0.0, SCAN_RANGE_HI),
            FieldSpec::int("beams").with_range(0.0, 1000.0),
        ],
    )
    .flag_and_deliver();
    let cpu = |node: &str| TopicSchema::new(&cpu_topic(node), vec![FieldSpec::float("load").with_range(0.0, 1.0)]);
    vec![
        (TELEOP, cmd),
        (TELEOP, cpu(TELEOP)),
        (BASE, odom),
        (BASE, battery),
        (BASE, cpu(BASE)),
        (LIDAR, scan),
        (LIDAR, cpu(LIDAR)),
    ]
}

/// Node metadata tags registered with the bus.
pub fn standard_nodes() -> Vec<(&'static str, Vec<&'static str>)> {
    vec![
        (TELEOP, vec!["teleop", "cpu-reporting"]),
        (BASE, vec!["actuator", "cpu-reporting"]),
        (LIDAR, vec!["sensor", "cpu-reporting"]),
    ]
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Speed limits applied to commands while the system is in safe mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafeLimits {
    pub linear: [f64; 2],
    pub angular: Option<[f64; 2]>,
}

/// Mutable controller state: which waypoint is targeted and in which order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub order: Vec<usize>,
    pub cursor: usize,
    pub shuffled: bool,
    pub jerk_sign: f64,
    pub speed_segment: Option<(usize, i64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Pose {
    x: f64,
    y: f64,
    theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub messages_published: BTreeMap<String, u64>,
    pub labels: Vec<GroundTruthLabel>,
}

struct Topics {
    cmd: TopicHandle,
    odom: TopicHandle,
    battery: TopicHandle,
    scan: TopicHandle,
    cpu: Vec<(String, TopicHandle)>,
}

/// Tick-driven scenario driver. Call [`Simulator::step`] until it returns
/// `false`, or use [`run_scenario`].
pub struct Simulator {
    scenario: Scenario,
    bus: Bus,
    topics: Topics,
    base_cmds: Subscription,
    t_ms: i64,
    pose: Pose,
    last_cmd: Option<(f64, f64, i64)>,
    controller: ControllerState,
    injections: Vec<Injection>,
    noise_rng: ChaCha8Rng,
    inject_rng: ChaCha8Rng,
    counts: BTreeMap<String, u64>,
    safe: Option<SafeLimits>,
    battery_pct: f64,
    cpu_drift: [f64; 3],
    room_half: f64,
    room_center: [f64; 2],
    next_due: BTreeMap<&'static str, i64>,
    finished: bool,
}

impl Simulator {
    pub fn new(scenario: Scenario, bus: &Bus) -> Result<Self, SimError> {
        scenario.validate()?;
        let schemas = standard_schemas();
        let existing = bus.directory();
        if let Some((_, s)) = schemas.iter().find(|(_, s)| existing.topics.contains_key(&s.name)) {
            return Err(SimError::TopicCollision(s.name.clone()));
        }
        for (node, tags) in standard_nodes() {
            bus.register_node(node, tags);
        }
        let mut handles = BTreeMap::new();
        for (node, schema) in schemas {
            let name = schema.name.clone();
            handles.insert(name, bus.advertise(node, schema)?);
        }
        let base_cmds = bus.subscribe(BASE, CMD_VEL)?;
        let take = |h: &mut BTreeMap<String, TopicHandle>, n: &str| h.remove(n).expect("standard topic");
        let cpu = [TELEOP, BASE, LIDAR]
            .iter()
            .map(|n| {
                let topic = cpu_topic(n);
                let h = take(&mut handles, &topic);
                (n.to_string(), h)
            })
            .collect();
        let topics = Topics {
            cmd: take(&mut handles, CMD_VEL),
            odom: take(&mut handles, ODOM),
            battery: take(&mut handles, BATTERY),
            scan: take(&mut handles, SCAN),
            cpu,
        };

        let (min, max) = scenario.path.iter().fold(
            ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]),
            |(lo, hi), p| ([lo[0].min(p[0]), lo[1].min(p[1])], [hi[0].max(p[0]), hi[1].max(p[1])]),
        );
        let room_center = [(min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0];
        let room_half = ((max[0] - min[0]).max(max[1] - min[1]) / 2.0 + ROOM_MARGIN).min(SCAN_RANGE_HI - 1.0);

        let p0 = scenario.path[0];
        let p1 = scenario.path[1];
        let pose = Pose {
            x: p0[0],
            y: p0[1],
            theta: (p1[1] - p0[1]).atan2(p1[0] - p0[0]),
        };
        let n = scenario.path.len();
        let controller = ControllerState {
            order: (0..n).collect(),
            cursor: 1,
            shuffled: false,
            jerk_sign: 1.0,
            speed_segment: None,
        };
        let seed = scenario.seed;
        Ok(Self {
            injections: scenario.injections.clone(),
            scenario,
            bus: bus.clone(),
            topics,
            base_cmds,
            t_ms: 0,
            pose,
            last_cmd: None,
            controller,
            noise_rng: ChaCha8Rng::seed_from_u64(seed),
            inject_rng: ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5bd1_e995),
            counts: BTreeMap::new(),
            safe: None,
            battery_pct: 100.0,
            cpu_drift: [0.0; 3],
            room_half,
            room_center,
            next_due: BTreeMap::new(),
            finished: false,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    /// Simulated time of the next tick.
    pub fn now_ms(&self) -> i64 {
        self.t_ms
    }

    pub fn is_running(&self) -> bool {
        !self.finished
    }

    pub fn labels(&self) -> Vec<GroundTruthLabel> {
        self.injections.iter().map(GroundTruthLabel::from).collect()
    }

    pub fn injections(&self) -> &[Injection] {
        &self.injections
    }

    pub fn set_safe_mode(&mut self, limits: Option<SafeLimits>) {
        self.safe = limits;
    }

    pub fn controller_state(&self) -> ControllerState {
        self.controller.clone()
    }

    pub fn restore_controller_state(&mut self, state: ControllerState) {
        self.controller = state;
    }

    /// Schedule an injection starting at the next tick. Returns its id.
    pub fn inject_live(&mut self, kind: InjectionKind, magnitude: f64, duration_ms: i64) -> Result<usize, SimError> {
        if self.finished {
            return Err(SimError::ScenarioNotRunning);
        }
        if duration_ms <= 0 {
            return Err(SimError::InvalidScenario("injection duration must be positive".into()));
        }
        let inj = Injection {
            kind,
            start_ms: self.t_ms,
            end_ms: (self.t_ms + duration_ms).min(self.scenario.duration_ms),
            magnitude,
        };
        check_injection(&inj, self.scenario.duration_ms)?;
        self.injections.push(inj);
        Ok(self.injections.len() - 1)
    }

    fn active(&self, kind: InjectionKind) -> Option<&Injection> {
        let t = self.t_ms;
        self.injections.iter().find(|i| i.kind == kind && i.active_at(t))
    }

    fn cmd_perturbation_allowed(&self) -> bool {
        self.safe.is_none()
    }

    fn due(&mut self, key: &'static str, period: i64) -> bool {
        let next = self.next_due.entry(key).or_insert(0);
        if self.t_ms >= *next {
            *next += period;
            true
        } else {
            false
        }
    }

    fn publish(&mut self, handle: &TopicHandle, payload: crate::msgbus::Payload) -> Result<(), SimError> {
        self.bus.publish(handle, payload, self.t_ms)?;
        *self.counts.entry(handle.name().to_string()).or_default() += 1;
        Ok(())
    }

    fn update_path_order(&mut self) {
        let n = self.scenario.path.len();
        let perturb = self.cmd_perturbation_allowed()
            && self.active(InjectionKind::CounterintuitivePath).is_some();
        if perturb && !self.controller.shuffled {
            let identity: Vec<usize> = (0..n).collect();
            let mut order = identity.clone();
            for _ in 0..16 {
                order.shuffle(&mut self.inject_rng);
                let is_rotation = (0..n).any(|r| (0..n).all(|i| order[i] == identity[(i + r) % n]));
                if !is_rotation || n < 3 {
                    break;
                }
            }
            self.controller.order = order;
            self.controller.cursor = 0;
            self.controller.shuffled = true;
        } else if !perturb && self.controller.shuffled {
            let nearest = (0..n)
                .min_by(|&a, &b| {
                    self.dist_to(self.scenario.path[a])
                        .partial_cmp(&self.dist_to(self.scenario.path[b]))
                        .unwrap()
                })
                .unwrap_or(0);
            self.controller.order = (0..n).collect();
            self.controller.cursor = nearest;
            self.controller.shuffled = false;
        }
    }

    fn dist_to(&self, p: [f64; 2]) -> f64 {
        (p[0] - self.pose.x).hypot(p[1] - self.pose.y)
    }

    fn steer(&mut self) -> (f64, f64) {
        let n = self.controller.order.len();
        let target_of = |c: &ControllerState, path: &[[f64; 2]], k: usize| path[c.order[k % n]];
        let mut target = target_of(&self.controller, &self.scenario.path, self.controller.cursor);
        for _ in 0..n {
            let prev = target_of(&self.controller, &self.scenario.path, self.controller.cursor + n - 1);
            let seg = [target[0] - prev[0], target[1] - prev[1]];
            let rel = [self.pose.x - target[0], self.pose.y - target[1]];
            let passed = !self.controller.shuffled && seg[0] * rel[0] + seg[1] * rel[1] > 0.0;
            if self.dist_to(target) < REACH_RADIUS || passed {
                self.controller.cursor = (self.controller.cursor + 1) % n;
                target = target_of(&self.controller, &self.scenario.path, self.controller.cursor);
            } else {
                break;
            }
        }
        let bearing = (target[1] - self.pose.y).atan2(target[0] - self.pose.x);
        let err = wrap_angle(bearing - self.pose.theta);
        let angular = (HEADING_GAIN * err).clamp(-MAX_TURN_RATE, MAX_TURN_RATE);
        (self.scenario.nominal_speed, angular)
    }

    fn command(&mut self) -> (f64, f64) {
        self.update_path_order();
        let (mut linear, mut angular) = self.steer();
        let allowed = self.cmd_perturbation_allowed();
        if let Some(inj) = self.active(InjectionKind::JerkyDirection).filter(|_| allowed) {
            angular = self.controller.jerk_sign * inj.magnitude;
            self.controller.jerk_sign = -self.controller.jerk_sign;
        }
        if let Some(inj) = self.active(InjectionKind::VaryingSpeed).filter(|_| allowed).cloned() {
            let id = self.injections.iter().position(|i| *i == inj).unwrap_or(0);
            let segment = (self.t_ms - inj.start_ms) / SPEED_SEGMENT_MS;
            let factor = match self.controller.speed_segment {
                Some((i, s, f)) if i == id && s == segment => f,
                _ => {
                    let m = inj.magnitude;
                    let f = if m > 0.0 { self.inject_rng.random_range(1.0 - m..=1.0 + m) } else { 1.0 };
                    self.controller.speed_segment = Some((id, segment, f));
                    f
                }
            };
            linear *= factor;
        }
        if let Some(lim) = self.safe {
            linear = linear.clamp(lim.linear[0], lim.linear[1]);
            if let Some([lo, hi]) = lim.angular {
                angular = angular.clamp(lo, hi);
            }
        }
        (linear.clamp(-3.0, 3.0), angular.clamp(-PI, PI))
    }

    fn wall_distance(&self) -> f64 {
        let dx = self.room_half - (self.pose.x - self.room_center[0]).abs();
        let dy = self.room_half - (self.pose.y - self.room_center[1]).abs();
        dx.min(dy).max(0.05)
    }

    /// Advance one tick. Returns `false` once the scenario has ended.
    pub fn step(&mut self) -> Result<bool, SimError> {
        if self.finished {
            return Ok(false);
        }
        if self.t_ms >= self.scenario.duration_ms {
            self.finished = true;
            return Ok(false);
        }
        let noise = Normal::new(0.0, 1.0).expect("unit normal");

        if self.due("cmd", CMD_PERIOD_MS) {
            let (linear, angular) = self.command();
            if self.active(InjectionKind::ControllerDisconnect).is_none() {
                let cmd = self.topics.cmd.clone();
                self.publish(&cmd, payload([("linear", linear), ("angular", angular)]))?;
            }
        }

        for msg in self.base_cmds.drain() {
            let lin = msg.payload.get("linear").and_then(Scalar::as_f64).unwrap_or(0.0);
            let ang = msg.payload.get("angular").and_then(Scalar::as_f64).unwrap_or(0.0);
            self.last_cmd = Some((lin, ang, msg.t_ms));
        }
        let (v, w) = match self.last_cmd {
            Some((v, w, at)) if self.t_ms - at <= CMD_TIMEOUT_MS => (v, w),
            _ => (0.0, 0.0),
        };

        if self.due("odom", ODOM_PERIOD_MS) {
            let mut n = || noise.sample(&mut self.noise_rng);
            let x = self.pose.x + 0.002 * n();
            let y = self.pose.y + 0.002 * n();
            let linear = v + 0.005 * n();
            let angular = w + 0.005 * n();
            // world-frame velocity
            let (sin, cos) = self.pose.theta.sin_cos();
            let odom = payload([
                ("x", x),
                ("y", y),
                ("theta", self.pose.theta),
                ("linear", linear),
                ("angular", angular),
                ("vx", linear * cos),
                ("vy", linear * sin),
            ]);
            let h = self.topics.odom.clone();
            self.publish(&h, odom)?;
        }

        if self.due("scan", SCAN_PERIOD_MS) {
            let mut range = (self.wall_distance() + 0.02 * noise.sample(&mut self.noise_rng)).clamp(0.05, SCAN_RANGE_HI);
            if let Some(inj) = self.active(InjectionKind::SensorSplash) {
                range = SCAN_RANGE_HI + inj.magnitude.max(1e-3);
            }
            let h = self.topics.scan.clone();
            self.publish(&h, payload([("range", Scalar::Float(range)), ("beams", Scalar::Int(360))]))?;
        }

        if self.due("slow", SLOW_PERIOD_MS) {
            let voltage = 13.0 + 3.5 * self.battery_pct / 100.0 + 0.01 * noise.sample(&mut self.noise_rng);
            let h = self.topics.battery.clone();
            self.publish(&h, payload([("voltage", voltage), ("percent", self.battery_pct)]))?;
            let cpu = std::mem::take(&mut self.topics.cpu);
            for (i, (_, h)) in cpu.iter().enumerate() {
                let base = [0.25, 0.35, 0.2][i % 3];
                // independent AR(1) wander per node
                self.cpu_drift[i] = 0.9 * self.cpu_drift[i] + 0.03 * noise.sample(&mut self.noise_rng);
                let load = (base + self.cpu_drift[i]).clamp(0.0, 1.0);
                self.publish(h, payload([("load", load)]))?;
            }
            self.topics.cpu = cpu;
        }

        let dt = self.scenario.tick_ms as f64 / 1000.0;
        self.pose.x += v * self.pose.theta.cos() * dt;
        self.pose.y += v * self.pose.theta.sin() * dt;
        self.pose.theta = wrap_angle(self.pose.theta + w * dt);
        self.battery_pct = (self.battery_pct - dt * (0.002 + 0.004 * v.abs())).max(0.0);

        self.t_ms += self.scenario.tick_ms;
        if self.t_ms >= self.scenario.duration_ms {
            self.finished = true;
        }
        Ok(true)
    }

    pub fn report(&self) -> ScenarioReport {
        ScenarioReport {
            messages_published: self.counts.clone(),
            labels: self.labels(),
        }
    }
}

/// Run a whole scenario on `bus` with no observer in the loop.
pub fn run_scenario(scenario: &Scenario, bus: &Bus) -> Result<ScenarioReport, SimError> {
    let mut sim = Simulator::new(scenario.clone(), bus)?;
    while sim.step()? {}
    Ok(sim.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msgbus::WILDCARD;

    pub(crate) fn square(duration_ms: i64) -> Scenario {
        Scenario {
            name: "square".into(),
            path: vec![[0.0, 0.0], [3.0, 0.0], [3.0, 3.0], [0.0, 3.0]],
            nominal_speed: 0.5,
            duration_ms,
            tick_ms: 50,
            seed: 7,
            injections: vec![],
        }
    }

    #[test]
    fn nominal_rates_match_duration() {
        let bus = Bus::new();
        let report = run_scenario(&square(60_000), &bus).unwrap();
        assert_eq!(report.messages_published[CMD_VEL], 1200);
        assert_eq!(report.messages_published[ODOM], 1200);
        assert_eq!(report.messages_published[SCAN], 600);
        assert_eq!(report.messages_published[BATTERY], 60);
        assert_eq!(report.messages_published[&cpu_topic(BASE)], 60);
    }

    #[test]
    fn disconnect_silences_cmd_vel_only() {
        let mut s = square(30_000);
        s.injections.push(Injection {
            kind: InjectionKind::ControllerDisconnect,
            start_ms: 10_000,
            end_ms: 15_000,
            magnitude: 1.0,
        });
        let bus = Bus::new();
        let all = bus.subscribe_with("probe", WILDCARD, 100_000, false).unwrap();
        let report = run_scenario(&s, &bus).unwrap();
        let msgs = all.drain();
        let in_gap = |topic: &str| {
            msgs.iter()
                .filter(|m| m.topic == topic && (10_000..15_000).contains(&m.t_ms))
                .count()
        };
        assert_eq!(in_gap(CMD_VEL), 0);
        assert_eq!(in_gap(ODOM), 100);
        assert_eq!(report.messages_published[CMD_VEL], 600 - 100);
        assert_eq!(report.labels.len(), 1);
        assert!(report.labels[0].expected_detection);
    }

    #[test]
    fn jerky_alternates_sign_at_magnitude() {
        let bus = Bus::new();
        let cmds = bus.subscribe_with("probe", WILDCARD, 100_000, false).unwrap();
        let mut sim = Simulator::new(square(20_000), &bus).unwrap();
        for _ in 0..20 {
            sim.step().unwrap();
        }
        sim.inject_live(InjectionKind::JerkyDirection, 1.5, 3000).unwrap();
        while sim.step().unwrap() {}
        let angular: Vec<f64> = cmds
            .drain()
            .into_iter()
            .filter(|m| m.topic == CMD_VEL && (1000..4000).contains(&m.t_ms))
            .map(|m| m.payload["angular"].as_f64().unwrap())
            .collect();
        assert_eq!(angular.len(), 60);
        for pair in angular.windows(2) {
            assert_eq!(pair[0].abs(), 1.5);
            assert_eq!(pair[0], -pair[1]);
        }
    }

    #[test]
    fn splash_pins_scan_above_schema() {
        let bus = Bus::new();
        let probe = bus.subscribe_with("probe", WILDCARD, 100_000, false).unwrap();
        let mut sim = Simulator::new(square(5_000), &bus).unwrap();
        sim.inject_live(InjectionKind::SensorSplash, 1.2, 1000).unwrap();
        while sim.step().unwrap() {}
        let scans: Vec<_> = probe.drain().into_iter().filter(|m| m.topic == SCAN).collect();
        for m in &scans {
            let r = m.payload["range"].as_f64().unwrap();
            if m.t_ms < 1000 {
                assert!(r > SCAN_RANGE_HI);
                assert_eq!(m.validity, crate::msgbus::Validity::Flagged);
            } else {
                assert!(r <= SCAN_RANGE_HI);
            }
        }
    }

    #[test]
    fn zero_duration_live_injection_rejected() {
        let bus = Bus::new();
        let mut sim = Simulator::new(square(5_000), &bus).unwrap();
        assert!(matches!(
            sim.inject_live(InjectionKind::JerkyDirection, 1.0, 0),
            Err(SimError::InvalidScenario(_))
        ));
        while sim.step().unwrap() {}
        assert_eq!(
            sim.inject_live(InjectionKind::JerkyDirection, 1.0, 100),
            Err(SimError::ScenarioNotRunning)
        );
    }

    #[test]
    fn second_scenario_on_same_bus_collides() {
        let bus = Bus::new();
        let _a = Simulator::new(square(1_000), &bus).unwrap();
        assert!(matches!(Simulator::new(square(1_000), &bus), Err(SimError::TopicCollision(_))));
    }

    #[test]
    fn invalid_scenarios() {
        let mut s = square(1_000);
        s.tick_ms = 0;
        assert!(s.validate().is_err());
        let mut s = square(1_025);
        s.tick_ms = 50;
        assert!(s.validate().is_err());
        let mut s = square(1_000);
        s.path.truncate(1);
        assert!(s.validate().is_err());
        let mut s = square(1_000);
        s.injections.push(Injection {
            kind: InjectionKind::VaryingSpeed,
            start_ms: 500,
            end_ms: 500,
            magnitude: 0.5,
        });
        assert!(s.validate().is_err());
    }

    #[test]
    fn yaml_round_trip_uses_spec_keys() {
        let text = "path: [[0, 0], [1, 0]]\nnominal_speed: 0.4\nduration_ms: 1000\ntick_ms: 50\nseed: 3\ninjections:\n  - kind: varying_speed\n    start_ms: 100\n    end_ms: 600\n    magnitude: 0.5\n";
        let s = Scenario::from_yaml(text).unwrap();
        assert_eq!(s.injections[0].kind, InjectionKind::VaryingSpeed);
        assert_eq!(Scenario::from_yaml(&s.to_yaml()).unwrap(), s);
    }

    #[test]
    fn planned_injections_are_disjoint_and_after_warmup() {
        let inj = plan_injections(&InjectionKind::ALL, 120_000, 30_000, 11);
        assert_eq!(inj.len(), 5);
        let mut sorted = inj.clone();
        sorted.sort_by_key(|i| i.start_ms);
        for w in sorted.windows(2) {
            assert!(w[0].end_ms <= w[1].start_ms);
        }
        assert!(sorted[0].start_ms >= 30_000);
        assert_eq!(plan_injections(&InjectionKind::ALL, 120_000, 30_000, 11), inj);
    }

    #[test]
    fn safe_mode_clamps_linear() {
        let bus = Bus::new();
        let mut s = square(5_000);
        s.nominal_speed = 1.4;
        let mut sim = Simulator::new(s, &bus).unwrap();
        let probe = bus.subscribe_with("probe", CMD_VEL, 10_000, false).unwrap();
        sim.set_safe_mode(Some(SafeLimits {
            linear: [0.0, 1.0],
            angular: None,
        }));
        while sim.step().unwrap() {}
        assert!(probe.drain().iter().all(|m| m.payload["linear"].as_f64().unwrap() <= 1.0));
    }
}
