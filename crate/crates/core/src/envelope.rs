//! Operating-envelope risk model with accumulated-risk emergency stops.
//!
//! Each dimension carries nested bounds `N ⊆ FOS ⊆ OE`. Risk is zero inside
//! FOS and grows with the normalized distance past FOS, measured in units of
//! the FOS-to-OE span on that side.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvelopeError {
    #[error("dimension {0}: bounds must nest as oe_lo <= fos_lo <= n_lo <= n_hi <= fos_hi <= oe_hi")]
    BadNesting(String),
    #[error("state has {got} values but the envelope has {want} dimensions")]
    DimensionMismatch { got: usize, want: usize },
    #[error("dimension {0} has no room between FOS and OE but the state lies beyond FOS")]
    DegenerateDim(String),
    #[error("need at least {need} labeled excursions, got {got}")]
    InsufficientData { need: usize, got: usize },
    #[error("labeled excursions carry no signal; fit rejected")]
    DegenerateFit,
    #[error("invalid risk model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeDim {
    pub name: String,
    #[serde(default)]
    pub unit: String,
    pub n_lo: f64,
    pub n_hi: f64,
    pub fos_lo: f64,
    pub fos_hi: f64,
    pub oe_lo: f64,
    pub oe_hi: f64,
    /// Feature field (`topic.field`) that supplies this dimension at runtime.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl EnvelopeDim {
    pub fn new(name: &str, unit: &str, n: [f64; 2], fos: [f64; 2], oe: [f64; 2]) -> Self {
        Self {
            name: name.into(),
            unit: unit.into(),
            n_lo: n[0],
            n_hi: n[1],
            fos_lo: fos[0],
            fos_hi: fos[1],
            oe_lo: oe[0],
            oe_hi: oe[1],
            source: None,
        }
    }

    pub fn with_source(mut self, source: &str) -> Self {
        self.source = Some(source.into());
        self
    }

    fn nested(&self) -> bool {
        let b = [self.oe_lo, self.fos_lo, self.n_lo, self.n_hi, self.fos_hi, self.oe_hi];
        b.iter().all(|v| v.is_finite()) && b.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn in_fos(&self, x: f64) -> bool {
        x >= self.fos_lo && x <= self.fos_hi
    }

    /// Normalized exceedance past FOS, clamped to 1 beyond OE. The flag is
    /// set when `x` lies outside OE.
    pub fn exceedance(&self, x: f64) -> Result<(f64, bool), EnvelopeError> {
        let out_of_oe = x > self.oe_hi || x < self.oe_lo;
        let e = if x > self.fos_hi {
            let span = self.oe_hi - self.fos_hi;
            if span <= 0.0 {
                return Err(EnvelopeError::DegenerateDim(self.name.clone()));
            }
            (x - self.fos_hi) / span
        } else if x < self.fos_lo {
            let span = self.fos_lo - self.oe_lo;
            if span <= 0.0 {
                return Err(EnvelopeError::DegenerateDim(self.name.clone()));
            }
            (self.fos_lo - x) / span
        } else {
            0.0
        };
        Ok((e.min(1.0), out_of_oe))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub dims: Vec<EnvelopeDim>,
}

impl Envelope {
    pub fn new(dims: Vec<EnvelopeDim>) -> Result<Self, EnvelopeError> {
        if let Some(d) = dims.iter().find(|d| !d.nested()) {
            return Err(EnvelopeError::BadNesting(d.name.clone()));
        }
        Ok(Self { dims })
    }

    pub fn from_yaml(text: &str) -> Result<Self, EnvelopeError> {
        let raw: Envelope = serde_yaml::from_str(text).map_err(|e| EnvelopeError::InvalidModel(e.to_string()))?;
        Self::new(raw.dims)
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    fn check(&self, phi: &[f64]) -> Result<(), EnvelopeError> {
        if phi.len() != self.dims.len() {
            return Err(EnvelopeError::DimensionMismatch {
                got: phi.len(),
                want: self.dims.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    Max,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskModel {
    pub combine: Combine,
    pub p: f64,
    /// Per-dimension weights; empty means all ones.
    pub weights: Vec<f64>,
    pub lambda_per_s: f64,
    pub r_star: f64,
    pub count_m: usize,
    pub count_window_ms: i64,
}

impl Default for RiskModel {
    fn default() -> Self {
        Self {
            combine: Combine::Max,
            p: 2.0,
            weights: Vec::new(),
            lambda_per_s: 0.1,
            r_star: 0.5,
            count_m: 5,
            count_window_ms: 10_000,
        }
    }
}

impl RiskModel {
    pub fn validate(&self) -> Result<(), EnvelopeError> {
        let bad = |m: &str| Err(EnvelopeError::InvalidModel(m.into()));
        if !(self.p.is_finite() && self.p >= 1.0) {
            return bad("p must be >= 1");
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("weights must be non-negative");
        }
        if !(self.lambda_per_s.is_finite() && self.lambda_per_s >= 0.0) {
            return bad("lambda_per_s must be non-negative");
        }
        if !(self.r_star.is_finite() && self.r_star > 0.0) {
            return bad("r_star must be positive");
        }
        if self.count_m == 0 || self.count_window_ms <= 0 {
            return bad("count trigger needs m >= 1 and a positive window");
        }
        Ok(())
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights.get(i).copied().unwrap_or(1.0)
    }

    /// Combine per-dimension exceedances into one risk value.
    pub fn combine_exceedances(&self, e: &[f64]) -> f64 {
        let terms = e.iter().enumerate().map(|(i, x)| self.weight(i) * x.powf(self.p));
        match self.combine {
            Combine::Max => terms.fold(0.0, f64::max),
            Combine::Sum => terms.sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimExceedance {
    pub name: String,
    pub value: f64,
    pub exceedance: f64,
}

/// Risk at one state, with everything needed to explain it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub risk: f64,
    pub phi: Vec<f64>,
    pub exceedances: Vec<DimExceedance>,
    pub out_of_envelope: Vec<String>,
    pub degenerate: Vec<String>,
}

impl RiskReport {
    pub fn outside_fos(&self) -> bool {
        self.exceedances.iter().any(|d| d.exceedance > 0.0) || !self.degenerate.is_empty()
    }

    pub fn nonzero(&self) -> Vec<DimExceedance> {
        self.exceedances.iter().filter(|d| d.exceedance > 0.0).cloned().collect()
    }
}

pub fn instantaneous_risk(phi: &[f64], env: &Envelope, model: &RiskModel) -> Result<f64, EnvelopeError> {
    env.check(phi)?;
    let e = env
        .dims
        .iter()
        .zip(phi)
        .map(|(d, x)| d.exceedance(*x).map(|(e, _)| e))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(model.combine_exceedances(&e))
}

/// Like [`instantaneous_risk`] but never fails on a degenerate dimension:
/// such a dimension makes the risk infinite, which triggers at once.
pub fn assess(phi: &[f64], env: &Envelope, model: &RiskModel) -> Result<RiskReport, EnvelopeError> {
    env.check(phi)?;
    let mut report = RiskReport {
        risk: 0.0,
        phi: phi.to_vec(),
        exceedances: Vec::with_capacity(phi.len()),
        out_of_envelope: Vec::new(),
        degenerate: Vec::new(),
    };
    let mut e = Vec::with_capacity(phi.len());
    for (d, x) in env.dims.iter().zip(phi) {
        let (ex, out) = match d.exceedance(*x) {
            Ok(v) => v,
            Err(_) => {
                report.degenerate.push(d.name.clone());
                (1.0, *x > d.oe_hi || *x < d.oe_lo)
            }
        };
        if out {
            report.out_of_envelope.push(d.name.clone());
        }
        e.push(ex);
        report.exceedances.push(DimExceedance {
            name: d.name.clone(),
            value: *x,
            exceedance: ex,
        });
    }
    report.risk = if report.degenerate.is_empty() {
        model.combine_exceedances(&e)
    } else {
        f64::INFINITY
    };
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerRule {
    Integral,
    Count,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EStopDecision {
    pub t_ms: i64,
    pub accumulated_risk: f64,
    pub triggering_rule: TriggerRule,
    pub contributing: Vec<DimExceedance>,
    pub out_of_envelope: Vec<String>,
}

/// Leaky risk integral plus excursion counter for one monitored subsystem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskAccumulator {
    model: RiskModel,
    r: f64,
    outside: bool,
    excursions: VecDeque<i64>,
    last_report: Option<RiskReport>,
    fired: u64,
}

impl RiskAccumulator {
    pub fn new(model: RiskModel) -> Result<Self, EnvelopeError> {
        model.validate()?;
        Ok(Self {
            model,
            r: 0.0,
            outside: false,
            excursions: VecDeque::new(),
            last_report: None,
            fired: 0,
        })
    }

    pub fn model(&self) -> &RiskModel {
        &self.model
    }

    pub fn set_model(&mut self, model: RiskModel) -> Result<(), EnvelopeError> {
        model.validate()?;
        self.model = model;
        Ok(())
    }

    pub fn accumulated(&self) -> f64 {
        self.r
    }

    pub fn last_report(&self) -> Option<&RiskReport> {
        self.last_report.as_ref()
    }

    pub fn fired(&self) -> u64 {
        self.fired
    }

    pub fn excursions_in_window(&self) -> usize {
        self.excursions.len()
    }

    /// Fold in the risk held over the last `dt_ms`, ending at `t_ms`.
    pub fn accumulate(&mut self, report: &RiskReport, t_ms: i64, dt_ms: i64) -> Option<EStopDecision> {
        let dt = dt_ms.max(0) as f64 / 1000.0;
        self.r = self.r * (-self.model.lambda_per_s * dt).exp() + report.risk * dt;
        if report.risk.is_infinite() {
            self.r = f64::INFINITY;
        }
        let outside = report.outside_fos();
        if outside && !self.outside {
            self.excursions.push_back(t_ms);
        }
        self.outside = outside;
        while self.excursions.front().is_some_and(|t| *t <= t_ms - self.model.count_window_ms) {
            self.excursions.pop_front();
        }
        self.last_report = Some(report.clone());

        let rule = if self.r >= self.model.r_star {
            TriggerRule::Integral
        } else if self.excursions.len() >= self.model.count_m {
            TriggerRule::Count
        } else {
            return None;
        };
        let decision = EStopDecision {
            t_ms,
            accumulated_risk: self.r,
            triggering_rule: rule,
            contributing: report.nonzero(),
            out_of_envelope: report.out_of_envelope.clone(),
        };
        self.r = 0.0;
        self.excursions.clear();
        self.fired += 1;
        Some(decision)
    }
}

/// Feeds envelope dimensions from live messages (each dim names its
/// `topic.field` source) and accumulates risk per message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeMonitor {
    envelope: Envelope,
    sources: Vec<(String, String)>,
    acc: RiskAccumulator,
    values: Vec<Option<f64>>,
    last_t: Option<i64>,
}

impl EnvelopeMonitor {
    pub fn new(envelope: Envelope, model: RiskModel) -> Result<Self, EnvelopeError> {
        let sources = envelope
            .dims
            .iter()
            .map(|d| {
                d.source
                    .as_deref()
                    .and_then(|s| s.rsplit_once('.'))
                    .map(|(t, f)| (t.to_string(), f.to_string()))
                    .ok_or_else(|| EnvelopeError::InvalidModel(format!("dimension {} has no topic.field source", d.name)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let n = envelope.len();
        Ok(Self {
            envelope,
            sources,
            acc: RiskAccumulator::new(model)?,
            values: vec![None; n],
            last_t: None,
        })
    }

    /// The part of `envelope` fed by `topics`, or `None` if no dimension is.
    pub fn restricted(envelope: &Envelope, model: &RiskModel, topics: &[String]) -> Result<Option<Self>, EnvelopeError> {
        let mut dims = Vec::new();
        let mut weights = Vec::new();
        for (i, d) in envelope.dims.iter().enumerate() {
            let local = d
                .source
                .as_deref()
                .and_then(|s| s.rsplit_once('.'))
                .is_some_and(|(t, _)| topics.iter().any(|x| x == t));
            if local {
                dims.push(d.clone());
                weights.push(model.weight(i));
            }
        }
        if dims.is_empty() {
            return Ok(None);
        }
        let model = RiskModel {
            weights,
            ..model.clone()
        };
        Self::new(Envelope::new(dims)?, model).map(Some)
    }

    pub fn envelope(&self) -> &Envelope {
        &self.envelope
    }

    pub fn accumulator(&self) -> &RiskAccumulator {
        &self.acc
    }

    pub fn accumulator_mut(&mut self) -> &mut RiskAccumulator {
        &mut self.acc
    }

    pub fn topics(&self) -> Vec<String> {
        let mut t: Vec<String> = self.sources.iter().map(|(t, _)| t.clone()).collect();
        t.sort();
        t.dedup();
        t
    }

    /// Current state vector, once every dimension has been observed.
    pub fn phi(&self) -> Option<Vec<f64>> {
        self.values.iter().copied().collect()
    }

    pub fn observe(&mut self, msg: &crate::msgbus::Message) -> Result<Option<EStopDecision>, EnvelopeError> {
        let mut touched = false;
        for (i, (topic, field)) in self.sources.iter().enumerate() {
            if *topic == msg.topic {
                if let Some(v) = msg.payload.get(field).and_then(|s| s.as_f64()) {
                    self.values[i] = Some(v);
                    touched = true;
                }
            }
        }
        if !touched {
            return Ok(None);
        }
        let Some(phi) = self.phi() else {
            return Ok(None);
        };
        let report = assess(&phi, &self.envelope, self.acc.model())?;
        let dt = self.last_t.map_or(0, |t| msg.t_ms - t);
        self.last_t = Some(msg.t_ms);
        Ok(self.acc.accumulate(&report, msg.t_ms, dt))
    }
}

pub const MIN_LABELED_EXCURSIONS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedSurface {
    pub p: f64,
    pub weights: Vec<f64>,
    pub sse: f64,
}

const P_MAX: f64 = 8.0;
const W_MAX: f64 = 16.0;

fn sse(rows: &[Vec<f64>], y: &[f64], p: f64, w: &[f64], combine: Combine) -> f64 {
    rows.iter()
        .zip(y)
        .map(|(e, y)| {
            let terms = e.iter().zip(w).map(|(x, w)| w * x.powf(p));
            let r = match combine {
                Combine::Max => terms.fold(0.0, f64::max),
                Combine::Sum => terms.sum(),
            };
            (r - y).powi(2)
        })
        .sum()
}

fn golden<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// Best non-negative weights for a fixed exponent, by coordinate descent.
fn fit_weights(rows: &[Vec<f64>], y: &[f64], p: f64, combine: Combine) -> (Vec<f64>, f64) {
    let dims = rows[0].len();
    let mut w = vec![1.0; dims];
    let feats: Vec<Vec<f64>> = rows.iter().map(|e| e.iter().map(|x| x.powf(p)).collect()).collect();
    for _ in 0..30 {
        let before = w.clone();
        for i in 0..dims {
            match combine {
                Combine::Sum => {
                    let (mut num, mut den) = (0.0, 0.0);
                    for (f, yv) in feats.iter().zip(y) {
                        let rest: f64 = (0..dims).filter(|j| *j != i).map(|j| w[j] * f[j]).sum();
                        num += f[i] * (yv - rest);
                        den += f[i] * f[i];
                    }
                    w[i] = if den > 0.0 { (num / den).clamp(0.0, W_MAX) } else { 0.0 };
                }
                Combine::Max => {
                    let mut trial = w.clone();
                    w[i] = golden(
                        |v| {
                            trial[i] = v;
                            sse(rows, y, p, &trial, combine)
                        },
                        0.0,
                        W_MAX,
                        60,
                    );
                }
            }
        }
        if before.iter().zip(&w).all(|(a, b)| (a - b).abs() < 1e-12) {
            break;
        }
    }
    let err = sse(rows, y, p, &w, combine);
    (w, err)
}

/// Fit the exponent and per-dimension weights to labeled excursions
/// `(state, severity in [0, 1])`, keeping `p >= 1` and weights `>= 0`.
pub fn learn_surface(samples: &[(Vec<f64>, f64)], env: &Envelope, combine: Combine) -> Result<FittedSurface, EnvelopeError> {
    if samples.len() < MIN_LABELED_EXCURSIONS {
        return Err(EnvelopeError::InsufficientData {
            need: MIN_LABELED_EXCURSIONS,
            got: samples.len(),
        });
    }
    let mut rows = Vec::with_capacity(samples.len());
    let mut y = Vec::with_capacity(samples.len());
    for (phi, outcome) in samples {
        env.check(phi)?;
        if !(0.0..=1.0).contains(outcome) {
            return Err(EnvelopeError::InvalidModel(format!("outcome {outcome} outside [0, 1]")));
        }
        let e = env
            .dims
            .iter()
            .zip(phi)
            .map(|(d, x)| d.exceedance(*x).map(|(e, _)| e))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(e);
        y.push(*outcome);
    }
    let no_outcome = y.iter().all(|v| *v == 0.0);
    let no_excursion = rows.iter().all(|e| e.iter().all(|x| *x == 0.0));
    if no_outcome || no_excursion {
        return Err(EnvelopeError::DegenerateFit);
    }
    let cost = |p: f64| fit_weights(&rows, &y, p, combine).1;
    let step = 0.25;
    let mut best = (1.0, f64::INFINITY);
    let mut p = 1.0;
    while p <= P_MAX + 1e-9 {
        let c = cost(p);
        if c < best.1 {
            best = (p, c);
        }
        p += step;
    }
    let p = golden(cost, (best.0 - step).max(1.0), (best.0 + step).min(P_MAX), 40);
    let (weights, sse) = fit_weights(&rows, &y, p, combine);
    Ok(FittedSurface { p, weights, sse })
}

impl RiskModel {
    /// Refit from labeled excursions; on any error the current model is kept.
    pub fn learn(&mut self, samples: &[(Vec<f64>, f64)], env: &Envelope) -> Result<FittedSurface, EnvelopeError> {
        let fit = learn_surface(samples, env, self.combine)?;
        self.p = fit.p;
        self.weights = fit.weights.clone();
        Ok(fit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_dim() -> Envelope {
        Envelope::new(vec![
            EnvelopeDim::new("speed", "m/s", [0.0, 1.0], [0.0, 1.5], [0.0, 3.0]),
            EnvelopeDim::new("payload", "kg", [0.0, 5.0], [0.0, 7.0], [0.0, 15.0]),
        ])
        .unwrap()
    }

    #[test]
    fn risk_examples() {
        let env = two_dim();
        let m = RiskModel::default();
        assert_eq!(instantaneous_risk(&[0.5, 2.0], &env, &m).unwrap(), 0.0);
        assert_eq!(instantaneous_risk(&[1.5, 7.0], &env, &m).unwrap(), 0.0);
        let r = instantaneous_risk(&[2.25, 7.0], &env, &m).unwrap();
        assert!((r - 0.25).abs() < 1e-12);
    }

    #[test]
    fn nesting_is_validated() {
        let bad = EnvelopeDim::new("x", "", [0.0, 2.0], [0.0, 1.5], [0.0, 3.0]);
        assert_eq!(Envelope::new(vec![bad]), Err(EnvelopeError::BadNesting("x".into())));
    }

    #[test]
    fn degenerate_dim() {
        let env = Envelope::new(vec![EnvelopeDim::new("t", "C", [0.0, 1.0], [0.0, 2.0], [0.0, 2.0])]).unwrap();
        let m = RiskModel::default();
        assert_eq!(
            instantaneous_risk(&[2.5], &env, &m),
            Err(EnvelopeError::DegenerateDim("t".into()))
        );
        let report = assess(&[2.5], &env, &m).unwrap();
        assert!(report.risk.is_infinite());
        let mut acc = RiskAccumulator::new(m).unwrap();
        let d = acc.accumulate(&report, 10, 10).unwrap();
        assert_eq!(d.triggering_rule, TriggerRule::Integral);
    }

    #[test]
    fn beyond_oe_clamps_and_flags() {
        let env = two_dim();
        let report = assess(&[4.0, 1.0], &env, &RiskModel::default()).unwrap();
        assert_eq!(report.exceedances[0].exceedance, 1.0);
        assert_eq!(report.out_of_envelope, vec!["speed".to_string()]);
        assert_eq!(report.risk, 1.0);
    }

    #[test]
    fn constant_risk_trigger_time() {
        let env = two_dim();
        let model = RiskModel {
            lambda_per_s: 0.0,
            r_star: 1.0,
            count_m: usize::MAX,
            ..RiskModel::default()
        };
        let report = assess(&[2.25, 0.0], &env, &model).unwrap();
        let r = report.risk;
        let mut acc = RiskAccumulator::new(model).unwrap();
        let mut t = 0;
        let fired_at = loop {
            t += 10;
            if acc.accumulate(&report, t, 10).is_some() {
                break t;
            }
        };
        let expected = 1.0 / r * 1000.0;
        assert!((fired_at as f64 - expected).abs() <= 10.0, "{fired_at} vs {expected}");
    }

    #[test]
    fn redline_brief_vs_held() {
        let env = two_dim();
        let model = RiskModel {
            r_star: 0.2,
            count_m: usize::MAX,
            ..RiskModel::default()
        };
        let hot = assess(&[2.25, 0.0], &env, &model).unwrap();
        let calm = assess(&[0.5, 0.0], &env, &model).unwrap();
        let mut acc = RiskAccumulator::new(model.clone()).unwrap();
        assert!(acc.accumulate(&hot, 10, 10).is_none());
        for i in 2..300 {
            assert!(acc.accumulate(&calm, i * 10, 10).is_none());
        }
        let mut acc = RiskAccumulator::new(model).unwrap();
        let fired = (1..=100).filter_map(|i| acc.accumulate(&hot, i * 10, 10)).count();
        assert_eq!(fired, 1);
    }

    #[test]
    fn count_rule_and_explanation() {
        let env = two_dim();
        let model = RiskModel {
            r_star: 1e9,
            count_m: 3,
            count_window_ms: 5000,
            ..RiskModel::default()
        };
        let hot = assess(&[1.6, 0.0], &env, &model).unwrap();
        let calm = assess(&[0.5, 0.0], &env, &model).unwrap();
        let mut acc = RiskAccumulator::new(model).unwrap();
        let mut decisions = vec![];
        for i in 0..6 {
            let r = if i % 2 == 0 { &hot } else { &calm };
            decisions.extend(acc.accumulate(r, i * 100, 100));
        }
        assert_eq!(decisions.len(), 1);
        assert_eq!(decisions[0].triggering_rule, TriggerRule::Count);
        assert_eq!(decisions[0].contributing[0].name, "speed");
    }

    #[test]
    fn learn_recovers_exponent() {
        let env = two_dim();
        let samples: Vec<(Vec<f64>, f64)> = (0..40)
            .map(|i| {
                let e = 0.05 + 0.9 * (i as f64 / 39.0);
                let speed = 1.5 + e * 1.5;
                (vec![speed, 1.0], e * e)
            })
            .collect();
        let fit = learn_surface(&samples, &env, Combine::Max).unwrap();
        assert!((fit.p - 2.0).abs() < 0.1, "{fit:?}");
        assert!(matches!(
            learn_surface(&samples[..5], &env, Combine::Max),
            Err(EnvelopeError::InsufficientData { .. })
        ));
        let zeros: Vec<_> = samples.iter().map(|(p, _)| (p.clone(), 0.0)).collect();
        let mut model = RiskModel::default();
        assert_eq!(model.learn(&zeros, &env), Err(EnvelopeError::DegenerateFit));
        assert_eq!(model, RiskModel::default());
    }
}
