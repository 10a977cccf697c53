//! Node graph, predicate grouping and composite group attributes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::GroupValues;
use crate::features::{FeatureFrame, Selector};
use crate::msgbus::{BusDirectory, WILDCARD};

pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_KAPPA: f64 = 0.5;
pub const MIN_SAMPLES: usize = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HierarchyError {
    #[error("vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} aligned samples, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("bad predicate {0:?}")]
    BadPredicate(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemGraph {
    /// Node id to metadata tags.
    pub nodes: BTreeMap<String, BTreeSet<String>>,
    pub edges: BTreeSet<(String, String)>,
}

impl SystemGraph {
    pub fn degree(&self, node: &str) -> usize {
        self.edges.iter().filter(|(a, b)| a == node || b == node).count()
    }

    pub fn successors(&self, node: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|(a, _)| a == node)
            .map(|(_, b)| b.as_str())
            .collect()
    }
}

/// Collapse publisher→topic→subscriber into node→node edges. Wildcard
/// subscribers receive every topic. Self-loops are dropped.
pub fn build_graph(dir: &BusDirectory) -> SystemGraph {
    let mut nodes: BTreeMap<String, BTreeSet<String>> =
        dir.participants().into_iter().map(|n| (n, BTreeSet::new())).collect();
    for (n, tags) in &dir.nodes {
        nodes.insert(n.clone(), tags.clone());
    }
    let mut edges = BTreeSet::new();
    for (sub, patterns) in &dir.subscribers {
        for (publisher, topics) in &dir.publishers {
            if publisher == sub {
                continue;
            }
            let linked = patterns.contains(WILDCARD) || topics.iter().any(|t| patterns.contains(t));
            if linked {
                edges.insert((publisher.clone(), sub.clone()));
            }
        }
    }
    SystemGraph { nodes, edges }
}

#[derive(Debug, Clone, PartialEq)]
enum Literal {
    Tag(String, bool),
    Id(String, bool),
}

impl Literal {
    fn holds(&self, id: &str, tags: &BTreeSet<String>) -> bool {
        match self {
            Literal::Tag(t, want) => tags.contains(t) == *want,
            Literal::Id(i, want) => (id == i) == *want,
        }
    }
}

/// Membership predicate: `tag:x`, `id:x`, negation with `!`, conjunction
/// with `&`, disjunction with `|` (`&` binds tighter).
#[derive(Debug, Clone, PartialEq)]
pub struct TagExpr {
    any_of: Vec<Vec<Literal>>,
}

impl TagExpr {
    pub fn parse(s: &str) -> Result<Self, HierarchyError> {
        let bad = || HierarchyError::BadPredicate(s.to_string());
        let mut any_of = Vec::new();
        for alt in s.split('|') {
            let mut all_of = Vec::new();
            for lit in alt.split('&') {
                let lit = lit.trim();
                let (neg, body) = match lit.strip_prefix('!') {
                    Some(rest) => (true, rest.trim()),
                    None => (false, lit),
                };
                let l = if let Some(t) = body.strip_prefix("tag:") {
                    Literal::Tag(t.trim().to_string(), !neg)
                } else if let Some(i) = body.strip_prefix("id:") {
                    Literal::Id(i.trim().to_string(), !neg)
                } else {
                    return Err(bad());
                };
                if matches!(&l, Literal::Tag(x, _) | Literal::Id(x, _) if x.is_empty()) {
                    return Err(bad());
                }
                all_of.push(l);
            }
            any_of.push(all_of);
        }
        Ok(Self { any_of })
    }

    pub fn matches(&self, id: &str, tags: &BTreeSet<String>) -> bool {
        self.any_of.iter().any(|all| all.iter().all(|l| l.holds(id, tags)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPredicate {
    pub group: String,
    #[serde(rename = "match")]
    pub expr: String,
}

impl GroupPredicate {
    pub fn new(group: &str, expr: &str) -> Self {
        Self {
            group: group.into(),
            expr: expr.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupingScheme {
    pub groups: BTreeMap<String, BTreeSet<String>>,
    pub ungrouped: BTreeSet<String>,
    pub warnings: Vec<String>,
}

impl GroupingScheme {
    pub fn group_of(&self, node: &str) -> Option<&str> {
        self.groups
            .iter()
            .find(|(_, m)| m.contains(node))
            .map(|(g, _)| g.as_str())
    }
}

/// Assign each node to the group of the first predicate it satisfies.
pub fn apply_grouping(graph: &SystemGraph, predicates: &[GroupPredicate]) -> Result<GroupingScheme, HierarchyError> {
    let parsed = predicates
        .iter()
        .map(|p| TagExpr::parse(&p.expr).map(|e| (p.group.clone(), e)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut scheme = GroupingScheme::default();
    for (g, _) in &parsed {
        scheme.groups.entry(g.clone()).or_default();
    }
    for (id, tags) in &graph.nodes {
        match parsed.iter().find(|(_, e)| e.matches(id, tags)) {
            Some((g, _)) => {
                scheme.groups.get_mut(g).expect("declared").insert(id.clone());
            }
            None => {
                scheme.ungrouped.insert(id.clone());
            }
        }
    }
    for (g, members) in &scheme.groups {
        if members.is_empty() {
            tracing::warn!(group = %g, "group has no members");
            scheme.warnings.push(format!("EmptyGroup: {g}"));
        }
    }
    Ok(scheme)
}

pub fn compose(b: &[f64], phi: &[f64]) -> Result<f64, HierarchyError> {
    if b.len() != phi.len() {
        return Err(HierarchyError::LengthMismatch(b.len(), phi.len()));
    }
    Ok(b.iter().zip(phi).map(|(x, a)| x * a).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Decomposability {
    Linear {
        residual_fraction: f64,
        max_coupling: f64,
    },
    Nonlinear {
        residual_fraction: f64,
        max_coupling: f64,
        coupled_pair: Option<(usize, usize)>,
        reason: String,
    },
}

impl Decomposability {
    pub fn is_linear(&self) -> bool {
        matches!(self, Decomposability::Linear { .. })
    }
}

/// Least-squares polynomial fit of `y` on `x`; returns R².
fn poly_r2(x: &[f64], y: &[f64], degree: usize) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sx = (x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sst: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sst <= f64::EPSILON * n || sx == 0.0 {
        return 0.0;
    }
    let k = degree + 1;
    let mut a = vec![vec![0.0; k + 1]; k];
    for (xi, yi) in x.iter().zip(y) {
        let u = (xi - mx) / sx;
        let pw: Vec<f64> = (0..k).map(|p| u.powi(p as i32)).collect();
        for r in 0..k {
            for c in 0..k {
                a[r][c] += pw[r] * pw[c];
            }
            a[r][k] += pw[r] * yi;
        }
    }
    let Some(coef) = solve(a) else {
        return 0.0;
    };
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| {
            let u = (xi - mx) / sx;
            let f: f64 = coef.iter().enumerate().map(|(p, c)| c * u.powi(p as i32)).sum();
            (yi - f).powi(2)
        })
        .sum();
    (1.0 - sse / sst).clamp(0.0, 1.0)
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=n {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    Some((0..n).map(|i| a[i][n] / a[i][i]).collect())
}

/// Decide whether a group total may be monitored as `Φᵀ·B`.
///
/// The observed total is regressed on the composed value; the residual
/// fraction must stay below `tau`. Members must also be mutually
/// independent: any pair where a cubic fit of one on the other explains at
/// least `kappa` of its variance counts as coupled.
pub fn decomposability_test(
    members: &[Vec<f64>],
    total: &[f64],
    phi: &[f64],
    tau: f64,
    kappa: f64,
) -> Result<Decomposability, HierarchyError> {
    if members.len() != phi.len() {
        return Err(HierarchyError::LengthMismatch(members.len(), phi.len()));
    }
    if let Some(m) = members.iter().find(|m| m.len() != total.len()) {
        return Err(HierarchyError::LengthMismatch(m.len(), total.len()));
    }
    if total.len() < MIN_SAMPLES {
        return Err(HierarchyError::InsufficientSamples {
            need: MIN_SAMPLES,
            got: total.len(),
        });
    }
    let composed: Vec<f64> = (0..total.len())
        .map(|t| members.iter().zip(phi).map(|(m, a)| m[t] * a).sum())
        .collect();
    let residual_fraction = 1.0 - poly_r2(&composed, total, 1);
    let residual_fraction = if total.iter().all(|v| (v - total[0]).abs() < 1e-12) {
        let exact = composed.iter().zip(total).all(|(c, t)| (c - t).abs() < 1e-9);
        if exact { 0.0 } else { 1.0 }
    } else {
        residual_fraction
    };
    let mut max_coupling: f64 = 0.0;
    let mut coupled_pair = None;
    for i in 0..members.len() {
        for j in 0..members.len() {
            if i == j {
                continue;
            }
            let r2 = poly_r2(&members[i], &members[j], 3);
            if r2 > max_coupling {
                max_coupling = r2;
                coupled_pair = Some((i, j));
            }
        }
    }
    if residual_fraction >= tau {
        return Ok(Decomposability::Nonlinear {
            residual_fraction,
            max_coupling,
            coupled_pair: None,
            reason: format!("residual fraction {residual_fraction:.3} >= {tau}"),
        });
    }
    if max_coupling >= kappa {
        return Ok(Decomposability::Nonlinear {
            residual_fraction,
            max_coupling,
            coupled_pair,
            reason: format!("members coupled (R² {max_coupling:.3} >= {kappa})"),
        });
    }
    Ok(Decomposability::Linear {
        residual_fraction,
        max_coupling,
    })
}

/// A per-node attribute summed over a group, e.g. CPU load over every
/// cpu-reporting node. `selector` contains `{node}`, replaced per member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAttribute {
    pub name: String,
    pub group: String,
    pub selector: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<Vec<f64>>,
}

impl GroupAttribute {
    pub fn member_selectors(&self, scheme: &GroupingScheme) -> Result<Vec<(String, Selector)>, HierarchyError> {
        let members = scheme.groups.get(&self.group).cloned().unwrap_or_default();
        members
            .into_iter()
            .map(|m| {
                let s = self.selector.replace("{node}", &m);
                Selector::parse(&s)
                    .map(|sel| (m, sel))
                    .map_err(|_| HierarchyError::BadPredicate(s))
            })
            .collect()
    }

    pub fn weights(&self, members: usize) -> Result<Vec<f64>, HierarchyError> {
        match &self.phi {
            None => Ok(vec![1.0; members]),
            Some(p) if p.len() == members => Ok(p.clone()),
            Some(p) => Err(HierarchyError::LengthMismatch(p.len(), members)),
        }
    }

    /// Member values and composed value on one frame; `None` if any member is missing.
    pub fn evaluate(&self, frame: &FeatureFrame, scheme: &GroupingScheme) -> Option<(Vec<f64>, f64)> {
        let sels = self.member_selectors(scheme).ok()?;
        if sels.is_empty() {
            return None;
        }
        let b: Vec<f64> = sels.iter().map(|(_, s)| frame.value(s)).collect::<Option<_>>()?;
        let phi = self.weights(b.len()).ok()?;
        let v = compose(&b, &phi).ok()?;
        Some((b, v))
    }
}

/// Composite values for every attribute that can be evaluated on `frame`.
pub fn group_values(frame: &FeatureFrame, scheme: &GroupingScheme, attrs: &[GroupAttribute]) -> GroupValues {
    attrs
        .iter()
        .filter_map(|a| a.evaluate(frame, scheme).map(|(_, v)| (a.name.clone(), v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msgbus::{Bus, FieldSpec, TopicSchema};

    fn tags(t: &[&str]) -> BTreeSet<String> {
        t.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn edge_from_publisher_to_subscriber() {
        let bus = Bus::new();
        bus.register_node("teleop", ["teleop"]);
        bus.register_node("base", ["actuator"]);
        bus.register_node("idle", Vec::<&str>::new());
        bus.advertise("teleop", TopicSchema::new("/cmd_vel", vec![FieldSpec::float("linear")]))
            .unwrap();
        let _s = bus.subscribe("base", "/cmd_vel").unwrap();
        let g = build_graph(&bus.directory());
        assert!(g.edges.contains(&("teleop".into(), "base".into())));
        assert_eq!(g.degree("idle"), 0);
        assert_eq!(g.nodes.len(), 3);
    }

    #[test]
    fn grouping_priority_and_ungrouped() {
        let graph = SystemGraph {
            nodes: BTreeMap::from([
                ("wrist".into(), tags(&["arm-joint", "cpu-reporting"])),
                ("elbow".into(), tags(&["arm-joint"])),
                ("nav".into(), tags(&["planner"])),
            ]),
            edges: BTreeSet::new(),
        };
        let preds = [GroupPredicate::new("arm", "tag:arm-joint"), GroupPredicate::new("compute", "tag:cpu-reporting")];
        let s = apply_grouping(&graph, &preds).unwrap();
        assert_eq!(s.groups["arm"], tags(&["wrist", "elbow"]));
        assert_eq!(s.ungrouped, tags(&["nav"]));
        assert_eq!(s.warnings, vec!["EmptyGroup: compute".to_string()]);
        let none = apply_grouping(&graph, &[]).unwrap();
        assert_eq!(none.ungrouped.len(), 3);
    }

    #[test]
    fn tag_expressions() {
        let e = TagExpr::parse("tag:a & !tag:b | id:n1").unwrap();
        assert!(e.matches("x", &tags(&["a"])));
        assert!(!e.matches("x", &tags(&["a", "b"])));
        assert!(e.matches("n1", &tags(&["b"])));
        assert!(TagExpr::parse("color:red").is_err());
    }

    #[test]
    fn compose_examples() {
        assert!((compose(&[0.3, 0.2], &[1.0, 1.0]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(compose(&[7.0, 9.0], &[1.0, 0.0]).unwrap(), 7.0);
        assert!(compose(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn coupled_pair_is_nonlinear() {
        let b1: Vec<f64> = (0..60).map(|i| -1.0 + 2.0 * i as f64 / 59.0).collect();
        let b2: Vec<f64> = b1.iter().map(|x| x * x).collect();
        let total: Vec<f64> = b1.iter().zip(&b2).map(|(a, b)| a + b).collect();
        let v = decomposability_test(&[b1, b2], &total, &[1.0, 1.0], DEFAULT_TAU, DEFAULT_KAPPA).unwrap();
        assert!(!v.is_linear(), "{v:?}");
    }

    #[test]
    fn independent_sum_is_linear() {
        let b1: Vec<f64> = (0..60).map(|i| ((i * 37) % 17) as f64 / 17.0).collect();
        let b2: Vec<f64> = (0..60).map(|i| ((i * 11) % 13) as f64 / 13.0).collect();
        let total: Vec<f64> = b1.iter().zip(&b2).map(|(a, b)| a + b).collect();
        let v = decomposability_test(&[b1.clone(), b2.clone()], &total, &[1.0, 1.0], DEFAULT_TAU, DEFAULT_KAPPA).unwrap();
        assert!(v.is_linear(), "{v:?}");
        assert!(matches!(
            decomposability_test(&[b1[..10].to_vec(), b2[..10].to_vec()], &total[..10], &[1.0, 1.0], 0.05, 0.5),
            Err(HierarchyError::InsufficientSamples { .. })
        ));
    }
}
