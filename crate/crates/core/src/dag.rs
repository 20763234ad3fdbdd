//! Declarative computation DAGs and the static predicates that gate sketch
//! derivation rules.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Affine, Expr};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterSpec {
    pub name: String,
    pub extent: u64,
}

impl IterSpec {
    pub fn new(name: &str, extent: u64) -> Self {
        IterSpec {
            name: name.to_string(),
            extent,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeNode {
    pub name: String,
    pub space: Vec<IterSpec>,
    #[serde(default)]
    pub reduce: Vec<IterSpec>,
    /// `None` for placeholders.
    pub body: Option<Expr>,
    /// Constant placeholders (weights) may have their layout rewritten.
    #[serde(default)]
    pub is_constant: bool,
}

impl ComputeNode {
    pub fn placeholder(name: &str, shape: &[u64]) -> Self {
        ComputeNode {
            name: name.to_string(),
            space: shape
                .iter()
                .enumerate()
                .map(|(k, e)| IterSpec::new(&format!("d{k}"), *e))
                .collect(),
            reduce: Vec::new(),
            body: None,
            is_constant: false,
        }
    }

    pub fn constant(name: &str, shape: &[u64]) -> Self {
        ComputeNode {
            is_constant: true,
            ..Self::placeholder(name, shape)
        }
    }

    /// A compute node. Reduction iterators are taken from a root `Reduce`
    /// marker, so `reduce` lists only extents for those axes.
    pub fn compute(name: &str, space: &[(&str, u64)], reduce: &[(&str, u64)], body: Expr) -> Self {
        ComputeNode {
            name: name.to_string(),
            space: space.iter().map(|(n, e)| IterSpec::new(n, *e)).collect(),
            reduce: reduce.iter().map(|(n, e)| IterSpec::new(n, *e)).collect(),
            body: Some(body),
            is_constant: false,
        }
    }

    pub fn is_placeholder(&self) -> bool {
        self.body.is_none()
    }

    pub fn shape(&self) -> Vec<u64> {
        self.space.iter().map(|s| s.extent).collect()
    }

    pub fn space_volume(&self) -> u64 {
        self.space.iter().map(|s| s.extent).product()
    }

    pub fn reduce_volume(&self) -> u64 {
        self.reduce.iter().map(|s| s.extent).product()
    }

    /// Floating point operations to evaluate the whole node.
    pub fn flops(&self) -> f64 {
        match &self.body {
            None => 0.0,
            Some(b) => {
                let (fl, _) = b.op_counts();
                fl.total() * (self.space_volume() * self.reduce_volume()) as f64
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeDag {
    /// Stable identifier used in tuning logs.
    pub id: String,
    pub nodes: Vec<ComputeNode>,
    pub outputs: Vec<String>,
}

/// Results of the static read/write pattern analysis of one node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NodeTraits {
    pub strict_inlinable: bool,
    pub has_data_reuse: bool,
    pub has_fusible_consumer: bool,
    pub has_more_reduction_parallel: bool,
}

/// Thresholds for the "little space parallelism, ample reduction
/// parallelism" predicate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub threshold_space: u64,
    pub ratio_threshold: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            threshold_space: 256,
            ratio_threshold: 16,
        }
    }
}

/// The minimal view of a computation the predicates need. Both DAG nodes
/// and program stages (after inlining/caching) can be analyzed through it.
pub struct NodeView<'a> {
    pub name: &'a str,
    pub space: Vec<(&'a str, u64)>,
    pub reduce: Vec<(&'a str, u64)>,
    pub body: &'a Expr,
    pub is_output: bool,
    /// Bodies of the nodes that read this one, with their space iterators.
    pub consumers: Vec<(&'a Expr, Vec<&'a str>)>,
}

/// The analyses shared by DAG nodes and program stages.
pub fn analyze_view(view: &NodeView<'_>, cfg: &AnalysisConfig) -> NodeTraits {
    let reads = view.body.reads();
    let space_names: Vec<&str> = view.space.iter().map(|(n, _)| *n).collect();

    let strict_inlinable = !view.is_output
        && view.reduce.is_empty()
        && view.body.as_reduce().is_none()
        && reads.iter().all(|(_, idx)| is_projection(idx, &space_names));

    let has_data_reuse = !view.reduce.is_empty()
        && reads.iter().any(|(_, idx)| {
            let used: BTreeSet<&str> = idx
                .iter()
                .flat_map(|a| a.terms.iter().map(|(n, _)| n.as_str()))
                .collect();
            view.space
                .iter()
                .chain(view.reduce.iter())
                .any(|(n, e)| *e > 1 && !used.contains(n))
        });

    let has_fusible_consumer = view.consumers.len() == 1 && {
        let (cbody, cspace) = &view.consumers[0];
        cbody.as_reduce().is_none()
            && cspace.len() == view.space.len()
            && cbody.reads().iter().filter(|(b, _)| *b == view.name).all(|(_, idx)| {
                idx.len() == cspace.len()
                    && idx
                        .iter()
                        .zip(cspace.iter())
                        .all(|(a, n)| a.as_single_var() == Some(*n))
            })
    };

    let space: u64 = view.space.iter().map(|(_, e)| *e).product();
    let red: u64 = view.reduce.iter().map(|(_, e)| *e).product();
    let has_more_reduction_parallel =
        !view.reduce.is_empty() && space < cfg.threshold_space && red >= cfg.ratio_threshold * space;

    NodeTraits {
        strict_inlinable,
        has_data_reuse,
        has_fusible_consumer,
        has_more_reduction_parallel,
    }
}

/// Every index is a plain iterator, and the iterators appear in the same
/// relative order as the node's space iterators (broadcasts allowed,
/// transposes and offsets not).
fn is_projection(idx: &[Affine], space: &[&str]) -> bool {
    let mut last: Option<usize> = None;
    for a in idx {
        let Some(v) = a.as_single_var() else {
            return false;
        };
        let Some(pos) = space.iter().position(|s| *s == v) else {
            return false;
        };
        if let Some(l) = last {
            if pos <= l {
                return false;
            }
        }
        last = Some(pos);
    }
    true
}

impl ComputeDag {
    pub fn new(id: &str, nodes: Vec<ComputeNode>, outputs: &[&str]) -> Result<Self> {
        let dag = ComputeDag {
            id: id.to_string(),
            nodes,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        };
        dag.check()?;
        Ok(dag)
    }

    pub fn node(&self, name: &str) -> Option<&ComputeNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn is_output(&self, name: &str) -> bool {
        self.outputs.iter().any(|o| o == name)
    }

    /// Names of nodes whose bodies read `name`, in node order.
    pub fn consumers(&self, name: &str) -> Vec<&ComputeNode> {
        self.nodes
            .iter()
            .filter(|n| n.body.as_ref().is_some_and(|b| b.reads_buffer(name)))
            .collect()
    }

    pub fn producers(&self, name: &str) -> BTreeSet<String> {
        self.node(name)
            .and_then(|n| n.body.as_ref())
            .map(|b| b.read_buffers())
            .unwrap_or_default()
    }

    /// Total floating point operations `C`.
    pub fn flop_count(&self) -> f64 {
        self.nodes.iter().map(|n| n.flops()).sum()
    }

    /// Structural validation of the DAG definition.
    pub fn check(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for n in &self.nodes {
            if !names.insert(n.name.as_str()) {
                return Err(Error::InvalidDag(format!("duplicate node `{}`", n.name)));
            }
        }
        for o in &self.outputs {
            match self.node(o) {
                Some(n) if !n.is_placeholder() => {}
                _ => return Err(Error::InvalidDag(format!("output `{o}` is not a compute node"))),
            }
        }
        for n in &self.nodes {
            let all_iters: Vec<&IterSpec> = n.space.iter().chain(n.reduce.iter()).collect();
            if let Some(bad) = all_iters.iter().find(|s| s.extent == 0) {
                return Err(Error::InvalidDag(format!(
                    "iterator `{}` of `{}` has zero extent",
                    bad.name, n.name
                )));
            }
            let Some(body) = &n.body else { continue };
            let declared: BTreeSet<&str> = all_iters.iter().map(|s| s.name.as_str()).collect();
            for it in body.iterators() {
                if !declared.contains(it.as_str()) {
                    return Err(Error::InvalidDag(format!(
                        "node `{}` references undeclared iterator `{it}`",
                        n.name
                    )));
                }
            }
            let mut nested_reduce = false;
            if let Some((_, axes, inner)) = body.as_reduce() {
                inner.visit(&mut |e| nested_reduce |= matches!(e, Expr::Reduce { .. }));
                let red: BTreeSet<&str> = n.reduce.iter().map(|s| s.name.as_str()).collect();
                let ax: BTreeSet<&str> = axes.iter().map(|s| s.as_str()).collect();
                if red != ax {
                    return Err(Error::InvalidDag(format!(
                        "node `{}` reduction axes do not match its reduction iterators",
                        n.name
                    )));
                }
            } else {
                body.visit(&mut |e| nested_reduce |= matches!(e, Expr::Reduce { .. }));
                if !n.reduce.is_empty() {
                    return Err(Error::InvalidDag(format!(
                        "node `{}` declares reduction iterators but has no reduction",
                        n.name
                    )));
                }
            }
            if nested_reduce {
                return Err(Error::InvalidDag(format!(
                    "node `{}` has a reduction below the root",
                    n.name
                )));
            }
            for (buf, idx) in body.reads() {
                let Some(p) = self.node(buf) else {
                    return Err(Error::InvalidDag(format!(
                        "node `{}` reads unknown buffer `{buf}`",
                        n.name
                    )));
                };
                if p.space.len() != idx.len() {
                    return Err(Error::InvalidDag(format!(
                        "node `{}` reads `{buf}` with {} indices, expected {}",
                        n.name,
                        idx.len(),
                        p.space.len()
                    )));
                }
            }
        }
        self.topological_order().map(|_| ())
    }

    /// Nodes ordered from output to input: every consumer precedes its
    /// producers and placeholders come last. Among ready nodes the
    /// lexicographically greatest name is taken first, so the reversed list
    /// (the index order used by sketch derivation) reads alphabetically for
    /// alphabetically named graphs.
    pub fn topological_order(&self) -> Result<Vec<String>> {
        let compute: Vec<&ComputeNode> = self.nodes.iter().filter(|n| !n.is_placeholder()).collect();
        let mut pending: BTreeMap<&str, usize> = BTreeMap::new();
        for n in &compute {
            let c = compute
                .iter()
                .filter(|m| m.body.as_ref().is_some_and(|b| b.reads_buffer(&n.name)))
                .count();
            pending.insert(n.name.as_str(), c);
        }
        let mut ready: BTreeSet<&str> = pending.iter().filter(|(_, c)| **c == 0).map(|(n, _)| *n).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(name) = ready.iter().next_back().copied() {
            ready.remove(name);
            order.push(name.to_string());
            for p in self.producers(name) {
                if let Some(c) = pending.get_mut(p.as_str()) {
                    *c -= 1;
                    if *c == 0 {
                        ready.insert(self.node(&p).map(|n| n.name.as_str()).unwrap());
                    }
                }
            }
        }
        if order.len() != compute.len() {
            let stuck: Vec<&str> = pending
                .iter()
                .filter(|(n, _)| !order.iter().any(|o| o == *n))
                .map(|(n, _)| *n)
                .collect();
            return Err(Error::Cycle(format!(
                "dag `{}` has a cycle through {:?}",
                self.id, stuck
            )));
        }
        let mut placeholders: Vec<&str> = self
            .nodes
            .iter()
            .filter(|n| n.is_placeholder())
            .map(|n| n.name.as_str())
            .collect();
        placeholders.sort_unstable_by(|a, b| b.cmp(a));
        order.extend(placeholders.into_iter().map(String::from));
        Ok(order)
    }

    pub fn view<'a>(&'a self, node: &'a ComputeNode) -> Option<NodeView<'a>> {
        let body = node.body.as_ref()?;
        Some(NodeView {
            name: &node.name,
            space: node.space.iter().map(|s| (s.name.as_str(), s.extent)).collect(),
            reduce: node.reduce.iter().map(|s| (s.name.as_str(), s.extent)).collect(),
            body,
            is_output: self.is_output(&node.name),
            consumers: self
                .consumers(&node.name)
                .into_iter()
                .map(|c| {
                    (
                        c.body.as_ref().unwrap(),
                        c.space.iter().map(|s| s.name.as_str()).collect(),
                    )
                })
                .collect(),
        })
    }

    pub fn analyze_node(&self, name: &str, cfg: &AnalysisConfig) -> Result<NodeTraits> {
        let node = self
            .node(name)
            .ok_or_else(|| Error::Contract(format!("unknown node `{name}`")))?;
        let view = self
            .view(node)
            .ok_or_else(|| Error::Contract(format!("cannot analyze placeholder `{name}`")))?;
        Ok(analyze_view(&view, cfg))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dag serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let dag: ComputeDag = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        dag.check()?;
        Ok(dag)
    }
}
