//! Sketch enumeration by derivation rules.
//!
//! A state pairs a partial program with the index of the working node.
//! Nodes are indexed `1..=n` so that index `n` is the output and index `1`
//! the last node in output-to-input order. Each rule whose condition holds
//! contributes its successor states; states reaching index 0 are sketches.

use std::collections::{BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dag::{analyze_view, AnalysisConfig, ComputeDag, NodeTraits, NodeView};
use crate::error::{Error, Result};
use crate::ir::{Attach, IterKind, Program, RewriteStep, Stage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchPolicy {
    /// Tile structure over `S` (space level) and `R` (reduction level).
    pub structure: String,
    /// Space tile levels at which a fusible consumer may be attached.
    pub fusion_levels: Vec<usize>,
    pub analysis: AnalysisConfig,
    pub state_cap: usize,
}

impl Default for SketchPolicy {
    fn default() -> Self {
        SketchPolicy {
            structure: "SSRSRS".into(),
            fusion_levels: vec![1, 2],
            analysis: AnalysisConfig::default(),
            state_cap: 10_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SketchState {
    pub program: Program,
    pub index: usize,
    /// Names of the rules applied so far.
    pub trace: Vec<String>,
}

/// Everything a rule may inspect about the working node.
pub struct RuleContext<'a> {
    pub policy: &'a SketchPolicy,
    /// The DAG node at the current index.
    pub node: &'a str,
    /// The stage currently standing for that node, if it has one.
    pub stage: Option<String>,
    pub traits: NodeTraits,
}

type Cond = dyn Fn(&SketchState, &RuleContext) -> bool + Send + Sync;
type Apply = dyn Fn(&SketchState, &RuleContext) -> Result<Vec<SketchState>> + Send + Sync;

#[derive(Clone)]
pub struct DerivationRule {
    pub name: String,
    pub condition: Arc<Cond>,
    pub apply: Arc<Apply>,
}

impl std::fmt::Debug for DerivationRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DerivationRule").field("name", &self.name).finish()
    }
}

#[derive(Clone, Debug)]
pub struct Sketch {
    pub program: Program,
    pub trace: Vec<String>,
}

impl SketchState {
    /// Successor with the working index moved to the previous node.
    pub fn next(&self, program: Program, rule: &str) -> SketchState {
        self.with(program, rule, self.index - 1)
    }

    pub fn with(&self, program: Program, rule: &str, index: usize) -> SketchState {
        let mut trace = self.trace.clone();
        trace.push(rule.to_string());
        SketchState { program, index, trace }
    }
}

/// The stage standing for a DAG node: its cache stage if one was added.
pub fn working_stage(p: &Program, node: &str) -> Option<String> {
    let local = format!("{node}.local");
    if p.stage(&local).is_some() {
        Some(local)
    } else if p.stage(node).is_some() {
        Some(node.to_string())
    } else {
        None
    }
}

/// Runs the node predicates against a stage of the current program.
pub fn stage_traits(p: &Program, stage: &str, cfg: &AnalysisConfig) -> NodeTraits {
    let Some(s) = p.stage(stage) else {
        return NodeTraits::default();
    };
    let consumers = p.consumers(stage);
    let view = NodeView {
        name: &s.name,
        space: s.space_roots().iter().map(|v| (v.name.as_str(), v.extent)).collect(),
        reduce: s.reduce_roots().iter().map(|v| (v.name.as_str(), v.extent)).collect(),
        body: &s.body,
        is_output: p.is_output(stage),
        consumers: consumers
            .iter()
            .map(|c| (&c.body, c.space_roots().iter().map(|v| v.name.as_str()).collect()))
            .collect(),
    };
    let mut t = analyze_view(&view, cfg);
    if t.has_fusible_consumer {
        let c = consumers[0];
        t.has_fusible_consumer = !c.is_tiled() && c.attach == Attach::Root && c.reduce_roots().is_empty();
    }
    t
}

/// Splits every space loop into one part per `S` and every reduction loop
/// into one part per `R`, then orders the parts level by level. Tile sizes
/// are left as placeholders.
pub fn multi_level_tile(p: &Program, stage: &str, structure: &str) -> Result<Program> {
    p.apply_steps(&tile_steps(p, stage, structure)?)
}

fn tile_steps(p: &Program, stage: &str, structure: &str) -> Result<Vec<RewriteStep>> {
    if structure.is_empty() || structure.chars().any(|c| c != 'S' && c != 'R') {
        return Err(Error::Contract(format!("bad tile structure `{structure}`")));
    }
    let s = p.stage(stage).ok_or_else(|| Error::UnknownStage(stage.into()))?;
    let ns = structure.chars().filter(|c| *c == 'S').count();
    let nr = structure.chars().filter(|c| *c == 'R').count();
    let space: Vec<String> = s
        .leaves()
        .filter(|v| v.kind == IterKind::Space)
        .map(|v| v.name.clone())
        .collect();
    let red: Vec<String> = s
        .leaves()
        .filter(|v| v.kind != IterKind::Space)
        .map(|v| v.name.clone())
        .collect();
    if space.is_empty() && ns > 0 && red.is_empty() {
        return Err(Error::Contract(format!("stage `{stage}` has no loops to tile")));
    }
    let mut steps = Vec::new();
    let parts_of = |v: &str, n: usize, steps: &mut Vec<RewriteStep>| -> Vec<String> {
        if n <= 1 {
            return vec![v.to_string()];
        }
        steps.push(RewriteStep::Split {
            stage: stage.to_string(),
            loop_name: v.to_string(),
            factors: vec![None; n - 1],
        });
        (0..n).map(|k| format!("{v}.{k}")).collect()
    };
    let sparts: Vec<Vec<String>> = space.iter().map(|v| parts_of(v, ns, &mut steps)).collect();
    let rparts: Vec<Vec<String>> = if nr == 0 {
        red.iter().map(|v| vec![v.clone()]).collect()
    } else {
        red.iter().map(|v| parts_of(v, nr, &mut steps)).collect()
    };
    let mut order = Vec::new();
    let (mut ls, mut lr) = (0, 0);
    for c in structure.chars() {
        if c == 'S' {
            order.extend(sparts.iter().filter_map(|p| p.get(ls).cloned()));
            ls += 1;
        } else {
            order.extend(rparts.iter().filter_map(|p| p.get(lr).cloned()));
            lr += 1;
        }
    }
    if nr == 0 {
        order.extend(rparts.iter().flatten().cloned());
    }
    steps.push(RewriteStep::Reorder {
        stage: stage.to_string(),
        order,
    });
    Ok(steps)
}

/// Tiles `stage` and attaches it under its element-wise consumer, which
/// follows the producer's tiling for its outer `level` space levels.
pub fn fuse_consumer(p: &Program, stage: &str, structure: &str, level: usize) -> Result<Program> {
    let ns = structure.chars().filter(|c| *c == 'S').count();
    if level == 0 || level >= ns {
        return Err(Error::Contract(format!(
            "fusion level {level} outside structure `{structure}`"
        )));
    }
    let consumers = p.consumers(stage);
    let [consumer] = consumers.as_slice() else {
        return Err(Error::Contract(format!("`{stage}` has no unique consumer")));
    };
    let consumer = consumer.name.clone();
    let mut steps = tile_steps(p, stage, structure)?;
    let prod = p.stage(stage).unwrap();
    let pspace: Vec<String> = prod.space_roots().iter().map(|v| v.name.clone()).collect();
    let cspace: Vec<String> = p
        .stage(&consumer)
        .unwrap()
        .space_roots()
        .iter()
        .map(|v| v.name.clone())
        .collect();
    for (cv, pv) in cspace.iter().zip(pspace.iter()) {
        steps.push(RewriteStep::FollowSplit {
            stage: consumer.clone(),
            loop_name: cv.clone(),
            src_stage: stage.to_string(),
            src_loop: pv.clone(),
            n_parts: level + 1,
        });
    }
    let mut order = Vec::new();
    for l in 0..=level {
        order.extend(cspace.iter().map(|v| format!("{v}.{l}")));
    }
    steps.push(RewriteStep::Reorder {
        stage: consumer.clone(),
        order: order.clone(),
    });
    let attach_at = order[level * cspace.len() - 1].clone();
    steps.push(RewriteStep::ComputeAt {
        stage: stage.to_string(),
        target: consumer,
        loop_name: attach_at,
    });
    p.apply_steps(&steps)
}

/// The largest reduction loop (first on ties).
pub fn rfactor_loop(s: &Stage) -> Option<String> {
    let mut best: Option<(&str, u64)> = None;
    for v in s.reduce_roots() {
        if best.is_none_or(|(_, e)| v.extent > e) {
            best = Some((&v.name, v.extent));
        }
    }
    best.map(|(n, _)| n.to_string())
}

fn rule(
    name: &str,
    cond: impl Fn(&SketchState, &RuleContext) -> bool + Send + Sync + 'static,
    apply: impl Fn(&SketchState, &RuleContext) -> Result<Vec<SketchState>> + Send + Sync + 'static,
) -> DerivationRule {
    DerivationRule {
        name: name.to_string(),
        condition: Arc::new(cond),
        apply: Arc::new(apply),
    }
}

/// The six built-in rules in table order.
pub fn builtin_rules() -> Vec<DerivationRule> {
    vec![
        rule(
            "skip",
            |_, c| !c.traits.strict_inlinable,
            |s, _| Ok(vec![s.next(s.program.clone(), "skip")]),
        ),
        rule(
            "inline",
            |_, c| c.traits.strict_inlinable,
            |s, c| {
                let st = c.stage.clone().unwrap();
                let p = s.program.apply_step(&RewriteStep::ComputeInline { stage: st })?;
                Ok(vec![s.next(p, "inline")])
            },
        ),
        rule(
            "tile",
            |_, c| c.traits.has_data_reuse,
            |s, c| {
                let p = multi_level_tile(&s.program, c.stage.as_ref().unwrap(), &c.policy.structure)?;
                Ok(vec![s.next(p, "tile")])
            },
        ),
        rule(
            "tile_fuse",
            |_, c| c.traits.has_data_reuse && c.traits.has_fusible_consumer,
            |s, c| {
                let ns = c.policy.structure.chars().filter(|x| *x == 'S').count();
                let mut out = Vec::new();
                for &level in &c.policy.fusion_levels {
                    if level == 0 || level >= ns {
                        continue;
                    }
                    let p = fuse_consumer(&s.program, c.stage.as_ref().unwrap(), &c.policy.structure, level)?;
                    out.push(s.next(p, "tile_fuse"));
                }
                Ok(out)
            },
        ),
        rule(
            "cache_write",
            |s, c| {
                c.traits.has_data_reuse
                    && !c.traits.has_fusible_consumer
                    && c.stage.as_ref().is_some_and(|st| {
                        let x = s.program.stage(st).unwrap();
                        !x.is_transformed() && x.attach == Attach::Root && !st.ends_with(".local")
                    })
            },
            |s, c| {
                let p = s.program.apply_step(&RewriteStep::CacheWrite {
                    stage: c.stage.clone().unwrap(),
                })?;
                Ok(vec![s.with(p, "cache_write", s.index)])
            },
        ),
        rule(
            "rfactor",
            |s, c| {
                c.traits.has_more_reduction_parallel
                    && c.stage
                        .as_ref()
                        .is_some_and(|st| !s.program.stage(st).unwrap().is_transformed())
            },
            |s, c| {
                let st = c.stage.clone().unwrap();
                let l = rfactor_loop(s.program.stage(&st).unwrap()).unwrap();
                let p = s.program.apply_step(&RewriteStep::Rfactor {
                    stage: st,
                    loop_name: l,
                    factor: None,
                })?;
                Ok(vec![s.next(p, "rfactor")])
            },
        ),
    ]
}

/// Numeric label of a built-in rule, as in the rule table.
pub fn rule_number(name: &str) -> Option<usize> {
    ["skip", "inline", "tile", "tile_fuse", "cache_write", "rfactor"]
        .iter()
        .position(|r| *r == name)
        .map(|k| k + 1)
}

/// Breadth-first enumeration of all sketches of `dag`. User rules run after
/// the built-in ones.
pub fn generate_sketches(
    dag: &Arc<ComputeDag>,
    extra_rules: &[DerivationRule],
    policy: &SketchPolicy,
) -> Result<Vec<Sketch>> {
    let order = dag.topological_order()?;
    let n = order.len();
    let mut rules = builtin_rules();
    rules.extend(extra_rules.iter().cloned());
    let mut queue = VecDeque::new();
    queue.push_back(SketchState {
        program: Program::naive(dag.clone()),
        index: n,
        trace: Vec::new(),
    });
    let mut seen_states = 0usize;
    let mut out = Vec::new();
    let mut keys = BTreeSet::new();
    while let Some(state) = queue.pop_front() {
        seen_states += 1;
        if seen_states + queue.len() > policy.state_cap {
            return Err(Error::EnumerationBlowup {
                dag: dag.id.clone(),
                cap: policy.state_cap,
            });
        }
        if state.index == 0 {
            if keys.insert(state.program.structure_key()) {
                out.push(Sketch {
                    program: state.program,
                    trace: state.trace,
                });
            }
            continue;
        }
        let node = &order[n - state.index];
        let stage = working_stage(&state.program, node);
        let traits = match &stage {
            Some(s) => stage_traits(&state.program, s, &policy.analysis),
            None => NodeTraits::default(),
        };
        let ctx = RuleContext {
            policy,
            node,
            stage,
            traits,
        };
        for r in &rules {
            if ctx.stage.is_none() && r.name != "skip" {
                continue;
            }
            if (r.condition)(&state, &ctx) {
                for next in (r.apply)(&state, &ctx)? {
                    if next.index > state.index {
                        return Err(Error::Contract(format!("rule `{}` increased the node index", r.name)));
                    }
                    queue.push_back(next);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::validate;
    use crate::workloads;

    fn traces(dag: ComputeDag) -> Vec<Vec<usize>> {
        let dag = Arc::new(dag);
        generate_sketches(&dag, &[], &SketchPolicy::default())
            .unwrap()
            .iter()
            .map(|s| s.trace.iter().map(|r| rule_number(r).unwrap()).collect())
            .collect()
    }

    #[test]
    fn tiling_matmul_gives_ten_levels() {
        let dag = Arc::new(workloads::matmul(64, 64, 64));
        let p = multi_level_tile(&Program::naive(dag), "C", "SSRSRS").unwrap();
        let names: Vec<&str> = p.stage("C").unwrap().order.iter().map(|s| s.as_str()).collect();
        assert_eq!(
            names,
            ["i.0", "j.0", "i.1", "j.1", "k.0", "i.2", "j.2", "k.1", "i.3", "j.3"]
        );
    }

    #[test]
    fn elementwise_output_has_single_naive_sketch() {
        let dag = ComputeDag::new(
            "ew",
            vec![
                crate::dag::ComputeNode::placeholder("A", &[8]),
                crate::dag::ComputeNode::compute(
                    "B",
                    &[("i", 8)],
                    &[],
                    crate::expr::Expr::relu(crate::expr::Expr::read_vars("A", &["i"])),
                ),
            ],
            &["B"],
        )
        .unwrap();
        assert_eq!(traces(dag), vec![vec![1, 1]]);
    }

    #[test]
    fn fused_example_derivation() {
        let t = traces(workloads::example_fused(16));
        assert!(t.contains(&vec![1, 4, 1, 1]), "{t:?}");
        assert!(t.len() <= 10);
    }

    #[test]
    fn reduction_example_derivations() {
        let t = traces(workloads::example_reduction(512));
        assert!(t.contains(&vec![5, 4, 1, 1, 2, 1]), "{t:?}");
        assert!(t.contains(&vec![6, 1, 1, 2, 1]), "{t:?}");
    }

    #[test]
    fn sketches_validate() {
        for w in workloads::Workload::registry() {
            let dag = Arc::new(w.build());
            for s in generate_sketches(&dag, &[], &SketchPolicy::default()).unwrap() {
                validate(&s.program).unwrap_or_else(|v| panic!("{}: {v:?}", dag.id));
            }
        }
    }

    #[test]
    fn state_cap_is_enforced() {
        let dag = Arc::new(workloads::matmul(8, 8, 8));
        let policy = SketchPolicy {
            state_cap: 2,
            ..SketchPolicy::default()
        };
        assert!(matches!(
            generate_sketches(&dag, &[], &policy),
            Err(Error::EnumerationBlowup { .. })
        ));
    }
}
