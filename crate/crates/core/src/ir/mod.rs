//! Loop-nest programs and the rewrite steps that build them.
//!
//! A [`Program`] is always the result of replaying its history on the
//! naive program of its DAG, so two programs with equal histories are equal.

mod apply;
pub mod bounds;
mod step;
mod validate;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use step::{Annotation, RewriteStep};
pub use validate::validate;

use crate::dag::ComputeDag;
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::layout::PackedLayout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IterKind {
    Space,
    Reduction,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IterVar {
    pub name: String,
    /// Extent fixed by the splits, independent of where the stage runs.
    pub extent: u64,
    /// Extent actually iterated after bound inference.
    pub eff: u64,
    pub kind: IterKind,
    pub annotation: Annotation,
    pub elided: bool,
}

impl IterVar {
    fn new(name: &str, extent: u64, kind: IterKind) -> Self {
        IterVar {
            name: name.to_string(),
            extent,
            eff: extent,
            kind,
            annotation: Annotation::None,
            elided: false,
        }
    }

    /// Whether the loop appears in the nest (simplified unit loops do not).
    pub fn visible(&self) -> bool {
        !(self.elided && self.eff == 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Relation {
    /// `parent = Σ child_k * Π_{l>k} extent(child_l)`.
    Split { parent: String, children: Vec<String> },
    /// `fused = outer * eff(inner) + inner`.
    Fuse {
        outer: String,
        inner: String,
        fused: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Attach {
    Root,
    At { stage: String, loop_name: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub name: String,
    /// The DAG node this stage derives from.
    pub node: String,
    /// Root iterators: space first, then reduction. Space roots index the
    /// stage's output buffer, which is named after the stage.
    pub roots: Vec<String>,
    pub vars: Vec<IterVar>,
    pub relations: Vec<Relation>,
    /// Leaf loops, outermost first.
    pub order: Vec<String>,
    pub body: Expr,
    pub attach: Attach,
    pub auto_unroll_max_step: u64,
}

impl Stage {
    pub fn var(&self, name: &str) -> Option<&IterVar> {
        self.vars.iter().find(|v| v.name == name)
    }

    pub(crate) fn var_mut(&mut self, name: &str) -> Option<&mut IterVar> {
        self.vars.iter_mut().find(|v| v.name == name)
    }

    pub(crate) fn var_or_err(&self, name: &str) -> Result<&IterVar> {
        self.var(name).ok_or_else(|| Error::UnknownLoop {
            stage: self.name.clone(),
            loop_name: name.to_string(),
        })
    }

    pub fn space_roots(&self) -> Vec<&IterVar> {
        self.roots
            .iter()
            .filter_map(|r| self.var(r))
            .filter(|v| v.kind == IterKind::Space)
            .collect()
    }

    pub fn reduce_roots(&self) -> Vec<&IterVar> {
        self.roots
            .iter()
            .filter_map(|r| self.var(r))
            .filter(|v| v.kind == IterKind::Reduction)
            .collect()
    }

    /// Output buffer shape.
    pub fn shape(&self) -> Vec<u64> {
        self.space_roots().iter().map(|v| v.extent).collect()
    }

    pub fn is_reduction(&self) -> bool {
        self.body.as_reduce().is_some()
    }

    /// Leaf loops in nest order.
    pub fn leaves(&self) -> impl Iterator<Item = &IterVar> {
        self.order.iter().map(move |n| self.var(n).expect("leaf var exists"))
    }

    /// Leaf loops that appear in the nest.
    pub fn visible_leaves(&self) -> Vec<&IterVar> {
        self.leaves().filter(|v| v.visible()).collect()
    }

    pub fn leaf_position(&self, name: &str) -> Option<usize> {
        self.order.iter().position(|n| n == name)
    }

    /// The split that produced `parent`'s children, if `parent` was split.
    pub fn split_of(&self, parent: &str) -> Option<&[String]> {
        self.relations.iter().find_map(|r| match r {
            Relation::Split { parent: p, children } if p == parent => Some(children.as_slice()),
            _ => None,
        })
    }

    pub fn is_transformed(&self) -> bool {
        !self.relations.is_empty()
    }

    /// True once any root iterator has been split (tiling or following a
    /// tiled producer).
    pub fn is_tiled(&self) -> bool {
        self.relations
            .iter()
            .any(|r| matches!(r, Relation::Split { parent, .. } if self.roots.contains(parent)))
    }

    /// Leaf positions derived from `var` through splits and fusions.
    fn leaf_positions(&self, var: &str, out: &mut Vec<usize>) {
        if let Some(p) = self.leaf_position(var) {
            out.push(p);
        }
        for r in &self.relations {
            match r {
                Relation::Split { parent, children } if parent == var => {
                    for c in children {
                        self.leaf_positions(c, out);
                    }
                }
                Relation::Fuse { outer, inner, fused } if outer == var || inner == var => {
                    self.leaf_positions(fused, out);
                }
                _ => {}
            }
        }
    }

    /// Whether fixing the leaves up to and including `loop_name` leaves a
    /// fused loop partly fixed. The region a stage attached there needs
    /// would then change shape from one iteration to the next.
    pub fn attach_cuts_fusion(&self, loop_name: &str) -> bool {
        let Some(cut) = self.leaf_position(loop_name) else {
            return false;
        };
        self.relations.iter().any(|r| match r {
            Relation::Fuse { fused, .. } => {
                let mut pos = Vec::new();
                self.leaf_positions(fused, &mut pos);
                pos.iter().any(|p| *p <= cut) && pos.iter().any(|p| *p > cut)
            }
            _ => false,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Program {
    pub dag: Arc<ComputeDag>,
    /// Producers precede consumers.
    pub stages: Vec<Stage>,
    pub history: Vec<RewriteStep>,
    pub layouts: BTreeMap<String, PackedLayout>,
    /// Problems found by bound inference; a program with issues is invalid.
    pub issues: Vec<String>,
}

impl PartialEq for Program {
    fn eq(&self, other: &Self) -> bool {
        self.dag.id == other.dag.id
            && self.stages == other.stages
            && self.history == other.history
            && self.layouts == other.layouts
            && self.issues == other.issues
    }
}

impl Program {
    /// One stage per compute node in producer-before-consumer order, loops
    /// are the space iterators followed by the reduction iterators.
    pub fn naive(dag: Arc<ComputeDag>) -> Program {
        let order = dag.topological_order().expect("dag validated on construction");
        let stages = order
            .iter()
            .rev()
            .filter_map(|n| dag.node(n))
            .filter(|n| !n.is_placeholder())
            .map(|n| {
                let mut vars = Vec::new();
                for s in &n.space {
                    vars.push(IterVar::new(&s.name, s.extent, IterKind::Space));
                }
                for r in &n.reduce {
                    vars.push(IterVar::new(&r.name, r.extent, IterKind::Reduction));
                }
                let roots: Vec<String> = vars.iter().map(|v| v.name.clone()).collect();
                Stage {
                    name: n.name.clone(),
                    node: n.name.clone(),
                    order: roots.clone(),
                    roots,
                    vars,
                    relations: Vec::new(),
                    body: n.body.clone().expect("compute node"),
                    attach: Attach::Root,
                    auto_unroll_max_step: 0,
                }
            })
            .collect();
        Program {
            dag,
            stages,
            history: Vec::new(),
            layouts: BTreeMap::new(),
            issues: Vec::new(),
        }
    }

    /// Rebuilds a program from a history.
    pub fn replay(dag: Arc<ComputeDag>, history: &[RewriteStep]) -> Result<Program> {
        let mut p = Program::naive(dag);
        for s in history {
            p.apply_raw(s)?;
            p.history.push(s.clone());
        }
        p.finalize();
        Ok(p)
    }

    /// Returns a new program with `step` applied and recorded.
    pub fn apply_step(&self, step: &RewriteStep) -> Result<Program> {
        let mut p = self.clone();
        p.apply_raw(step)?;
        p.history.push(step.clone());
        p.finalize();
        Ok(p)
    }

    pub fn apply_steps(&self, steps: &[RewriteStep]) -> Result<Program> {
        let mut p = self.clone();
        for s in steps {
            p.apply_raw(s)?;
            p.history.push(s.clone());
        }
        p.finalize();
        Ok(p)
    }

    /// Applies the simplification pass, recording it in the history.
    pub fn simplify(&self) -> Program {
        self.apply_step(&RewriteStep::Simplify).expect("simplify never fails")
    }

    pub fn stage(&self, name: &str) -> Option<&Stage> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn stage_index(&self, name: &str) -> Option<usize> {
        self.stages.iter().position(|s| s.name == name)
    }

    pub(crate) fn stage_or_err(&self, name: &str) -> Result<usize> {
        self.stage_index(name)
            .ok_or_else(|| Error::UnknownStage(name.to_string()))
    }

    /// Stages whose bodies read `buffer`.
    pub fn consumers(&self, buffer: &str) -> Vec<&Stage> {
        self.stages.iter().filter(|s| s.body.reads_buffer(buffer)).collect()
    }

    /// Stages attached directly under a loop of `stage`.
    pub fn attached_to(&self, stage: &str) -> Vec<(&Stage, &str)> {
        self.stages
            .iter()
            .filter_map(|s| match &s.attach {
                Attach::At { stage: t, loop_name } if t == stage => Some((s, loop_name.as_str())),
                _ => None,
            })
            .collect()
    }

    /// The root-attached stage whose nest contains `stage`.
    pub fn root_of<'a>(&'a self, stage: &'a str) -> &'a str {
        let mut cur = stage;
        for _ in 0..=self.stages.len() {
            match self.stage(cur).map(|s| &s.attach) {
                Some(Attach::At { stage, .. }) => cur = stage,
                _ => return cur,
            }
        }
        cur
    }

    /// Shape of any buffer: stage outputs or DAG placeholders.
    pub fn buffer_shape(&self, buffer: &str) -> Option<Vec<u64>> {
        if let Some(s) = self.stage(buffer) {
            return Some(s.shape());
        }
        self.dag.node(buffer).map(|n| n.shape())
    }

    pub fn is_output(&self, stage: &str) -> bool {
        self.dag.is_output(stage)
    }

    /// Recomputes effective extents after a structural change.
    pub(crate) fn finalize(&mut self) {
        self.issues = bounds::infer(self);
    }

    /// A compact description of loop structure used for deduplication.
    pub fn structure_key(&self) -> String {
        let mut out = String::new();
        for s in &self.stages {
            let leaves: Vec<String> = s
                .leaves()
                .map(|v| format!("{}:{}", v.name, if v.visible() { v.eff } else { 0 }))
                .collect();
            let at = match &s.attach {
                Attach::Root => "root".to_string(),
                Attach::At { stage, loop_name } => format!("{stage}.{loop_name}"),
            };
            out.push_str(&format!("{}[{}]@{};", s.name, leaves.join(","), at));
        }
        out
    }
}

impl Program {
    /// Hash of the concrete loop structure, annotations and layouts.
    /// Programs reached through different histories can share it.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.dag.id.hash(&mut h);
        format!("{:?}|{:?}", self.stages, self.layouts).hash(&mut h);
        h.finish()
    }
}

impl std::fmt::Display for Program {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        fn emit(p: &Program, s: &Stage, depth: usize, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
            let mut d = depth;
            let attached = p.attached_to(&s.name);
            let visible = s.visible_leaves();
            for v in &visible {
                let ann = match v.annotation {
                    Annotation::None => String::new(),
                    a => format!(" ({a:?})").to_lowercase(),
                };
                writeln!(f, "{:w$}for {} in 0..{}{}", "", v.name, v.eff, ann, w = d * 2)?;
                d += 1;
                for (c, l) in &attached {
                    if *l == v.name {
                        emit(p, c, d, f)?;
                    }
                }
            }
            for (c, l) in &attached {
                if !visible.iter().any(|v| v.name == *l) {
                    emit(p, c, d, f)?;
                }
            }
            writeln!(f, "{:w$}{} = {}", "", s.name, s.body, w = d * 2)
        }
        for s in &self.stages {
            if s.attach == Attach::Root {
                emit(self, s, 0, f)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workloads;

    fn fused_then_split() -> Program {
        let dag = Arc::new(workloads::matmul(8, 8, 4));
        let s = |st: &str| st.to_string();
        Program::naive(dag)
            .apply_steps(&[
                RewriteStep::FuseLoops {
                    stage: s("C"),
                    outer: s("i"),
                    inner: s("j"),
                },
                RewriteStep::Split {
                    stage: s("C"),
                    loop_name: s("i@j"),
                    factors: vec![Some(4)],
                },
            ])
            .unwrap()
    }

    #[test]
    fn cut_inside_split_fusion_is_detected() {
        let p = fused_then_split();
        let c = p.stage("C").unwrap();
        assert!(c.attach_cuts_fusion("i@j.0"));
        assert!(!c.attach_cuts_fusion("i@j.1"));
        assert!(!c.attach_cuts_fusion("k"));
        assert!(!c.attach_cuts_fusion("missing"));
    }

    #[test]
    fn unsplit_fusion_is_never_cut() {
        let dag = Arc::new(workloads::matmul(8, 8, 4));
        let p = Program::naive(dag)
            .apply_step(&RewriteStep::FuseLoops {
                stage: "C".into(),
                outer: "i".into(),
                inner: "j".into(),
            })
            .unwrap();
        let c = p.stage("C").unwrap();
        assert!(!c.attach_cuts_fusion("i@j"));
        assert!(!c.attach_cuts_fusion("k"));
    }
}
