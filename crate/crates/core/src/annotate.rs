//! Completing sketches into concrete programs by random annotation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{validate, Annotation, Attach, IterKind, Program, Relation, RewriteStep, Stage};
use crate::layout::PackedLayout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationPolicy {
    pub max_vectorize_extent: u64,
    pub unroll_values: Vec<u64>,
    /// Probability of moving one flexible stage to another attach point.
    pub compute_location_prob: f64,
    /// Whether compute-location changes are allowed at all.
    pub allow_compute_location: bool,
}

impl Default for AnnotationPolicy {
    fn default() -> Self {
        AnnotationPolicy {
            max_vectorize_extent: 16,
            unroll_values: vec![0, 16, 64, 512],
            compute_location_prob: 0.1,
            allow_compute_location: true,
        }
    }
}

impl AnnotationPolicy {
    pub fn check(&self) -> Result<()> {
        if self.unroll_values.is_empty() {
            return Err(Error::Config("unroll_values must not be empty".into()));
        }
        if !(0.0..=1.0).contains(&self.compute_location_prob) {
            return Err(Error::Config("compute_location_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn divisors(n: u64) -> Vec<u64> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1;
    while d * d <= n {
        if n.is_multiple_of(d) {
            small.push(d);
            if d * d != n {
                large.push(n / d);
            }
        }
        d += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

/// `parts` positive integers multiplying to `extent`: each part in turn is
/// a uniformly chosen divisor of what remains, the last takes the rest.
pub fn random_factorization(extent: u64, parts: usize, rng: &mut impl Rng) -> Vec<u64> {
    let mut rem = extent.max(1);
    let mut out = Vec::with_capacity(parts);
    for _ in 1..parts {
        let ds = divisors(rem);
        let d = *ds.choose(rng).unwrap();
        out.push(d);
        rem /= d;
    }
    if parts > 0 {
        out.push(rem);
    }
    out
}

/// Resolves every placeholder tile size and rfactor factor in a history.
pub fn fill_tile_sizes(sketch: &Program, rng: &mut impl Rng) -> Result<Program> {
    let mut p = Program::naive(sketch.dag.clone());
    for step in &sketch.history {
        let step = match step {
            RewriteStep::Split {
                stage,
                loop_name,
                factors,
            } if factors.iter().any(|f| f.is_none()) => {
                let st = p.stage(stage).ok_or_else(|| Error::UnknownStage(stage.clone()))?;
                let extent = st.var_or_err(loop_name)?.extent;
                let known: u64 = factors.iter().flatten().product();
                let free = factors.iter().filter(|f| f.is_none()).count();
                let mut draw = random_factorization(extent / known.max(1), free + 1, rng).into_iter();
                draw.next();
                let factors = factors.iter().map(|f| f.or_else(|| draw.next())).collect();
                RewriteStep::Split {
                    stage: stage.clone(),
                    loop_name: loop_name.clone(),
                    factors,
                }
            }
            RewriteStep::Rfactor {
                stage,
                loop_name,
                factor: None,
            } => {
                let st = p.stage(stage).ok_or_else(|| Error::UnknownStage(stage.clone()))?;
                let extent = st.var_or_err(loop_name)?.extent;
                RewriteStep::Rfactor {
                    stage: stage.clone(),
                    loop_name: loop_name.clone(),
                    factor: Some(*divisors(extent).choose(rng).unwrap()),
                }
            }
            s => s.clone(),
        };
        p.apply_raw(&step)?;
        p.history.push(step);
    }
    p.finalize();
    Ok(p)
}

/// Stages whose location may change: not multi-level tiled, not an
/// output, and read by exactly one stage.
pub fn flexible_stages(p: &Program) -> Vec<String> {
    p.stages
        .iter()
        .filter(|s| !s.is_tiled() && !p.is_output(&s.name) && p.consumers(&s.name).len() == 1)
        .filter(|s| p.attached_to(&s.name).is_empty())
        .map(|s| s.name.clone())
        .collect()
}

/// Legal locations for `stage` other than its current one.
pub fn attach_candidates(p: &Program, stage: &str) -> Vec<RewriteStep> {
    let Some(s) = p.stage(stage) else { return Vec::new() };
    let consumers = p.consumers(stage);
    let [c] = consumers.as_slice() else { return Vec::new() };
    let mut out = Vec::new();
    if s.attach != Attach::Root {
        out.push(RewriteStep::ComputeRoot { stage: stage.into() });
    }
    for l in c.visible_leaves() {
        if c.attach_cuts_fusion(&l.name) {
            continue;
        }
        let here = Attach::At {
            stage: c.name.clone(),
            loop_name: l.name.clone(),
        };
        if s.attach != here {
            out.push(RewriteStep::ComputeAt {
                stage: stage.into(),
                target: c.name.clone(),
                loop_name: l.name.clone(),
            });
        }
    }
    out
}

/// Moves one random flexible stage to another valid location, dropping
/// the stage's own parallel annotations and fusions first.
pub fn change_compute_location(p: &Program, rng: &mut impl Rng) -> Option<Program> {
    let mut stages = flexible_stages(p);
    stages.shuffle(rng);
    for st in stages {
        let mut cands = attach_candidates(p, &st);
        cands.shuffle(rng);
        let history: Vec<RewriteStep> = p
            .history
            .iter()
            .filter(|s| {
                !(s.stage() == Some(st.as_str())
                    && matches!(
                        s,
                        RewriteStep::FuseLoops { .. }
                            | RewriteStep::Annotate {
                                annotation: Annotation::Parallel,
                                ..
                            }
                    ))
            })
            .filter(|s| !matches!(s, RewriteStep::LayoutRewrite { .. }))
            .cloned()
            .collect();
        for c in cands.into_iter().take(4) {
            let mut h = history.clone();
            h.push(c);
            if let Ok(q) = Program::replay(p.dag.clone(), &h) {
                if validate(&q).is_ok() {
                    return Some(q);
                }
            }
        }
    }
    None
}

fn has_attachment(p: &Program, stage: &str, l: &str) -> bool {
    p.attached_to(stage).iter().any(|(_, at)| *at == l)
}

/// Leading loops of a root stage that may be fused and run in parallel.
pub fn parallel_candidates(p: &Program, s: &Stage) -> Vec<String> {
    let mut out = Vec::new();
    if s.attach != Attach::Root {
        return out;
    }
    for v in s.leaves() {
        let attached = has_attachment(p, &s.name, &v.name);
        if !v.visible() {
            if attached {
                break;
            }
            continue;
        }
        if v.kind != IterKind::Space {
            break;
        }
        out.push(v.name.clone());
        if attached {
            break;
        }
    }
    out
}

/// Steps fusing `loops` in sequence; returns the steps and the fused name.
pub fn fuse_steps(stage: &str, loops: &[String]) -> (Vec<RewriteStep>, String) {
    let mut steps = Vec::new();
    let mut cur = loops[0].clone();
    for l in &loops[1..] {
        steps.push(RewriteStep::FuseLoops {
            stage: stage.into(),
            outer: cur.clone(),
            inner: l.clone(),
        });
        cur = format!("{cur}@{l}");
    }
    (steps, cur)
}

/// Whether the loop walks the last output dimension with unit stride.
pub fn is_unit_stride_inner(s: &Stage, l: &str) -> bool {
    let Some(last) = s.space_roots().last().map(|v| v.name.clone()) else {
        return false;
    };
    let mut cur = l.to_string();
    loop {
        if cur == last {
            return true;
        }
        let parent = s.relations.iter().find_map(|r| match r {
            Relation::Split { parent, children } if children.last() == Some(&cur) => Some(parent.clone()),
            _ => None,
        });
        match parent {
            Some(p) => cur = p,
            None => return false,
        }
    }
}

fn vectorize_target(s: &Stage, max_extent: u64) -> Option<String> {
    let vis = s.visible_leaves();
    let inner = vis.last()?;
    (inner.kind == IterKind::Space
        && inner.eff > 1
        && inner.eff <= max_extent
        && inner.annotation == Annotation::None
        && is_unit_stride_inner(s, &inner.name))
    .then(|| inner.name.clone())
}

/// Turns a sketch into a complete program.
pub fn sample_program(sketch: &Program, policy: &AnnotationPolicy, rng: &mut impl Rng) -> Result<Program> {
    let mut p = fill_tile_sizes(sketch, rng)?;
    if policy.allow_compute_location && rng.gen_bool(policy.compute_location_prob) {
        if let Some(q) = change_compute_location(&p, rng) {
            p = q;
        }
    }
    p = p.simplify();
    p = annotate_loops(&p, policy, rng)?;
    let p = rewrite_constant_layout(&p)?;
    if let Err(v) = validate(&p) {
        return Err(Error::Contract(format!("sampled an invalid program: {}", v.join("; "))));
    }
    Ok(p)
}

/// Parallel, vectorize and unroll-pragma annotations for every stage.
pub fn annotate_loops(p: &Program, policy: &AnnotationPolicy, rng: &mut impl Rng) -> Result<Program> {
    let mut p = p.clone();
    let names: Vec<String> = p.stages.iter().map(|s| s.name.clone()).collect();
    for name in &names {
        let s = p.stage(name).unwrap();
        let cands = parallel_candidates(&p, s);
        if !cands.is_empty() {
            let k = rng.gen_range(1..=cands.len());
            let (mut steps, fused) = fuse_steps(name, &cands[..k]);
            steps.push(RewriteStep::Annotate {
                stage: name.clone(),
                loop_name: fused,
                annotation: Annotation::Parallel,
            });
            p = p.apply_steps(&steps)?;
        }
        if let Some(v) = vectorize_target(p.stage(name).unwrap(), policy.max_vectorize_extent) {
            p = p.apply_step(&RewriteStep::Annotate {
                stage: name.clone(),
                loop_name: v,
                annotation: Annotation::Vectorize,
            })?;
        }
        if p.stage(name).unwrap().attach == Attach::Root {
            p = p.apply_step(&RewriteStep::SetPragma {
                stage: name.clone(),
                auto_unroll_max_step: *policy.unroll_values.choose(rng).unwrap(),
            })?;
        }
    }
    Ok(p)
}

/// Packing for a constant buffer read by exactly one tiled stage through
/// plain root iterators: the buffer's dimensions are blocked by that
/// stage's tile sizes and laid out in its loop order.
fn derive_layout(p: &Program, buffer: &str) -> Option<PackedLayout> {
    let shape = p.dag.node(buffer)?.shape();
    let readers = p.consumers(buffer);
    let [s] = readers.as_slice() else { return None };
    if !s.is_tiled() {
        return None;
    }
    let reads: Vec<_> = s.body.reads().into_iter().filter(|(b, _)| *b == buffer).collect();
    let idx = reads.first()?.1;
    if reads.iter().any(|(_, i)| *i != idx) {
        return None;
    }
    let vars: Vec<&str> = idx.iter().map(|a| a.as_single_var()).collect::<Option<_>>()?;
    let mut parts: Vec<Vec<String>> = Vec::new();
    for v in &vars {
        parts.push(match s.split_of(v) {
            Some(c) => c.to_vec(),
            None => vec![v.to_string()],
        });
    }
    let mut out = Vec::new();
    let mut next = vec![0usize; vars.len()];
    for l in &s.order {
        for (d, ps) in parts.iter().enumerate() {
            if let Some(k) = ps.iter().position(|x| x == l) {
                if k != next[d] {
                    return None;
                }
                next[d] += 1;
                out.push((d, s.var(l)?.extent));
            }
        }
    }
    if next.iter().zip(parts.iter()).any(|(n, ps)| *n != ps.len()) {
        return None;
    }
    let layout = PackedLayout { parts: out };
    (layout.check(&shape).is_ok() && !layout.is_identity(&shape)).then_some(layout)
}

/// Re-derives the packing of constant inputs from the current tiling.
pub fn rewrite_constant_layout(p: &Program) -> Result<Program> {
    let history: Vec<RewriteStep> = p
        .history
        .iter()
        .filter(|s| !matches!(s, RewriteStep::LayoutRewrite { .. }))
        .cloned()
        .collect();
    let base = if history.len() == p.history.len() {
        p.clone()
    } else {
        Program::replay(p.dag.clone(), &history)?
    };
    let mut steps = Vec::new();
    for n in p.dag.nodes.iter().filter(|n| n.is_placeholder() && n.is_constant) {
        if let Some(layout) = derive_layout(&base, &n.name) {
            steps.push(RewriteStep::LayoutRewrite {
                buffer: n.name.clone(),
                layout,
            });
        }
    }
    if steps.is_empty() {
        Ok(base)
    } else {
        base.apply_steps(&steps)
    }
}
