use std::collections::BTreeSet;

use super::{Annotation, Attach, IterKind, Program, Relation};

/// Checks every structural invariant. Returns all violations found; a
/// program that passes can be executed by the interpreter.
pub fn validate(p: &Program) -> std::result::Result<(), Vec<String>> {
    let mut v: Vec<String> = p.issues.clone();
    let index_of = |n: &str| p.stage_index(n);

    for s in &p.stages {
        let mut seen = BTreeSet::new();
        for l in &s.order {
            if !seen.insert(l) {
                v.push(format!("`{}` lists loop `{l}` twice", s.name));
            }
            if s.var(l).is_none() {
                v.push(format!("dangling loop reference `{l}` in stage `{}`", s.name));
            }
        }
        if v.iter().any(|m| m.contains("dangling")) {
            continue;
        }
        for var in &s.vars {
            if var.extent == 0 || var.eff == 0 {
                v.push(format!("loop `{}` of `{}` has zero extent", var.name, s.name));
            }
        }
        for rel in &s.relations {
            match rel {
                Relation::Split { parent, children } => {
                    let pe = s.var(parent).map(|x| x.extent).unwrap_or(0);
                    let ce: u64 = children
                        .iter()
                        .map(|c| s.var(c).map(|x| x.extent).unwrap_or(0))
                        .product();
                    if pe != ce {
                        v.push(format!("split of `{}`.`{parent}` does not conserve extent", s.name));
                    }
                }
                Relation::Fuse { outer, inner, fused } => {
                    let e = |n: &str| s.var(n).map(|x| x.extent).unwrap_or(0);
                    if e(outer) * e(inner) != e(fused) {
                        v.push(format!("fuse into `{}`.`{fused}` does not conserve extent", s.name));
                    }
                }
            }
        }
        // Every root is covered by exactly the leaves derived from it.
        let expected: u64 = s
            .roots
            .iter()
            .map(|r| s.var(r).map(|x| x.extent).unwrap_or(0))
            .product();
        let actual: u64 = s.leaves().map(|x| x.extent).product();
        if expected != actual {
            v.push(format!(
                "loop extents of `{}` multiply to {actual}, expected {expected}",
                s.name
            ));
        }
        let roots: BTreeSet<&str> = s.roots.iter().map(|r| r.as_str()).collect();
        for it in s.body.iterators() {
            if !roots.contains(it.as_str()) {
                v.push(format!(
                    "body of `{}` references `{it}` which is not a root iterator",
                    s.name
                ));
            }
        }
        for (b, idx) in s.body.reads() {
            match p.buffer_shape(b) {
                None => v.push(format!("`{}` reads unknown buffer `{b}`", s.name)),
                Some(shape) if shape.len() != idx.len() => v.push(format!("`{}` reads `{b}` with wrong rank", s.name)),
                _ => {}
            }
            if let Some(q) = p.stage(b) {
                match &q.attach {
                    Attach::At { stage, .. } if stage == &s.name => {}
                    Attach::At { stage, .. } => v.push(format!(
                        "`{b}` is attached under `{stage}` but also read by `{}`",
                        s.name
                    )),
                    Attach::Root => {
                        let root = p.root_of(&s.name);
                        if index_of(b) >= index_of(root) {
                            v.push(format!("`{b}` is computed after its consumer `{}`", s.name));
                        }
                    }
                }
            }
        }

        match &s.attach {
            Attach::Root => {}
            Attach::At { stage, loop_name } => match p.stage(stage) {
                None => v.push(format!("`{}` is attached to missing stage `{stage}`", s.name)),
                Some(t) => {
                    if t.leaf_position(loop_name).is_none() {
                        v.push(format!("dangling loop reference `{loop_name}` in stage `{stage}`"));
                    }
                    if t.attach_cuts_fusion(loop_name) {
                        v.push(format!(
                            "`{}` is attached inside part of fused loop at `{stage}`.`{loop_name}`",
                            s.name
                        ));
                    }
                    let consumers: Vec<&str> = p.consumers(&s.name).iter().map(|c| c.name.as_str()).collect();
                    if consumers != [stage.as_str()] {
                        v.push(format!(
                            "`{}` is attached to `{stage}` but is read by {consumers:?}",
                            s.name
                        ));
                    }
                    if p.is_output(&s.name) {
                        v.push(format!("output `{}` cannot be attached", s.name));
                    }
                }
            },
        }

        let visible = s.visible_leaves();
        let mut prefix = true;
        for (k, l) in visible.iter().enumerate() {
            match l.annotation {
                Annotation::Parallel => {
                    if !prefix {
                        v.push(format!("parallel loop `{}` of `{}` is not outermost", l.name, s.name));
                    }
                    if l.kind != IterKind::Space {
                        v.push(format!(
                            "parallel loop `{}` of `{}` is not a space loop",
                            l.name, s.name
                        ));
                    }
                    if s.attach != Attach::Root {
                        v.push(format!("parallel loop `{}` in attached stage `{}`", l.name, s.name));
                    }
                }
                Annotation::Vectorize => {
                    if k + 1 != visible.len() {
                        v.push(format!("vectorized loop `{}` of `{}` is not innermost", l.name, s.name));
                    }
                    if l.kind != IterKind::Space {
                        v.push(format!(
                            "vectorized loop `{}` of `{}` is not a space loop",
                            l.name, s.name
                        ));
                    }
                }
                _ => {}
            }
            if l.annotation != Annotation::Parallel {
                prefix = false;
            }
        }
        for l in s.leaves().filter(|l| !l.visible()) {
            if matches!(l.annotation, Annotation::Parallel | Annotation::Vectorize) {
                v.push(format!(
                    "annotated loop `{}` of `{}` was simplified away",
                    l.name, s.name
                ));
            }
        }
    }

    let names: BTreeSet<&str> = p.stages.iter().map(|s| s.name.as_str()).collect();
    if names.len() != p.stages.len() {
        v.push("duplicate stage names".into());
    }
    for s in &p.stages {
        let mut cur = s.name.as_str();
        let mut steps = 0;
        while let Some(Attach::At { stage, .. }) = p.stage(cur).map(|x| &x.attach) {
            cur = stage;
            steps += 1;
            if steps > p.stages.len() {
                v.push(format!("compute_at cycle through `{}`", s.name));
                break;
            }
        }
    }
    for (b, l) in &p.layouts {
        match p.dag.node(b) {
            Some(n) if n.is_placeholder() && n.is_constant => {
                if let Err(e) = l.check(&n.shape()) {
                    v.push(e.to_string());
                }
            }
            _ => v.push(format!("layout rewrite of non-constant buffer `{b}`")),
        }
    }

    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}
