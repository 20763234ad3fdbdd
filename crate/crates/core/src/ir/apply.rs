use super::{Attach, IterKind, IterVar, Program, Relation, RewriteStep, Stage};
use crate::error::{Error, Result};
use crate::expr::{Affine, Expr};

fn unknown_loop(stage: &str, l: &str) -> Error {
    Error::UnknownLoop {
        stage: stage.to_string(),
        loop_name: l.to_string(),
    }
}

impl Program {
    /// Applies one step in place without recording it or refreshing bounds.
    pub(crate) fn apply_raw(&mut self, step: &RewriteStep) -> Result<()> {
        match step {
            RewriteStep::Split {
                stage,
                loop_name,
                factors,
            } => {
                let si = self.stage_or_err(stage)?;
                let st = &self.stages[si];
                st.leaf_position(loop_name)
                    .ok_or_else(|| unknown_loop(stage, loop_name))?;
                let extent = st.var_or_err(loop_name)?.extent;
                let inner: Vec<u64> = factors.iter().map(|f| f.unwrap_or(1)).collect();
                let prod: u64 = inner.iter().product();
                if inner.contains(&0) || extent % prod != 0 {
                    return Err(Error::BadSplitFactors {
                        stage: stage.clone(),
                        loop_name: loop_name.clone(),
                        extent,
                        factors: inner,
                    });
                }
                let mut parts = vec![extent / prod];
                parts.extend(inner);
                self.split_leaf(si, loop_name, &parts)
            }
            RewriteStep::FollowSplit {
                stage,
                loop_name,
                src_stage,
                src_loop,
                n_parts,
            } => {
                let si = self.stage_or_err(stage)?;
                let src = &self.stages[self.stage_or_err(src_stage)?];
                let children = src
                    .split_of(src_loop)
                    .ok_or_else(|| unknown_loop(src_stage, src_loop))?;
                let ext: Vec<u64> = children.iter().map(|c| src.var(c).unwrap().extent).collect();
                if *n_parts == 0 || *n_parts > ext.len() {
                    return Err(Error::IllegalStep(format!(
                        "follow split of `{stage}`.`{loop_name}` into {n_parts} parts of a {}-part split",
                        ext.len()
                    )));
                }
                let mut parts: Vec<u64> = ext[..n_parts - 1].to_vec();
                parts.push(ext[n_parts - 1..].iter().product());
                let st = &self.stages[si];
                st.leaf_position(loop_name)
                    .ok_or_else(|| unknown_loop(stage, loop_name))?;
                let extent = st.var_or_err(loop_name)?.extent;
                if parts.iter().product::<u64>() != extent {
                    return Err(Error::BadSplitFactors {
                        stage: stage.clone(),
                        loop_name: loop_name.clone(),
                        extent,
                        factors: parts,
                    });
                }
                self.split_leaf(si, loop_name, &parts)
            }
            RewriteStep::FuseLoops { stage, outer, inner } => self.fuse(stage, outer, inner),
            RewriteStep::Reorder { stage, order } => {
                let si = self.stage_or_err(stage)?;
                let st = &mut self.stages[si];
                let mut a = st.order.clone();
                let mut b = order.clone();
                a.sort();
                b.sort();
                if a != b {
                    if let Some(missing) = order.iter().find(|n| !st.order.contains(n)) {
                        return Err(unknown_loop(stage, missing));
                    }
                    return Err(Error::IllegalStep(format!(
                        "reorder of `{stage}` is not a permutation of its loops"
                    )));
                }
                st.order = order.clone();
                Ok(())
            }
            RewriteStep::ComputeAt {
                stage,
                target,
                loop_name,
            } => {
                let si = self.stage_or_err(stage)?;
                let ti = self.stage_or_err(target)?;
                if self.stages[ti].leaf_position(loop_name).is_none() {
                    return Err(unknown_loop(target, loop_name));
                }
                if self.stages[ti].attach_cuts_fusion(loop_name) {
                    return Err(Error::IllegalStep(format!(
                        "`{target}`.`{loop_name}` splits a fused loop; `{stage}` cannot be attached there"
                    )));
                }
                let cycle = || Error::ComputeAtCycle {
                    stage: stage.clone(),
                    target: target.clone(),
                };
                if si == ti {
                    return Err(cycle());
                }
                let mut cur = target.as_str();
                for _ in 0..=self.stages.len() {
                    match &self.stage(cur).unwrap().attach {
                        Attach::At { stage: up, .. } => {
                            if up == stage {
                                return Err(cycle());
                            }
                            cur = up;
                        }
                        Attach::Root => break,
                    }
                }
                // Producers run before their consumers; attaching under a
                // stage that runs earlier cannot respect that.
                if ti < si {
                    return Err(cycle());
                }
                self.stages[si].attach = Attach::At {
                    stage: target.clone(),
                    loop_name: loop_name.clone(),
                };
                Ok(())
            }
            RewriteStep::ComputeRoot { stage } => {
                let si = self.stage_or_err(stage)?;
                self.stages[si].attach = Attach::Root;
                Ok(())
            }
            RewriteStep::ComputeInline { stage } => self.inline(stage),
            RewriteStep::CacheWrite { stage } => self.cache_write(stage),
            RewriteStep::Rfactor {
                stage,
                loop_name,
                factor,
            } => self.rfactor(stage, loop_name, *factor),
            RewriteStep::Annotate {
                stage,
                loop_name,
                annotation,
            } => {
                let si = self.stage_or_err(stage)?;
                let st = &mut self.stages[si];
                if st.leaf_position(loop_name).is_none() {
                    return Err(unknown_loop(stage, loop_name));
                }
                st.var_mut(loop_name).unwrap().annotation = *annotation;
                Ok(())
            }
            RewriteStep::SetPragma {
                stage,
                auto_unroll_max_step,
            } => {
                let si = self.stage_or_err(stage)?;
                self.stages[si].auto_unroll_max_step = *auto_unroll_max_step;
                Ok(())
            }
            RewriteStep::LayoutRewrite { buffer, layout } => {
                let node = self
                    .dag
                    .node(buffer)
                    .filter(|n| n.is_placeholder() && n.is_constant)
                    .ok_or_else(|| Error::IllegalStep(format!("`{buffer}` is not a constant input")))?;
                let shape = node.shape();
                layout.check(&shape)?;
                if layout.is_identity(&shape) {
                    self.layouts.remove(buffer);
                } else {
                    self.layouts.insert(buffer.clone(), layout.clone());
                }
                Ok(())
            }
            RewriteStep::Simplify => {
                self.finalize();
                for st in &mut self.stages {
                    let order = st.order.clone();
                    for n in order {
                        let v = st.var_mut(&n).unwrap();
                        if v.eff == 1 {
                            v.elided = true;
                        }
                    }
                }
                Ok(())
            }
        }
    }

    fn split_leaf(&mut self, si: usize, loop_name: &str, parts: &[u64]) -> Result<()> {
        let stage_name = self.stages[si].name.clone();
        let st = &mut self.stages[si];
        let pos = st
            .leaf_position(loop_name)
            .ok_or_else(|| unknown_loop(&stage_name, loop_name))?;
        let kind = st.var(loop_name).unwrap().kind;
        let children: Vec<String> = (0..parts.len()).map(|k| format!("{loop_name}.{k}")).collect();
        if let Some(c) = children.iter().find(|c| st.var(c).is_some()) {
            return Err(Error::IllegalStep(format!(
                "loop `{c}` already exists in `{stage_name}`"
            )));
        }
        for (c, e) in children.iter().zip(parts) {
            st.vars.push(IterVar::new(c, *e, kind));
        }
        st.order.splice(pos..=pos, children.iter().cloned());
        st.relations.push(Relation::Split {
            parent: loop_name.to_string(),
            children: children.clone(),
        });
        let last = children.last().unwrap().clone();
        self.move_attachments(&stage_name, &[loop_name], &last);
        Ok(())
    }

    fn move_attachments(&mut self, target: &str, from: &[&str], to: &str) {
        for s in &mut self.stages {
            if let Attach::At { stage, loop_name } = &mut s.attach {
                if stage == target && from.contains(&loop_name.as_str()) {
                    *loop_name = to.to_string();
                }
            }
        }
    }

    fn has_attachment(&self, stage: &str, l: &str) -> bool {
        self.stages
            .iter()
            .any(|s| matches!(&s.attach, Attach::At { stage: t, loop_name } if t == stage && loop_name == l))
    }

    fn fuse(&mut self, stage: &str, outer: &str, inner: &str) -> Result<()> {
        let si = self.stage_or_err(stage)?;
        let st = &self.stages[si];
        let po = st.leaf_position(outer).ok_or_else(|| unknown_loop(stage, outer))?;
        let pi = st.leaf_position(inner).ok_or_else(|| unknown_loop(stage, inner))?;
        let not_adjacent = || Error::NotAdjacent {
            stage: stage.to_string(),
            a: outer.to_string(),
            b: inner.to_string(),
        };
        if pi <= po {
            return Err(not_adjacent());
        }
        for between in &st.order[po + 1..pi] {
            let v = st.var(between).unwrap();
            if !(v.extent == 1 || v.elided) || self.has_attachment(stage, between) {
                return Err(not_adjacent());
            }
        }
        let (vo, vi) = (st.var(outer).unwrap(), st.var(inner).unwrap());
        let kind = if vo.kind == vi.kind { vo.kind } else { IterKind::Mixed };
        let fused = format!("{outer}@{inner}");
        let mut v = IterVar::new(&fused, vo.extent * vi.extent, kind);
        v.eff = vo.eff * vi.eff;
        let st = &mut self.stages[si];
        st.vars.push(v);
        st.order.remove(pi);
        st.order[po] = fused.clone();
        st.relations.push(Relation::Fuse {
            outer: outer.to_string(),
            inner: inner.to_string(),
            fused: fused.clone(),
        });
        self.move_attachments(stage, &[outer, inner], &fused);
        Ok(())
    }

    fn inline(&mut self, stage: &str) -> Result<()> {
        let si = self.stage_or_err(stage)?;
        let st = &self.stages[si];
        if st.is_reduction() {
            return Err(Error::IllegalStep(format!("cannot inline reduction `{stage}`")));
        }
        if self.is_output(stage) {
            return Err(Error::IllegalStep(format!("cannot inline output `{stage}`")));
        }
        if !self.attached_to(stage).is_empty() {
            return Err(Error::IllegalStep(format!(
                "cannot inline `{stage}`: stages are attached to it"
            )));
        }
        let roots: Vec<String> = st.space_roots().iter().map(|v| v.name.clone()).collect();
        let mut body = st.body.clone();
        for (d, r) in roots.iter().enumerate() {
            body = body.substitute_iter(r, &Affine::var(&format!("%{d}")));
        }
        let n = roots.len();
        for c in &mut self.stages {
            if c.name == stage || !c.body.reads_buffer(stage) {
                continue;
            }
            c.body = c.body.replace_reads(stage, &|idx: &[Affine]| {
                let mut e = body.clone();
                for (d, a) in idx.iter().enumerate().take(n) {
                    e = e.substitute_iter(&format!("%{d}"), a);
                }
                e
            });
        }
        self.stages.remove(si);
        Ok(())
    }

    fn require_fresh(&self, si: usize, what: &str) -> Result<()> {
        let st = &self.stages[si];
        if st.is_transformed() || st.attach != Attach::Root || !self.attached_to(&st.name).is_empty() {
            return Err(Error::IllegalStep(format!(
                "{what} requires an untransformed root stage, `{}` is not",
                st.name
            )));
        }
        Ok(())
    }

    fn cache_write(&mut self, stage: &str) -> Result<()> {
        let si = self.stage_or_err(stage)?;
        self.require_fresh(si, "cache_write")?;
        let local_name = format!("{stage}.local");
        if self.stage(&local_name).is_some() {
            return Err(Error::IllegalStep(format!("`{local_name}` already exists")));
        }
        let mut local = self.stages[si].clone();
        local.name = local_name.clone();
        let st = &mut self.stages[si];
        let space: Vec<IterVar> = st.space_roots().into_iter().cloned().collect();
        let names: Vec<String> = space.iter().map(|v| v.name.clone()).collect();
        let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        st.body = Expr::read_vars(&local_name, &refs);
        st.vars = space;
        st.roots = names.clone();
        st.order = names;
        self.stages.insert(si, local);
        Ok(())
    }

    fn rfactor(&mut self, stage: &str, loop_name: &str, factor: Option<u64>) -> Result<()> {
        let si = self.stage_or_err(stage)?;
        let st = &self.stages[si];
        let v = st.var_or_err(loop_name)?.clone();
        if !st.roots.iter().any(|r| r == loop_name) {
            return Err(unknown_loop(stage, loop_name));
        }
        if v.kind != IterKind::Reduction {
            return Err(Error::RfactorOnSpaceLoop {
                stage: stage.to_string(),
                loop_name: loop_name.to_string(),
            });
        }
        self.require_fresh(si, "rfactor")?;
        let st = &self.stages[si];
        let f = factor.unwrap_or(1);
        if f == 0 || v.extent % f != 0 {
            return Err(Error::BadSplitFactors {
                stage: stage.to_string(),
                loop_name: loop_name.to_string(),
                extent: v.extent,
                factors: vec![f],
            });
        }
        let rf_name = format!("{stage}.rf");
        if self.stage(&rf_name).is_some() {
            return Err(Error::IllegalStep(format!("`{rf_name}` already exists")));
        }
        let ki = format!("{loop_name}.i");
        let ko = format!("{loop_name}.o");
        let (op, axes, inner) = st.body.as_reduce().expect("reduction stage");
        let space: Vec<IterVar> = st.space_roots().into_iter().cloned().collect();

        let mut rf_vars = space.clone();
        rf_vars.push(IterVar::new(&ki, f, IterKind::Space));
        for r in st.reduce_roots() {
            if r.name == loop_name {
                rf_vars.push(IterVar::new(&ko, v.extent / f, IterKind::Reduction));
            } else {
                rf_vars.push(r.clone());
            }
        }
        let rf_roots: Vec<String> = rf_vars.iter().map(|v| v.name.clone()).collect();
        let rf_axes: Vec<String> = axes
            .iter()
            .map(|a| if a == loop_name { ko.clone() } else { a.clone() })
            .collect();
        let rf_body = Expr::Reduce {
            op,
            axes: rf_axes,
            body: Box::new(inner.substitute_iter(loop_name, &Affine::term(&ko, f as i64).plus(&Affine::var(&ki)))),
        };
        let rf = Stage {
            name: rf_name.clone(),
            node: st.node.clone(),
            order: rf_roots.clone(),
            roots: rf_roots,
            vars: rf_vars,
            relations: Vec::new(),
            body: rf_body,
            attach: Attach::Root,
            auto_unroll_max_step: st.auto_unroll_max_step,
        };

        let mut vars = space;
        vars.push(IterVar::new(&ki, f, IterKind::Reduction));
        let names: Vec<String> = vars.iter().map(|v| v.name.clone()).collect();
        let idx: Vec<Affine> = names.iter().map(|n| Affine::var(n)).collect();
        let body = Expr::Reduce {
            op,
            axes: vec![ki.clone()],
            body: Box::new(Expr::read(&rf_name, idx)),
        };
        let st = &mut self.stages[si];
        st.vars = vars;
        st.roots = names.clone();
        st.order = names;
        st.body = body;
        self.stages.insert(si, rf);
        Ok(())
    }
}
