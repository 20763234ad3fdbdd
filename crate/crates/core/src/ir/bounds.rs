//! Bound inference: how much of a producer an attached stage must compute,
//! and the resulting effective loop extents.

use std::collections::{BTreeMap, BTreeSet};

use super::{Attach, IterKind, Program, Relation, Stage};
use crate::expr::Affine;

pub type Interval = (i64, i64);

/// Intervals of every variable of `s` when the leaves at positions
/// `0..fixed.len()` hold the given values and the rest range freely.
/// Space roots are offset by `base`.
pub fn var_intervals(s: &Stage, fixed: &[i64], base: &[i64]) -> BTreeMap<String, Interval> {
    let mut iv: BTreeMap<String, Interval> = BTreeMap::new();
    for (pos, name) in s.order.iter().enumerate() {
        let v = s.var(name).expect("leaf exists");
        let i = if pos < fixed.len() {
            (fixed[pos], fixed[pos])
        } else {
            (0, v.eff as i64 - 1)
        };
        iv.insert(name.clone(), i);
    }
    for rel in s.relations.iter().rev() {
        match rel {
            Relation::Split { parent, children } => {
                let mut lo = 0i64;
                let mut hi = 0i64;
                let mut stride = 1i64;
                for c in children.iter().rev() {
                    let (a, b) = iv.get(c).copied().unwrap_or((0, 0));
                    lo += a * stride;
                    hi += b * stride;
                    stride *= s.var(c).map(|v| v.extent as i64).unwrap_or(1);
                }
                iv.insert(parent.clone(), (lo, hi));
            }
            Relation::Fuse { outer, inner, fused } => {
                let (a, b) = iv.get(fused).copied().unwrap_or((0, 0));
                let ei = s.var(inner).map(|v| v.eff.max(1) as i64).unwrap_or(1);
                let (oa, ob) = (a / ei, b / ei);
                let inn = if oa == ob { (a % ei, b % ei) } else { (0, ei - 1) };
                iv.insert(outer.clone(), (oa, ob));
                iv.insert(inner.clone(), inn);
            }
        }
    }
    let mut d = 0;
    for r in &s.roots {
        if s.var(r).map(|v| v.kind) == Some(IterKind::Space) {
            if let Some(b) = base.get(d) {
                let e = iv.get_mut(r).expect("root interval");
                e.0 += b;
                e.1 += b;
            }
            d += 1;
        }
    }
    iv
}

pub fn affine_interval(a: &Affine, iv: &BTreeMap<String, Interval>) -> Interval {
    let mut lo = a.constant;
    let mut hi = a.constant;
    for (n, c) in &a.terms {
        let (x, y) = iv.get(n).copied().unwrap_or((0, 0));
        if *c >= 0 {
            lo += c * x;
            hi += c * y;
        } else {
            lo += c * y;
            hi += c * x;
        }
    }
    (lo, hi)
}

/// Hull of the elements of `buffer` read by `consumer` under the given
/// variable intervals, one interval per buffer dimension.
pub fn read_hull(consumer: &Stage, buffer: &str, iv: &BTreeMap<String, Interval>) -> Option<Vec<Interval>> {
    let mut hull: Option<Vec<Interval>> = None;
    for (b, idx) in consumer.body.reads() {
        if b != buffer {
            continue;
        }
        let r: Vec<Interval> = idx.iter().map(|a| affine_interval(a, iv)).collect();
        hull = Some(match hull {
            None => r,
            Some(h) => h
                .iter()
                .zip(r.iter())
                .map(|(x, y)| (x.0.min(y.0), x.1.max(y.1)))
                .collect(),
        });
    }
    hull
}

/// Static region extents of `producer` when attached at `target`'s leaf
/// `loop_name`: the width of the read hull with everything at or above the
/// attach loop held fixed, clipped to the buffer shape.
pub fn attached_region(target: &Stage, loop_name: &str, producer: &str, shape: &[u64]) -> Option<Vec<u64>> {
    let pos = target.leaf_position(loop_name)?;
    let fixed = vec![0i64; pos + 1];
    let iv = var_intervals(target, &fixed, &[]);
    let hull = read_hull(target, producer, &iv)?;
    Some(
        hull.iter()
            .zip(shape.iter())
            .map(|((lo, hi), e)| ((hi - lo + 1).max(1) as u64).min(*e))
            .collect(),
    )
}

/// Recomputes effective extents for every stage and returns any problems.
pub fn infer(p: &mut Program) -> Vec<String> {
    let mut issues = Vec::new();
    let mut done: BTreeSet<String> = BTreeSet::new();
    let n = p.stages.len();
    for _ in 0..=n {
        let mut progressed = false;
        for si in (0..n).rev() {
            let name = p.stages[si].name.clone();
            if done.contains(&name) {
                continue;
            }
            let region = match p.stages[si].attach.clone() {
                Attach::Root => None,
                Attach::At { stage, loop_name } => {
                    if !done.contains(&stage) {
                        if p.stage(&stage).is_some() {
                            continue;
                        }
                        issues.push(format!("`{name}` is attached to missing stage `{stage}`"));
                        None
                    } else {
                        let target = p.stage(&stage).unwrap();
                        let shape = p.stages[si].shape();
                        match attached_region(target, &loop_name, &name, &shape) {
                            Some(r) => Some(r),
                            None => {
                                issues.push(format!(
                                    "`{name}` is attached at `{stage}`.`{loop_name}` which does not read it"
                                ));
                                None
                            }
                        }
                    }
                }
            };
            issues.extend(propagate(&mut p.stages[si], region.as_deref()));
            done.insert(name);
            progressed = true;
        }
        if !progressed {
            break;
        }
    }
    if done.len() != n {
        issues.push("compute_at chain does not terminate at a root stage".into());
    }
    issues
}

fn propagate(s: &mut Stage, region: Option<&[u64]>) -> Vec<String> {
    let mut issues = Vec::new();
    let mut d = 0;
    let roots = s.roots.clone();
    for r in &roots {
        let v = s.var_mut(r).expect("root var");
        v.eff = v.extent;
        if v.kind == IterKind::Space {
            if let Some(reg) = region {
                v.eff = reg[d];
            }
            d += 1;
        }
    }
    let rels = s.relations.clone();
    for rel in &rels {
        match rel {
            Relation::Split { parent, children } => {
                let len = s.var(parent).unwrap().eff;
                let nominal: Vec<u64> = children.iter().map(|c| s.var(c).unwrap().extent).collect();
                let k = (0..=nominal.len()).find(|&k| nominal[k..].iter().product::<u64>() == len);
                match k {
                    Some(k) => {
                        for (i, c) in children.iter().enumerate() {
                            let v = s.var_mut(c).unwrap();
                            v.eff = if i < k { 1 } else { v.extent };
                        }
                    }
                    None => {
                        issues.push(format!(
                            "region of `{}` along `{parent}` has extent {len}, not representable by its split parts {nominal:?}",
                            s.name
                        ));
                        for c in children {
                            let v = s.var_mut(c).unwrap();
                            v.eff = v.extent;
                        }
                    }
                }
            }
            Relation::Fuse { outer, inner, fused } => {
                let e = s.var(outer).unwrap().eff * s.var(inner).unwrap().eff;
                s.var_mut(fused).unwrap().eff = e;
            }
        }
    }
    issues
}
