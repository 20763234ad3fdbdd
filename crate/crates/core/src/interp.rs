//! Reference interpreter: executes a program's loop nests on real data.
//! Annotations and pragmas have no effect on results.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dag::ComputeDag;
use crate::error::{Error, Result};
use crate::expr::{BinOp, Expr, ReduceOp, UnaryOp};
use crate::ir::bounds::{read_hull, var_intervals};
use crate::ir::{validate, Attach, IterKind, Program, Relation, Stage};
use crate::layout::{row_major_offset, PackedLayout};

pub type Tensors = BTreeMap<String, Vec<f32>>;

enum CExpr {
    Const(f32),
    Iter(usize),
    Read {
        buf: usize,
        index: Vec<(Vec<(usize, i64)>, i64)>,
    },
    Bin(BinOp, Box<CExpr>, Box<CExpr>),
    Un(UnaryOp, Box<CExpr>),
    Select(Box<CExpr>, Box<CExpr>, Box<CExpr>),
}

struct BufInfo {
    name: String,
    shape: Vec<u64>,
    layout: Option<PackedLayout>,
}

struct Machine<'a> {
    bufs: Vec<BufInfo>,
    data: Vec<Vec<f32>>,
    ids: HashMap<&'a str, usize>,
}

impl<'a> Machine<'a> {
    fn compile(&self, e: &Expr, slots: &[String]) -> Result<CExpr> {
        let slot = |n: &str| {
            slots
                .iter()
                .position(|s| s == n)
                .ok_or_else(|| Error::Interpret(format!("unbound iterator `{n}`")))
        };
        Ok(match e {
            Expr::Const { value } => CExpr::Const(*value as f32),
            Expr::Iter { name } => CExpr::Iter(slot(name)?),
            Expr::Read { buffer, index } => {
                let buf = *self
                    .ids
                    .get(buffer.as_str())
                    .ok_or_else(|| Error::Interpret(format!("unknown buffer `{buffer}`")))?;
                let mut ci = Vec::new();
                for a in index {
                    let mut terms = Vec::new();
                    for (n, c) in &a.terms {
                        terms.push((slot(n)?, *c));
                    }
                    ci.push((terms, a.constant));
                }
                CExpr::Read { buf, index: ci }
            }
            Expr::Binary { op, lhs, rhs } => CExpr::Bin(
                *op,
                Box::new(self.compile(lhs, slots)?),
                Box::new(self.compile(rhs, slots)?),
            ),
            Expr::Unary { op, arg } => CExpr::Un(*op, Box::new(self.compile(arg, slots)?)),
            Expr::Select { cond, then, otherwise } => CExpr::Select(
                Box::new(self.compile(cond, slots)?),
                Box::new(self.compile(then, slots)?),
                Box::new(self.compile(otherwise, slots)?),
            ),
            Expr::Reduce { .. } => return Err(Error::Interpret("nested reduction".into())),
        })
    }

    fn offset(&self, buf: usize, idx: &[i64], ctx: &str) -> Result<usize> {
        let info = &self.bufs[buf];
        for (d, (i, e)) in idx.iter().zip(info.shape.iter()).enumerate() {
            if *i < 0 || *i >= *e as i64 {
                return Err(Error::Interpret(format!(
                    "{ctx}: index {idx:?} of `{}` out of bounds in dim {d} (shape {:?})",
                    info.name, info.shape
                )));
            }
        }
        Ok(match &info.layout {
            Some(l) => l.offset(idx),
            None => row_major_offset(&info.shape, idx),
        } as usize)
    }

    fn eval(&self, e: &CExpr, env: &[i64], ctx: &str) -> Result<f32> {
        Ok(match e {
            CExpr::Const(v) => *v,
            CExpr::Iter(s) => env[*s] as f32,
            CExpr::Read { buf, index } => {
                let mut idx = [0i64; 8];
                let n = index.len();
                for (d, (terms, c)) in index.iter().enumerate() {
                    let mut v = *c;
                    for (s, k) in terms {
                        v += env[*s] * k;
                    }
                    idx[d] = v;
                }
                self.data[*buf][self.offset(*buf, &idx[..n], ctx)?]
            }
            CExpr::Bin(op, a, b) => op.apply(self.eval(a, env, ctx)?, self.eval(b, env, ctx)?),
            CExpr::Un(op, a) => op.apply(self.eval(a, env, ctx)?),
            CExpr::Select(c, t, o) => {
                if self.eval(c, env, ctx)? != 0.0 {
                    self.eval(t, env, ctx)?
                } else {
                    self.eval(o, env, ctx)?
                }
            }
        })
    }
}

fn check_inputs(dag: &ComputeDag, inputs: &Tensors) -> Result<()> {
    for n in dag.nodes.iter().filter(|n| n.is_placeholder()) {
        let v = inputs
            .get(&n.name)
            .ok_or_else(|| Error::Contract(format!("missing input `{}`", n.name)))?;
        if v.len() as u64 != n.space_volume() {
            return Err(Error::Contract(format!(
                "input `{}` has {} elements, expected {}",
                n.name,
                v.len(),
                n.space_volume()
            )));
        }
    }
    Ok(())
}

/// Deterministic uniform inputs in [-1, 1].
pub fn random_inputs(dag: &ComputeDag, seed: u64) -> Tensors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dag.nodes
        .iter()
        .filter(|n| n.is_placeholder())
        .map(|n| {
            let v = (0..n.space_volume()).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
            (n.name.clone(), v)
        })
        .collect()
}

fn odometer(idx: &mut [i64], ext: &[i64]) -> Option<usize> {
    let mut p = idx.len();
    loop {
        if p == 0 {
            return None;
        }
        p -= 1;
        idx[p] += 1;
        if idx[p] < ext[p] {
            return Some(p);
        }
        idx[p] = 0;
    }
}

/// Evaluates every node of the DAG straight from its definition. This is
/// the oracle the interpreter is checked against.
pub fn reference(dag: &ComputeDag, inputs: &Tensors) -> Result<Tensors> {
    check_inputs(dag, inputs)?;
    let mut m = Machine {
        bufs: Vec::new(),
        data: Vec::new(),
        ids: HashMap::new(),
    };
    for n in &dag.nodes {
        m.ids.insert(n.name.as_str(), m.bufs.len());
        m.bufs.push(BufInfo {
            name: n.name.clone(),
            shape: n.shape(),
            layout: None,
        });
        m.data.push(match inputs.get(&n.name) {
            Some(v) if n.is_placeholder() => v.clone(),
            _ => vec![0.0; n.space_volume() as usize],
        });
    }
    let order = dag.topological_order()?;
    for name in order.iter().rev() {
        let node = dag.node(name).unwrap();
        let Some(body) = &node.body else { continue };
        let slots: Vec<String> = node
            .space
            .iter()
            .chain(node.reduce.iter())
            .map(|s| s.name.clone())
            .collect();
        let (red, inner) = match body.as_reduce() {
            Some((op, _, b)) => (Some(op), b),
            None => (None, body),
        };
        let ce = m.compile(inner, &slots)?;
        let sext: Vec<i64> = node.space.iter().map(|s| s.extent as i64).collect();
        let rext: Vec<i64> = node.reduce.iter().map(|s| s.extent as i64).collect();
        let out = m.ids[name.as_str()];
        let mut env = vec![0i64; slots.len()];
        let mut sidx = vec![0i64; sext.len()];
        loop {
            env[..sidx.len()].copy_from_slice(&sidx);
            let v = match red {
                None => m.eval(&ce, &env, name)?,
                Some(op) => {
                    let mut acc = op.identity();
                    let mut ridx = vec![0i64; rext.len()];
                    loop {
                        env[sidx.len()..].copy_from_slice(&ridx);
                        acc = op.combine(acc, m.eval(&ce, &env, name)?);
                        if odometer(&mut ridx, &rext).is_none() {
                            break;
                        }
                    }
                    acc
                }
            };
            let o = row_major_offset(&node.shape(), &sidx) as usize;
            m.data[out][o] = v;
            if odometer(&mut sidx, &sext).is_none() {
                break;
            }
        }
    }
    Ok(dag
        .nodes
        .iter()
        .filter(|n| !n.is_placeholder())
        .map(|n| (n.name.clone(), m.data[m.ids[n.name.as_str()]].clone()))
        .collect())
}

struct CStage<'p> {
    st: &'p Stage,
    out: usize,
    shape: Vec<u64>,
    body: CExpr,
    reduce: Option<ReduceOp>,
    leaf_ext: Vec<i64>,
    /// Positions of leaves in `vars`.
    leaf_var: Vec<usize>,
    rels: Vec<CRel>,
    root_var: Vec<usize>,
    space_root_slots: Vec<usize>,
    children: Vec<Vec<usize>>,
}

enum CRel {
    Split {
        parent: usize,
        children: Vec<(usize, i64)>,
    },
    Fuse {
        outer: usize,
        inner: usize,
        fused: usize,
        inner_ext: i64,
    },
}

struct Exec<'p> {
    m: Machine<'p>,
    stages: Vec<CStage<'p>>,
}

impl<'p> Exec<'p> {
    fn run_children(&mut self, si: usize, pos: usize, idx: &[i64], base: &[i64]) -> Result<()> {
        if self.stages[si].children[pos].is_empty() {
            return Ok(());
        }
        let kids = self.stages[si].children[pos].clone();
        let parent = self.stages[si].st;
        let iv = var_intervals(parent, &idx[..=pos], base);
        for c in kids {
            let child = self.stages[c].st;
            let hull = read_hull(parent, &child.name, &iv)
                .ok_or_else(|| Error::Interpret(format!("`{}` does not read `{}`", parent.name, child.name)))?;
            let lens: Vec<i64> = child.space_roots().iter().map(|v| v.eff as i64).collect();
            let mut cb = Vec::with_capacity(lens.len());
            for (d, ((lo, hi), len)) in hull.iter().zip(lens.iter()).enumerate() {
                if hi - lo + 1 > *len {
                    return Err(Error::Interpret(format!(
                        "`{}` needs {} elements of `{}` in dim {d}, region holds {len}",
                        parent.name,
                        hi - lo + 1,
                        child.name
                    )));
                }
                let e = self.stages[c].shape[d] as i64;
                cb.push((*lo).clamp(0, e - len));
            }
            self.exec(c, &cb)?;
        }
        Ok(())
    }

    fn exec(&mut self, si: usize, base: &[i64]) -> Result<()> {
        let nvars = self.stages[si].st.vars.len();
        let n = self.stages[si].leaf_ext.len();
        if let Some(op) = self.stages[si].reduce {
            let lens: Vec<i64> = self.stages[si].st.space_roots().iter().map(|v| v.eff as i64).collect();
            let out = self.stages[si].out;
            let mut r = vec![0i64; lens.len()];
            loop {
                let idx: Vec<i64> = r.iter().zip(base).map(|(a, b)| a + b).collect();
                let o = self.m.offset(out, &idx, &self.stages[si].st.name)?;
                self.m.data[out][o] = op.identity();
                if odometer(&mut r, &lens).is_none() {
                    break;
                }
            }
        }
        let mut idx = vec![0i64; n];
        let mut vals = vec![0i64; nvars];
        let mut env = vec![0i64; self.stages[si].root_var.len()];
        let mut wi = vec![0i64; self.stages[si].space_root_slots.len()];
        for p in 0..n {
            self.run_children(si, p, &idx, base)?;
        }
        loop {
            {
                let cs = &self.stages[si];
                for (k, v) in cs.leaf_var.iter().enumerate() {
                    vals[*v] = idx[k];
                }
                for rel in cs.rels.iter().rev() {
                    match rel {
                        CRel::Split { parent, children } => {
                            vals[*parent] = children.iter().map(|(c, s)| vals[*c] * s).sum();
                        }
                        CRel::Fuse {
                            outer,
                            inner,
                            fused,
                            inner_ext,
                        } => {
                            vals[*outer] = vals[*fused] / inner_ext;
                            vals[*inner] = vals[*fused] % inner_ext;
                        }
                    }
                }
                for (k, v) in cs.root_var.iter().enumerate() {
                    env[k] = vals[*v];
                }
                for (d, s) in cs.space_root_slots.iter().enumerate() {
                    env[*s] += base[d];
                    wi[d] = env[*s];
                }
                let v = self.m.eval(&cs.body, &env, &cs.st.name)?;
                let o = self.m.offset(cs.out, &wi, &cs.st.name)?;
                let slot = &mut self.m.data[cs.out][o];
                *slot = match cs.reduce {
                    Some(op) => op.combine(*slot, v),
                    None => v,
                };
            }
            let ext = &self.stages[si].leaf_ext;
            let Some(p) = odometer(&mut idx, &ext.clone()) else {
                break;
            };
            for q in p..n {
                self.run_children(si, q, &idx, base)?;
            }
        }
        Ok(())
    }
}

/// Runs a program and returns the DAG outputs.
pub fn interpret(p: &Program, inputs: &Tensors) -> Result<Tensors> {
    if let Err(v) = validate(p) {
        return Err(Error::Interpret(format!("invalid program: {}", v.join("; "))));
    }
    check_inputs(&p.dag, inputs)?;
    let mut m = Machine {
        bufs: Vec::new(),
        data: Vec::new(),
        ids: HashMap::new(),
    };
    for n in p.dag.nodes.iter().filter(|n| n.is_placeholder()) {
        m.ids.insert(n.name.as_str(), m.bufs.len());
        let layout = p.layouts.get(&n.name).cloned();
        let data = match &layout {
            Some(l) => l.pack(&n.shape(), &inputs[&n.name]),
            None => inputs[&n.name].clone(),
        };
        m.bufs.push(BufInfo {
            name: n.name.clone(),
            shape: n.shape(),
            layout,
        });
        m.data.push(data);
    }
    for s in &p.stages {
        m.ids.insert(s.name.as_str(), m.bufs.len());
        let shape = s.shape();
        m.data.push(vec![0.0; shape.iter().product::<u64>() as usize]);
        m.bufs.push(BufInfo {
            name: s.name.clone(),
            shape,
            layout: None,
        });
    }
    let mut stages = Vec::new();
    for s in &p.stages {
        let (reduce, inner) = match s.body.as_reduce() {
            Some((op, _, b)) => (Some(op), b),
            None => (None, &s.body),
        };
        let vi = |n: &str| s.vars.iter().position(|v| v.name == n).expect("var exists");
        let rels = s
            .relations
            .iter()
            .map(|r| match r {
                Relation::Split { parent, children } => {
                    let mut stride = 1i64;
                    let mut cs = Vec::new();
                    for c in children.iter().rev() {
                        cs.push((vi(c), stride));
                        stride *= s.var(c).unwrap().extent as i64;
                    }
                    CRel::Split {
                        parent: vi(parent),
                        children: cs,
                    }
                }
                Relation::Fuse { outer, inner, fused } => CRel::Fuse {
                    outer: vi(outer),
                    inner: vi(inner),
                    fused: vi(fused),
                    inner_ext: s.var(inner).unwrap().eff.max(1) as i64,
                },
            })
            .collect();
        stages.push(CStage {
            st: s,
            out: m.ids[s.name.as_str()],
            shape: s.shape(),
            body: m.compile(inner, &s.roots)?,
            reduce,
            leaf_ext: s.leaves().map(|v| v.eff as i64).collect(),
            leaf_var: s.order.iter().map(|n| vi(n)).collect(),
            rels,
            root_var: s.roots.iter().map(|n| vi(n)).collect(),
            space_root_slots: s
                .roots
                .iter()
                .enumerate()
                .filter(|(_, r)| s.var(r).unwrap().kind == IterKind::Space)
                .map(|(k, _)| k)
                .collect(),
            children: vec![Vec::new(); s.order.len()],
        });
    }
    for (ci, s) in p.stages.iter().enumerate() {
        if let Attach::At { stage, loop_name } = &s.attach {
            let ti = p.stage_index(stage).unwrap();
            let pos = p.stages[ti].leaf_position(loop_name).unwrap();
            stages[ti].children[pos].push(ci);
        }
    }
    let mut ex = Exec { m, stages };
    for (si, s) in p.stages.iter().enumerate() {
        if s.attach == Attach::Root {
            let base = vec![0i64; s.shape().len()];
            ex.exec(si, &base)?;
        }
    }
    Ok(p.dag
        .outputs
        .iter()
        .map(|o| (o.clone(), ex.m.data[ex.m.ids[o.as_str()]].clone()))
        .collect())
}

/// Largest `|a - b| / max(|b|, 1)` over matching outputs.
pub fn max_rel_error(got: &Tensors, want: &Tensors) -> f64 {
    let mut worst = 0.0f64;
    for (k, w) in want {
        let Some(g) = got.get(k) else { return f64::INFINITY };
        if g.len() != w.len() {
            return f64::INFINITY;
        }
        for (a, b) in g.iter().zip(w.iter()) {
            let e = ((*a as f64) - (*b as f64)).abs() / (*b as f64).abs().max(1.0);
            if e.is_nan() {
                return f64::INFINITY;
            }
            worst = worst.max(e);
        }
    }
    worst
}

/// Interprets `p` and compares against the reference outputs.
pub fn check_equivalent(p: &Program, inputs: &Tensors, want: &Tensors, tol: f64) -> Result<f64> {
    let got = interpret(p, inputs)?;
    let want: Tensors = want
        .iter()
        .filter(|(k, _)| p.dag.is_output(k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let err = max_rel_error(&got, &want);
    if err > tol {
        return Err(Error::Interpret(format!(
            "outputs differ: max relative error {err:.3e}"
        )));
    }
    Ok(err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::RewriteStep;
    use crate::workloads;
    use std::sync::Arc;

    #[test]
    fn matmul_2x2_by_hand() {
        let dag = Arc::new(workloads::matmul(2, 2, 2));
        let inputs: Tensors = [
            ("A".to_string(), vec![1.0, 2.0, 3.0, 4.0]),
            ("B".to_string(), vec![5.0, 6.0, 7.0, 8.0]),
        ]
        .into_iter()
        .collect();
        let out = interpret(&Program::naive(dag), &inputs).unwrap();
        assert_eq!(out["C"], vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn zero_inputs_give_zero() {
        let dag = Arc::new(workloads::matmul(3, 4, 5));
        let inputs: Tensors = dag
            .nodes
            .iter()
            .filter(|n| n.is_placeholder())
            .map(|n| (n.name.clone(), vec![0.0; n.space_volume() as usize]))
            .collect();
        let out = interpret(&Program::naive(dag), &inputs).unwrap();
        assert!(out["C"].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn naive_matches_reference_for_registry() {
        for w in workloads::Workload::small_registry() {
            let dag = Arc::new(w.build());
            let inputs = random_inputs(&dag, 7);
            let want = reference(&dag, &inputs).unwrap();
            check_equivalent(&Program::naive(dag.clone()), &inputs, &want, 1e-5).unwrap();
        }
    }

    #[test]
    fn split_and_compute_at_preserve_results() {
        let dag = Arc::new(workloads::matmul_bias_relu(8, 8, 4));
        let inputs = random_inputs(&dag, 1);
        let want = reference(&dag, &inputs).unwrap();
        let p = Program::naive(dag)
            .apply_steps(&[
                RewriteStep::ComputeInline { stage: "D".into() },
                RewriteStep::Split {
                    stage: "R".into(),
                    loop_name: "i".into(),
                    factors: vec![Some(4)],
                },
                RewriteStep::ComputeAt {
                    stage: "C".into(),
                    target: "R".into(),
                    loop_name: "i.0".into(),
                },
            ])
            .unwrap();
        assert_eq!(p.stage("C").unwrap().var("i").unwrap().eff, 4);
        check_equivalent(&p, &inputs, &want, 1e-5).unwrap();
    }

    #[test]
    fn missing_input_is_contract_error() {
        let dag = Arc::new(workloads::matmul(2, 2, 2));
        let r = interpret(&Program::naive(dag), &Tensors::new());
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
