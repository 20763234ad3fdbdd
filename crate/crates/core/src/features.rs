//! Loop-nest access analysis and the per-statement feature vector.
//!
//! Every stage of a program is one statement. Its enclosing loops are the
//! loops of the stages it is attached under followed by its own visible
//! leaves. Physical strides per loop come from differencing addresses,
//! which covers splits, fusions, attached regions and packed layouts with
//! one mechanism.

use std::collections::BTreeMap;

use crate::expr::{Affine, OpCounts};
use crate::ir::{Annotation, Attach, IterKind, Program, Relation, Stage};
use crate::layout::row_major_offset;
use crate::machine::MachineSpec;

pub const FEATURE_LEN: usize = 164;
pub const ELEM_BYTES: f64 = 4.0;
pub const MAX_BUFFERS: usize = 5;
pub const BUFFER_BLOCK: usize = 18;

pub const VECTORIZE_BLOCK: usize = 16;
pub const UNROLL_BLOCK: usize = 27;
pub const PARALLEL_BLOCK: usize = 38;
pub const GPU_BLOCK: usize = 49;
pub const INTENSITY_CURVE: usize = 56;
pub const BUFFERS_START: usize = 66;
pub const ALLOC_BYTES: usize = 156;
pub const ALLOC_COUNT: usize = 157;
pub const OUTER_LOOPS: usize = 158;
pub const OUTER_PRODUCT: usize = 159;
pub const PRAGMA: usize = 160;
pub const ITERATIONS: usize = 161;
pub const WAIVED: usize = 162;
pub const UNIT_STRIDE_VECTOR: usize = 163;

/// Offsets inside a buffer block.
pub mod buf {
    pub const BYTES: usize = 3;
    pub const UNIQUE_BYTES: usize = 4;
    pub const LINES: usize = 5;
    pub const UNIQUE_LINES: usize = 6;
    pub const REUSE_DIST_ITER: usize = 10;
    pub const REUSE_DIST_BYTES: usize = 11;
    pub const REUSE_COUNTER: usize = 12;
    pub const STRIDE: usize = 13;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
    ReadWrite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReuseKind {
    LoopMultipleRead,
    SerialMultipleRead,
    NoReuse,
}

/// Where an annotated loop sits among the loops of its stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Position {
    InnerSpatial,
    MiddleSpatial,
    OuterSpatial,
    InnerReduce,
    MiddleReduce,
    OuterReduce,
    Mixed,
    None,
}

impl Position {
    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NestLoop {
    pub stage: String,
    pub name: String,
    pub extent: u64,
    pub kind: IterKind,
    pub annotation: Annotation,
    pub own: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Access {
    pub buffer: String,
    pub kind: AccessKind,
    /// Element stride per enclosing loop, outermost first.
    pub strides: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Statement {
    pub stage: String,
    pub loops: Vec<NestLoop>,
    pub accesses: Vec<Access>,
    pub float_ops: OpCounts,
    pub int_ops: OpCounts,
    /// Executions of the body, including recomputation under attach points.
    pub instances: f64,
    pub vector: Option<usize>,
    pub unit_stride_vector: bool,
    pub parallel_extent: u64,
    pub pragma: u64,
    pub alloc_elems: u64,
}

impl Statement {
    pub fn vector_extent(&self) -> u64 {
        self.vector.map(|v| self.loops[v].extent).unwrap_or(1)
    }

    /// Loop iterations with a vectorized loop counted once.
    pub fn loop_iterations(&self) -> f64 {
        self.instances / self.vector_extent() as f64
    }

    /// Product of the innermost own loops that the pragma fully unrolls.
    pub fn unroll_factor(&self) -> u64 {
        let mut u = 1u64;
        for (i, l) in self.loops.iter().enumerate().rev() {
            if !l.own {
                break;
            }
            if Some(i) == self.vector {
                continue;
            }
            if u * l.extent > self.pragma {
                break;
            }
            u *= l.extent;
        }
        u
    }

    pub fn waived(&self) -> f64 {
        let it = self.loop_iterations();
        it - it / self.unroll_factor() as f64
    }

    pub fn float_flops(&self) -> f64 {
        self.float_ops.total() * self.instances
    }

    /// Unique bytes and cache lines one access touches while loops
    /// `from..` run with the outer ones fixed.
    pub fn footprint(&self, a: &Access, from: usize, line_bytes: f64) -> (f64, f64) {
        let mut dims: Vec<(f64, u64)> = self.loops[from..]
            .iter()
            .zip(&a.strides[from..])
            .filter(|(l, s)| l.extent > 1 && **s != 0)
            .map(|(l, s)| (s.unsigned_abs() as f64 * ELEM_BYTES, l.extent))
            .collect();
        dims.sort_by(|x, y| x.0.total_cmp(&y.0));
        let (mut span, mut bytes, mut blocks) = (ELEM_BYTES, ELEM_BYTES, 1.0);
        for (b, n) in dims {
            let n = n as f64;
            if b <= span {
                let s = span + (n - 1.0) * b;
                bytes = (bytes * n).min(s);
                span = s;
            } else if b < line_bytes {
                bytes *= n;
                span += (n - 1.0) * b;
            } else {
                blocks *= n;
            }
        }
        (blocks * bytes, blocks * (span / line_bytes).ceil())
    }

    fn outer_product(&self, upto: usize) -> f64 {
        self.loops[..upto].iter().map(|l| l.extent as f64).product()
    }

    /// Outermost loop level whose combined footprint fits in cache.
    pub fn fitting_level(&self, spec: &MachineSpec) -> usize {
        let line = spec.line_bytes as f64;
        (0..=self.loops.len())
            .find(|&p| {
                let total: f64 = self.accesses.iter().map(|a| self.footprint(a, p, line).0).sum();
                total <= spec.cache_bytes as f64
            })
            .unwrap_or(self.loops.len())
    }

    /// Lines each access brings in from memory, given the cache capacity.
    pub fn traffic(&self, spec: &MachineSpec) -> Vec<f64> {
        let p = self.fitting_level(spec);
        let outer = self.outer_product(p);
        self.accesses
            .iter()
            .map(|a| self.footprint(a, p, spec.line_bytes as f64).1 * outer)
            .collect()
    }

    pub fn position_of(&self, idx: usize) -> Position {
        let l = &self.loops[idx];
        let same: Vec<usize> = self
            .loops
            .iter()
            .enumerate()
            .filter(|(_, m)| m.stage == l.stage && m.kind == l.kind)
            .map(|(i, _)| i)
            .collect();
        let inner = same.last() == Some(&idx);
        let outer = same.first() == Some(&idx);
        match (l.kind, inner, outer) {
            (IterKind::Mixed, _, _) => Position::Mixed,
            (IterKind::Space, true, _) => Position::InnerSpatial,
            (IterKind::Space, false, true) => Position::OuterSpatial,
            (IterKind::Space, false, false) => Position::MiddleSpatial,
            (IterKind::Reduction, true, _) => Position::InnerReduce,
            (IterKind::Reduction, false, true) => Position::OuterReduce,
            (IterKind::Reduction, false, false) => Position::MiddleReduce,
        }
    }
}

fn context_loops(p: &Program, s: &Stage, out: &mut Vec<NestLoop>) {
    if let Attach::At { stage, loop_name } = &s.attach {
        let Some(t) = p.stage(stage) else { return };
        context_loops(p, t, out);
        let upto = t.leaf_position(loop_name).unwrap_or(0);
        for name in &t.order[..=upto] {
            let v = t.var(name).expect("leaf exists");
            if v.visible() && v.eff > 1 {
                out.push(NestLoop {
                    stage: t.name.clone(),
                    name: v.name.clone(),
                    extent: v.eff,
                    kind: v.kind,
                    annotation: v.annotation,
                    own: false,
                });
            }
        }
    }
}

/// Root iterator values of `s` for a point assignment of loop values.
fn root_values(p: &Program, s: &Stage, set: &dyn Fn(&str, &str) -> i64) -> BTreeMap<String, i64> {
    let mut val: BTreeMap<String, i64> = s.order.iter().map(|l| (l.clone(), set(&s.name, l))).collect();
    for rel in s.relations.iter().rev() {
        match rel {
            Relation::Split { parent, children } => {
                let mut acc = 0;
                let mut stride = 1;
                for c in children.iter().rev() {
                    acc += val.get(c).copied().unwrap_or(0) * stride;
                    stride *= s.var(c).map(|v| v.extent as i64).unwrap_or(1);
                }
                val.insert(parent.clone(), acc);
            }
            Relation::Fuse { outer, inner, fused } => {
                let f = val.get(fused).copied().unwrap_or(0);
                let ei = s.var(inner).map(|v| v.eff.max(1) as i64).unwrap_or(1);
                val.insert(outer.clone(), f / ei);
                val.insert(inner.clone(), f % ei);
            }
        }
    }
    if let Attach::At { stage, .. } = &s.attach {
        if let Some(t) = p.stage(stage) {
            let tv = root_values(p, t, set);
            if let Some((_, idx)) = t.body.reads().into_iter().find(|(b, _)| *b == s.name) {
                for (r, a) in s.space_roots().iter().zip(idx) {
                    *val.entry(r.name.clone()).or_default() += a.eval(|n| tv.get(n).copied().unwrap_or(0));
                }
            }
        }
    }
    val
}

fn address(p: &Program, buffer: &str, idx: &[Affine], vals: &BTreeMap<String, i64>) -> i64 {
    let ix: Vec<i64> = idx
        .iter()
        .map(|a| a.eval(|n| vals.get(n).copied().unwrap_or(0)))
        .collect();
    match p.layouts.get(buffer) {
        Some(l) => l.offset(&ix),
        None => row_major_offset(&p.buffer_shape(buffer).unwrap_or_default(), &ix),
    }
}

pub fn analyze_stage(p: &Program, s: &Stage) -> Statement {
    let mut loops = Vec::new();
    context_loops(p, s, &mut loops);
    for v in s.visible_leaves().into_iter().filter(|v| v.eff > 1) {
        loops.push(NestLoop {
            stage: s.name.clone(),
            name: v.name.clone(),
            extent: v.eff,
            kind: v.kind,
            annotation: v.annotation,
            own: true,
        });
    }

    let write_idx: Vec<Affine> = s.space_roots().iter().map(|v| Affine::var(&v.name)).collect();
    let mut refs: Vec<(String, AccessKind, Vec<Affine>)> = s
        .body
        .reads()
        .into_iter()
        .map(|(b, i)| (b.to_string(), AccessKind::Read, i.to_vec()))
        .collect();
    let wkind = if s.is_reduction() {
        AccessKind::ReadWrite
    } else {
        AccessKind::Write
    };
    refs.push((s.name.clone(), wkind, write_idx));

    let zero = root_values(p, s, &|_, _| 0);
    let points: Vec<BTreeMap<String, i64>> = loops
        .iter()
        .map(|l| root_values(p, s, &|st, n| i64::from(st == l.stage && n == l.name)))
        .collect();
    let accesses = refs
        .into_iter()
        .map(|(buffer, kind, idx)| {
            let a0 = address(p, &buffer, &idx, &zero);
            let strides = points.iter().map(|pt| address(p, &buffer, &idx, pt) - a0).collect();
            Access { buffer, kind, strides }
        })
        .collect::<Vec<_>>();

    let vector = loops
        .iter()
        .rposition(|l| l.own && l.annotation == Annotation::Vectorize);
    let unit_stride_vector = vector
        .map(|v| accesses.last().map(|w| w.strides[v].abs() == 1).unwrap_or(false))
        .unwrap_or(false);
    let parallel_extent = loops
        .iter()
        .filter(|l| l.annotation == Annotation::Parallel)
        .map(|l| l.extent)
        .product::<u64>();
    let pragma = p.stage(p.root_of(&s.name)).map(|r| r.auto_unroll_max_step).unwrap_or(0);
    let (float_ops, int_ops) = s.body.op_counts();
    let instances = loops.iter().map(|l| l.extent as f64).product();
    Statement {
        stage: s.name.clone(),
        loops,
        accesses,
        float_ops,
        int_ops,
        instances,
        vector,
        unit_stride_vector,
        parallel_extent,
        pragma,
        alloc_elems: s
            .roots
            .iter()
            .filter_map(|r| s.var(r))
            .filter(|v| v.kind == IterKind::Space)
            .map(|v| v.eff)
            .product(),
    }
}

pub fn analyze(p: &Program) -> Vec<Statement> {
    p.stages.iter().map(|s| analyze_stage(p, s)).collect()
}

fn annotation_block(st: &Statement, ann: Annotation, out: &mut [f64]) {
    let idx: Vec<usize> = (0..st.loops.len()).filter(|&i| st.loops[i].annotation == ann).collect();
    let Some(&inner) = idx.last() else {
        out[1 + Position::None.slot()] = 1.0;
        return;
    };
    out[0] = st.loops[inner].extent as f64;
    out[1 + st.position_of(inner).slot()] = 1.0;
    out[9] = idx.iter().map(|&i| st.loops[i].extent as f64).product();
    out[10] = idx.len() as f64;
}

struct BufferStats {
    name: String,
    v: [f64; BUFFER_BLOCK],
}

fn buffer_blocks(st: &Statement, spec: &MachineSpec) -> Vec<BufferStats> {
    let line = spec.line_bytes as f64;
    let traffic = st.traffic(spec);
    let n = st.loops.len();
    let mut by: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, a) in st.accesses.iter().enumerate() {
        by.entry(&a.buffer).or_default().push(i);
    }
    let mut out = Vec::new();
    for (name, ids) in by {
        let mut v = [0.0; BUFFER_BLOCK];
        let kinds: Vec<AccessKind> = ids.iter().map(|&i| st.accesses[i].kind).collect();
        let kind = if kinds.iter().all(|k| *k == AccessKind::Read) {
            0
        } else if kinds.iter().all(|k| *k == AccessKind::Write) {
            1
        } else {
            2
        };
        v[kind] = 1.0;
        for &i in &ids {
            let a = &st.accesses[i];
            v[buf::BYTES] += st.instances * ELEM_BYTES;
            v[buf::UNIQUE_BYTES] += st.footprint(a, 0, line).0;
            v[buf::LINES] += if n == 0 {
                1.0
            } else {
                st.footprint(a, n - 1, line).1 * st.outer_product(n - 1)
            };
            v[buf::UNIQUE_LINES] += traffic[i];
        }
        let a = &st.accesses[ids[0]];
        let reuse_loop = (0..n).rev().find(|&q| st.loops[q].extent > 1 && a.strides[q] == 0);
        let (reuse, dist_iter, dist_bytes, counter) = match reuse_loop {
            Some(q) => (
                ReuseKind::LoopMultipleRead,
                st.loops[q + 1..].iter().map(|l| l.extent as f64).product(),
                st.footprint(a, q + 1, line).0,
                st.loops[q].extent as f64,
            ),
            None if ids.len() > 1 => (ReuseKind::SerialMultipleRead, 0.0, 0.0, ids.len() as f64),
            None => (ReuseKind::NoReuse, 0.0, 0.0, 1.0),
        };
        v[7 + reuse as usize] = 1.0;
        v[buf::REUSE_DIST_ITER] = dist_iter;
        v[buf::REUSE_DIST_BYTES] = dist_bytes;
        v[buf::REUSE_COUNTER] = counter;
        v[buf::STRIDE] = (0..n)
            .rev()
            .find(|&q| st.loops[q].extent > 1 && a.strides[q] != 0)
            .map(|q| a.strides[q].unsigned_abs() as f64)
            .unwrap_or(0.0);
        for k in 0..4 {
            v[14 + k] = v[buf::BYTES + k] / counter;
        }
        out.push(BufferStats {
            name: name.to_string(),
            v,
        });
    }
    out.sort_by(|x, y| {
        y.v[buf::UNIQUE_LINES]
            .total_cmp(&x.v[buf::UNIQUE_LINES])
            .then(x.name.cmp(&y.name))
    });
    out
}

/// Flops per unique byte of the innermost `d` loops, for depths at
/// fractions 0.1, 0.2, ..., 1.0 of the nest, linearly interpolated.
fn intensity_curve(st: &Statement, spec: &MachineSpec) -> [f64; 10] {
    let line = spec.line_bytes as f64;
    let per = st.float_ops.total();
    let n = st.loops.len();
    let levels: Vec<f64> = (0..=n)
        .map(|d| {
            let from = n - d;
            let inner: f64 = st.loops[from..].iter().map(|l| l.extent as f64).product();
            let bytes: f64 = st.accesses.iter().map(|a| st.footprint(a, from, line).0).sum();
            per * inner / bytes
        })
        .collect();
    let mut out = [0.0; 10];
    for (t, o) in out.iter_mut().enumerate() {
        let x = (t + 1) as f64 / 10.0 * n as f64;
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n);
        let w = x - lo as f64;
        *o = levels[lo] * (1.0 - w) + levels[hi] * w;
    }
    out
}

/// Raw (untransformed) feature vector of one statement.
pub fn statement_features(st: &Statement, spec: &MachineSpec) -> Vec<f64> {
    let mut f = vec![0.0; FEATURE_LEN];
    for (k, x) in st.float_ops.scaled(st.instances).as_array().iter().enumerate() {
        f[k] = *x;
    }
    for (k, x) in st.int_ops.scaled(st.instances).as_array().iter().enumerate() {
        f[8 + k] = *x;
    }
    annotation_block(st, Annotation::Vectorize, &mut f[VECTORIZE_BLOCK..UNROLL_BLOCK]);
    annotation_block(st, Annotation::Unroll, &mut f[UNROLL_BLOCK..PARALLEL_BLOCK]);
    annotation_block(st, Annotation::Parallel, &mut f[PARALLEL_BLOCK..GPU_BLOCK]);
    f[INTENSITY_CURVE..BUFFERS_START].copy_from_slice(&intensity_curve(st, spec));
    for (b, stats) in buffer_blocks(st, spec).into_iter().take(MAX_BUFFERS).enumerate() {
        let at = BUFFERS_START + b * BUFFER_BLOCK;
        f[at..at + BUFFER_BLOCK].copy_from_slice(&stats.v);
    }
    let own_start = st.loops.iter().position(|l| l.own).unwrap_or(st.loops.len());
    f[ALLOC_BYTES] = st.alloc_elems as f64 * ELEM_BYTES;
    f[ALLOC_COUNT] = st.outer_product(own_start);
    f[OUTER_LOOPS] = st.loops.len() as f64;
    f[OUTER_PRODUCT] = st.instances;
    f[PRAGMA] = st.pragma as f64;
    f[ITERATIONS] = st.loop_iterations();
    f[WAIVED] = st.waived();
    f[UNIT_STRIDE_VECTOR] = f64::from(u8::from(st.unit_stride_vector));
    f
}

/// Raw feature vectors, one per statement, in stage order.
pub fn raw_features(p: &Program, spec: &MachineSpec) -> Vec<Vec<f64>> {
    analyze(p).iter().map(|st| statement_features(st, spec)).collect()
}

pub fn slog(x: f64) -> f64 {
    x.signum() * (1.0 + x.abs()).log2()
}

/// Model inputs: raw features under a signed log. Memory features use
/// the default line size and cache capacity as fixed constants.
pub fn extract_features(p: &Program) -> Vec<Vec<f64>> {
    raw_features(p, &MachineSpec::default())
        .into_iter()
        .map(|v| v.into_iter().map(slog).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::RewriteStep;
    use crate::workloads;
    use std::sync::Arc;

    fn matmul_stmt(p: &Program) -> Statement {
        analyze(p).into_iter().find(|s| s.stage == "C").unwrap()
    }

    #[test]
    fn naive_matmul_strides() {
        let p = Program::naive(Arc::new(workloads::matmul(4, 6, 8)));
        let st = matmul_stmt(&p);
        let names: Vec<&str> = st.loops.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names, ["i", "j", "k"]);
        let by = |b: &str| st.accesses.iter().find(|a| a.buffer == b).unwrap().strides.clone();
        assert_eq!(by("A"), vec![8, 0, 1]);
        assert_eq!(by("B"), vec![0, 1, 6]);
        assert_eq!(by("C"), vec![6, 1, 0]);
        assert_eq!(st.instances, 4.0 * 6.0 * 8.0);
    }

    #[test]
    fn footprint_matches_enumeration() {
        let p = Program::naive(Arc::new(workloads::matmul(4, 6, 40)));
        let st = matmul_stmt(&p);
        let line = 64.0;
        for a in &st.accesses {
            for from in 0..=3 {
                let mut addrs = std::collections::BTreeSet::from([0i64]);
                for (l, st) in st.loops[from..].iter().zip(&a.strides[from..]) {
                    addrs = addrs
                        .iter()
                        .flat_map(|b| (0..l.extent as i64).map(move |x| b + x * st))
                        .collect();
                }
                let lines: std::collections::BTreeSet<i64> = addrs.iter().map(|x| x * 4 / 64).collect();
                let (ub, ln) = st.footprint(a, from, line);
                assert_eq!(ub, addrs.len() as f64 * 4.0, "{} from {from}", a.buffer);
                assert_eq!(ln, lines.len() as f64, "{} from {from}", a.buffer);
            }
        }
    }

    #[test]
    fn attached_stage_sees_consumer_loops() {
        let dag = Arc::new(workloads::elementwise_chain(16));
        let p = Program::naive(dag)
            .apply_steps(&[
                RewriteStep::Split {
                    stage: "D".into(),
                    loop_name: "i".into(),
                    factors: vec![Some(4)],
                },
                RewriteStep::ComputeAt {
                    stage: "C".into(),
                    target: "D".into(),
                    loop_name: "i.0".into(),
                },
            ])
            .unwrap();
        let st = analyze(&p).into_iter().find(|s| s.stage == "C").unwrap();
        assert_eq!(st.loops.len(), 2);
        assert!(!st.loops[0].own && st.loops[1].own);
        assert_eq!(st.loops[1].extent, 4);
        let read = &st.accesses[0];
        assert_eq!(read.buffer, "B");
        assert_eq!(read.strides, vec![4, 1]);
        assert_eq!(st.instances, 16.0);
    }

    #[test]
    fn feature_vector_has_fixed_length_and_one_hots() {
        for w in workloads::Workload::small_registry() {
            let p = Program::naive(Arc::new(w.build()));
            for f in raw_features(&p, &MachineSpec::default()) {
                assert_eq!(f.len(), FEATURE_LEN);
                for block in [VECTORIZE_BLOCK, UNROLL_BLOCK, PARALLEL_BLOCK] {
                    let s: f64 = f[block + 1..block + 9].iter().sum();
                    assert_eq!(s, 1.0);
                }
                assert!(f[GPU_BLOCK..INTENSITY_CURVE].iter().all(|x| *x == 0.0));
            }
        }
    }

    #[test]
    fn unroll_waives_inner_iterations() {
        let p = Program::naive(Arc::new(workloads::matmul(4, 4, 16)))
            .apply_step(&RewriteStep::SetPragma {
                stage: "C".into(),
                auto_unroll_max_step: 16,
            })
            .unwrap();
        let st = matmul_stmt(&p);
        assert_eq!(st.unroll_factor(), 16);
        assert_eq!(st.waived(), 256.0 - 16.0);
    }

    /// Brute-force trace of one access: unique addresses and the number
    /// of times each is touched.
    fn trace(st: &Statement, a: &Access) -> std::collections::BTreeMap<i64, u64> {
        let mut hits = std::collections::BTreeMap::from([(0i64, 1u64)]);
        for (l, s) in st.loops.iter().zip(&a.strides) {
            let mut next = std::collections::BTreeMap::new();
            for (b, c) in &hits {
                for x in 0..l.extent as i64 {
                    *next.entry(b + x * s).or_insert(0) += c;
                }
            }
            hits = next;
        }
        hits
    }

    #[test]
    fn naive_matmul_reuse_matches_trace() {
        let p = Program::naive(Arc::new(workloads::matmul(16, 16, 16)));
        let st = matmul_stmt(&p);
        let f = statement_features(&st, &MachineSpec::default());
        let blocks: Vec<&[f64]> = (0..MAX_BUFFERS)
            .map(|b| &f[BUFFERS_START + b * BUFFER_BLOCK..BUFFERS_START + (b + 1) * BUFFER_BLOCK])
            .collect();
        let a_idx = st.accesses.iter().position(|a| a.buffer == "A").unwrap();
        let hits = trace(&st, &st.accesses[a_idx]);
        assert!(hits.values().all(|c| *c == 16));
        let a_block = blocks
            .iter()
            .find(|b| b[0] == 1.0 && b[buf::UNIQUE_BYTES] == hits.len() as f64 * ELEM_BYTES && b[7] == 1.0)
            .expect("A block with loop reuse");
        assert_eq!(a_block[buf::REUSE_COUNTER], 16.0);
        assert_eq!(a_block[buf::REUSE_DIST_ITER], 16.0);
    }

    #[test]
    fn copy_statement_has_no_intensity() {
        let dag = Arc::new(workloads::matmul(8, 8, 8));
        let p = Program::naive(dag)
            .apply_step(&RewriteStep::CacheWrite { stage: "C".into() })
            .unwrap();
        let sts = analyze(&p);
        let copy = sts.iter().find(|s| s.stage == "C").unwrap();
        let f = statement_features(copy, &MachineSpec::default());
        assert!(f[..8].iter().all(|x| *x == 0.0));
        assert!(f[INTENSITY_CURVE..BUFFERS_START].iter().all(|x| *x == 0.0));
        assert_eq!(sts.len(), 2);
    }

    #[test]
    fn vectorized_inner_loop_features() {
        let p = Program::naive(Arc::new(workloads::matmul(8, 8, 8)))
            .apply_steps(&[
                RewriteStep::Reorder {
                    stage: "C".into(),
                    order: ["i", "k", "j"].map(String::from).to_vec(),
                },
                RewriteStep::Annotate {
                    stage: "C".into(),
                    loop_name: "j".into(),
                    annotation: crate::ir::Annotation::Vectorize,
                },
            ])
            .unwrap();
        let f = &raw_features(&p, &MachineSpec::default())[0];
        assert_eq!(f[VECTORIZE_BLOCK], 8.0);
        assert_eq!(f[VECTORIZE_BLOCK + 1 + Position::InnerSpatial.slot()], 1.0);
        assert_eq!(f[UNIT_STRIDE_VECTOR], 1.0);
    }

    #[test]
    fn simplify_keeps_features() {
        use crate::annotate::fill_tile_sizes;
        use crate::sketch::{generate_sketches, SketchPolicy};
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for w in workloads::Workload::small_registry() {
            let dag = Arc::new(w.build());
            for sk in generate_sketches(&dag, &[], &SketchPolicy::default()).unwrap() {
                let p = fill_tile_sizes(&sk.program, &mut rng).unwrap();
                assert_eq!(extract_features(&p), extract_features(&p.simplify()));
            }
        }
    }
}
