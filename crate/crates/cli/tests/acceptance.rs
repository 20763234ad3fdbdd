//! Acceptance run: one PASS/FAIL line per criterion. Exits nonzero when
//! any criterion fails.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use loomtune::annotate::{sample_program, AnnotationPolicy};
use loomtune::cost_model::{GbdtModel, TrainingRecord};
use loomtune::dag::{AnalysisConfig, ComputeDag};
use loomtune::evolution::{crossover, mutate, mutate_tile_size, Crossed, EvolutionConfig, MUTATIONS};
use loomtune::gbdt::TrainParams;
use loomtune::interp::{check_equivalent, random_inputs, reference};
use loomtune::ir::{validate, Program, Relation, RewriteStep};
use loomtune::machine::{machine_cost, MachineSpec};
use loomtune::metrics::{pairwise_accuracy, recall_at_k};
use loomtune::scheduler::{approx_gradient, ObjectiveKind, SchedulerParams, TaskState};
use loomtune::sketch::{generate_sketches, multi_level_tile, rule_number, Sketch, SketchPolicy};
use loomtune::tuner::{tune, LogRecord, SearchMode, TaskSpec, TuneSettings};
use loomtune::workloads::{self, Workload};
use loomtune_cli::{cmd_replay, cmd_tune, Config};

type Outcome = Result<String, String>;

fn sketches(dag: &Arc<ComputeDag>) -> Vec<Sketch> {
    generate_sketches(dag, &[], &SketchPolicy::default()).expect("sketch generation")
}

fn within(limit: Duration, start: Instant) -> Outcome {
    let t = start.elapsed();
    if t <= limit {
        Ok(format!("{:.1}s", t.as_secs_f64()))
    } else {
        Err(format!("took {:.1}s, limit {}s", t.as_secs_f64(), limit.as_secs()))
    }
}

/// Applies one to three random mutations, retrying other operators when
/// one does not apply.
fn mutant(p: &Program, cfg: &EvolutionConfig, rng: &mut ChaCha8Rng) -> Option<Program> {
    let mut cur = p.clone();
    let mut changed = false;
    for _ in 0..rng.gen_range(1..=3) {
        let mut ops = MUTATIONS.to_vec();
        ops.shuffle(rng);
        if let Some(q) = ops.into_iter().find_map(|op| mutate(&cur, op, cfg, rng).ok()) {
            cur = q;
            changed = true;
        }
    }
    changed.then_some(cur)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let policy = AnnotationPolicy::default();
    let cfg = EvolutionConfig::default();
    let mut worst: f64 = 0.0;
    let mut counted = Vec::new();
    for w in Workload::small_registry() {
        let dag = Arc::new(w.build());
        let inputs = random_inputs(&dag, 11);
        let want = reference(&dag, &inputs).map_err(|e| e.to_string())?;
        let sk = sketches(&dag);
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let (mut sampled, mut mutated) = (0, 0);
        let mut attempts = 0;
        while sampled < 200 || mutated < 200 {
            attempts += 1;
            if attempts > 2000 {
                return Err(format!("{}: only {mutated} mutants after {attempts} attempts", dag.id));
            }
            let s = &sk[attempts % sk.len()];
            let p = sample_program(&s.program, &policy, &mut rng).map_err(|e| e.to_string())?;
            let mut check = |q: &Program| -> Result<(), String> {
                validate(q).map_err(|v| format!("{}: invalid program: {v:?}", dag.id))?;
                let err = check_equivalent(q, &inputs, &want, 1e-5).map_err(|e| format!("{}: {e}\n{q}", dag.id))?;
                worst = worst.max(err);
                Ok(())
            };
            if sampled < 200 {
                check(&p)?;
                sampled += 1;
            }
            if mutated < 200 {
                if let Some(m) = mutant(&p, &cfg, &mut rng) {
                    check(&m)?;
                    mutated += 1;
                }
            }
        }
        counted.push(format!("{}:{sampled}+{mutated}", w.kind()));
    }
    let t = within(Duration::from_secs(120), start)?;
    Ok(format!("{} workloads, max rel err {worst:.2e}, {t}", counted.len()))
}

fn numbers(s: &Sketch) -> Vec<usize> {
    s.trace.iter().map(|r| rule_number(r).expect("built-in rule")).collect()
}

/// Rule sequences derived by hand from the rule table, node by node in the
/// derivation order. A cache-write stage reuses its node's traits with a
/// fusible consumer (the copy back) and cannot be cached again.
fn oracle_traces(dag: &ComputeDag) -> Vec<Vec<usize>> {
    let cfg = AnalysisConfig::default();
    let mut traces: Vec<Vec<usize>> = vec![Vec::new()];
    for node in dag.topological_order().unwrap() {
        let branches: Vec<Vec<usize>> = if dag.node(&node).unwrap().is_placeholder() {
            vec![vec![1]]
        } else {
            let t = dag.analyze_node(&node, &cfg).unwrap();
            let options = |fusible: bool, cached: bool| -> Vec<Vec<usize>> {
                let mut v = Vec::new();
                if t.strict_inlinable {
                    v.push(vec![2]);
                } else {
                    v.push(vec![1]);
                }
                if t.has_data_reuse {
                    v.push(vec![3]);
                    if fusible {
                        v.push(vec![4]);
                        v.push(vec![4]);
                    } else if !cached {
                        v.push(vec![5]);
                    }
                }
                if t.has_more_reduction_parallel {
                    v.push(vec![6]);
                }
                v
            };
            let mut out = Vec::new();
            for b in options(t.has_fusible_consumer, false) {
                if b == [5] {
                    for c in options(true, true) {
                        out.push([vec![5], c].concat());
                    }
                } else {
                    out.push(b);
                }
            }
            out
        };
        traces = traces
            .iter()
            .flat_map(|pre| branches.iter().map(move |b| [pre.clone(), b.clone()].concat()))
            .collect();
    }
    traces.sort();
    traces
}

fn criterion_2() -> Outcome {
    let fused = sketches(&Arc::new(workloads::example_fused(16)));
    if !fused.iter().any(|s| numbers(s) == [1, 4, 1, 1]) {
        return Err("fused example lacks the [1,4,1,1] derivation".into());
    }
    let red = sketches(&Arc::new(workloads::example_reduction(512)));
    let cache = red
        .iter()
        .find(|s| numbers(s).starts_with(&[5, 4]))
        .ok_or("no [5,4,...] derivation on the reduction example")?;
    if !cache
        .program
        .history
        .iter()
        .any(|h| matches!(h, RewriteStep::CacheWrite { .. }))
    {
        return Err("[5,4,...] sketch has no cache-write step".into());
    }
    let rf = red
        .iter()
        .find(|s| numbers(s).first() == Some(&6))
        .ok_or("no rule-6 derivation on the reduction example")?;
    if !rf
        .program
        .history
        .iter()
        .any(|h| matches!(h, RewriteStep::Rfactor { .. }))
    {
        return Err("rule-6 sketch has no rfactor step".into());
    }
    let mut counts = Vec::new();
    for w in Workload::registry() {
        let dag = Arc::new(w.build());
        let sk = sketches(&dag);
        let mut got: Vec<Vec<usize>> = sk.iter().map(numbers).collect();
        got.sort();
        let want = oracle_traces(&dag);
        if got != want {
            return Err(format!("{}: derivations {got:?}, rule tree gives {want:?}", w.kind()));
        }
        if sk.len() > 10 {
            return Err(format!("{}: {} sketches", w.kind(), sk.len()));
        }
        counts.push(format!("{}={}", w.kind(), sk.len()));
    }
    Ok(format!(
        "reference derivations found; sketch counts {}",
        counts.join(" ")
    ))
}

fn criterion_3() -> Outcome {
    let dag = Arc::new(workloads::matmul(256, 256, 256));
    let p = multi_level_tile(&Program::naive(dag), "C", "SSRSRS").map_err(|e| e.to_string())?;
    let order = &p.stage("C").unwrap().order;
    let want = ["i.0", "j.0", "i.1", "j.1", "k.0", "i.2", "j.2", "k.1", "i.3", "j.3"];
    if order.iter().map(String::as_str).eq(want) {
        Ok(format!("nest {}", order.join(",")))
    } else {
        Err(format!("nest {order:?}"))
    }
}

/// Every split or fuse relation must conserve its extents exactly.
fn extents_conserved(p: &Program) -> Result<(), String> {
    for s in &p.stages {
        let ext = |n: &str| {
            s.var(n)
                .map(|v| v.extent)
                .ok_or(format!("{}: missing loop {n}", s.name))
        };
        for r in &s.relations {
            match r {
                Relation::Split { parent, children } => {
                    let prod = children.iter().map(|c| ext(c)).product::<Result<u64, String>>()?;
                    if prod != ext(parent)? {
                        return Err(format!("{}: split of {parent} multiplies to {prod}", s.name));
                    }
                }
                Relation::Fuse { outer, inner, fused } => {
                    if ext(outer)? * ext(inner)? != ext(fused)? {
                        return Err(format!("{}: fuse {fused} changes the extent", s.name));
                    }
                }
            }
        }
    }
    Ok(())
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let policy = AnnotationPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut pool = Vec::new();
    for w in Workload::registry() {
        let dag = Arc::new(w.build());
        let sk = sketches(&dag);
        for i in 0..40 {
            pool.push(sample_program(&sk[i % sk.len()].program, &policy, &mut rng).map_err(|e| e.to_string())?);
        }
    }
    let mut done = 0;
    let mut skipped = 0;
    while done < 10_000 {
        let parent = pool.choose(&mut rng).unwrap();
        let Ok(child) = mutate_tile_size(parent, &mut rng) else {
            skipped += 1;
            if skipped > 100_000 {
                return Err("tile-size mutation almost never applies".into());
            }
            continue;
        };
        validate(&child).map_err(|v| format!("invalid mutant: {v:?}"))?;
        extents_conserved(&child)?;
        for (a, b) in parent.stages.iter().zip(&child.stages) {
            for r in &a.roots {
                if a.var(r).map(|v| v.extent) != b.var(r).map(|v| v.extent) {
                    return Err(format!("{}: root {r} changed extent", a.name));
                }
            }
        }
        done += 1;
    }

    let dag = Arc::new(workloads::matmul_bias_relu(16, 16, 16));
    let inputs = random_inputs(&dag, 5);
    let want = reference(&dag, &inputs).map_err(|e| e.to_string())?;
    let depth = |s: &Sketch| {
        s.program.history.iter().find_map(|h| match h {
            RewriteStep::ComputeAt { loop_name, .. } => Some(loop_name.clone()),
            _ => None,
        })
    };
    let mut by_depth: BTreeMap<String, Vec<Program>> = BTreeMap::new();
    for s in sketches(&dag)
        .iter()
        .filter(|s| s.trace.iter().any(|r| r == "tile_fuse"))
    {
        let d = depth(s).ok_or("tile_fuse sketch without an attachment")?;
        let progs = by_depth.entry(d).or_default();
        for _ in 0..50 {
            progs.push(sample_program(&s.program, &policy, &mut rng).map_err(|e| e.to_string())?);
        }
    }
    let groups: Vec<&Vec<Program>> = by_depth.values().collect();
    if groups.len() < 2 {
        return Err(format!(
            "need two fusion depths, found {:?}",
            by_depth.keys().collect::<Vec<_>>()
        ));
    }
    let mut feasible = 0;
    for n in 0..1000 {
        let (x, y) = if n % 2 == 0 { (0, 1) } else { (1, 0) };
        let a = groups[x].choose(&mut rng).unwrap();
        let b = groups[y].choose(&mut rng).unwrap();
        match crossover(a, b, &mut rng).map_err(|e| e.to_string())? {
            Crossed::Child(c) => {
                validate(&c).map_err(|v| format!("invalid child: {v:?}"))?;
                check_equivalent(&c, &inputs, &want, 1e-5).map_err(|e| format!("child differs: {e}\n{c}"))?;
                feasible += 1;
            }
            Crossed::Infeasible(_) => {}
        }
    }
    let rate = feasible as f64 / 1000.0;
    let t = within(Duration::from_secs(60), start)?;
    if rate < 0.95 {
        return Err(format!("crossover feasibility {rate:.3}"));
    }
    Ok(format!(
        "10000 tile mutations conserve extents; crossover feasible {rate:.3}, all equivalent; {t}"
    ))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let spec = MachineSpec::default();
    let policy = AnnotationPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let kinds = Workload::registry();
    let per = 2000 / kinds.len() + 1;
    let mut records = Vec::new();
    for w in &kinds {
        let dag = Arc::new(w.build());
        let sk = sketches(&dag);
        let progs: Vec<Program> = (0..per)
            .map(|i| sample_program(&sk[i % sk.len()].program, &policy, &mut rng))
            .collect::<loomtune::Result<_>>()
            .map_err(|e| e.to_string())?;
        let costs: Vec<f64> = progs.iter().map(|p| machine_cost(p, &spec)).collect();
        let best = costs.iter().copied().fold(f64::INFINITY, f64::min);
        for (p, c) in progs.iter().zip(&costs) {
            records.push(TrainingRecord::new(p, best / c));
        }
    }
    records.truncate(2000);
    records.shuffle(&mut rng);
    let test = records.split_off(1600);
    let model = GbdtModel::train(&records, &TrainParams::default()).map_err(|e| e.to_string())?;
    let m = model.eval(&test, 30).map_err(|e| e.to_string())?;
    let loss = model.loss_history();
    if let Some(w) = loss.windows(2).find(|w| w[1] > w[0]) {
        return Err(format!("training loss rose from {} to {}", w[0], w[1]));
    }
    let t = within(Duration::from_secs(120), start)?;
    let detail = format!(
        "pairwise {:.3}, recall@30 {:.3}, loss {:.4} -> {:.4} over {} rounds; {t}",
        m.pairwise_accuracy,
        m.recall_at_k,
        loss[0],
        loss[loss.len() - 1],
        loss.len() - 1
    );
    if m.pairwise_accuracy >= 0.85 && m.recall_at_k >= 0.5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_6() -> Outcome {
    let tasks = vec![TaskSpec {
        name: "matmul".into(),
        workload: Workload::Matmul { n: 256, m: 256, k: 256 },
        weight: 1.0,
        dnn: String::new(),
    }];
    let run = |mode: SearchMode| -> Result<f64, String> {
        let mut best = Vec::new();
        for seed in 0..5 {
            let s = TuneSettings {
                seed,
                budget: 512 / 16,
                batch_size: 16,
                mode,
                ..TuneSettings::default()
            };
            let out = tune(&tasks, &s).map_err(|e| e.to_string())?;
            best.push(out.best_costs()[0]);
        }
        Ok(median(best))
    };
    let full = run(SearchMode::Full)?;
    let random = run(SearchMode::RandomOnly)?;
    let limited = run(SearchMode::LimitedSpace)?;
    let detail = format!(
        "median best cost: full {full}, random {random} (ratio {:.3}), limited {limited}",
        random / full
    );
    if full * 1.2 <= random && limited > full {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// The gradient straight from its definition, for F1..F4.
#[allow(clippy::too_many_arguments)]
fn oracle_gradient(
    kind: ObjectiveKind,
    hist: &[Vec<f64>],
    w: &[f64],
    dnn: &[usize],
    sig: &[usize],
    flops: &[f64],
    req: &[f64],
    refl: &[f64],
    i: usize,
    a: f64,
    b: f64,
    dt: usize,
    window: usize,
) -> f64 {
    let g = |k: usize| *hist[k].last().unwrap();
    let t = hist[i].len();
    let back = if t > dt {
        (g(i) - hist[i][t - 1 - dt]) / dt as f64
    } else {
        0.0
    };
    let mut fwd = -g(i) / t as f64;
    let v = (0..hist.len())
        .filter(|k| *k != i && sig[*k] == sig[i])
        .map(|k| flops[k] / g(k))
        .fold(0.0, f64::max);
    if v > 0.0 {
        fwd = fwd.min(b * flops[i] / v - g(i));
    }
    let stopped = |k: usize| {
        let n = hist[k].len();
        n > window && hist[k][n - 1] >= hist[k][n - 1 - window]
    };
    let nets: Vec<usize> = {
        let mut d = dnn.to_vec();
        d.sort();
        d.dedup();
        d
    };
    let s = |d: usize| {
        (0..hist.len())
            .filter(|k| dnn[*k] == d)
            .map(|k| w[k] * g(k))
            .sum::<f64>()
    };
    let partial = match kind {
        ObjectiveKind::F1 => w[i],
        ObjectiveKind::F2 => {
            if s(dnn[i]) >= req[dnn[i]] {
                w[i]
            } else {
                0.0
            }
        }
        ObjectiveKind::F3 => {
            let m = nets.len() as f64;
            let geo = nets.iter().map(|d| (refl[*d] / s(*d)).powf(1.0 / m)).product::<f64>();
            geo * w[i] / (m * s(dnn[i]))
        }
        ObjectiveKind::F4 => {
            if stopped(i) {
                0.0
            } else {
                w[i]
            }
        }
    };
    partial * (a * back + (1.0 - a) * fwd)
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let names = ["n0", "n1", "n2"];
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let n = rng.gen_range(1..=5);
        let hist: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut g = rng.gen_range(1.0..100.0);
                (0..rng.gen_range(1..=12))
                    .map(|_| {
                        if rng.gen_bool(0.6) {
                            g *= rng.gen_range(0.5..1.0);
                        }
                        g
                    })
                    .collect()
            })
            .collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(1..=4) as f64).collect();
        let dnn: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let sig: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let flops: Vec<f64> = (0..n).map(|_| rng.gen_range(1e3..1e6)).collect();
        let req: Vec<f64> = (0..3).map(|_| rng.gen_range(10.0..300.0)).collect();
        let refl: Vec<f64> = (0..3).map(|_| rng.gen_range(10.0..300.0)).collect();
        let params = SchedulerParams {
            alpha: if trial % 10 == 0 { 1.0 } else { rng.gen_range(0.0..=1.0) },
            beta: rng.gen_range(0.5..4.0),
            delta_t: rng.gen_range(1..=3),
            eps: 0.0,
            early_stop_window: rng.gen_range(1..=4),
            latency_requirements: (0..3).map(|d| (names[d].to_string(), req[d])).collect(),
            reference_latencies: (0..3).map(|d| (names[d].to_string(), refl[d])).collect(),
        };
        let tasks: Vec<TaskState> = (0..n)
            .map(|k| TaskState {
                name: format!("t{k}"),
                dnn: names[dnn[k]].into(),
                weight: w[k],
                flops: flops[k],
                signature: format!("s{}", sig[k]),
                history: hist[k].clone(),
            })
            .collect();
        let kind = [
            ObjectiveKind::F1,
            ObjectiveKind::F2,
            ObjectiveKind::F3,
            ObjectiveKind::F4,
        ][trial % 4];
        for i in 0..n {
            let got = approx_gradient(kind, &tasks, i, &params).map_err(|e| e.to_string())?;
            let want = oracle_gradient(
                kind,
                &hist,
                &w,
                &dnn,
                &sig,
                &flops,
                &req,
                &refl,
                i,
                params.alpha,
                params.beta,
                params.delta_t,
                params.early_stop_window,
            );
            let err = (got - want).abs() / want.abs().max(1.0);
            worst = worst.max(err);
            if err > 1e-12 {
                return Err(format!("trial {trial} task {i} {kind:?}: {got} vs oracle {want}"));
            }
            let t = hist[i].len();
            if params.alpha == 1.0 && kind == ObjectiveKind::F1 && t > params.delta_t {
                let d = params.delta_t;
                let exact = w[i] * ((hist[i][t - 1] - hist[i][t - 1 - d]) / d as f64);
                if got != exact {
                    return Err(format!(
                        "alpha = 1 gradient {got} is not the backward difference {exact}"
                    ));
                }
            }
        }
    }

    let tasks = vec![
        TaskSpec {
            name: "heavy".into(),
            workload: Workload::Matmul { n: 128, m: 128, k: 640 },
            weight: 1.0,
            dnn: String::new(),
        },
        TaskSpec {
            name: "light".into(),
            workload: Workload::Matmul { n: 128, m: 128, k: 64 },
            weight: 1.0,
            dnn: String::new(),
        },
    ];
    let mut shares = Vec::new();
    for seed in 0..5 {
        let s = TuneSettings {
            seed,
            budget: 42,
            batch_size: 8,
            evolution: EvolutionConfig {
                population: 32,
                generations: 2,
                k: 8,
                ..EvolutionConfig::default()
            },
            ..TuneSettings::default()
        };
        let out = tune(&tasks, &s).map_err(|e| e.to_string())?;
        let ratio = out.naive_costs[0] / out.naive_costs[1];
        if !(9.0..=11.0).contains(&ratio) {
            return Err(format!("naive latency ratio {ratio:.2}, expected about 10"));
        }
        let post: Vec<usize> = out
            .log
            .iter()
            .filter_map(|r| match r {
                LogRecord::Allocation { task, gradients, .. } if !gradients.is_empty() => Some(*task),
                _ => None,
            })
            .collect();
        if post.len() != 40 {
            return Err(format!("{} post-warmup units", post.len()));
        }
        shares.push(post.iter().filter(|t| **t == 0).count() as f64 / 40.0);
    }
    let detail = format!("oracle max rel err {worst:.1e}; heavy-task shares {shares:?}");
    if shares.iter().all(|s| *s >= 0.6) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_8() -> Outcome {
    // Brute-force definitions: a pair counts when its targets differ; an
    // index is in the top k when fewer than k entries beat it, earlier
    // indices winning ties.
    fn brute_pairwise(p: &[f64], y: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..y.len() {
            for j in 0..y.len() {
                if i < j && y[i] != y[j] {
                    den += 1.0;
                    let agree = (p[i] - p[j]) * (y[i] - y[j]);
                    num += if agree > 0.0 {
                        1.0
                    } else if agree == 0.0 {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        if den == 0.0 {
            1.0
        } else {
            num / den
        }
    }
    fn in_top(v: &[f64], i: usize, k: usize) -> bool {
        (0..v.len()).filter(|&j| v[j] > v[i] || (v[j] == v[i] && j < i)).count() < k
    }
    fn brute_recall(p: &[f64], y: &[f64], k: usize) -> f64 {
        (0..y.len()).filter(|&i| in_top(y, i, k) && in_top(p, i, k)).count() as f64 / k as f64
    }
    let mut cases = 0u64;
    let mut check = |p: &[f64], y: &[f64]| -> Result<(), String> {
        if pairwise_accuracy(p, y) != brute_pairwise(p, y) {
            return Err(format!("pairwise differs on p={p:?} y={y:?}"));
        }
        for k in 1..=y.len() {
            if recall_at_k(p, y, k).map_err(|e| e.to_string())? != brute_recall(p, y, k) {
                return Err(format!("recall@{k} differs on p={p:?} y={y:?}"));
            }
        }
        cases += 1;
        Ok(())
    };
    // Every pair of rankings with ties, as values in 0..n, up to size 4.
    for n in 1..=4usize {
        let total = n.pow(2 * n as u32);
        for code in 0..total {
            let mut c = code;
            let mut digits = Vec::with_capacity(2 * n);
            for _ in 0..2 * n {
                digits.push((c % n) as f64);
                c /= n;
            }
            check(&digits[..n], &digits[n..])?;
        }
    }
    // Every strict ordering of predictions against fixed and tied targets.
    for n in 5..=8usize {
        let mut perm: Vec<usize> = (0..n).collect();
        let distinct: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let tied: Vec<f64> = (0..n).map(|i| (i / 2) as f64).collect();
        loop {
            let p: Vec<f64> = perm.iter().map(|v| *v as f64).collect();
            check(&p, &distinct)?;
            check(&p, &tied)?;
            if !next_permutation(&mut perm) {
                break;
            }
        }
    }
    Ok(format!("{cases} test sets agree with brute force"))
}

fn next_permutation(v: &mut [usize]) -> bool {
    let Some(i) = (1..v.len()).rev().find(|&i| v[i - 1] < v[i]) else {
        return false;
    };
    let j = (i..v.len()).rev().find(|&j| v[j] > v[i - 1]).unwrap();
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = Config {
        tasks: vec![TaskSpec {
            name: "matmul".into(),
            workload: Workload::Matmul { n: 256, m: 256, k: 256 },
            weight: 1.0,
            dnn: String::new(),
        }],
        settings: TuneSettings {
            seed: 9,
            budget: 64,
            ..TuneSettings::default()
        },
    };
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    cmd_tune(&cfg, &a).map_err(|e| e.to_string())?;
    cmd_tune(&cfg, &b).map_err(|e| e.to_string())?;
    let (x, y) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    if x != y {
        return Err("logs differ between runs".into());
    }
    let rep = cmd_replay(&a).map_err(|e| e.to_string())?;
    if !rep.is_clean() {
        return Err(format!("replay mismatches: {:?}", rep.problems));
    }
    Ok(format!(
        "{} byte logs identical; replay clean over {} measurements",
        x.len(),
        rep.measurements
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let start = Instant::now();
    let criteria: [Criterion; 9] = [
        ("semantic preservation", criterion_1),
        ("sketch enumeration", criterion_2),
        ("tiling shape", criterion_3),
        ("mutation invariants", criterion_4),
        ("cost model", criterion_5),
        ("search effectiveness", criterion_6),
        ("scheduler math", criterion_7),
        ("metric identities", criterion_8),
        ("reproducibility", criterion_9),
    ];
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let res = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("criterion {}: PASS  {name} [{secs:.1}s] {d}", n + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} [{secs:.1}s] {d}", n + 1);
            }
        }
    }
    let total = start.elapsed().as_secs_f64();
    println!("acceptance: {} of 9 passed in {total:.1}s", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
