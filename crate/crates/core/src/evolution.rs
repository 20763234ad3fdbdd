//! Evolutionary fine-tuning of sampled programs under a cost model.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::{change_compute_location, divisors, fuse_steps, parallel_candidates, rewrite_constant_layout};
use crate::cost_model::CostModel;
use crate::dag::ComputeDag;
use crate::error::{Error, Result};
use crate::ir::{validate, Annotation, Attach, IterKind, Program, RewriteStep, Stage};

/// Fitness values below this are raised to it before selection.
pub const FITNESS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    pub population: usize,
    pub generations: usize,
    pub mutation_prob: f64,
    pub crossover_prob: f64,
    /// Relative weights of tile-size, parallel, pragma and compute-location
    /// mutations.
    pub mutation_weights: [f64; 4],
    pub k: usize,
    /// Share of fresh random samples in the initial population.
    pub eps_random: f64,
    pub unroll_values: Vec<u64>,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            population: 128,
            generations: 4,
            mutation_prob: 0.85,
            crossover_prob: 0.15,
            mutation_weights: [1.0; 4],
            k: 16,
            eps_random: 0.05,
            unroll_values: vec![0, 16, 64, 512],
            seed: 0,
        }
    }
}

impl EvolutionConfig {
    pub fn check(&self) -> Result<()> {
        if (self.mutation_prob + self.crossover_prob - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "mutation and crossover probabilities must sum to 1".into(),
            ));
        }
        if self.population == 0 || self.k == 0 || self.k > self.population {
            return Err(Error::Config("need 1 ≤ k ≤ population".into()));
        }
        if self.mutation_weights.iter().any(|w| *w < 0.0) || self.mutation_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(
                "mutation weights must be nonnegative and not all zero".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.eps_random) {
            return Err(Error::Config("eps_random must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub program: Program,
    pub fitness: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NotApplicable;

#[derive(Clone, Debug, PartialEq)]
pub enum Crossed {
    Child(Program),
    Infeasible(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    TileSize,
    Parallel,
    Pragma,
    ComputeLocation,
}

pub const MUTATIONS: [Mutation; 4] = [
    Mutation::TileSize,
    Mutation::Parallel,
    Mutation::Pragma,
    Mutation::ComputeLocation,
];

/// Index drawn with probability proportional to floored fitness, or
/// uniformly when no fitness is positive. The flag reports the fallback.
pub fn selection_index(fitness: &[f64], rng: &mut impl Rng) -> (usize, bool) {
    assert!(!fitness.is_empty(), "selection from an empty population");
    if !fitness.iter().any(|f| *f > 0.0) {
        return (rng.gen_range(0..fitness.len()), true);
    }
    let w: Vec<f64> = fitness.iter().map(|f| f.max(FITNESS_FLOOR)).collect();
    let d = WeightedIndex::new(&w).expect("positive weights");
    (d.sample(rng), false)
}

pub fn select_parent<'a>(population: &'a [Candidate], rng: &mut impl Rng) -> &'a Candidate {
    let f: Vec<f64> = population.iter().map(|c| c.fitness).collect();
    &population[selection_index(&f, rng).0]
}

fn finish(p: Program) -> std::result::Result<Program, String> {
    let p = rewrite_constant_layout(&p).map_err(|e| e.to_string())?;
    validate(&p).map_err(|v| v.join("; "))?;
    Ok(p)
}

/// Replays a history. Steps after the first Simplify only refine a fixed
/// structure, so any that no longer apply are dropped. Layout rewrites
/// are re-derived at the end.
pub fn replay_lenient(dag: Arc<ComputeDag>, steps: &[RewriteStep]) -> Result<Program> {
    let mut p = Program::naive(dag);
    let mut refining = false;
    for s in steps {
        match s {
            RewriteStep::LayoutRewrite { .. } => continue,
            RewriteStep::Simplify => refining = true,
            _ => {}
        }
        match p.apply_step(s) {
            Ok(q) => p = q,
            Err(_) if refining => {}
            Err(e) => return Err(e),
        }
    }
    rewrite_constant_layout(&p)
}

fn split_extent(p: &Program, step: &RewriteStep) -> Option<u64> {
    let RewriteStep::Split { stage, loop_name, .. } = step else {
        return None;
    };
    p.stage(stage)?.var(loop_name).map(|v| v.extent)
}

/// Moves a divisor between two levels of one tiled iterator.
pub fn mutate_tile_size(p: &Program, rng: &mut impl Rng) -> std::result::Result<Program, NotApplicable> {
    let structure_end = p
        .history
        .iter()
        .position(|s| matches!(s, RewriteStep::Simplify))
        .unwrap_or(p.history.len());
    let movable: Vec<usize> = (0..structure_end)
        .filter(|&i| match &p.history[i] {
            RewriteStep::Split { factors, .. } => {
                factors.iter().all(|f| f.is_some()) && split_extent(p, &p.history[i]).is_some_and(|e| e > 1)
            }
            _ => false,
        })
        .collect();
    if movable.is_empty() {
        return Err(NotApplicable);
    }
    for _ in 0..8 {
        let i = *movable.choose(rng).unwrap();
        let RewriteStep::Split {
            stage,
            loop_name,
            factors,
        } = &p.history[i]
        else {
            unreachable!()
        };
        let extent = split_extent(p, &p.history[i]).unwrap();
        let inner: Vec<u64> = factors.iter().map(|f| f.unwrap()).collect();
        let mut levels = vec![extent / inner.iter().product::<u64>()];
        levels.extend(inner);
        let (from, to, f) = match move_factor(&levels, rng) {
            Some(m) => m,
            None => continue,
        };
        levels[from] /= f;
        levels[to] *= f;
        let mut h = p.history.clone();
        h[i] = RewriteStep::Split {
            stage: stage.clone(),
            loop_name: loop_name.clone(),
            factors: levels[1..].iter().map(|x| Some(*x)).collect(),
        };
        if let Ok(q) = replay_lenient(p.dag.clone(), &h) {
            if validate(&q).is_ok() {
                return Ok(q);
            }
        }
    }
    Err(NotApplicable)
}

/// Picks a source level, a divisor f > 1 of it and a different target.
pub fn move_factor(levels: &[u64], rng: &mut impl Rng) -> Option<(usize, usize, u64)> {
    if levels.len() < 2 {
        return None;
    }
    let src: Vec<usize> = (0..levels.len()).filter(|&i| levels[i] > 1).collect();
    let from = *src.choose(rng)?;
    let ds: Vec<u64> = divisors(levels[from]).into_iter().filter(|d| *d > 1).collect();
    let f = *ds.choose(rng)?;
    let to = loop {
        let t = rng.gen_range(0..levels.len());
        if t != from {
            break t;
        }
    };
    Some((from, to, f))
}

/// Re-derives one root stage's parallel loop with a different
/// granularity: the first k leading loops fused, optionally split so that
/// only an outer part runs in parallel.
pub fn mutate_parallel(p: &Program, rng: &mut impl Rng) -> std::result::Result<Program, NotApplicable> {
    let mut stages: Vec<&Stage> = p.stages.iter().filter(|s| s.attach == Attach::Root).collect();
    stages.shuffle(rng);
    for s in stages {
        let current = s
            .visible_leaves()
            .into_iter()
            .find(|l| l.annotation == Annotation::Parallel)
            .map(|l| l.extent)
            .unwrap_or(1);
        let refine_from = p
            .history
            .iter()
            .position(|h| matches!(h, RewriteStep::Simplify))
            .unwrap_or(p.history.len());
        let drop = |i: usize, h: &RewriteStep| match h {
            RewriteStep::Annotate {
                stage,
                annotation: Annotation::Parallel,
                ..
            } => stage == &s.name,
            RewriteStep::FuseLoops { stage, .. } | RewriteStep::Split { stage, .. } => {
                i > refine_from && stage == &s.name
            }
            _ => false,
        };
        let kept: Vec<RewriteStep> = p
            .history
            .iter()
            .enumerate()
            .filter(|(i, h)| !drop(*i, h))
            .map(|(_, h)| h.clone())
            .collect();
        let Ok(base) = replay_lenient(p.dag.clone(), &kept) else {
            continue;
        };
        let bs = base.stage(&s.name).unwrap();
        let cands: Vec<String> = parallel_candidates(&base, bs)
            .into_iter()
            .take_while(|l| bs.var(l).is_some_and(|v| v.annotation == Annotation::None))
            .collect();
        let mut options = Vec::new();
        let mut extent = 1;
        for k in 1..=cands.len() {
            extent *= bs.var(&cands[k - 1]).unwrap().extent;
            for e in divisors(extent).into_iter().filter(|e| *e > 1 && *e != current) {
                options.push((k, extent, e));
            }
        }
        let Some(&(k, extent, e)) = options.choose(rng) else {
            continue;
        };
        let (mut steps, fused) = fuse_steps(&s.name, &cands[..k]);
        let target = if e < extent {
            steps.push(RewriteStep::Split {
                stage: s.name.clone(),
                loop_name: fused.clone(),
                factors: vec![Some(extent / e)],
            });
            format!("{fused}.0")
        } else {
            fused
        };
        steps.push(RewriteStep::Annotate {
            stage: s.name.clone(),
            loop_name: target,
            annotation: Annotation::Parallel,
        });
        let mut h = base.history.clone();
        h.retain(|x| !matches!(x, RewriteStep::LayoutRewrite { .. }));
        h.extend(steps);
        if let Ok(q) = replay_lenient(p.dag.clone(), &h) {
            if validate(&q).is_ok() {
                return Ok(q);
            }
        }
    }
    Err(NotApplicable)
}

/// Gives one root stage a different unroll limit from `values`.
pub fn mutate_pragma(p: &Program, values: &[u64], rng: &mut impl Rng) -> std::result::Result<Program, NotApplicable> {
    let roots: Vec<&str> = p
        .stages
        .iter()
        .filter(|s| s.attach == Attach::Root)
        .map(|s| s.name.as_str())
        .collect();
    let stage = *roots.choose(rng).ok_or(NotApplicable)?;
    let cur = p.stage(stage).unwrap().auto_unroll_max_step;
    let others: Vec<u64> = values.iter().copied().filter(|v| *v != cur).collect();
    let v = *others.choose(rng).ok_or(NotApplicable)?;
    let mut h: Vec<RewriteStep> = p
        .history
        .iter()
        .filter(|s| !matches!(s, RewriteStep::SetPragma { stage: st, .. } if st == stage))
        .cloned()
        .collect();
    h.push(RewriteStep::SetPragma {
        stage: stage.to_string(),
        auto_unroll_max_step: v,
    });
    Program::replay(p.dag.clone(), &h).map_err(|_| NotApplicable)
}

pub fn mutate_compute_location(p: &Program, rng: &mut impl Rng) -> std::result::Result<Program, NotApplicable> {
    let q = change_compute_location(p, rng).ok_or(NotApplicable)?;
    let q = replay_lenient(q.dag.clone(), &q.history).map_err(|_| NotApplicable)?;
    validate(&q).map_err(|_| NotApplicable)?;
    Ok(q)
}

pub fn mutate(
    p: &Program,
    kind: Mutation,
    cfg: &EvolutionConfig,
    rng: &mut impl Rng,
) -> std::result::Result<Program, NotApplicable> {
    match kind {
        Mutation::TileSize => mutate_tile_size(p, rng),
        Mutation::Parallel => mutate_parallel(p, rng),
        Mutation::Pragma => mutate_pragma(p, &cfg.unroll_values, rng),
        Mutation::ComputeLocation => mutate_compute_location(p, rng),
    }
}

/// The DAG node a stage name comes from.
fn node_of(dag: &ComputeDag, stage: &str) -> String {
    if dag.node(stage).is_some() {
        return stage.to_string();
    }
    for suffix in [".local", ".rf"] {
        if let Some(base) = stage.strip_suffix(suffix) {
            return node_of(dag, base);
        }
    }
    stage.to_string()
}

/// Merge class of a step: creation, tiling and attachment steps come
/// before the simplification pass, refinements after it.
fn merge_class(step: &RewriteStep, refining: bool) -> usize {
    if refining {
        return 3;
    }
    match step {
        RewriteStep::CacheWrite { .. } | RewriteStep::Rfactor { .. } | RewriteStep::ComputeInline { .. } => 0,
        RewriteStep::ComputeAt { .. } | RewriteStep::ComputeRoot { .. } => 2,
        _ => 1,
    }
}

fn classify(p: &Program) -> Vec<(usize, String, RewriteStep)> {
    let mut refining = false;
    let mut out = Vec::new();
    for s in &p.history {
        match s {
            RewriteStep::Simplify => refining = true,
            RewriteStep::LayoutRewrite { .. } => {}
            _ => {
                let node = node_of(&p.dag, s.stage().unwrap_or_default());
                out.push((merge_class(s, refining), node, s.clone()));
            }
        }
    }
    out
}

/// Applies a ComputeAt, falling back to the deepest space loop of the
/// target when the named loop is gone.
fn apply_attach(p: &Program, step: &RewriteStep) -> Result<Program> {
    if let RewriteStep::ComputeAt {
        stage,
        target,
        loop_name,
    } = step
    {
        let t = p.stage(target).ok_or_else(|| Error::UnknownStage(target.clone()))?;
        if t.leaf_position(loop_name).is_none() {
            let deepest = t
                .order
                .iter()
                .rev()
                .find(|n| t.var(n).map(|v| v.kind) == Some(IterKind::Space))
                .ok_or_else(|| Error::IllegalStep(format!("`{target}` has no space loop")))?;
            return p.apply_step(&RewriteStep::ComputeAt {
                stage: stage.clone(),
                target: target.clone(),
                loop_name: deepest.clone(),
            });
        }
    }
    p.apply_step(step)
}

/// Node-wise crossover: each DAG node takes its steps from one parent.
pub fn crossover(a: &Program, b: &Program, rng: &mut impl Rng) -> Result<Crossed> {
    if a.dag.id != b.dag.id {
        return Err(Error::Contract(format!(
            "crossover of programs for `{}` and `{}`",
            a.dag.id, b.dag.id
        )));
    }
    let dag = a.dag.clone();
    let mut nodes = dag.topological_order()?;
    nodes.reverse();
    let pick: BTreeMap<&str, bool> = nodes.iter().map(|n| (n.as_str(), rng.gen_bool(0.5))).collect();
    let (ca, cb) = (classify(a), classify(b));
    let simplify = a.history.contains(&RewriteStep::Simplify) || b.history.contains(&RewriteStep::Simplify);
    let mut p = Program::naive(dag.clone());
    for class in 0..4 {
        if class == 3 && simplify {
            p = p.simplify();
        }
        for n in &nodes {
            let src = if pick[n.as_str()] { &ca } else { &cb };
            for (c, node, step) in src {
                if *c != class || node != n {
                    continue;
                }
                match apply_attach(&p, step) {
                    // A refinement that does not fit the merged structure is dropped.
                    Ok(q) if class == 3 => {
                        if validate(&q).is_ok() {
                            p = q;
                        }
                    }
                    Ok(q) => p = q,
                    Err(_) if class == 3 => {}
                    Err(e) => return Ok(Crossed::Infeasible(e.to_string())),
                }
            }
        }
    }
    Ok(match finish(p) {
        Ok(q) => Crossed::Child(q),
        Err(e) => Crossed::Infeasible(e),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_fitness: f64,
    pub median_fitness: f64,
    pub crossovers: usize,
    pub infeasible: usize,
    pub uniform_fallbacks: usize,
}

#[derive(Clone, Debug)]
pub struct EvolveOutput {
    pub best: Vec<Candidate>,
    pub stats: Vec<GenerationStats>,
}

/// Rng for one draw, fixed by seed, generation and slot.
pub fn draw_rng(seed: u64, generation: usize, slot: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((generation as u64) << 32) | slot as u64);
    r
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    s.get(s.len() / 2).copied().unwrap_or(0.0)
}

/// Runs the search and returns the best `k` programs ever scored, leaving
/// out those whose fingerprint is in `exclude`.
pub fn evolve(
    initial: &[Program],
    model: &dyn CostModel,
    cfg: &EvolutionConfig,
    exclude: &BTreeSet<u64>,
) -> Result<EvolveOutput> {
    cfg.check()?;
    if initial.is_empty() {
        return Err(Error::Contract("evolution needs a nonempty initial population".into()));
    }
    let mut seen: BTreeMap<u64, Candidate> = BTreeMap::new();
    let record = |c: &Candidate, seen: &mut BTreeMap<u64, Candidate>| {
        let fp = c.program.fingerprint();
        if !exclude.contains(&fp) {
            seen.entry(fp).or_insert_with(|| c.clone());
        }
    };
    let scores = model.predict_batch(initial);
    let mut pop: Vec<Candidate> = initial
        .iter()
        .zip(scores)
        .map(|(p, f)| Candidate {
            program: p.clone(),
            fitness: f,
        })
        .collect();
    for c in &pop {
        record(c, &mut seen);
    }
    let weights = WeightedIndex::new(cfg.mutation_weights).expect("checked weights");
    let mut stats = Vec::new();
    for generation in 0..cfg.generations {
        let fitness: Vec<f64> = pop.iter().map(|c| c.fitness).collect();
        let mut next = Vec::with_capacity(cfg.population);
        let (mut crossovers, mut infeasible, mut fallbacks) = (0, 0, 0);
        for slot in 0..cfg.population {
            let mut rng = draw_rng(cfg.seed, generation, slot);
            let mut pick = |rng: &mut ChaCha8Rng| {
                let (i, uniform) = selection_index(&fitness, rng);
                fallbacks += usize::from(uniform);
                i
            };
            if pop.len() > 1 && rng.gen_bool(cfg.crossover_prob) {
                crossovers += 1;
                let (i, j) = (pick(&mut rng), pick(&mut rng));
                match crossover(&pop[i].program, &pop[j].program, &mut rng)? {
                    Crossed::Child(c) => {
                        next.push(c);
                        continue;
                    }
                    Crossed::Infeasible(_) => infeasible += 1,
                }
            }
            let parent = &pop[pick(&mut rng)].program;
            let mut child = None;
            for _ in 0..8 {
                let kind = MUTATIONS[weights.sample(&mut rng)];
                if let Ok(c) = mutate(parent, kind, cfg, &mut rng) {
                    child = Some(c);
                    break;
                }
            }
            next.push(child.unwrap_or_else(|| parent.clone()));
        }
        let scores = model.predict_batch(&next);
        pop = next
            .into_iter()
            .zip(scores)
            .map(|(program, fitness)| Candidate { program, fitness })
            .collect();
        for c in &pop {
            record(c, &mut seen);
        }
        let f: Vec<f64> = pop.iter().map(|c| c.fitness).collect();
        stats.push(GenerationStats {
            generation,
            best_fitness: f.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            median_fitness: median(&f),
            crossovers,
            infeasible,
            uniform_fallbacks: fallbacks,
        });
    }
    let mut best: Vec<(u64, Candidate)> = seen.into_iter().collect();
    best.sort_by(|x, y| y.1.fitness.total_cmp(&x.1.fitness).then(x.0.cmp(&y.0)));
    Ok(EvolveOutput {
        best: best.into_iter().take(cfg.k).map(|(_, c)| c).collect(),
        stats,
    })
}
