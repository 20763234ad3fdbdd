//! The tuning loop and its JSON-lines log.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::{sample_program, AnnotationPolicy};
use crate::cost_model::{CostModel, GbdtModel, TrainingRecord};
use crate::dag::ComputeDag;
use crate::error::{Error, Result};
use crate::evolution::{evolve, EvolutionConfig, GenerationStats, Mutation, MUTATIONS};
use crate::gbdt::TrainParams;
use crate::ir::{Program, RewriteStep};
use crate::machine::{MachineSpec, MeasureLimits, MeasureStatus, Measurer};
use crate::scheduler::{next_task, objective_value, ObjectiveKind, SchedulerParams, TaskState};
use crate::sketch::{generate_sketches, Sketch, SketchPolicy};
use crate::workloads::Workload;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Sketches, sampling, evolution and the learned model.
    Full,
    /// Fresh random samples only.
    RandomOnly,
    /// Two space tiling levels and fixed compute locations.
    LimitedSpace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub workload: Workload,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default)]
    pub dnn: String,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneSettings {
    pub seed: u64,
    /// Tuning units; each measures one batch.
    pub budget: usize,
    pub batch_size: usize,
    pub mode: SearchMode,
    pub objective: ObjectiveKind,
    pub scheduler: SchedulerParams,
    pub evolution: EvolutionConfig,
    pub annotation: AnnotationPolicy,
    pub train: TrainParams,
    pub machine: MachineSpec,
    pub limits: MeasureLimits,
}

impl Default for TuneSettings {
    fn default() -> Self {
        TuneSettings {
            seed: 0,
            budget: 32,
            batch_size: 16,
            mode: SearchMode::Full,
            objective: ObjectiveKind::F1,
            scheduler: SchedulerParams::default(),
            evolution: EvolutionConfig::default(),
            annotation: AnnotationPolicy::default(),
            train: TrainParams::default(),
            machine: MachineSpec::default(),
            limits: MeasureLimits::default(),
        }
    }
}

impl TuneSettings {
    pub fn check(&self, tasks: &[TaskSpec]) -> Result<()> {
        if tasks.is_empty() {
            return Err(Error::Config("no tasks to tune".into()));
        }
        if self.budget < tasks.len() {
            return Err(Error::Config(format!(
                "budget of {} units cannot cover {} tasks",
                self.budget,
                tasks.len()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if tasks.iter().any(|t| t.weight < 1.0) {
            return Err(Error::Config("task weights must be at least 1".into()));
        }
        self.evolution.check()?;
        self.annotation.check()?;
        self.machine.check()?;
        let dnns: Vec<&str> = tasks.iter().map(|t| t.dnn.as_str()).collect();
        self.scheduler.check(self.objective, &dnns)
    }

    pub fn sketch_policy(&self) -> SketchPolicy {
        match self.mode {
            SearchMode::LimitedSpace => SketchPolicy {
                structure: "SRS".into(),
                ..SketchPolicy::default()
            },
            _ => SketchPolicy::default(),
        }
    }

    fn annotation_policy(&self) -> AnnotationPolicy {
        let mut a = self.annotation.clone();
        if self.mode == SearchMode::LimitedSpace {
            a.allow_compute_location = false;
        }
        a
    }

    fn evolution_config(&self, unit: usize) -> EvolutionConfig {
        let mut e = self.evolution.clone();
        e.seed = mix(self.seed, unit as u64);
        e.k = e.k.max(self.batch_size).min(e.population.max(self.batch_size));
        e.population = e.population.max(e.k);
        if self.mode == SearchMode::LimitedSpace {
            let at = MUTATIONS.iter().position(|m| *m == Mutation::ComputeLocation).unwrap();
            e.mutation_weights[at] = 0.0;
        }
        e
    }
}

/// A deterministic 64-bit mix of two values.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub const LOG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskHeader {
    pub name: String,
    pub dag_id: String,
    pub workload: Workload,
    pub weight: f64,
    pub dnn: String,
    pub flops: f64,
    pub signature: String,
    pub sketches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum LogRecord {
    Header {
        version: u32,
        settings: TuneSettings,
        tasks: Vec<TaskHeader>,
    },
    Measure {
        version: u32,
        seed: u64,
        /// 0 for the naive baseline, else the tuning unit.
        unit: usize,
        task: usize,
        dag_id: String,
        history: Vec<RewriteStep>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        predicted: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        cost: Option<f64>,
        status: MeasureStatus,
        throughput: f64,
        /// Units per task when the program was measured.
        allocations: Vec<usize>,
    },
    Allocation {
        unit: usize,
        task: usize,
        gradients: Vec<f64>,
        explored: bool,
    },
    Unit {
        unit: usize,
        task: usize,
        best_cost: f64,
        objective: f64,
        evolution: Vec<GenerationStats>,
    },
    Summary {
        naive_costs: Vec<f64>,
        best_costs: Vec<f64>,
        units: Vec<usize>,
    },
}

pub struct TuneOutcome {
    pub log: Vec<LogRecord>,
    pub tasks: Vec<TaskState>,
    pub best: Vec<Program>,
    pub naive_costs: Vec<f64>,
}

impl TuneOutcome {
    pub fn best_costs(&self) -> Vec<f64> {
        self.tasks
            .iter()
            .map(|t| t.latency().unwrap_or(f64::INFINITY))
            .collect()
    }
}

/// Rule names that fire anywhere in a DAG's sketch derivations.
pub fn rule_signature(sketches: &[Sketch]) -> String {
    let names: BTreeSet<&str> = sketches
        .iter()
        .flat_map(|s| s.trace.iter().map(|r| r.as_str()))
        .collect();
    names.into_iter().collect::<Vec<_>>().join(",")
}

struct Measured {
    dag_id: String,
    cost: Option<f64>,
    record: TrainingRecord,
}

struct TaskRun {
    dag: Arc<ComputeDag>,
    sketches: Vec<Sketch>,
    measurer: Measurer,
    seen: BTreeSet<u64>,
    /// Valid programs by cost, for seeding evolution.
    good: Vec<(f64, Program)>,
    best: Program,
}

fn fresh_samples(
    run: &TaskRun,
    n: usize,
    policy: &AnnotationPolicy,
    rng: &mut ChaCha8Rng,
    avoid_seen: bool,
) -> Result<Vec<Program>> {
    let mut out = Vec::new();
    let mut fps = BTreeSet::new();
    for _ in 0..n * 8 {
        if out.len() == n {
            break;
        }
        let sk = run.sketches.choose(rng).expect("at least one sketch");
        let p = sample_program(&sk.program, policy, rng)?;
        let fp = p.fingerprint();
        if (avoid_seen && run.seen.contains(&fp)) || !fps.insert(fp) {
            continue;
        }
        out.push(p);
    }
    Ok(out)
}

fn retrain(measured: &[Measured], params: &TrainParams) -> Option<GbdtModel> {
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for m in measured {
        if let Some(c) = m.cost {
            let e = best.entry(&m.dag_id).or_insert(c);
            *e = e.min(c);
        }
    }
    let recs: Vec<TrainingRecord> = measured
        .iter()
        .map(|m| {
            let mut r = m.record.clone();
            r.throughput = m.cost.map(|c| best[m.dag_id.as_str()] / c).unwrap_or(0.0);
            r
        })
        .collect();
    GbdtModel::train(&recs, params).ok()
}

pub fn tune(specs: &[TaskSpec], s: &TuneSettings) -> Result<TuneOutcome> {
    s.check(specs)?;
    let sketch_policy = s.sketch_policy();
    let annotation = s.annotation_policy();
    let mut log = Vec::new();
    let mut runs = Vec::new();
    let mut tasks = Vec::new();
    let mut headers = Vec::new();
    for spec in specs {
        spec.workload
            .check()
            .map_err(|e| Error::Config(format!("task `{}`: {e}", spec.name)))?;
        let dag = Arc::new(spec.workload.build());
        let sketches = generate_sketches(&dag, &[], &sketch_policy)
            .map_err(|e| Error::Config(format!("sketch generation failed for task `{}`: {e}", spec.name)))?;
        if sketches.is_empty() {
            return Err(Error::Config(format!("task `{}` has no sketches", spec.name)));
        }
        let signature = rule_signature(&sketches);
        headers.push(TaskHeader {
            name: spec.name.clone(),
            dag_id: dag.id.clone(),
            workload: spec.workload.clone(),
            weight: spec.weight,
            dnn: spec.dnn.clone(),
            flops: dag.flop_count(),
            signature: signature.clone(),
            sketches: sketches.len(),
        });
        tasks.push(TaskState {
            name: spec.name.clone(),
            dnn: spec.dnn.clone(),
            weight: spec.weight,
            flops: dag.flop_count(),
            signature,
            history: Vec::new(),
        });
        runs.push(TaskRun {
            measurer: Measurer::new(dag.clone(), s.machine.clone(), s.limits.clone()),
            best: Program::naive(dag.clone()),
            dag,
            sketches,
            seen: BTreeSet::new(),
            good: Vec::new(),
        });
    }
    log.push(LogRecord::Header {
        version: LOG_VERSION,
        settings: s.clone(),
        tasks: headers,
    });

    let mut measured: Vec<Measured> = Vec::new();
    let mut naive_costs = Vec::new();
    let mut best_cost = Vec::new();
    for (i, run) in runs.iter_mut().enumerate() {
        let naive = Program::naive(run.dag.clone());
        let r = run.measurer.measure_batch(std::slice::from_ref(&naive)).remove(0);
        let c = r
            .cost
            .filter(|_| r.is_valid())
            .ok_or_else(|| Error::Config(format!("naive program of task `{}` is not measurable", specs[i].name)))?;
        run.seen.insert(naive.fingerprint());
        run.good.push((c, naive.clone()));
        measured.push(Measured {
            dag_id: run.dag.id.clone(),
            cost: Some(c),
            record: TrainingRecord::new(&naive, 1.0),
        });
        log.push(LogRecord::Measure {
            version: LOG_VERSION,
            seed: s.seed,
            unit: 0,
            task: i,
            dag_id: run.dag.id.clone(),
            history: naive.history.clone(),
            predicted: None,
            cost: Some(c),
            status: r.status,
            throughput: r.throughput,
            allocations: vec![0; specs.len()],
        });
        naive_costs.push(c);
        best_cost.push(c);
    }

    let mut model = GbdtModel::default();
    let mut sched_rng = ChaCha8Rng::seed_from_u64(mix(s.seed, u64::MAX));
    for unit in 1..=s.budget {
        let d = next_task(s.objective, &tasks, &s.scheduler, &mut sched_rng)?;
        let i = d.task;
        log.push(LogRecord::Allocation {
            unit,
            task: i,
            gradients: d.gradients,
            explored: d.explored,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(mix(s.seed, unit as u64));
        let run = &mut runs[i];
        let (batch, predicted, stats) = match s.mode {
            SearchMode::RandomOnly => {
                let b = fresh_samples(run, s.batch_size, &annotation, &mut rng, true)?;
                let n = b.len();
                (b, vec![None; n], Vec::new())
            }
            SearchMode::Full | SearchMode::LimitedSpace => {
                let cfg = s.evolution_config(unit);
                let pop = cfg.population;
                let n_best = run
                    .good
                    .len()
                    .min(((1.0 - cfg.eps_random) * pop as f64 / 2.0).floor() as usize);
                let mut init: Vec<Program> = run.good[..n_best].iter().map(|(_, p)| p.clone()).collect();
                init.extend(fresh_samples(run, pop - n_best, &annotation, &mut rng, false)?);
                let out = evolve(&init, &model, &cfg, &run.seen)?;
                let mut b: Vec<Program> = Vec::new();
                let mut pred = Vec::new();
                for c in out.best.into_iter().take(s.batch_size) {
                    pred.push(Some(c.fitness));
                    b.push(c.program);
                }
                if b.len() < s.batch_size {
                    let extra = fresh_samples(run, s.batch_size - b.len(), &annotation, &mut rng, true)?;
                    for p in extra {
                        if b.iter().all(|q| q.fingerprint() != p.fingerprint()) {
                            pred.push(Some(model.predict(&p)));
                            b.push(p);
                        }
                    }
                }
                (b, pred, out.stats)
            }
        };
        let results = run.measurer.measure_batch(&batch);
        let allocations: Vec<usize> = tasks
            .iter()
            .enumerate()
            .map(|(j, t)| t.units() + usize::from(j == i))
            .collect();
        for ((p, r), pred) in batch.iter().zip(&results).zip(predicted) {
            run.seen.insert(p.fingerprint());
            let cost = r.cost.filter(|_| r.is_valid());
            if let Some(c) = cost {
                run.good.push((c, p.clone()));
                if c < best_cost[i] {
                    best_cost[i] = c;
                    run.best = p.clone();
                }
            }
            measured.push(Measured {
                dag_id: run.dag.id.clone(),
                cost,
                record: TrainingRecord::new(p, 0.0),
            });
            log.push(LogRecord::Measure {
                version: LOG_VERSION,
                seed: s.seed,
                unit,
                task: i,
                dag_id: run.dag.id.clone(),
                history: p.history.clone(),
                predicted: pred,
                cost: r.cost,
                status: r.status,
                throughput: r.throughput,
                allocations: allocations.clone(),
            });
        }
        run.good.sort_by(|a, b| a.0.total_cmp(&b.0));
        tasks[i].history.push(best_cost[i]);
        if s.mode != SearchMode::RandomOnly {
            if let Some(m) = retrain(&measured, &s.train) {
                model = m;
            }
        }
        let objective = if tasks.iter().all(|t| !t.history.is_empty()) {
            objective_value(s.objective, &tasks, &s.scheduler)?
        } else {
            f64::NAN
        };
        log.push(LogRecord::Unit {
            unit,
            task: i,
            best_cost: best_cost[i],
            objective: if objective.is_nan() { 0.0 } else { objective },
            evolution: stats,
        });
    }
    log.push(LogRecord::Summary {
        naive_costs: naive_costs.clone(),
        best_costs: best_cost.clone(),
        units: tasks.iter().map(|t| t.units()).collect(),
    });
    Ok(TuneOutcome {
        log,
        tasks,
        best: runs.into_iter().map(|r| r.best).collect(),
        naive_costs,
    })
}

pub fn write_log(log: &[LogRecord]) -> String {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r).expect("log records serialize"));
        out.push('\n');
    }
    out
}

pub fn read_log(text: &str) -> Result<Vec<LogRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Parse(format!("log line {}: {e}", n + 1))))
        .collect()
}

pub fn log_header(log: &[LogRecord]) -> Result<(&TuneSettings, &[TaskHeader])> {
    match log.first() {
        Some(LogRecord::Header {
            version,
            settings,
            tasks,
        }) => {
            check_version(*version)?;
            Ok((settings, tasks))
        }
        _ => Err(Error::Parse("log does not start with a header".into())),
    }
}

fn check_version(v: u32) -> Result<()> {
    if v != LOG_VERSION {
        return Err(Error::Parse(format!("log schema version {v}, expected {LOG_VERSION}")));
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ReplayReport {
    pub measurements: usize,
    pub units: usize,
    pub problems: Vec<String>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Rebuilds every logged program, measures it again and re-derives each
/// task's best-latency history.
pub fn replay_log(log: &[LogRecord]) -> Result<ReplayReport> {
    let (settings, headers) = log_header(log)?;
    let dags: Vec<Arc<ComputeDag>> = headers.iter().map(|h| Arc::new(h.workload.build())).collect();
    let mut measurers: Vec<Measurer> = dags
        .iter()
        .map(|d| Measurer::new(d.clone(), settings.machine.clone(), settings.limits.clone()))
        .collect();
    let mut report = ReplayReport::default();
    let mut unit_costs: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut best: Vec<Option<f64>> = vec![None; headers.len()];
    for (n, r) in log.iter().enumerate() {
        let line = n + 1;
        match r {
            LogRecord::Header { .. } if n > 0 => report.problems.push(format!("line {line}: second header")),
            LogRecord::Measure {
                version,
                unit,
                task,
                dag_id,
                history,
                cost,
                status,
                ..
            } => {
                check_version(*version)?;
                report.measurements += 1;
                let Some(dag) = dags.get(*task) else {
                    report.problems.push(format!("line {line}: unknown task {task}"));
                    continue;
                };
                if &dag.id != dag_id {
                    report
                        .problems
                        .push(format!("line {line}: dag `{dag_id}` does not match task {task}"));
                    continue;
                }
                let (again_cost, again_status) = match Program::replay(dag.clone(), history) {
                    Ok(p) => {
                        let m = measurers[*task].measure_batch(std::slice::from_ref(&p)).remove(0);
                        (m.cost, m.status)
                    }
                    Err(_) => (None, MeasureStatus::Invalid),
                };
                if again_status != *status {
                    report
                        .problems
                        .push(format!("line {line}: status {again_status:?} but logged {status:?}"));
                } else if again_cost != *cost {
                    report
                        .problems
                        .push(format!("line {line}: cost {again_cost:?} but logged {cost:?}"));
                }
                if *status == MeasureStatus::Valid {
                    let c = cost.unwrap_or(f64::INFINITY);
                    if *unit == 0 {
                        best[*task] = Some(c);
                    } else {
                        unit_costs.entry(*unit).or_default().push(c);
                    }
                }
            }
            LogRecord::Unit {
                unit, task, best_cost, ..
            } => {
                report.units += 1;
                let mut b = best[*task].unwrap_or(f64::INFINITY);
                for c in unit_costs.remove(unit).unwrap_or_default() {
                    b = b.min(c);
                }
                best[*task] = Some(b);
                if b != *best_cost {
                    report.problems.push(format!(
                        "line {line}: unit {unit} best cost {best_cost} but replay gives {b}"
                    ));
                }
            }
            _ => {}
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub task: usize,
    pub best_cost: f64,
    /// Missing until every task has its baseline.
    pub objective: Option<f64>,
}

/// One row per measured program. Each task's history starts with its
/// baseline cost and gains one entry per unit, updated as that unit's
/// programs arrive; the objective is evaluated on those histories.
pub fn curve_rows(log: &[LogRecord]) -> Result<Vec<CurveRow>> {
    let (settings, headers) = log_header(log)?;
    let mut tasks: Vec<TaskState> = headers
        .iter()
        .map(|h| TaskState {
            name: h.name.clone(),
            dnn: h.dnn.clone(),
            weight: h.weight,
            flops: h.flops,
            signature: h.signature.clone(),
            history: Vec::new(),
        })
        .collect();
    let mut open_unit: Vec<usize> = vec![0; tasks.len()];
    let mut rows = Vec::new();
    for r in log {
        let LogRecord::Measure {
            unit,
            task,
            cost,
            status,
            ..
        } = r
        else {
            continue;
        };
        let t = tasks
            .get_mut(*task)
            .ok_or_else(|| Error::Parse(format!("unknown task {task}")))?;
        let c = match (status, cost) {
            (MeasureStatus::Valid, Some(c)) => *c,
            _ => f64::INFINITY,
        };
        match t.history.last().copied() {
            None => t.history.push(c),
            Some(last) if open_unit[*task] != *unit => {
                open_unit[*task] = *unit;
                t.history.push(last.min(c));
            }
            Some(last) => *t.history.last_mut().unwrap() = last.min(c),
        }
        let best_cost = *t.history.last().unwrap();
        let objective = if tasks.iter().all(|t| !t.history.is_empty()) {
            Some(objective_value(settings.objective, &tasks, &settings.scheduler)?)
        } else {
            None
        };
        rows.push(CurveRow {
            iteration: *unit,
            task: *task,
            best_cost,
            objective,
        });
    }
    Ok(rows)
}

/// Training records rebuilt from a log, with throughput normalized by the
/// best valid cost of each DAG in the whole log.
pub fn records_from_log(log: &[LogRecord]) -> Result<Vec<TrainingRecord>> {
    let (_, headers) = log_header(log)?;
    let dags: Vec<Arc<ComputeDag>> = headers.iter().map(|h| Arc::new(h.workload.build())).collect();
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for r in log {
        if let LogRecord::Measure {
            dag_id,
            cost: Some(c),
            status: MeasureStatus::Valid,
            ..
        } = r
        {
            let e = best.entry(dag_id.as_str()).or_insert(*c);
            *e = e.min(*c);
        }
    }
    let mut out = Vec::new();
    for r in log {
        if let LogRecord::Measure {
            task,
            dag_id,
            history,
            cost,
            status,
            ..
        } = r
        {
            let Ok(p) = Program::replay(dags[*task].clone(), history) else {
                continue;
            };
            let y = match (status, cost) {
                (MeasureStatus::Valid, Some(c)) => best[dag_id.as_str()] / c,
                _ => 0.0,
            };
            out.push(TrainingRecord::new(&p, y));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_settings(mode: SearchMode, budget: usize) -> TuneSettings {
        TuneSettings {
            budget,
            batch_size: 4,
            mode,
            evolution: EvolutionConfig {
                population: 16,
                generations: 2,
                k: 4,
                ..EvolutionConfig::default()
            },
            ..TuneSettings::default()
        }
    }

    fn tasks() -> Vec<TaskSpec> {
        vec![
            TaskSpec {
                name: "mm".into(),
                workload: Workload::Matmul { n: 16, m: 16, k: 16 },
                weight: 1.0,
                dnn: String::new(),
            },
            TaskSpec {
                name: "chain".into(),
                workload: Workload::ElementwiseChain { n: 64 },
                weight: 2.0,
                dnn: String::new(),
            },
        ]
    }

    #[test]
    fn warmup_only_budget() {
        let out = tune(&tasks(), &small_settings(SearchMode::Full, 2)).unwrap();
        assert_eq!(out.tasks.iter().map(|t| t.units()).collect::<Vec<_>>(), vec![1, 1]);
    }

    #[test]
    fn rerun_is_identical_and_replays_cleanly() {
        for mode in [SearchMode::Full, SearchMode::RandomOnly, SearchMode::LimitedSpace] {
            let s = small_settings(mode, 5);
            let a = write_log(&tune(&tasks(), &s).unwrap().log);
            let b = write_log(&tune(&tasks(), &s).unwrap().log);
            assert_eq!(a, b);
            let log = read_log(&a).unwrap();
            let rep = replay_log(&log).unwrap();
            assert!(rep.is_clean(), "{:?}", rep.problems);
            assert_eq!(rep.units, 5);
        }
    }

    #[test]
    fn best_latency_never_increases() {
        let out = tune(&tasks(), &small_settings(SearchMode::Full, 6)).unwrap();
        for (t, naive) in out.tasks.iter().zip(&out.naive_costs) {
            assert!(t.history[0] <= *naive);
            for w in t.history.windows(2) {
                assert!(w[1] <= w[0]);
            }
        }
        let total: usize = out.tasks.iter().map(|t| t.units()).sum();
        assert_eq!(total, 6);
    }

    #[test]
    fn budget_below_task_count_is_rejected() {
        assert!(matches!(
            tune(&tasks(), &small_settings(SearchMode::Full, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tampered_cost_is_reported() {
        let mut log = tune(&tasks(), &small_settings(SearchMode::Full, 3)).unwrap().log;
        let at = log
            .iter()
            .rposition(|r| {
                matches!(
                    r,
                    LogRecord::Measure {
                        status: MeasureStatus::Valid,
                        ..
                    }
                )
            })
            .unwrap();
        if let LogRecord::Measure { cost, .. } = &mut log[at] {
            *cost = cost.map(|c| c * 1.5);
        }
        let rep = replay_log(&log).unwrap();
        assert!(
            rep.problems.iter().any(|p| p.starts_with(&format!("line {}:", at + 1))),
            "{:?}",
            rep.problems
        );
    }

    #[test]
    fn foreign_schema_version_is_an_error() {
        let mut log = tune(&tasks(), &small_settings(SearchMode::RandomOnly, 2)).unwrap().log;
        if let LogRecord::Header { version, .. } = &mut log[0] {
            *version = LOG_VERSION + 1;
        }
        assert!(matches!(replay_log(&log), Err(Error::Parse(_))));
    }

    #[test]
    fn truncated_line_is_located() {
        let text = write_log(&tune(&tasks(), &small_settings(SearchMode::RandomOnly, 2)).unwrap().log);
        let cut = &text[..text.len() - 20];
        let lines = cut.lines().count();
        match read_log(cut) {
            Err(Error::Parse(m)) => assert!(m.starts_with(&format!("log line {lines}:")), "{m}"),
            other => panic!("expected a parse error, got {:?}", other.map(|l| l.len())),
        }
    }

    #[test]
    fn curve_tracks_best_and_objective() {
        let out = tune(&tasks(), &small_settings(SearchMode::Full, 5)).unwrap();
        let rows = curve_rows(&out.log).unwrap();
        let measured = out
            .log
            .iter()
            .filter(|r| matches!(r, LogRecord::Measure { .. }))
            .count();
        assert_eq!(rows.len(), measured);
        let mut last: BTreeMap<usize, f64> = BTreeMap::new();
        for r in &rows {
            if let Some(prev) = last.insert(r.task, r.best_cost) {
                assert!(r.best_cost <= prev);
            }
        }
        assert!(rows[0].objective.is_none());
        let fin = rows.last().unwrap().objective.unwrap();
        let expect: f64 = out.tasks.iter().map(|t| t.weight * t.latency().unwrap()).sum();
        assert_eq!(fin, expect);
    }
}
