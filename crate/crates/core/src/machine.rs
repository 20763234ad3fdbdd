//! The deterministic analytical machine that stands in for hardware.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dag::ComputeDag;
use crate::error::{Error, Result};
use crate::features::{self, buf, Statement, BUFFERS_START, BUFFER_BLOCK, MAX_BUFFERS};
use crate::interp::{check_equivalent, random_inputs, reference, Tensors};
use crate::ir::{validate, Program};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MachineSpec {
    pub cores: u64,
    pub lanes: u64,
    pub line_bytes: u64,
    pub miss_penalty: f64,
    pub iteration_overhead: f64,
    /// Capacity used to decide which loop level's data stays resident.
    pub cache_bytes: u64,
}

impl Default for MachineSpec {
    fn default() -> Self {
        MachineSpec {
            cores: 8,
            lanes: 8,
            line_bytes: 64,
            miss_penalty: 8.0,
            iteration_overhead: 0.5,
            cache_bytes: 32 * 1024,
        }
    }
}

impl MachineSpec {
    pub fn check(&self) -> Result<()> {
        let ok = self.cores > 0
            && self.lanes > 0
            && self.line_bytes > 0
            && self.cache_bytes > 0
            && self.miss_penalty > 0.0
            && self.iteration_overhead > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("machine spec values must all be positive".into()))
        }
    }
}

/// The quantities the cost formula needs for one statement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostTerms {
    pub flops: f64,
    pub lanes: f64,
    pub threads: f64,
    pub unique_lines: f64,
    pub iterations: f64,
    pub waived: f64,
}

impl CostTerms {
    pub fn cost(&self, spec: &MachineSpec) -> f64 {
        self.flops / (self.lanes * self.threads)
            + self.unique_lines * spec.miss_penalty / self.threads
            + spec.iteration_overhead * (self.iterations - self.waived)
    }
}

fn lanes_for(spec: &MachineSpec, unit_stride: bool, vector_extent: f64) -> f64 {
    if unit_stride {
        (spec.lanes as f64).min(vector_extent).max(1.0)
    } else {
        1.0
    }
}

fn threads_for(spec: &MachineSpec, parallel_extent: f64) -> f64 {
    parallel_extent.clamp(1.0, spec.cores as f64)
}

pub fn statement_terms(st: &Statement, spec: &MachineSpec) -> CostTerms {
    CostTerms {
        flops: st.float_flops(),
        lanes: lanes_for(spec, st.unit_stride_vector, st.vector_extent() as f64),
        threads: threads_for(spec, st.parallel_extent as f64),
        unique_lines: st.traffic(spec).iter().sum(),
        iterations: st.loop_iterations(),
        waived: st.waived(),
    }
}

/// The same terms read back from a raw feature vector. Exact whenever the
/// statement touches at most the number of buffers the vector keeps.
pub fn terms_from_features(f: &[f64], spec: &MachineSpec) -> CostTerms {
    let vec_block = features::VECTORIZE_BLOCK;
    let par = features::PARALLEL_BLOCK;
    let parallel = if f[par + 10] > 0.0 { f[par + 9] } else { 1.0 };
    CostTerms {
        flops: f[0..8].iter().sum(),
        lanes: lanes_for(spec, f[features::UNIT_STRIDE_VECTOR] > 0.0, f[vec_block]),
        threads: threads_for(spec, parallel),
        unique_lines: (0..MAX_BUFFERS)
            .map(|b| f[BUFFERS_START + b * BUFFER_BLOCK + buf::UNIQUE_LINES])
            .sum(),
        iterations: f[features::ITERATIONS],
        waived: f[features::WAIVED],
    }
}

pub fn machine_cost(p: &Program, spec: &MachineSpec) -> f64 {
    features::analyze(p)
        .iter()
        .map(|st| statement_terms(st, spec).cost(spec))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureStatus {
    Valid,
    Invalid,
    Timeout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureResult {
    /// Absent for invalid programs.
    pub cost: Option<f64>,
    pub throughput: f64,
    pub status: MeasureStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl MeasureResult {
    pub fn is_valid(&self) -> bool {
        self.status == MeasureStatus::Valid
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasureLimits {
    pub cost_ceiling: Option<f64>,
    /// Programs whose naive work exceeds this many body evaluations skip
    /// the interpreter spot check and rely on structural validation.
    pub spot_check_work: f64,
    pub tolerance: f64,
}

impl Default for MeasureLimits {
    fn default() -> Self {
        MeasureLimits {
            cost_ceiling: None,
            spot_check_work: 65_536.0,
            tolerance: 1e-5,
        }
    }
}

/// Measures programs of one DAG and keeps the best valid cost for
/// throughput normalization.
pub struct Measurer {
    pub dag: Arc<ComputeDag>,
    pub spec: MachineSpec,
    pub limits: MeasureLimits,
    best: Option<f64>,
    oracle: Option<(Tensors, Tensors)>,
}

impl Measurer {
    pub fn new(dag: Arc<ComputeDag>, spec: MachineSpec, limits: MeasureLimits) -> Self {
        let work: f64 = dag
            .nodes
            .iter()
            .map(|n| n.space_volume() as f64 * n.reduce_volume() as f64)
            .sum();
        let oracle = (work <= limits.spot_check_work).then(|| {
            let inputs = random_inputs(&dag, 0x5eed);
            let want = reference(&dag, &inputs).expect("reference evaluation of a checked DAG");
            (inputs, want)
        });
        Measurer {
            dag,
            spec,
            limits,
            best: None,
            oracle,
        }
    }

    pub fn best_cost(&self) -> Option<f64> {
        self.best
    }

    fn check(&self, p: &Program) -> std::result::Result<(), String> {
        if p.dag.id != self.dag.id {
            return Err(format!("program targets `{}`, expected `{}`", p.dag.id, self.dag.id));
        }
        validate(p).map_err(|v| v.join("; "))?;
        if let Some((inputs, want)) = &self.oracle {
            check_equivalent(p, inputs, want, self.limits.tolerance).map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    /// Measures one program without touching the normalization state.
    pub fn cost_of(&self, p: &Program) -> MeasureResult {
        match self.check(p) {
            Err(e) => MeasureResult {
                cost: None,
                throughput: 0.0,
                status: MeasureStatus::Invalid,
                error: Some(e),
            },
            Ok(()) => {
                let c = machine_cost(p, &self.spec);
                let status = match self.limits.cost_ceiling {
                    Some(ceil) if c > ceil => MeasureStatus::Timeout,
                    _ => MeasureStatus::Valid,
                };
                MeasureResult {
                    cost: Some(c),
                    throughput: 0.0,
                    status,
                    error: None,
                }
            }
        }
    }

    pub fn measure_batch(&mut self, programs: &[Program]) -> Vec<MeasureResult> {
        let mut out: Vec<MeasureResult> = programs.iter().map(|p| self.cost_of(p)).collect();
        for r in out.iter().filter(|r| r.is_valid()) {
            let c = r.cost.expect("valid results carry a cost");
            self.best = Some(self.best.map_or(c, |b| b.min(c)));
        }
        for r in out.iter_mut().filter(|r| r.is_valid()) {
            r.throughput = self.best.unwrap() / r.cost.unwrap();
        }
        out
    }
}
