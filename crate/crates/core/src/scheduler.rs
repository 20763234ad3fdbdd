//! Gradient-based allocation of tuning units across tasks.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Weighted total latency.
    F1,
    /// Total latency with per-network requirements.
    F2,
    /// Negative geometric mean of speedups over reference latencies.
    F3,
    /// Weighted latency with early-stopped tasks frozen.
    F4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerParams {
    pub alpha: f64,
    pub beta: f64,
    pub delta_t: usize,
    pub eps: f64,
    /// Rounds without improvement after which a task's latency is latched.
    pub early_stop_window: usize,
    /// Latency requirement per network.
    pub latency_requirements: BTreeMap<String, f64>,
    /// Reference latency per network.
    pub reference_latencies: BTreeMap<String, f64>,
}

impl Default for SchedulerParams {
    fn default() -> Self {
        SchedulerParams {
            alpha: 0.2,
            beta: 2.0,
            delta_t: 1,
            eps: 0.05,
            early_stop_window: 8,
            latency_requirements: BTreeMap::new(),
            reference_latencies: BTreeMap::new(),
        }
    }
}

impl SchedulerParams {
    pub fn check(&self, kind: ObjectiveKind, dnns: &[&str]) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.eps) {
            return Err(Error::Config("alpha and eps must lie in [0, 1]".into()));
        }
        if self.beta <= 0.0 || self.delta_t == 0 || self.early_stop_window == 0 {
            return Err(Error::Config(
                "beta, delta_t and early_stop_window must be positive".into(),
            ));
        }
        for d in dnns {
            match kind {
                ObjectiveKind::F2 if !self.latency_requirements.contains_key(*d) => {
                    return Err(Error::Config(format!(
                        "objective F2 needs a latency requirement for `{d}`"
                    )));
                }
                ObjectiveKind::F3 if self.reference_latencies.get(*d).is_none_or(|b| *b <= 0.0) => {
                    return Err(Error::Config(format!(
                        "objective F3 needs a positive reference latency for `{d}`"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub name: String,
    pub dnn: String,
    pub weight: f64,
    pub flops: f64,
    /// Tasks with equal signatures count as similar.
    pub signature: String,
    /// Best latency after each allocated unit; entry t-1 is g(t).
    pub history: Vec<f64>,
}

impl TaskState {
    pub fn units(&self) -> usize {
        self.history.len()
    }

    pub fn latency(&self) -> Option<f64> {
        self.history.last().copied()
    }

    /// Latched latency once the last `window` units brought no gain.
    pub fn early_stop(&self, window: usize) -> Option<f64> {
        let t = self.history.len();
        (t > window && self.history[t - 1] >= self.history[t - 1 - window]).then(|| self.history[t - 1])
    }
}

fn dnn_sums(tasks: &[TaskState]) -> BTreeMap<&str, f64> {
    let mut s = BTreeMap::new();
    for t in tasks {
        *s.entry(t.dnn.as_str()).or_insert(0.0) += t.weight * t.latency().unwrap_or(0.0);
    }
    s
}

pub fn objective_value(kind: ObjectiveKind, tasks: &[TaskState], params: &SchedulerParams) -> Result<f64> {
    if tasks.iter().any(|t| t.history.is_empty()) {
        return Err(Error::Contract(
            "objective needs one latency observation per task".into(),
        ));
    }
    let sums = dnn_sums(tasks);
    Ok(match kind {
        ObjectiveKind::F1 => sums.values().sum(),
        ObjectiveKind::F2 => {
            sums.iter()
                .map(|(d, s)| {
                    let l =
                        params.latency_requirements.get(*d).copied().ok_or_else(|| {
                            Error::Config(format!("objective F2 needs a latency requirement for `{d}`"))
                        })?;
                    Ok(s.max(l))
                })
                .sum::<Result<f64>>()?
        }
        ObjectiveKind::F3 => {
            let m = sums.len() as f64;
            let mut log_sum = 0.0;
            for (d, s) in &sums {
                let b = params
                    .reference_latencies
                    .get(*d)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("objective F3 needs a reference latency for `{d}`")))?;
                log_sum += (b / s).ln();
            }
            -(log_sum / m).exp()
        }
        ObjectiveKind::F4 => tasks
            .iter()
            .map(|t| {
                t.weight
                    * t.latency()
                        .unwrap()
                        .max(t.early_stop(params.early_stop_window).unwrap_or(0.0))
            })
            .sum(),
    })
}

/// ∂f/∂g_i for the current latencies.
pub fn objective_partial(kind: ObjectiveKind, tasks: &[TaskState], i: usize, params: &SchedulerParams) -> Result<f64> {
    let t = &tasks[i];
    let sums = dnn_sums(tasks);
    let s = sums[t.dnn.as_str()];
    Ok(match kind {
        ObjectiveKind::F1 => t.weight,
        ObjectiveKind::F2 => {
            let l =
                params.latency_requirements.get(&t.dnn).copied().ok_or_else(|| {
                    Error::Config(format!("objective F2 needs a latency requirement for `{}`", t.dnn))
                })?;
            if s >= l {
                t.weight
            } else {
                0.0
            }
        }
        ObjectiveKind::F3 => {
            let g = -objective_value(kind, tasks, params)?;
            g * t.weight / (sums.len() as f64 * s)
        }
        ObjectiveKind::F4 => {
            if t.early_stop(params.early_stop_window).is_some() {
                0.0
            } else {
                t.weight
            }
        }
    })
}

/// The bracketed latency-change estimate, without the objective partial.
/// `best_similar_speed` is the highest flops-per-latency among similar
/// tasks with a measurement, if any.
pub fn latency_slope(
    history: &[f64],
    flops: f64,
    best_similar_speed: Option<f64>,
    params: &SchedulerParams,
) -> Result<f64> {
    let t = history.len();
    if t == 0 {
        return Err(Error::Contract("gradient of a task with no allocated units".into()));
    }
    let g = history[t - 1];
    let dt = params.delta_t;
    let backward = if t > dt {
        (g - history[t - 1 - dt]) / dt as f64
    } else {
        0.0
    };
    let optimistic = -g / t as f64;
    let forward = match best_similar_speed {
        Some(v) if v > 0.0 => optimistic.min(params.beta * flops / v - g),
        _ => optimistic,
    };
    Ok(params.alpha * backward + (1.0 - params.alpha) * forward)
}

pub fn approx_gradient(kind: ObjectiveKind, tasks: &[TaskState], i: usize, params: &SchedulerParams) -> Result<f64> {
    let me = &tasks[i];
    let best_speed = tasks
        .iter()
        .enumerate()
        .filter(|(k, t)| *k != i && t.signature == me.signature)
        .filter_map(|(_, t)| t.latency().map(|g| t.flops / g))
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    Ok(objective_partial(kind, tasks, i, params)? * latency_slope(&me.history, me.flops, best_speed, params)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub task: usize,
    /// Empty during warmup.
    pub gradients: Vec<f64>,
    pub explored: bool,
}

/// Round-robin until every task has a unit, then ε-greedy on |∂f/∂t_i|.
pub fn next_task(
    kind: ObjectiveKind,
    tasks: &[TaskState],
    params: &SchedulerParams,
    rng: &mut impl Rng,
) -> Result<Decision> {
    if tasks.is_empty() {
        return Err(Error::Contract("no tasks to schedule".into()));
    }
    if let Some(i) = tasks.iter().position(|t| t.units() == 0) {
        return Ok(Decision {
            task: i,
            gradients: Vec::new(),
            explored: false,
        });
    }
    let gradients = (0..tasks.len())
        .map(|i| approx_gradient(kind, tasks, i, params))
        .collect::<Result<Vec<f64>>>()?;
    if rng.gen_bool(params.eps) {
        return Ok(Decision {
            task: rng.gen_range(0..tasks.len()),
            gradients,
            explored: true,
        });
    }
    Ok(Decision {
        task: argmax_abs(&gradients),
        gradients,
        explored: false,
    })
}

/// Index of the largest magnitude; the lowest index wins ties.
pub fn argmax_abs(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    best
}
