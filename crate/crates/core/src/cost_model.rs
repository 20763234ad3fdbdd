//! The learned cost model: statement features in, program score out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract_features, ELEM_BYTES, FEATURE_LEN};
use crate::gbdt::{Dataset, Gbdt, TrainParams};
use crate::ir::{Program, RewriteStep};
use crate::metrics::{evaluate, Metrics};

/// A measured program. Features are derived from the history and kept in
/// memory only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub dag_id: String,
    pub history: Vec<RewriteStep>,
    /// Normalized throughput; 0 for invalid or timed-out programs.
    pub throughput: f64,
    #[serde(skip)]
    pub features: Vec<Vec<f64>>,
}

impl TrainingRecord {
    pub fn new(p: &Program, throughput: f64) -> Self {
        TrainingRecord {
            dag_id: p.dag.id.clone(),
            history: p.history.clone(),
            throughput,
            features: extract_features(p),
        }
    }
}

/// Anything that scores programs; higher means faster.
pub trait CostModel {
    fn predict(&self, p: &Program) -> f64;

    fn predict_batch(&self, ps: &[Program]) -> Vec<f64> {
        ps.iter().map(|p| self.predict(p)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub feature_len: usize,
    pub line_bytes: u64,
    pub elem_bytes: f64,
    pub records: usize,
}

/// Boosted trees summed over a program's statements. Before any training
/// data exists it scores programs pseudo-randomly from their fingerprint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub meta: ModelMeta,
    pub ensemble: Option<Gbdt>,
}

impl Default for GbdtModel {
    fn default() -> Self {
        GbdtModel {
            meta: ModelMeta {
                feature_len: FEATURE_LEN,
                line_bytes: 64,
                elem_bytes: ELEM_BYTES,
                records: 0,
            },
            ensemble: None,
        }
    }
}

impl GbdtModel {
    /// Fits a fresh ensemble on all records.
    pub fn train(records: &[TrainingRecord], params: &TrainParams) -> Result<GbdtModel> {
        if records.is_empty() {
            return Err(Error::Training("no training records".into()));
        }
        let mut data = Dataset::new(FEATURE_LEN);
        for r in records {
            if r.features.is_empty() {
                return Err(Error::Training("record without features".into()));
            }
            data.push_group(r.features.clone(), r.throughput);
        }
        let ensemble = Gbdt::train(&data, params)?;
        let mut m = GbdtModel::default();
        m.meta.records = records.len();
        m.ensemble = Some(ensemble);
        Ok(m)
    }

    pub fn predict_features(&self, statements: &[Vec<f64>]) -> Option<f64> {
        self.ensemble.as_ref().map(|e| e.predict_group(statements))
    }

    pub fn loss_history(&self) -> &[f64] {
        self.ensemble.as_ref().map(|e| e.loss_history.as_slice()).unwrap_or(&[])
    }

    pub fn eval(&self, testset: &[TrainingRecord], k: usize) -> Result<Metrics> {
        let pred: Vec<f64> = testset
            .iter()
            .map(|r| self.predict_features(&r.features).unwrap_or(0.0))
            .collect();
        let y: Vec<f64> = testset.iter().map(|r| r.throughput).collect();
        evaluate(&pred, &y, k)
    }
}

impl CostModel for GbdtModel {
    fn predict(&self, p: &Program) -> f64 {
        match &self.ensemble {
            Some(e) => e.predict_group(&extract_features(p)),
            None => (p.fingerprint() >> 11) as f64 / (1u64 << 53) as f64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::{sample_program, AnnotationPolicy};
    use crate::machine::{machine_cost, MachineSpec};
    use crate::sketch::{generate_sketches, SketchPolicy};
    use crate::workloads;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    struct PerStatement(f64);

    impl CostModel for PerStatement {
        fn predict(&self, p: &Program) -> f64 {
            extract_features(p).len() as f64 * self.0
        }
    }

    #[test]
    fn prediction_sums_statements() {
        let dag = Arc::new(workloads::matmul(4, 4, 4));
        let p = Program::naive(dag)
            .apply_step(&RewriteStep::CacheWrite { stage: "C".into() })
            .unwrap();
        assert_eq!(PerStatement(1.0).predict(&p), 2.0);
    }

    fn corpus(n: usize) -> Vec<TrainingRecord> {
        let dag = Arc::new(workloads::matmul(64, 64, 64));
        let sketches = generate_sketches(&dag, &[], &SketchPolicy::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = MachineSpec::default();
        let progs: Vec<Program> = (0..n)
            .map(|i| {
                sample_program(
                    &sketches[i % sketches.len()].program,
                    &AnnotationPolicy::default(),
                    &mut rng,
                )
                .unwrap()
            })
            .collect();
        let costs: Vec<f64> = progs.iter().map(|p| machine_cost(p, &spec)).collect();
        let best = costs.iter().cloned().fold(f64::INFINITY, f64::min);
        progs
            .iter()
            .zip(&costs)
            .map(|(p, c)| TrainingRecord::new(p, best / c))
            .collect()
    }

    #[test]
    fn machine_labeled_training_is_monotone() {
        let recs = corpus(200);
        let m = GbdtModel::train(&recs, &TrainParams::default()).unwrap();
        let h = m.loss_history();
        assert_eq!(h.len(), 31);
        for w in h.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(h.last().unwrap() < &h[0]);
    }

    #[test]
    fn model_round_trips_through_json() {
        let recs = corpus(40);
        let m = GbdtModel::train(&recs, &TrainParams::default()).unwrap();
        let back: GbdtModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        for r in &recs {
            assert_eq!(m.predict_features(&r.features), back.predict_features(&r.features));
        }
    }
}
