//! Gradient-boosted regression trees for grouped targets.
//!
//! Rows are statements; a group (program) is predicted by the sum of its
//! rows. The objective is Σ_g w_g (Σ_{r∈g} f(r) − y_g)², with w_g = y_g.
//! Each row gets the residual of its group as gradient and the group
//! weight as hessian. After fitting a tree, its step is the smaller of
//! the shrinkage and the exact line-search minimizer, so the training loss
//! can never go up.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub lambda: f64,
    pub min_child_weight: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            n_trees: 30,
            max_depth: 6,
            shrinkage: 0.3,
            lambda: 1.0,
            min_child_weight: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
    /// Step size applied to the leaf values.
    pub eta: f64,
}

impl Tree {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return self.eta * value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] < *threshold { *left } else { *right },
            }
        }
    }
}

/// Training input: groups of feature rows with one target per group.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub n_features: usize,
    pub rows: Vec<Vec<f64>>,
    pub group_of: Vec<usize>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(n_features: usize) -> Self {
        Dataset {
            n_features,
            ..Default::default()
        }
    }

    pub fn push_group(&mut self, rows: Vec<Vec<f64>>, target: f64) {
        let g = self.targets.len();
        self.targets.push(target);
        for r in rows {
            debug_assert_eq!(r.len(), self.n_features);
            self.rows.push(r);
            self.group_of.push(g);
        }
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.targets.len()];
        for g in &self.group_of {
            n[*g] += 1;
        }
        n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gbdt {
    pub n_features: usize,
    /// Per-row constant added before the trees.
    pub base: f64,
    pub trees: Vec<Tree>,
    /// Weighted training loss before the first tree and after each tree.
    pub loss_history: Vec<f64>,
}

impl Gbdt {
    /// An ensemble with no trees.
    pub fn constant(n_features: usize, base: f64) -> Self {
        Gbdt {
            n_features,
            base,
            trees: Vec::new(),
            loss_history: Vec::new(),
        }
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.base + self.trees.iter().map(|t| t.eval(x)).sum::<f64>()
    }

    pub fn predict_group(&self, rows: &[Vec<f64>]) -> f64 {
        rows.iter().map(|r| self.predict_row(r)).sum()
    }

    pub fn train(data: &Dataset, params: &TrainParams) -> Result<Gbdt> {
        if data.targets.iter().any(|y| !(0.0..=1.0).contains(y) || !y.is_finite()) {
            return Err(Error::Training("targets must lie in [0, 1]".into()));
        }
        if !data.targets.iter().any(|y| *y > 0.0) {
            return Err(Error::Training("no group has a positive target".into()));
        }
        if data
            .rows
            .iter()
            .any(|r| r.len() != data.n_features || r.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Training(
                "feature rows must be finite and of fixed length".into(),
            ));
        }
        let y = &data.targets;
        let sizes = data.group_sizes();
        let num: f64 = y.iter().zip(&sizes).map(|(y, n)| y * *n as f64 * y).sum();
        let den: f64 = y.iter().zip(&sizes).map(|(y, n)| y * (*n as f64).powi(2)).sum();
        let base = if den > 0.0 { num / den } else { 0.0 };

        let mut model = Gbdt::constant(data.n_features, base);
        let mut group_pred: Vec<f64> = sizes.iter().map(|n| base * *n as f64).collect();
        let loss = |gp: &[f64]| -> f64 { y.iter().zip(gp).map(|(y, f)| y * (f - y).powi(2)).sum() };
        model.loss_history.push(loss(&group_pred));

        let order = presort(data);
        for _ in 0..params.n_trees {
            let grad: Vec<f64> = data.group_of.iter().map(|g| y[*g] * (group_pred[*g] - y[*g])).collect();
            let hess: Vec<f64> = data.group_of.iter().map(|g| y[*g]).collect();
            let mut tree = grow(data, &order, &grad, &hess, params);
            let row_out: Vec<f64> = data.rows.iter().map(|r| tree.eval(r)).collect();
            let mut delta = vec![0.0; y.len()];
            for (r, g) in data.group_of.iter().enumerate() {
                delta[*g] += row_out[r];
            }
            let a: f64 = (0..y.len()).map(|g| y[g] * delta[g] * (group_pred[g] - y[g])).sum();
            let b: f64 = (0..y.len()).map(|g| y[g] * delta[g] * delta[g]).sum();
            let best = if b > 0.0 { -a / b } else { 0.0 };
            let eta = params.shrinkage.min(best).max(0.0);
            tree.eta = eta;
            for g in 0..y.len() {
                group_pred[g] += eta * delta[g];
            }
            model.trees.push(tree);
            model.loss_history.push(loss(&group_pred));
        }
        Ok(model)
    }
}

fn presort(data: &Dataset) -> Vec<Vec<u32>> {
    (0..data.n_features)
        .map(|f| {
            let mut idx: Vec<u32> = (0..data.rows.len() as u32).collect();
            idx.sort_by(|a, b| data.rows[*a as usize][f].total_cmp(&data.rows[*b as usize][f]));
            idx
        })
        .collect()
}

#[derive(Clone, Copy)]
struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Level-wise exact greedy growth with raw leaf values (step size 1).
fn grow(data: &Dataset, order: &[Vec<u32>], grad: &[f64], hess: &[f64], params: &TrainParams) -> Tree {
    let n = data.rows.len();
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    // Node index each row currently sits in.
    let mut at = vec![0usize; n];
    let mut frontier = vec![0usize];
    let lam = params.lambda;
    let score = |g: f64, h: f64| g * g / (h + lam);
    for depth in 0..=params.max_depth {
        let mut sum_g = vec![0.0; nodes.len()];
        let mut sum_h = vec![0.0; nodes.len()];
        for r in 0..n {
            sum_g[at[r]] += grad[r];
            sum_h[at[r]] += hess[r];
        }
        for &v in &frontier {
            nodes[v] = Node::Leaf {
                value: -sum_g[v] / (sum_h[v] + lam),
            };
        }
        if depth == params.max_depth || frontier.is_empty() {
            break;
        }
        let mut best: Vec<Option<Best>> = vec![None; nodes.len()];
        let live: Vec<bool> = (0..nodes.len()).map(|v| frontier.contains(&v)).collect();
        for (f, idx) in order.iter().enumerate() {
            let mut gl = vec![0.0; nodes.len()];
            let mut hl = vec![0.0; nodes.len()];
            let mut last: Vec<Option<f64>> = vec![None; nodes.len()];
            for &r in idx {
                let r = r as usize;
                let v = at[r];
                if !live[v] {
                    continue;
                }
                let x = data.rows[r][f];
                if let Some(prev) = last[v] {
                    if x > prev {
                        let (gr, hr) = (sum_g[v] - gl[v], sum_h[v] - hl[v]);
                        if hl[v] >= params.min_child_weight && hr >= params.min_child_weight {
                            let gain = score(gl[v], hl[v]) + score(gr, hr) - score(sum_g[v], sum_h[v]);
                            if gain > 1e-12 && best[v].is_none_or(|b| gain > b.gain) {
                                best[v] = Some(Best {
                                    gain,
                                    feature: f,
                                    threshold: prev + (x - prev) / 2.0,
                                });
                            }
                        }
                    }
                }
                gl[v] += grad[r];
                hl[v] += hess[r];
                last[v] = Some(x);
            }
        }
        let mut next = Vec::new();
        for &v in &frontier {
            if let Some(b) = best[v] {
                let left = nodes.len();
                nodes.push(Node::Leaf { value: 0.0 });
                nodes.push(Node::Leaf { value: 0.0 });
                nodes[v] = Node::Split {
                    feature: b.feature,
                    threshold: b.threshold,
                    left,
                    right: left + 1,
                };
                next.push(left);
                next.push(left + 1);
            }
        }
        for r in 0..n {
            if let Node::Split {
                feature,
                threshold,
                left,
                right,
            } = nodes[at[r]]
            {
                at[r] = if data.rows[r][feature] < threshold { left } else { right };
            }
        }
        frontier = next;
    }
    Tree { nodes, eta: 1.0 }
}
