//! Multi-class gradient-boosted decision trees (softmax loss, Newton leaves,
//! exact greedy splits).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtParams {
    pub max_depth: usize,
    pub n_trees: usize,
    pub learning_rate: f64,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    /// Smallest hessian sum allowed in a child.
    pub min_child_weight: f64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            max_depth: 3,
            n_trees: 200,
            learning_rate: 0.1,
            lambda: 1.0,
            min_child_weight: 1e-3,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_depth == 0 || self.n_trees == 0 {
            return Err("max_depth and n_trees must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(format!("learning_rate {} outside (0, 1]", self.learning_rate));
        }
        if !(self.lambda >= 0.0) || !(self.min_child_weight >= 0.0) {
            return Err("lambda and min_child_weight must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Regression tree stored as an arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gbdt {
    pub n_classes: usize,
    pub n_features: usize,
    pub base_score: Vec<f64>,
    /// `rounds[m][k]` is the tree of boosting round `m` for class `k`.
    pub rounds: Vec<Vec<Tree>>,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    /// Row indices ordered by each feature, computed once.
    sorted: Vec<Vec<usize>>,
    params: &'a GbdtParams,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl Builder<'_> {
    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        -self.params.learning_rate * g / (h + self.params.lambda)
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.lambda)
    }

    fn build(&self, grad: &[f64], hess: &[f64]) -> Tree {
        let mut nodes = Vec::new();
        let mut member = vec![true; self.x.len()];
        self.grow(&mut nodes, &mut member, grad, hess, 0);
        Tree { nodes }
    }

    /// Grows the subtree for rows with `member[i]` set and returns its index.
    fn grow(&self, nodes: &mut Vec<Node>, member: &mut [bool], grad: &[f64], hess: &[f64], depth: usize) -> usize {
        let (g, h) = (0..member.len())
            .filter(|&i| member[i])
            .fold((0.0, 0.0), |(g, h), i| (g + grad[i], h + hess[i]));
        let id = nodes.len();
        nodes.push(Node::Leaf {
            value: self.leaf_value(g, h),
        });
        if depth >= self.params.max_depth {
            return id;
        }
        let Some(best) = self.best_split(member, grad, hess, g, h) else {
            return id;
        };

        let rows: Vec<usize> = (0..member.len()).filter(|&i| member[i]).collect();
        let goes_left = |i: usize| self.x[i][best.feature] <= best.threshold;
        for &i in &rows {
            member[i] = goes_left(i);
        }
        let left = self.grow(nodes, member, grad, hess, depth + 1);
        for &i in &rows {
            member[i] = !goes_left(i);
        }
        let right = self.grow(nodes, member, grad, hess, depth + 1);
        for &i in &rows {
            member[i] = true;
        }
        nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        id
    }

    fn best_split(&self, member: &[bool], grad: &[f64], hess: &[f64], g: f64, h: f64) -> Option<BestSplit> {
        let parent = self.score(g, h);
        let mut best: Option<BestSplit> = None;
        for (f, order) in self.sorted.iter().enumerate() {
            let (mut gl, mut hl) = (0.0, 0.0);
            let mut prev: Option<usize> = None;
            for &i in order.iter().filter(|&&i| member[i]) {
                if let Some(p) = prev {
                    let (a, b) = (self.x[p][f], self.x[i][f]);
                    let (gr, hr) = (g - gl, h - hl);
                    if b > a && hl >= self.params.min_child_weight && hr >= self.params.min_child_weight {
                        let gain = self.score(gl, hl) + self.score(gr, hr) - parent;
                        if gain > 1e-12 && best.as_ref().is_none_or(|s| gain > s.gain) {
                            let mid = a + 0.5 * (b - a);
                            best = Some(BestSplit {
                                gain,
                                feature: f,
                                threshold: if mid < b { mid } else { a },
                            });
                        }
                    }
                }
                gl += grad[i];
                hl += hess[i];
                prev = Some(i);
            }
        }
        best
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl Gbdt {
    /// Fits `n_classes` one-vs-rest score functions under softmax loss.
    /// `y[i]` is the class index of row `i`; every class must occur.
    pub fn fit(x: &[Vec<f64>], y: &[usize], n_classes: usize, params: &GbdtParams) -> Gbdt {
        let n = x.len();
        assert!(n > 0 && n == y.len());
        let n_features = x[0].len();
        let sorted = (0..n_features)
            .map(|f| {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
                idx
            })
            .collect();
        let builder = Builder { x, sorted, params };

        let base_score: Vec<f64> = (0..n_classes)
            .map(|k| {
                let count = y.iter().filter(|&&c| c == k).count() as f64;
                (count / n as f64).max(1e-12).ln()
            })
            .collect();
        let mut scores: Vec<Vec<f64>> = vec![base_score.clone(); n];
        let mut rounds = Vec::with_capacity(params.n_trees);
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        for _ in 0..params.n_trees {
            let probs: Vec<Vec<f64>> = scores.iter().map(|z| softmax(z)).collect();
            let mut trees = Vec::with_capacity(n_classes);
            for k in 0..n_classes {
                for (i, (p, &yi)) in probs.iter().zip(y).enumerate() {
                    let p = p[k];
                    grad[i] = p - if yi == k { 1.0 } else { 0.0 };
                    hess[i] = (p * (1.0 - p)).max(1e-16);
                }
                trees.push(builder.build(&grad, &hess));
            }
            for (i, row) in x.iter().enumerate() {
                for (k, t) in trees.iter().enumerate() {
                    scores[i][k] += t.predict(row);
                }
            }
            rounds.push(trees);
        }
        Gbdt {
            n_classes,
            n_features,
            base_score,
            rounds,
        }
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.base_score.clone();
        for trees in &self.rounds {
            for (k, t) in trees.iter().enumerate() {
                z[k] += t.predict(x);
            }
        }
        softmax(&z)
    }
}
