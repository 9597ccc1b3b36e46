//! Second-order gradient-boosted trees with logistic loss.
//!
//! Trees are grown level-wise with exact greedy split search: every feature is
//! pre-sorted once, and each level makes one pass per feature over the sorted
//! rows, accumulating left-hand gradient sums for every open node at once.

use serde::{Deserialize, Serialize};

use super::{clamp_probability, logistic_loss, sigmoid};

/// Clamp on the initial margin for degenerate label sets.
const MAX_BASE_MARGIN: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtParams {
    pub learning_rate: f64,
    pub max_depth: usize,
    pub l2_lambda: f64,
    pub n_rounds: usize,
    pub min_child_weight: f64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            learning_rate: 0.3,
            max_depth: 6,
            l2_lambda: 1.0,
            n_rounds: 100,
            min_child_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        weight: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { weight } => return weight,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub base_margin: f64,
    pub trees: Vec<Tree>,
    pub n_features: usize,
}

impl GbtModel {
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.base_margin + self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.margin(x))
    }

    /// Mean logistic loss on `(features, labels)` after 0, 1, ..., all rounds.
    pub fn loss_curve(&self, features: &[f64], labels: &[u8]) -> Vec<f64> {
        let d = self.n_features;
        let mut margin = vec![self.base_margin; labels.len()];
        let mut curve = vec![mean_loss(&margin, labels)];
        for t in &self.trees {
            for (i, m) in margin.iter_mut().enumerate() {
                *m += t.predict(&features[i * d..(i + 1) * d]);
            }
            curve.push(mean_loss(&margin, labels));
        }
        curve
    }
}

#[derive(Clone, Copy, Default)]
struct NodeStats {
    grad: f64,
    hess: f64,
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

fn score(grad: f64, hess: f64, lambda: f64) -> f64 {
    grad * grad / (hess + lambda)
}

fn mean_loss(margin: &[f64], labels: &[u8]) -> f64 {
    margin
        .iter()
        .zip(labels)
        .map(|(&m, &y)| logistic_loss(clamp_probability(sigmoid(m)), y))
        .sum::<f64>()
        / labels.len() as f64
}

/// Per-feature search structure. Low-cardinality columns are bucketed by
/// distinct value (one bucket per value, so no precision is lost); the rest
/// keep a presorted row order that is stably partitioned as nodes split.
enum Column {
    Binned { offset: usize, values: Vec<f64> },
    Sorted { slot: usize },
}

const MAX_BINS: usize = 64;

struct Layout {
    cols: Vec<Column>,
    /// Row-major bucket indices of the binned columns.
    bins: Vec<u8>,
    n_binned: usize,
    /// Total bucket count over binned columns.
    hist_len: usize,
    /// Per sorted column: rows in ascending value order, and those values.
    sorted: Vec<(Vec<u32>, Vec<f64>)>,
}

impl Layout {
    fn new(features: &[f64], n: usize, d: usize) -> Self {
        let mut cols = Vec::with_capacity(d);
        let mut binned = Vec::new();
        let mut sorted = Vec::new();
        let mut hist_len = 0;
        for j in 0..d {
            // Stable sort keeps equal values in row order; ties never produce candidates.
            let mut order: Vec<u32> = (0..n as u32).collect();
            order.sort_by(|&a, &b| features[a as usize * d + j].total_cmp(&features[b as usize * d + j]));
            let values: Vec<f64> = order.iter().map(|&r| features[r as usize * d + j]).collect();
            let mut distinct = values.clone();
            distinct.dedup();
            if distinct.len() <= MAX_BINS {
                cols.push(Column::Binned {
                    offset: hist_len,
                    values: distinct.clone(),
                });
                hist_len += distinct.len();
                binned.push((j, distinct));
            } else {
                cols.push(Column::Sorted { slot: sorted.len() });
                sorted.push((order, values));
            }
        }
        let nb = binned.len();
        let mut bins = vec![0u8; n * nb];
        for (b, (j, distinct)) in binned.iter().enumerate() {
            for r in 0..n {
                let v = features[r * d + j];
                bins[r * nb + b] = distinct.partition_point(|&u| u.total_cmp(&v).is_lt()) as u8;
            }
        }
        Layout {
            cols,
            bins,
            n_binned: nb,
            hist_len,
            sorted,
        }
    }
}

/// Fit on row-major `features` (`labels.len()` rows, `n_features` columns).
pub fn fit(params: &GbtParams, features: &[f64], n_features: usize, labels: &[u8]) -> GbtModel {
    let n = labels.len();
    let mean = labels.iter().map(|&y| y as f64).sum::<f64>() / n as f64;
    let base_margin = if mean <= 0.0 {
        -MAX_BASE_MARGIN
    } else if mean >= 1.0 {
        MAX_BASE_MARGIN
    } else {
        (mean / (1.0 - mean)).ln().clamp(-MAX_BASE_MARGIN, MAX_BASE_MARGIN)
    };
    let layout = Layout::new(features, n, n_features);
    let mut grower = Grower::new(&layout, n);

    let mut margin = vec![base_margin; n];
    let mut gh = vec![NodeStats::default(); n];
    let mut trees = Vec::with_capacity(params.n_rounds);
    for _ in 0..params.n_rounds {
        for i in 0..n {
            let p = sigmoid(margin[i]);
            gh[i] = NodeStats {
                grad: p - labels[i] as f64,
                hess: (p * (1.0 - p)).max(1e-16),
            };
        }
        let tree = grower.grow(params, features, n_features, &gh);
        for &(start, end, weight) in &grower.leaves {
            for &r in &grower.rows[start..end] {
                margin[r as usize] += weight;
            }
        }
        trees.push(tree);
    }
    GbtModel {
        base_margin,
        trees,
        n_features,
    }
}

#[derive(Clone, Copy, Default)]
struct Bin {
    grad: f64,
    hess: f64,
    count: u32,
}

/// A node awaiting a split decision; its rows are `rows[start..end]`.
struct Open {
    id: usize,
    start: usize,
    end: usize,
    stats: NodeStats,
    hist: Vec<Bin>,
}

struct Grower<'a> {
    layout: &'a Layout,
    /// Row ids, contiguous per node.
    rows: Vec<u32>,
    /// Per sorted column, row ids and values, contiguous per node and ascending within it.
    sorted: Vec<(Vec<u32>, Vec<f64>)>,
    goes_left: Vec<bool>,
    scratch_u: Vec<u32>,
    scratch_f: Vec<f64>,
    /// `(start, end, weight)` of every leaf of the last grown tree.
    leaves: Vec<(usize, usize, f64)>,
}

impl<'a> Grower<'a> {
    fn new(layout: &'a Layout, n: usize) -> Self {
        Grower {
            layout,
            rows: Vec::with_capacity(n),
            sorted: layout.sorted.clone(),
            goes_left: vec![false; n],
            scratch_u: Vec::with_capacity(n),
            scratch_f: Vec::with_capacity(n),
            leaves: Vec::new(),
        }
    }

    fn histogram(&self, start: usize, end: usize, gh: &[NodeStats]) -> Vec<Bin> {
        let nb = self.layout.n_binned;
        let mut hist = vec![Bin::default(); self.layout.hist_len];
        if nb == 0 {
            return hist;
        }
        let offsets: Vec<usize> = self
            .layout
            .cols
            .iter()
            .filter_map(|c| match c {
                Column::Binned { offset, .. } => Some(*offset),
                Column::Sorted { .. } => None,
            })
            .collect();
        for &r in &self.rows[start..end] {
            let r = r as usize;
            let g = gh[r];
            for (b, &bin) in self.layout.bins[r * nb..(r + 1) * nb].iter().enumerate() {
                let cell = &mut hist[offsets[b] + bin as usize];
                cell.grad += g.grad;
                cell.hess += g.hess;
                cell.count += 1;
            }
        }
        hist
    }

    fn best_split(&self, node: &Open, gh: &[NodeStats], params: &GbtParams) -> Option<Candidate> {
        let lambda = params.l2_lambda;
        let mcw = params.min_child_weight;
        let total = node.stats;
        let parent = score(total.grad, total.hess, lambda);
        let mut best: Option<Candidate> = None;
        let mut consider = |left: NodeStats, feature: usize, threshold: f64| {
            let (gl, hl) = (left.grad, left.hess);
            let (gr, hr) = (total.grad - gl, total.hess - hl);
            if hl >= mcw && hr >= mcw {
                let gain = 0.5 * (score(gl, hl, lambda) + score(gr, hr, lambda) - parent);
                if best.map_or(true, |b| gain > b.gain) {
                    best = Some(Candidate {
                        gain,
                        feature,
                        threshold,
                    });
                }
            }
        };
        for (j, col) in self.layout.cols.iter().enumerate() {
            match col {
                Column::Binned { offset, values } => {
                    let mut acc = NodeStats::default();
                    let mut any = false;
                    for (b, cell) in node.hist[*offset..offset + values.len()].iter().enumerate() {
                        if cell.count == 0 {
                            continue;
                        }
                        if any {
                            consider(acc, j, values[b]);
                        }
                        acc.grad += cell.grad;
                        acc.hess += cell.hess;
                        any = true;
                    }
                }
                Column::Sorted { slot } => {
                    let (order, values) = &self.sorted[*slot];
                    let mut acc = NodeStats::default();
                    let mut last = f64::NAN;
                    for (&r, &v) in order[node.start..node.end].iter().zip(&values[node.start..node.end]) {
                        if v != last && !last.is_nan() {
                            consider(acc, j, v);
                        }
                        let g = gh[r as usize];
                        acc.grad += g.grad;
                        acc.hess += g.hess;
                        last = v;
                    }
                }
            }
        }
        best
    }

    /// Stable partition of `[start, end)` in every row array; returns the left count
    /// and the left-side gradient sums.
    fn partition(&mut self, start: usize, end: usize, gh: &[NodeStats]) -> (usize, NodeStats) {
        let mut left = NodeStats::default();
        self.scratch_u.clear();
        let mut w = start;
        for i in start..end {
            let r = self.rows[i];
            if self.goes_left[r as usize] {
                self.rows[w] = r;
                w += 1;
                left.grad += gh[r as usize].grad;
                left.hess += gh[r as usize].hess;
            } else {
                self.scratch_u.push(r);
            }
        }
        let n_left = w - start;
        self.rows[w..end].copy_from_slice(&self.scratch_u);
        for (order, values) in self.sorted.iter_mut() {
            self.scratch_u.clear();
            self.scratch_f.clear();
            let mut w = start;
            for i in start..end {
                let r = order[i];
                if self.goes_left[r as usize] {
                    order[w] = r;
                    values[w] = values[i];
                    w += 1;
                } else {
                    self.scratch_u.push(r);
                    self.scratch_f.push(values[i]);
                }
            }
            order[w..end].copy_from_slice(&self.scratch_u);
            values[w..end].copy_from_slice(&self.scratch_f);
        }
        (n_left, left)
    }

    fn grow(&mut self, params: &GbtParams, features: &[f64], d: usize, gh: &[NodeStats]) -> Tree {
        let n = gh.len();
        self.rows.clear();
        self.rows.extend(0..n as u32);
        for (k, (order, values)) in self.sorted.iter_mut().enumerate() {
            order.copy_from_slice(&self.layout.sorted[k].0);
            values.copy_from_slice(&self.layout.sorted[k].1);
        }
        self.leaves.clear();

        let root = NodeStats {
            grad: gh.iter().map(|g| g.grad).sum(),
            hess: gh.iter().map(|g| g.hess).sum(),
        };
        let mut nodes = vec![Node::Leaf { weight: 0.0 }];
        let mut frontier = vec![Open {
            id: 0,
            start: 0,
            end: n,
            stats: root,
            hist: self.histogram(0, n, gh),
        }];
        for _ in 0..params.max_depth {
            let mut next = Vec::new();
            for node in std::mem::take(&mut frontier) {
                let Some(c) = self.best_split(&node, gh, params).filter(|c| c.gain > 0.0) else {
                    self.close(&mut nodes, &node, params);
                    continue;
                };
                for &r in &self.rows[node.start..node.end] {
                    self.goes_left[r as usize] = features[r as usize * d + c.feature] < c.threshold;
                }
                let (n_left, left_stats) = self.partition(node.start, node.end, gh);
                let mid = node.start + n_left;
                let right_stats = NodeStats {
                    grad: node.stats.grad - left_stats.grad,
                    hess: node.stats.hess - left_stats.hess,
                };
                // Build the smaller child's histogram; the sibling is the difference.
                let (small, large) = if n_left <= node.end - mid {
                    (self.histogram(node.start, mid, gh), true)
                } else {
                    (self.histogram(mid, node.end, gh), false)
                };
                let mut other = node.hist;
                for (o, s) in other.iter_mut().zip(&small) {
                    o.grad -= s.grad;
                    o.hess -= s.hess;
                    o.count -= s.count;
                }
                let (left_hist, right_hist) = if large { (small, other) } else { (other, small) };

                let l = nodes.len();
                nodes.push(Node::Leaf { weight: 0.0 });
                nodes.push(Node::Leaf { weight: 0.0 });
                nodes[node.id] = Node::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    left: l,
                    right: l + 1,
                };
                next.push(Open {
                    id: l,
                    start: node.start,
                    end: mid,
                    stats: left_stats,
                    hist: left_hist,
                });
                next.push(Open {
                    id: l + 1,
                    start: mid,
                    end: node.end,
                    stats: right_stats,
                    hist: right_hist,
                });
            }
            frontier = next;
            if frontier.is_empty() {
                break;
            }
        }
        for node in frontier {
            self.close(&mut nodes, &node, params);
        }
        Tree { nodes }
    }

    fn close(&mut self, nodes: &mut [Node], node: &Open, params: &GbtParams) {
        let leaf = leaf(node.stats, params);
        if let Node::Leaf { weight } = leaf {
            self.leaves.push((node.start, node.end, weight));
        }
        nodes[node.id] = leaf;
    }
}

fn leaf(stats: NodeStats, params: &GbtParams) -> Node {
    Node::Leaf {
        weight: -params.learning_rate * stats.grad / (stats.hess + params.l2_lambda),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn bernoulli_fixture(n: usize, s: u64) -> (Vec<f64>, Vec<u8>) {
        let mut rng = seed::rng(s);
        let mut x = Vec::with_capacity(2 * n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let a: f64 = rng.random();
            let b = (rng.random::<f64>() < 0.5) as u8 as f64;
            let p = 0.1 + 0.5 * a * a + 0.3 * b;
            x.push(a);
            x.push(b);
            y.push((rng.random::<f64>() < p) as u8);
        }
        (x, y)
    }

    #[test]
    fn training_loss_is_monotone_per_round() {
        let (x, y) = bernoulli_fixture(2_000, 11);
        let model = fit(&GbtParams::default(), &x, 2, &y);
        let curve = model.loss_curve(&x, &y);
        assert_eq!(curve.len(), 101);
        for w in curve.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn zero_rounds_predicts_label_mean() {
        let (x, y) = bernoulli_fixture(500, 3);
        let params = GbtParams {
            n_rounds: 0,
            ..Default::default()
        };
        let model = fit(&params, &x, 2, &y);
        let mean = y.iter().map(|&v| v as f64).sum::<f64>() / y.len() as f64;
        assert!((model.predict(&[0.3, 1.0]) - mean).abs() < 1e-12);
    }

    #[test]
    fn depth_is_bounded() {
        let (x, y) = bernoulli_fixture(3_000, 5);
        let params = GbtParams {
            max_depth: 3,
            n_rounds: 10,
            ..Default::default()
        };
        let model = fit(&params, &x, 2, &y);
        assert!(model.trees.iter().all(|t| t.depth() <= 3));
        assert!(model.trees.iter().any(|t| t.depth() == 3));
    }

    #[test]
    fn degenerate_labels_stay_finite() {
        let x = vec![0.0, 1.0, 0.5, 0.2];
        let model = fit(&GbtParams::default(), &x, 1, &[1, 1, 1, 1]);
        assert_eq!(model.base_margin, MAX_BASE_MARGIN);
        let p = model.predict(&[0.3]);
        assert!(p.is_finite() && p > 0.99);
    }

    #[test]
    fn split_threshold_separates_step_function() {
        // y = 1 iff x >= 0.5: the first split must sit exactly at the first value >= 0.5.
        let xs: Vec<f64> = (0..200).map(|i| i as f64 / 200.0).collect();
        let ys: Vec<u8> = xs.iter().map(|&v| (v >= 0.5) as u8).collect();
        let model = fit(
            &GbtParams {
                n_rounds: 1,
                ..Default::default()
            },
            &xs,
            1,
            &ys,
        );
        match model.trees[0].nodes[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(feature, 0);
                assert_eq!(threshold, 0.5);
            }
            ref other => panic!("expected split, got {other:?}"),
        }
    }
}
