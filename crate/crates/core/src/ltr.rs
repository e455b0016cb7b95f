//! LambdaMART: gradient-boosted regression trees fit to lambdarank
//! gradients over groups of ten candidates.
//!
//! Features are quantized into at most `max_bin` histogram bins per column
//! (thresholds are midpoints between neighbouring bin edges, `x <= t` goes
//! left). Trees grow leaf-wise up to `num_leaves`. Leaf outputs use L1
//! soft-thresholding of the gradient sum: `-T(G) / (H + l2)`, where
//! `T(G) = sign(G) max(|G| - reg_alpha, 0)`. Lambdas follow the usual NDCG
//! weighting with binary gain and `1 / log2(rank + 1)` discount.
//!
//! Training is deterministic for a given seed in both execution modes:
//! parallel work is split per feature (histograms) and per group
//! (gradients) and reduced in a fixed order.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::features::{FeatureMatrix, FeatureSchema};
use crate::scoring::Ranking;

const GROUP: usize = crate::dataset::CANDIDATES_PER_SAMPLE;
const NDCG_AT: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum LtrError {
    #[error("training matrix has no labels")]
    NoLabels,
    #[error("degenerate train/validation split: {0}")]
    DegenerateSplit(String),
    #[error("feature schema mismatch: model expects {expected}, matrix has {actual}")]
    SchemaMismatch { expected: String, actual: String },
    #[error("invalid hyperparameter: {0}")]
    InvalidParam(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LtrHyperparams {
    pub n_estimators: usize,
    pub early_stopping_rounds: usize,
    pub learning_rate: f64,
    pub feature_fraction: f64,
    pub max_bin: usize,
    pub min_child_samples: usize,
    pub reg_alpha: f64,
    pub seed: u64,
    pub num_leaves: usize,
    pub reg_lambda: f64,
    pub min_sum_hessian: f64,
}

impl Default for LtrHyperparams {
    fn default() -> Self {
        LtrHyperparams {
            n_estimators: 500,
            early_stopping_rounds: 100,
            learning_rate: 0.03,
            feature_fraction: 0.25,
            max_bin: 100,
            min_child_samples: 50,
            reg_alpha: 0.05,
            seed: 0,
            num_leaves: 31,
            reg_lambda: 0.0,
            min_sum_hessian: 1e-3,
        }
    }
}

impl LtrHyperparams {
    pub fn validate(&self) -> Result<(), LtrError> {
        let bad = |what: &str| Err(LtrError::InvalidParam(what.to_string()));
        if self.n_estimators == 0 {
            return bad("n_estimators must be positive");
        }
        if self.early_stopping_rounds == 0 {
            return bad("early_stopping_rounds must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.feature_fraction > 0.0 && self.feature_fraction <= 1.0) {
            return bad("feature_fraction must be in (0, 1]");
        }
        if !(2..=u16::MAX as usize).contains(&self.max_bin) {
            return bad("max_bin must be in 2..=65535");
        }
        if self.min_child_samples == 0 {
            return bad("min_child_samples must be positive");
        }
        if !(self.reg_alpha >= 0.0 && self.reg_lambda >= 0.0 && self.min_sum_hessian >= 0.0) {
            return bad("regularization terms must be non-negative");
        }
        if self.num_leaves < 2 {
            return bad("num_leaves must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
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

/// Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            match self.nodes[k] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => k = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub train_groups: usize,
    pub validation_groups: usize,
    pub validation_sample_ids: Vec<usize>,
    pub trees_built: usize,
    /// 1-based; the model keeps trees up to and including it.
    pub best_iteration: usize,
    pub best_validation_ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtrModel {
    pub schema: FeatureSchema,
    pub schema_fingerprint: String,
    pub params: LtrHyperparams,
    pub trees: Vec<Tree>,
    pub summary: TrainSummary,
}

impl LtrModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    fn check_schema(&self, matrix: &FeatureMatrix) -> Result<(), LtrError> {
        let actual = matrix.schema.fingerprint();
        if actual != self.schema_fingerprint {
            return Err(LtrError::SchemaMismatch {
                expected: self.schema.columns().join(","),
                actual: matrix.schema.columns().join(","),
            });
        }
        Ok(())
    }

    pub fn score_row(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum()
    }

    /// One score per matrix row.
    pub fn predict_scores(&self, matrix: &FeatureMatrix, exec: Exec) -> Result<Vec<f64>, LtrError> {
        self.check_schema(matrix)?;
        Ok(exec.map_range(matrix.n_rows(), |r| self.score_row(matrix.row(r))))
    }
}

/// Per group, candidates by descending model score with stable ties.
pub fn predict_rank(model: &LtrModel, matrix: &FeatureMatrix, exec: Exec) -> Result<Vec<Ranking>, LtrError> {
    let scores = model.predict_scores(matrix, exec)?;
    Ok((0..matrix.n_groups())
        .map(|g| {
            let rows = matrix.group_rows(g);
            Ranking::from_scores(
                matrix.sample_ids[g],
                &matrix.candidate_ids[rows.clone()],
                &scores[rows],
            )
        })
        .collect())
}

/// Mean NDCG@10 over groups; a group without relevant items counts as 1.
pub fn mean_ndcg(scores: &[f64], labels: &[u8], groups: &[usize]) -> f64 {
    if groups.is_empty() {
        return 0.0;
    }
    let total: f64 = groups
        .iter()
        .map(|&g| {
            let r = g * GROUP..(g + 1) * GROUP;
            ndcg_at(&scores[r.clone()], &labels[r], NDCG_AT)
        })
        .sum();
    total / groups.len() as f64
}

fn gain(label: u8) -> f64 {
    (1u64 << label.min(62)) as f64 - 1.0
}

fn discount(rank0: usize) -> f64 {
    1.0 / ((rank0 + 2) as f64).log2()
}

fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx
}

fn max_dcg(labels: &[u8], k: usize) -> f64 {
    let mut sorted: Vec<u8> = labels.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    sorted.iter().take(k).enumerate().map(|(i, &l)| gain(l) * discount(i)).sum()
}

pub fn ndcg_at(scores: &[f64], labels: &[u8], k: usize) -> f64 {
    let ideal = max_dcg(labels, k);
    if ideal <= 0.0 {
        return 1.0;
    }
    let dcg: f64 = order_desc(scores)
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &j)| gain(labels[j]) * discount(i))
        .sum();
    dcg / ideal
}

/// Lambdarank gradients and hessians for one group, written into `out` as
/// interleaved (grad, hess) pairs.
fn group_gradients(scores: &[f64], labels: &[u8], out: &mut [f64]) {
    out.fill(0.0);
    let ideal = max_dcg(labels, labels.len());
    if ideal <= 0.0 {
        return;
    }
    let inv_max_dcg = 1.0 / ideal;
    let order = order_desc(scores);
    let best = scores[order[0]];
    let worst = scores[order[order.len() - 1]];
    let mut sum_lambdas = 0.0;
    for i in 0..order.len() {
        for j in i + 1..order.len() {
            let (a, b) = (order[i], order[j]);
            if labels[a] == labels[b] {
                continue;
            }
            let (high, high_rank, low, low_rank) = if labels[a] > labels[b] {
                (a, i, b, j)
            } else {
                (b, j, a, i)
            };
            let delta_score = scores[high] - scores[low];
            let dcg_gap = gain(labels[high]) - gain(labels[low]);
            let paired_discount = (discount(high_rank) - discount(low_rank)).abs();
            let mut delta_ndcg = dcg_gap * paired_discount * inv_max_dcg;
            if best != worst {
                delta_ndcg /= 0.01 + delta_score.abs();
            }
            let p = 1.0 / (1.0 + delta_score.exp());
            let lambda = -p * delta_ndcg;
            let hess = p * (1.0 - p) * delta_ndcg;
            out[2 * low] -= lambda;
            out[2 * low + 1] += hess;
            out[2 * high] += lambda;
            out[2 * high + 1] += hess;
            sum_lambdas -= 2.0 * lambda;
        }
    }
    if sum_lambdas > 0.0 {
        let norm = (1.0 + sum_lambdas).log2() / sum_lambdas;
        out.iter_mut().for_each(|v| *v *= norm);
    }
}

/// Quantized training features, column-major.
struct Binned {
    thresholds: Vec<Vec<f64>>,
    bins: Vec<Vec<u16>>,
}

fn bin_thresholds(values: &mut [f64], max_bin: usize) -> Vec<f64> {
    values.sort_by(|a, b| a.total_cmp(b));
    let mut distinct: Vec<(f64, usize)> = Vec::new();
    for &v in values.iter() {
        match distinct.last_mut() {
            Some((last, count)) if *last == v => *count += 1,
            _ => distinct.push((v, 1)),
        }
    }
    let mid = |a: f64, b: f64| a + (b - a) / 2.0;
    if distinct.len() <= max_bin {
        return distinct.windows(2).map(|w| mid(w[0].0, w[1].0)).collect();
    }
    // equal-frequency cuts, always between distinct values
    let n = values.len();
    let mut thresholds = Vec::with_capacity(max_bin - 1);
    let mut seen = 0;
    let mut next_cut = 1;
    for w in distinct.windows(2) {
        seen += w[0].1;
        if seen * max_bin >= next_cut * n {
            thresholds.push(mid(w[0].0, w[1].0));
            while next_cut * n <= seen * max_bin {
                next_cut += 1;
            }
            if thresholds.len() == max_bin - 1 {
                break;
            }
        }
    }
    thresholds
}

fn bin_of(thresholds: &[f64], x: f64) -> u16 {
    thresholds.partition_point(|&t| t < x) as u16
}

impl Binned {
    fn build(matrix: &FeatureMatrix, rows: &[usize], max_bin: usize, exec: Exec) -> Self {
        let n_cols = matrix.n_cols();
        let cols: Vec<(Vec<f64>, Vec<u16>)> = exec.map_range(n_cols, |c| {
            let mut vals: Vec<f64> = rows.iter().map(|&r| matrix.get(r, c)).collect();
            let thresholds = bin_thresholds(&mut vals, max_bin);
            let bins = rows.iter().map(|&r| bin_of(&thresholds, matrix.get(r, c))).collect();
            (thresholds, bins)
        });
        let (thresholds, bins) = cols.into_iter().unzip();
        Binned { thresholds, bins }
    }
}

#[derive(Debug, Clone, Copy)]
struct SplitCandidate {
    gain: f64,
    feature: usize,
    bin: u16,
}

struct GrowingLeaf {
    node: usize,
    rows: Vec<u32>,
    sum_g: f64,
    sum_h: f64,
    split: Option<SplitCandidate>,
}

struct TreeBuilder<'a> {
    binned: &'a Binned,
    grad: &'a [f64],
    hess: &'a [f64],
    features: &'a [usize],
    params: &'a LtrHyperparams,
    exec: Exec,
}

fn soft_threshold(g: f64, alpha: f64) -> f64 {
    g.signum() * (g.abs() - alpha).max(0.0)
}

impl TreeBuilder<'_> {
    fn objective(&self, g: f64, h: f64) -> f64 {
        let t = soft_threshold(g, self.params.reg_alpha);
        let denom = h + self.params.reg_lambda;
        if denom <= 0.0 {
            0.0
        } else {
            t * t / denom
        }
    }

    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        let denom = h + self.params.reg_lambda;
        if denom <= 0.0 {
            0.0
        } else {
            -soft_threshold(g, self.params.reg_alpha) / denom * self.params.learning_rate
        }
    }

    fn best_split(&self, rows: &[u32], sum_g: f64, sum_h: f64) -> Option<SplitCandidate> {
        let min_n = self.params.min_child_samples;
        if rows.len() < 2 * min_n {
            return None;
        }
        let parent = self.objective(sum_g, sum_h);
        let per_feature = self.exec.map(self.features, |&f| {
            let n_bins = self.binned.thresholds[f].len() + 1;
            if n_bins < 2 {
                return None;
            }
            let mut hg = vec![0.0; n_bins];
            let mut hh = vec![0.0; n_bins];
            let mut hc = vec![0usize; n_bins];
            let col = &self.binned.bins[f];
            for &r in rows {
                let r = r as usize;
                let b = col[r] as usize;
                hg[b] += self.grad[r];
                hh[b] += self.hess[r];
                hc[b] += 1;
            }
            let mut best: Option<SplitCandidate> = None;
            let (mut gl, mut hl, mut cl) = (0.0, 0.0, 0usize);
            for b in 0..n_bins - 1 {
                gl += hg[b];
                hl += hh[b];
                cl += hc[b];
                let cr = rows.len() - cl;
                if cl < min_n {
                    continue;
                }
                if cr < min_n {
                    break;
                }
                let hr = sum_h - hl;
                if hl < self.params.min_sum_hessian || hr < self.params.min_sum_hessian {
                    continue;
                }
                let gain = self.objective(gl, hl) + self.objective(sum_g - gl, hr) - parent;
                if gain > 0.0 && best.is_none_or(|s| gain > s.gain) {
                    best = Some(SplitCandidate {
                        gain,
                        feature: f,
                        bin: b as u16,
                    });
                }
            }
            best
        });
        // first feature wins ties
        per_feature.into_iter().flatten().fold(None, |acc: Option<SplitCandidate>, c| match acc {
            Some(a) if a.gain >= c.gain => Some(a),
            _ => Some(c),
        })
    }

    fn grow(&self, rows: Vec<u32>) -> Tree {
        let (sum_g, sum_h) = rows.iter().fold((0.0, 0.0), |(g, h), &r| {
            (g + self.grad[r as usize], h + self.hess[r as usize])
        });
        let mut nodes = vec![Node::Leaf { value: 0.0 }];
        let split = self.best_split(&rows, sum_g, sum_h);
        let mut leaves = vec![GrowingLeaf {
            node: 0,
            rows,
            sum_g,
            sum_h,
            split,
        }];
        while leaves.len() < self.params.num_leaves {
            // highest gain, earliest leaf on ties
            let pick = leaves
                .iter()
                .enumerate()
                .filter_map(|(i, l)| l.split.map(|s| (i, s.gain)))
                .fold(None, |acc: Option<(usize, f64)>, c| match acc {
                    Some(a) if a.1 >= c.1 => Some(a),
                    _ => Some(c),
                });
            let Some((i, _)) = pick else { break };
            let leaf = leaves.remove(i);
            let split = leaf.split.expect("picked leaf has a split");
            let col = &self.binned.bins[split.feature];
            let (left_rows, right_rows): (Vec<u32>, Vec<u32>) =
                leaf.rows.iter().partition(|&&r| col[r as usize] <= split.bin);
            let side = |rows: Vec<u32>, nodes: &mut Vec<Node>| {
                let (g, h) = rows.iter().fold((0.0, 0.0), |(g, h), &r| {
                    (g + self.grad[r as usize], h + self.hess[r as usize])
                });
                nodes.push(Node::Leaf { value: 0.0 });
                GrowingLeaf {
                    node: nodes.len() - 1,
                    split: self.best_split(&rows, g, h),
                    rows,
                    sum_g: g,
                    sum_h: h,
                }
            };
            let left = side(left_rows, &mut nodes);
            let right = side(right_rows, &mut nodes);
            nodes[leaf.node] = Node::Split {
                feature: split.feature,
                threshold: self.binned.thresholds[split.feature][split.bin as usize],
                left: left.node,
                right: right.node,
            };
            // keep creation order so tie-breaking stays deterministic
            leaves.insert(i, right);
            leaves.insert(i, left);
        }
        for leaf in &leaves {
            nodes[leaf.node] = Node::Leaf {
                value: self.leaf_value(leaf.sum_g, leaf.sum_h),
            };
        }
        Tree { nodes }
    }
}

/// Seeded group shuffle; the trailing `ceil(fraction * n)` groups form the
/// validation set. Returns (train, validation) group indices.
pub fn split_groups(n_groups: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), LtrError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(LtrError::DegenerateSplit(format!("fraction {fraction} not in (0, 1)")));
    }
    let n_val = (fraction * n_groups as f64).ceil() as usize;
    if n_val == 0 || n_val >= n_groups {
        return Err(LtrError::DegenerateSplit(format!(
            "{n_groups} groups leave {n_val} for validation"
        )));
    }
    let mut order: Vec<usize> = (0..n_groups).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = order.split_off(n_groups - n_val);
    Ok((order, val))
}

pub fn train_ltr(
    matrix: &FeatureMatrix,
    params: &LtrHyperparams,
    split_fraction: f64,
    exec: Exec,
) -> Result<LtrModel, LtrError> {
    params.validate()?;
    let labels = matrix.labels.as_ref().ok_or(LtrError::NoLabels)?;
    if matrix.n_cols() == 0 {
        return Err(LtrError::InvalidParam("matrix has no feature columns".into()));
    }
    let (train_groups, val_groups) = split_groups(matrix.n_groups(), split_fraction, params.seed)?;

    let train_rows: Vec<usize> = train_groups
        .iter()
        .flat_map(|&g| matrix.group_rows(g))
        .collect();
    let binned = Binned::build(matrix, &train_rows, params.max_bin, exec);
    let train_labels: Vec<u8> = train_rows.iter().map(|&r| labels[r]).collect();
    let n_train = train_rows.len();
    let n_train_groups = train_groups.len();

    let n_features = matrix.n_cols();
    let k_features = ((params.feature_fraction * n_features as f64).round() as usize).clamp(1, n_features);
    let mut feature_rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut train_scores = vec![0.0; n_train];
    let mut val_scores = vec![0.0; val_groups.len() * GROUP];
    let val_labels: Vec<u8> = val_groups
        .iter()
        .flat_map(|&g| matrix.group_rows(g).map(|r| labels[r]))
        .collect();
    let val_local: Vec<usize> = (0..val_groups.len()).collect();

    let mut trees: Vec<Tree> = Vec::new();
    let mut best_ndcg = f64::NEG_INFINITY;
    let mut best_iter = 0;
    let mut gh = vec![0.0; 2 * n_train];
    let mut grad = vec![0.0; n_train];
    let mut hess = vec![0.0; n_train];
    let all_rows: Vec<u32> = (0..n_train as u32).collect();

    for iter in 1..=params.n_estimators {
        let offsets: Vec<usize> = (0..=n_train_groups).map(|g| 2 * g * GROUP).collect();
        exec.for_each_segment(&mut gh, &offsets, |g, out| {
            let r = g * GROUP..(g + 1) * GROUP;
            group_gradients(&train_scores[r.clone()], &train_labels[r], out);
        });
        for r in 0..n_train {
            grad[r] = gh[2 * r];
            hess[r] = gh[2 * r + 1];
        }

        let mut features: Vec<usize> = index::sample(&mut feature_rng, n_features, k_features).into_vec();
        features.sort_unstable();

        let builder = TreeBuilder {
            binned: &binned,
            grad: &grad,
            hess: &hess,
            features: &features,
            params,
            exec,
        };
        let tree = builder.grow(all_rows.clone());
        for (r, &row) in train_rows.iter().enumerate() {
            train_scores[r] += tree.predict(matrix.row(row));
        }
        for (v, &g) in val_groups.iter().enumerate() {
            for (j, row) in matrix.group_rows(g).enumerate() {
                val_scores[v * GROUP + j] += tree.predict(matrix.row(row));
            }
        }
        trees.push(tree);

        let ndcg = mean_ndcg(&val_scores, &val_labels, &val_local);
        if ndcg > best_ndcg {
            best_ndcg = ndcg;
            best_iter = iter;
        } else if iter - best_iter >= params.early_stopping_rounds {
            log::debug!("early stop at iteration {iter}, best {best_iter} (ndcg {best_ndcg:.6})");
            break;
        }
    }
    let trees_built = trees.len();
    trees.truncate(best_iter);
    let mut validation_sample_ids: Vec<usize> = val_groups.iter().map(|&g| matrix.sample_ids[g]).collect();
    validation_sample_ids.sort_unstable();
    Ok(LtrModel {
        schema: matrix.schema.clone(),
        schema_fingerprint: matrix.schema.fingerprint(),
        params: params.clone(),
        trees,
        summary: TrainSummary {
            train_groups: n_train_groups,
            validation_groups: val_groups.len(),
            validation_sample_ids,
            trees_built,
            best_iteration: best_iter,
            best_validation_ndcg: best_ndcg,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FamilyColumns;
    use rand::Rng;

    fn matrix(n_groups: usize, n_cols: usize, seed: u64, f: impl Fn(&mut ChaCha8Rng, bool, usize) -> f64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let families = (0..n_cols.div_ceil(5))
            .map(|i| FamilyColumns {
                family_id: format!("f{i}"),
                avail: false,
            })
            .collect();
        let schema = FeatureSchema { families };
        let cols = schema.n_columns();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut candidate_ids = Vec::new();
        for g in 0..n_groups {
            let gold = rng.random_range(0..GROUP);
            for j in 0..GROUP {
                labels.push(u8::from(j == gold));
                candidate_ids.push(format!("g{g}c{j}"));
                for c in 0..cols {
                    values.push(f(&mut rng, j == gold, c));
                }
            }
        }
        FeatureMatrix {
            schema,
            sample_ids: (0..n_groups).collect(),
            candidate_ids,
            values,
            labels: Some(labels),
        }
    }

    #[test]
    fn defaults_match_configuration() {
        let p = LtrHyperparams::default();
        assert_eq!(
            (p.n_estimators, p.early_stopping_rounds, p.max_bin, p.min_child_samples),
            (500, 100, 100, 50)
        );
        assert_eq!((p.learning_rate, p.feature_fraction, p.reg_alpha), (0.03, 0.25, 0.05));
        p.validate().unwrap();
    }

    #[test]
    fn split_is_group_level_and_sized_by_ceiling() {
        let (train, val) = split_groups(12869, 0.2, 0).unwrap();
        assert_eq!(val.len(), 2574);
        assert_eq!(train.len() + val.len(), 12869);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..12869).collect::<Vec<_>>());
        assert_eq!(split_groups(10, 0.2, 3).unwrap(), split_groups(10, 0.2, 3).unwrap());
        assert!(matches!(split_groups(1, 0.2, 0), Err(LtrError::DegenerateSplit(_))));
    }

    #[test]
    fn thresholds_are_midpoints() {
        let mut v = vec![3.0, 1.0, 2.0, 2.0, 1.0];
        assert_eq!(bin_thresholds(&mut v, 100), vec![1.5, 2.5]);
        assert_eq!(bin_of(&[1.5, 2.5], 1.5), 0);
        assert_eq!(bin_of(&[1.5, 2.5], 2.0), 1);
        assert_eq!(bin_of(&[1.5, 2.5], 9.0), 2);
        let mut many: Vec<f64> = (0..1000).map(f64::from).collect();
        let t = bin_thresholds(&mut many, 100);
        assert!(t.len() <= 99 && t.len() >= 90);
        assert!(t.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn ndcg_hand_values() {
        let labels = [0, 1, 0];
        assert_eq!(ndcg_at(&[0.0, 1.0, 0.5], &labels, 10), 1.0);
        let second = ndcg_at(&[1.0, 0.5, 0.0], &labels, 10);
        assert!((second - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert_eq!(ndcg_at(&[1.0, 0.5, 0.0], &[0, 0, 0], 10), 1.0);
    }

    #[test]
    fn gradients_push_gold_up_and_sum_to_zero() {
        let scores = [0.3, 0.1, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let mut labels = [0u8; 10];
        labels[2] = 1;
        let mut out = [0.0; 20];
        group_gradients(&scores, &labels, &mut out);
        assert!(out[4] < 0.0);
        assert!((0..10).filter(|&j| j != 2).all(|j| out[2 * j] >= 0.0));
        let sum: f64 = (0..10).map(|j| out[2 * j]).sum();
        assert!(sum.abs() < 1e-12);
        assert!((0..10).all(|j| out[2 * j + 1] >= 0.0));
        group_gradients(&scores, &[0; 10], &mut out);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn learns_an_informative_feature() {
        let m = matrix(300, 5, 1, |rng, gold, c| match c {
            0 => f64::from(u8::from(gold)),
            _ => rng.random(),
        });
        let params = LtrHyperparams {
            n_estimators: 60,
            early_stopping_rounds: 20,
            feature_fraction: 1.0,
            ..Default::default()
        };
        let model = train_ltr(&m, &params, 0.2, Exec::Sequential).unwrap();
        assert!(model.summary.best_validation_ndcg > 0.999);
        let ranks = predict_rank(&model, &m, Exec::Sequential).unwrap();
        let labels = m.labels.as_ref().unwrap();
        for (g, r) in ranks.iter().enumerate() {
            let gold = m.group_rows(g).find(|&row| labels[row] == 1).unwrap();
            assert_eq!(r.top(), Some(m.candidate_ids[gold].as_str()));
        }
    }

    #[test]
    fn training_is_reproducible_across_modes() {
        let m = matrix(120, 10, 7, |rng, gold, c| {
            let signal = if gold && c < 2 { 0.3 } else { 0.0 };
            signal + rng.random::<f64>()
        });
        let params = LtrHyperparams {
            n_estimators: 25,
            min_child_samples: 20,
            seed: 11,
            ..Default::default()
        };
        let a = train_ltr(&m, &params, 0.2, Exec::Sequential).unwrap();
        let b = train_ltr(&m, &params, 0.2, Exec::default()).unwrap();
        assert_eq!(a, b);
        let sa = a.predict_scores(&m, Exec::Sequential).unwrap();
        let sb = b.predict_scores(&m, Exec::default()).unwrap();
        assert!(sa.iter().zip(&sb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn model_json_round_trip_is_exact() {
        let m = matrix(100, 5, 3, |rng, gold, _| f64::from(u8::from(gold)) * 0.5 + rng.random::<f64>());
        let params = LtrHyperparams {
            n_estimators: 10,
            min_child_samples: 10,
            ..Default::default()
        };
        let model = train_ltr(&m, &params, 0.2, Exec::Sequential).unwrap();
        let back = LtrModel::from_json(&model.to_json()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn identical_rows_keep_candidate_order() {
        let m = matrix(60, 5, 5, |_, _, c| c as f64);
        let params = LtrHyperparams {
            n_estimators: 3,
            ..Default::default()
        };
        let model = train_ltr(&m, &params, 0.2, Exec::Sequential).unwrap();
        for r in predict_rank(&model, &m, Exec::Sequential).unwrap() {
            let g = r.sample_id;
            assert_eq!(r.candidates, m.candidate_ids[m.group_rows(g)].to_vec());
        }
    }

    #[test]
    fn errors() {
        let mut m = matrix(20, 5, 0, |rng, _, _| rng.random());
        let params = LtrHyperparams::default();
        let unlabeled = FeatureMatrix {
            labels: None,
            ..m.clone()
        };
        assert_eq!(train_ltr(&unlabeled, &params, 0.2, Exec::Sequential), Err(LtrError::NoLabels));
        assert!(matches!(
            train_ltr(&m, &params, 0.0, Exec::Sequential),
            Err(LtrError::DegenerateSplit(_))
        ));
        let model = train_ltr(&m, &LtrHyperparams { n_estimators: 2, ..params.clone() }, 0.2, Exec::Sequential).unwrap();
        m.schema.families[0].family_id = "other".into();
        assert!(matches!(
            predict_rank(&model, &m, Exec::Sequential),
            Err(LtrError::SchemaMismatch { .. })
        ));
        let bad = LtrHyperparams {
            learning_rate: 0.0,
            ..params
        };
        assert!(matches!(bad.validate(), Err(LtrError::InvalidParam(_))));
    }
}
