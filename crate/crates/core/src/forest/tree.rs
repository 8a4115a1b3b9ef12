//! CART classification tree with Gini impurity.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Node storage is a flat arena; `left`/`right` index into it. Samples with
/// `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        counts: Vec<u32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Arena index of the leaf `x` falls into.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn leaf_counts(&self, leaf: usize) -> &[u32] {
        match &self.nodes[leaf] {
            Node::Leaf { counts } => counts,
            Node::Split { .. } => panic!("node {leaf} is not a leaf"),
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    fn to_doc(&self, i: usize) -> NodeDoc {
        match &self.nodes[i] {
            Node::Leaf { counts } => NodeDoc::Leaf {
                counts: counts.clone(),
            },
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => NodeDoc::Split {
                feature: *feature,
                threshold: *threshold,
                left: Box::new(self.to_doc(*left)),
                right: Box::new(self.to_doc(*right)),
            },
        }
    }

    fn push_doc(nodes: &mut Vec<Node>, doc: NodeDoc) -> usize {
        let at = nodes.len();
        match doc {
            NodeDoc::Leaf { counts } => nodes.push(Node::Leaf { counts }),
            NodeDoc::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                nodes.push(Node::Leaf { counts: Vec::new() });
                let l = Self::push_doc(nodes, *left);
                let r = Self::push_doc(nodes, *right);
                nodes[at] = Node::Split {
                    feature,
                    threshold,
                    left: l,
                    right: r,
                };
            }
        }
        at
    }
}

/// Nested serialized form of a tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeDoc {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<NodeDoc>,
        right: Box<NodeDoc>,
    },
    Leaf {
        counts: Vec<u32>,
    },
}

impl Serialize for Tree {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_doc(0).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Tree {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = NodeDoc::deserialize(d)?;
        let mut nodes = Vec::new();
        Self::push_doc(&mut nodes, doc);
        Ok(Tree { nodes })
    }
}

/// Row-major training matrix with class indices.
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a> {
    pub x: &'a [f64],
    pub n_features: usize,
    pub y: &'a [usize],
    pub n_classes: usize,
}

impl TrainingView<'_> {
    #[inline]
    fn value(&self, sample: usize, feature: usize) -> f64 {
        self.x[sample * self.n_features + feature]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Features examined per split.
    pub features_per_split: usize,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    /// Σ_c l_c²/n_l + Σ_c r_c²/n_r; larger is purer.
    score: f64,
    /// Distinct rows going left.
    rows_left: usize,
}

/// A distinct training row and how many times the bootstrap drew it.
#[derive(Debug, Clone, Copy)]
struct Row {
    index: usize,
    weight: u32,
}

struct Builder<'a, R: ?Sized> {
    data: TrainingView<'a>,
    params: TreeParams,
    rng: &'a mut R,
    nodes: Vec<Node>,
    importance: Vec<f64>,
    feature_order: Vec<usize>,
    column: Vec<(f64, u32, u32)>,
}

/// Grows one tree on `samples` (row indices, duplicates allowed).
///
/// At each node, features are visited in a random order until
/// `features_per_split` non-constant ones have been examined (or all are
/// exhausted). Candidate thresholds are midpoints between consecutive distinct
/// values. The best Gini split wins; exact ties go to the lowest feature
/// index, then the lowest threshold. Returns the tree and its unnormalized
/// impurity-decrease importances. `samples` is left sorted.
pub fn grow<R: Rng + ?Sized>(
    data: TrainingView<'_>,
    samples: &mut [usize],
    params: TreeParams,
    rng: &mut R,
) -> (Tree, Vec<f64>) {
    samples.sort_unstable();
    let mut rows: Vec<Row> = Vec::with_capacity(samples.len());
    for &index in samples.iter() {
        match rows.last_mut() {
            Some(r) if r.index == index => r.weight += 1,
            _ => rows.push(Row { index, weight: 1 }),
        }
    }
    let mut b = Builder {
        data,
        params,
        rng,
        nodes: Vec::new(),
        importance: vec![0.0; data.n_features],
        feature_order: (0..data.n_features).collect(),
        column: Vec::with_capacity(rows.len()),
    };
    let total = samples.len() as f64;
    b.build(&mut rows, 0, total);
    (Tree { nodes: b.nodes }, b.importance)
}

fn sum_squares(counts: &[u32]) -> f64 {
    counts.iter().map(|&c| f64::from(c) * f64::from(c)).sum()
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn class_counts(&self, rows: &[Row]) -> Vec<u32> {
        let mut counts = vec![0u32; self.data.n_classes];
        for r in rows {
            counts[self.data.y[r.index]] += r.weight;
        }
        counts
    }

    fn build(&mut self, rows: &mut [Row], depth: usize, total: f64) -> usize {
        let counts = self.class_counts(rows);
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf {
            counts: counts.clone(),
        });

        let n: u32 = counts.iter().sum();
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_capped = self.params.max_depth.is_some_and(|d| depth >= d);
        if pure || depth_capped || (n as usize) < 2 * self.params.min_samples_leaf {
            return at;
        }
        let Some(best) = self.best_split(rows, &counts) else {
            return at;
        };

        let parent_score = sum_squares(&counts) / f64::from(n);
        self.importance[best.feature] += (best.score - parent_score) / total;

        let (mut lo, mut hi) = (0, rows.len());
        while lo < hi {
            if self.data.value(rows[lo].index, best.feature) <= best.threshold {
                lo += 1;
            } else {
                hi -= 1;
                rows.swap(lo, hi);
            }
        }
        debug_assert_eq!(lo, best.rows_left);
        let (left_rows, right_rows) = rows.split_at_mut(lo);
        let left = self.build(left_rows, depth + 1, total);
        let right = self.build(right_rows, depth + 1, total);
        self.nodes[at] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        at
    }

    fn best_split(&mut self, rows: &[Row], counts: &[u32]) -> Option<BestSplit> {
        let p = self.data.n_features;
        let m = rows.len();
        let n: u32 = counts.iter().sum();
        let min_leaf = self.params.min_samples_leaf;
        let mut best: Option<BestSplit> = None;
        let mut examined = 0;
        let mut left = vec![0u32; counts.len()];
        let mut right = vec![0u32; counts.len()];

        for i in 0..p {
            if examined >= self.params.features_per_split {
                break;
            }
            let j = self.rng.random_range(i..p);
            self.feature_order.swap(i, j);
            let feature = self.feature_order[i];

            self.column.clear();
            self.column.extend(rows.iter().map(|r| {
                (
                    self.data.value(r.index, feature),
                    self.data.y[r.index] as u32,
                    r.weight,
                )
            }));
            self.column.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            if self.column[0].0 == self.column[m - 1].0 {
                continue;
            }
            examined += 1;

            left.iter_mut().for_each(|c| *c = 0);
            right.copy_from_slice(counts);
            let mut left_sq = 0.0;
            let mut right_sq = sum_squares(counts);
            let mut n_left = 0u32;
            for k in 0..m - 1 {
                let (value, class, w) = self.column[k];
                let (class, wf) = (class as usize, f64::from(w));
                // (c + w)² - c² and c² - (c - w)², exact in f64.
                left_sq += wf * (2.0 * f64::from(left[class]) + wf);
                right_sq -= wf * (2.0 * f64::from(right[class]) - wf);
                left[class] += w;
                right[class] -= w;
                n_left += w;

                let next = self.column[k + 1].0;
                if value == next {
                    continue;
                }
                let n_right = n - n_left;
                if (n_left as usize) < min_leaf || (n_right as usize) < min_leaf {
                    continue;
                }
                let score = left_sq / f64::from(n_left) + right_sq / f64::from(n_right);
                let better = match &best {
                    None => true,
                    Some(b) => score > b.score || (score == b.score && feature < b.feature),
                };
                if better {
                    let mut threshold = value / 2.0 + next / 2.0;
                    if threshold >= next || !threshold.is_finite() {
                        threshold = value;
                    }
                    best = Some(BestSplit {
                        feature,
                        threshold,
                        score,
                        rows_left: k + 1,
                    });
                }
            }
        }
        best
    }
}
