use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ForestParams, Impurity};
use crate::labeling::N_CLASSES;

/// A node in a flat tree. Children are indices into the node list; rows with
/// `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        dist: [f64; N_CLASSES],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub(crate) fn from_nodes(nodes: Vec<Node>) -> Self {
        Self { nodes }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn leaf(&self, x: &[f64]) -> &[f64; N_CLASSES] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
                Node::Leaf { dist } => return dist,
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        let mut best = 0;
        let mut stack = vec![(0usize, 0usize)];
        while let Some((i, d)) = stack.pop() {
            best = best.max(d);
            if let Node::Split { left, right, .. } = self.nodes[i] {
                stack.push((left as usize, d + 1));
                stack.push((right as usize, d + 1));
            }
        }
        best
    }
}

/// Column-major training features and encoded labels.
pub(crate) struct TrainData<'a> {
    pub cols: &'a [Vec<f64>],
    pub labels: &'a [u8],
}

pub(crate) fn bootstrap(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..n as u32)).collect()
}

struct Task {
    start: usize,
    end: usize,
    depth: usize,
    node: usize,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    score: f64,
}

fn counts_of(rows: &[u32], labels: &[u8]) -> [u32; N_CLASSES] {
    let mut c = [0u32; N_CLASSES];
    for &r in rows {
        c[labels[r as usize] as usize] += 1;
    }
    c
}

fn distribution(counts: &[u32; N_CLASSES]) -> [f64; N_CLASSES] {
    let n: u32 = counts.iter().sum();
    let mut d = [0.0; N_CLASSES];
    for (v, &c) in d.iter_mut().zip(counts) {
        *v = c as f64 / n as f64;
    }
    d
}

/// Grow one tree on a bootstrap resample drawn from `rng`.
pub(crate) fn grow(data: &TrainData, params: &ForestParams, impurity: &dyn Impurity, rng: &mut ChaCha8Rng) -> Tree {
    let n = data.labels.len();
    let d = data.cols.len();
    let mut rows = bootstrap(rng, n);
    let mut nodes = vec![Node::Leaf { dist: [0.0; N_CLASSES] }];
    let mut stack = vec![Task {
        start: 0,
        end: n,
        depth: 0,
        node: 0,
    }];
    let mut features: Vec<usize> = (0..d).collect();
    let mut scratch: Vec<(f64, u8)> = Vec::with_capacity(n);

    while let Some(task) = stack.pop() {
        let slice = &mut rows[task.start..task.end];
        let counts = counts_of(slice, data.labels);
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_capped = params.max_depth.is_some_and(|m| task.depth >= m);
        let too_small = slice.len() < 2 * params.min_leaf;
        let best = if pure || depth_capped || too_small {
            None
        } else {
            best_split(data, slice, &counts, params, impurity, rng, &mut features, &mut scratch)
        };
        let Some(best) = best else {
            nodes[task.node] = Node::Leaf {
                dist: distribution(&counts),
            };
            continue;
        };
        let col = &data.cols[best.feature];
        let mut split = 0;
        for i in 0..slice.len() {
            if col[slice[i] as usize] <= best.threshold {
                slice.swap(i, split);
                split += 1;
            }
        }
        let left = nodes.len();
        nodes.push(Node::Leaf { dist: [0.0; N_CLASSES] });
        nodes.push(Node::Leaf { dist: [0.0; N_CLASSES] });
        nodes[task.node] = Node::Split {
            feature: best.feature as u32,
            threshold: best.threshold,
            left: left as u32,
            right: (left + 1) as u32,
        };
        stack.push(Task {
            start: task.start + split,
            end: task.end,
            depth: task.depth + 1,
            node: left + 1,
        });
        stack.push(Task {
            start: task.start,
            end: task.start + split,
            depth: task.depth + 1,
            node: left,
        });
    }
    Tree { nodes }
}

/// Examine up to `max_features` randomly chosen features that are not
/// constant in this node and return the lowest weighted-impurity split.
#[allow(clippy::too_many_arguments)]
fn best_split(
    data: &TrainData,
    rows: &[u32],
    parent: &[u32; N_CLASSES],
    params: &ForestParams,
    impurity: &dyn Impurity,
    rng: &mut ChaCha8Rng,
    features: &mut [usize],
    scratch: &mut Vec<(f64, u8)>,
) -> Option<BestSplit> {
    let d = features.len();
    let total = rows.len() as u32;
    let mut best: Option<BestSplit> = None;
    let mut examined = 0;
    for k in 0..d {
        if examined == params.max_features {
            break;
        }
        let j = rng.gen_range(k..d);
        features.swap(k, j);
        let f = features[k];
        let col = &data.cols[f];
        scratch.clear();
        scratch.extend(rows.iter().map(|&r| (col[r as usize], data.labels[r as usize])));
        scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        if scratch[0].0 == scratch[scratch.len() - 1].0 {
            continue;
        }
        examined += 1;
        let mut left = [0u32; N_CLASSES];
        let mut right = *parent;
        for i in 0..scratch.len() - 1 {
            let c = scratch[i].1 as usize;
            left[c] += 1;
            right[c] -= 1;
            let (lo, hi) = (scratch[i].0, scratch[i + 1].0);
            if lo == hi {
                continue;
            }
            let nl = (i + 1) as u32;
            let nr = total - nl;
            if (nl as usize) < params.min_leaf || (nr as usize) < params.min_leaf {
                continue;
            }
            let score = nl as f64 * impurity.of(&left, nl) + nr as f64 * impurity.of(&right, nr);
            if best.as_ref().map_or(true, |b| score < b.score) {
                let mid = lo + (hi - lo) * 0.5;
                best = Some(BestSplit {
                    feature: f,
                    threshold: if mid < hi { mid } else { lo },
                    score,
                });
            }
        }
    }
    best
}
