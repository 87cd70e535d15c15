//! CART decision trees with Gini splits, bagged into a random forest.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Class, CLASS_COUNT};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows trees until leaves are pure.
    pub max_depth: Option<usize>,
    /// Features tried per split; `None` means `sqrt(dim)`.
    pub max_features: Option<usize>,
    pub min_samples_split: usize,
    /// Bootstrap sample size per tree; `None` means the training set size.
    pub max_samples: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            max_features: None,
            min_samples_split: 2,
            max_samples: None,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Node {
    Split {
        feature: u16,
        threshold: f32,
        left: u32,
        right: u32,
    },
    Leaf(Class),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub(crate) nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn predict(&self, x: &[f32]) -> Class {
        let mut at = 0usize;
        loop {
            match self.nodes[at] {
                Node::Leaf(c) => return c,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[feature as usize] <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

/// Borrowed training matrix: `rows[n]` has `dim` features.
pub(crate) struct TrainingView<'a> {
    pub rows: Vec<&'a [f32]>,
    pub labels: Vec<Class>,
    pub dim: usize,
}

fn gini(counts: &[usize; CLASS_COUNT], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

fn majority(counts: &[usize; CLASS_COUNT]) -> Class {
    // Ties favour non-text, then text.
    let mut best = Class::NonText;
    for c in [Class::NonText, Class::Text, Class::Black] {
        if counts[c as usize] > counts[best as usize] {
            best = c;
        }
    }
    best
}

struct Builder<'a, 'v> {
    data: &'a TrainingView<'v>,
    params: &'a ForestParams,
    max_features: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    scratch: Vec<(f32, Class)>,
}

impl Builder<'_, '_> {
    fn counts(&self, idx: &[u32]) -> [usize; CLASS_COUNT] {
        let mut c = [0; CLASS_COUNT];
        for &i in idx {
            c[self.data.labels[i as usize] as usize] += 1;
        }
        c
    }

    /// Best `(feature, threshold, impurity)` over a random feature subset.
    fn best_split(&mut self, idx: &[u32], parent: &[usize; CLASS_COUNT]) -> Option<(usize, f32, f64)> {
        let n = idx.len();
        let mut best: Option<(usize, f32, f64)> = None;
        let features = sample(&mut self.rng, self.data.dim, self.max_features.min(self.data.dim));
        for f in features.iter() {
            self.scratch.clear();
            self.scratch
                .extend(idx.iter().map(|&i| (self.data.rows[i as usize][f], self.data.labels[i as usize])));
            self.scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = [0usize; CLASS_COUNT];
            for k in 0..n - 1 {
                left[self.scratch[k].1 as usize] += 1;
                let (v, next) = (self.scratch[k].0, self.scratch[k + 1].0);
                if v == next {
                    continue;
                }
                let nl = k + 1;
                let nr = n - nl;
                let mut right = *parent;
                for c in 0..CLASS_COUNT {
                    right[c] -= left[c];
                }
                let score = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / n as f64;
                if best.map_or(true, |(_, _, s)| score < s) {
                    // Midpoint, falling back to the lower value when the midpoint
                    // rounds up to the upper one.
                    let mut t = v + (next - v) / 2.0;
                    if t >= next {
                        t = v;
                    }
                    best = Some((f, t, score));
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: &mut [u32], depth: usize) -> u32 {
        let slot = self.nodes.len() as u32;
        let counts = self.counts(idx);
        let n = idx.len();
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_capped = self.params.max_depth.is_some_and(|d| depth >= d);
        self.nodes.push(Node::Leaf(majority(&counts)));
        if pure || depth_capped || n < self.params.min_samples_split.max(2) {
            return slot;
        }
        let parent_impurity = gini(&counts, n);
        let Some((feature, threshold, score)) = self.best_split(idx, &counts) else {
            return slot;
        };
        if score >= parent_impurity {
            return slot;
        }
        let rows = &self.data.rows;
        let mut split = 0;
        for k in 0..n {
            if rows[idx[k] as usize][feature] <= threshold {
                idx.swap(k, split);
                split += 1;
            }
        }
        if split == 0 || split == n {
            return slot;
        }
        let (l, r) = idx.split_at_mut(split);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[slot as usize] = Node::Split {
            feature: feature as u16,
            threshold,
            left,
            right,
        };
        slot
    }
}

pub(crate) fn grow_forest(data: &TrainingView<'_>, params: &ForestParams) -> Vec<DecisionTree> {
    let n = data.rows.len();
    let max_features = params
        .max_features
        .unwrap_or_else(|| (data.dim as f64).sqrt().round() as usize)
        .max(1);
    let bag = params.max_samples.unwrap_or(n).max(1);
    (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(t as u64 + 1);
            let mut idx: Vec<u32> = (0..bag).map(|_| rng.gen_range(0..n) as u32).collect();
            let mut b = Builder {
                data,
                params,
                max_features,
                rng,
                nodes: Vec::new(),
                scratch: Vec::with_capacity(bag),
            };
            b.grow(&mut idx, 0);
            DecisionTree { nodes: b.nodes }
        })
        .collect()
}

pub(crate) fn vote(trees: &[DecisionTree], x: &[f32]) -> Class {
    let mut counts = [0usize; CLASS_COUNT];
    for t in trees {
        counts[t.predict(x) as usize] += 1;
    }
    majority(&counts)
}

const TAG_LEAF: u8 = 0;
const TAG_SPLIT: u8 = 1;

pub(crate) fn write_trees<W: Write>(w: &mut W, trees: &[DecisionTree]) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(trees.len() as u32)?;
    for t in trees {
        w.write_u32::<LittleEndian>(t.nodes.len() as u32)?;
        for node in &t.nodes {
            match *node {
                Node::Leaf(c) => {
                    w.write_u8(TAG_LEAF)?;
                    w.write_u8(c as u8)?;
                }
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    w.write_u8(TAG_SPLIT)?;
                    w.write_u16::<LittleEndian>(feature)?;
                    w.write_f32::<LittleEndian>(threshold)?;
                    w.write_u32::<LittleEndian>(left)?;
                    w.write_u32::<LittleEndian>(right)?;
                }
            }
        }
    }
    Ok(())
}

pub(crate) fn read_trees<R: Read>(r: &mut R, dim: usize) -> Result<Vec<DecisionTree>> {
    let corrupt = |what: &str| Error::CorruptModel(what.to_string());
    let io = |_: std::io::Error| Error::CorruptModel("truncated".into());
    let n_trees = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut trees = Vec::with_capacity(n_trees.min(1 << 16));
    for _ in 0..n_trees {
        let n_nodes = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if n_nodes == 0 {
            return Err(corrupt("empty tree"));
        }
        let mut nodes = Vec::with_capacity(n_nodes.min(1 << 24));
        for at in 0..n_nodes {
            let node = match r.read_u8().map_err(io)? {
                TAG_LEAF => Node::Leaf(Class::from_u8(r.read_u8().map_err(io)?).ok_or_else(|| corrupt("bad class"))?),
                TAG_SPLIT => Node::Split {
                    feature: r.read_u16::<LittleEndian>().map_err(io)?,
                    threshold: r.read_f32::<LittleEndian>().map_err(io)?,
                    left: r.read_u32::<LittleEndian>().map_err(io)?,
                    right: r.read_u32::<LittleEndian>().map_err(io)?,
                },
                _ => return Err(corrupt("bad node tag")),
            };
            if let Node::Split {
                feature, left, right, ..
            } = node
            {
                let (l, r) = (left as usize, right as usize);
                if feature as usize >= dim || l <= at || r <= at || l >= n_nodes || r >= n_nodes {
                    return Err(corrupt("node reference out of range"));
                }
            }
            nodes.push(node);
        }
        trees.push(DecisionTree { nodes });
    }
    Ok(trees)
}
