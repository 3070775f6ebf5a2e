//! Bagged regression trees with linear leaves.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Fraction of features considered at each split.
    pub feature_fraction: f64,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { trees: 50, max_depth: 12, min_leaf: 2, feature_fraction: 0.8, seed: 42 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum TreeNode {
    /// `intercept + slope * x[feature]` with `x[feature]` clamped to the
    /// leaf's training range `[lo, hi]`; a constant leaf has zero slope.
    Leaf { feature: usize, slope: f64, intercept: f64, lo: f64, hi: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { feature, slope, intercept, lo, hi } => {
                    return if slope == 0.0 { intercept } else { intercept + slope * x[feature].clamp(lo, hi) };
                }
                TreeNode::Split { feature, threshold, left, right } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    trees: Vec<Tree>,
    features: usize,
}

/// Rows a leaf needs before it fits a line instead of a constant.
const MIN_LINEAR: usize = 5;
/// How far (in feature units) a leaf line may extend past its rows.
const MARGIN: f64 = 1.0;

/// Running sums for one-feature least squares over a growing row set.
#[derive(Clone)]
struct Sums {
    n: f64,
    sy: f64,
    syy: f64,
    sx: Vec<f64>,
    sxx: Vec<f64>,
    sxy: Vec<f64>,
}

impl Sums {
    fn new(features: usize) -> Self {
        Sums { n: 0.0, sy: 0.0, syy: 0.0, sx: vec![0.0; features], sxx: vec![0.0; features], sxy: vec![0.0; features] }
    }

    fn add(&mut self, x: &[f64], y: f64, feats: &[usize], sign: f64) {
        self.n += sign;
        self.sy += sign * y;
        self.syy += sign * y * y;
        for (j, &f) in feats.iter().enumerate() {
            self.sx[j] += sign * x[f];
            self.sxx[j] += sign * x[f] * x[f];
            self.sxy[j] += sign * x[f] * y;
        }
    }

    fn minus(&self, other: &Sums) -> Sums {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
        Sums {
            n: self.n - other.n,
            sy: self.sy - other.sy,
            syy: self.syy - other.syy,
            sx: d(&self.sx, &other.sx),
            sxx: d(&self.sxx, &other.sxx),
            sxy: d(&self.sxy, &other.sxy),
        }
    }

    /// Smallest squared error over a constant or any one-feature line:
    /// `(sse, slot, slope, intercept)`, with `slot = None` for the constant.
    fn best(&self) -> (f64, Option<usize>, f64, f64) {
        let n = self.n;
        let my = self.sy / n;
        let syy = (self.syy - self.sy * my).max(0.0);
        let mut best = (syy, None, 0.0, my);
        if n + 0.5 < MIN_LINEAR as f64 {
            return best;
        }
        for j in 0..self.sx.len() {
            let mx = self.sx[j] / n;
            let sxx = self.sxx[j] - self.sx[j] * mx;
            if sxx <= 1e-9 * n {
                continue;
            }
            let sxy = self.sxy[j] - self.sx[j] * my;
            let slope = sxy / sxx;
            let sse = (syy - slope * sxy).max(0.0);
            if sse < best.0 - 1e-12 * (1.0 + syy) {
                best = (sse, Some(j), slope, my - slope * mx);
            }
        }
        best
    }
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    p: &'a ForestParams,
    rng: ChaCha8Rng,
    nodes: Vec<TreeNode>,
}

impl Builder<'_> {
    fn sums(&self, idx: &[usize], feats: &[usize]) -> Sums {
        let mut s = Sums::new(feats.len());
        for &i in idx {
            s.add(&self.x[i], self.y[i], feats, 1.0);
        }
        s
    }

    fn push_leaf(&mut self, idx: &[usize], all: &[usize]) -> usize {
        let first = self.y[idx[0]];
        let leaf = if idx.iter().all(|&i| self.y[i] == first) {
            TreeNode::Leaf { feature: 0, slope: 0.0, intercept: first, lo: 0.0, hi: 0.0 }
        } else {
            let (_, slot, slope, intercept) = self.sums(idx, all).best();
            match slot {
                Some(j) => {
                    let f = all[j];
                    let lo = idx.iter().map(|&i| self.x[i][f]).fold(f64::INFINITY, f64::min);
                    let hi = idx.iter().map(|&i| self.x[i][f]).fold(f64::NEG_INFINITY, f64::max);
                    TreeNode::Leaf { feature: f, slope, intercept, lo: lo - MARGIN, hi: hi + MARGIN }
                }
                None => TreeNode::Leaf { feature: 0, slope: 0.0, intercept, lo: 0.0, hi: 0.0 },
            }
        };
        self.nodes.push(leaf);
        self.nodes.len() - 1
    }

    /// Grows a subtree whose leaves fit lines; splits minimize the summed
    /// best-line error of the two children.
    fn build(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let n = idx.len();
        let nf = self.x[0].len();
        let all: Vec<usize> = (0..nf).collect();
        let first = self.y[idx[0]];
        if depth >= self.p.max_depth || n < 2 * self.p.min_leaf || idx.iter().all(|&i| self.y[i] == first) {
            return self.push_leaf(idx, &all);
        }
        let k = (libm::ceil(nf as f64 * self.p.feature_fraction) as usize).clamp(1, nf);
        let mut feats = all.clone();
        for i in 0..k {
            let j = self.rng.random_range(i..nf);
            feats.swap(i, j);
        }
        let feats = &feats[..k];
        let total = self.sums(idx, feats);
        let parent = total.best().0;
        if parent <= 1e-12 * (1.0 + total.syy) {
            return self.push_leaf(idx, &all);
        }
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = idx.to_vec();
        for &f in feats {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let mut left = Sums::new(k);
            for s in 0..n - 1 {
                let r = order[s];
                left.add(&self.x[r], self.y[r], feats, 1.0);
                let nl = s + 1;
                let (xa, xb) = (self.x[r][f], self.x[order[s + 1]][f]);
                if nl < self.p.min_leaf || n - nl < self.p.min_leaf || xa == xb {
                    continue;
                }
                let sse = left.best().0 + total.minus(&left).best().0;
                if best.is_none_or(|(b, _, _)| sse < b) {
                    best = Some((sse, f, xa + (xb - xa) / 2.0));
                }
            }
        }
        let Some((sse, feature, threshold)) = best else { return self.push_leaf(idx, &all) };
        if !(sse < parent * (1.0 - 1e-9)) {
            return self.push_leaf(idx, &all);
        }
        let mut split = 0;
        for i in 0..n {
            if self.x[idx[i]][feature] <= threshold {
                idx.swap(i, split);
                split += 1;
            }
        }
        let me = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { feature: 0, slope: 0.0, intercept: 0.0, lo: 0.0, hi: 0.0 });
        let (l, r) = idx.split_at_mut(split);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[me] = TreeNode::Split { feature, threshold, left, right };
        me
    }
}

impl Forest {
    /// Fits `p.trees` trees, each on a bootstrap sample of the rows.
    ///
    /// Panics if `x` is empty or rows differ in length.
    pub fn fit(x: &[Vec<f64>], y: &[f64], p: &ForestParams) -> Forest {
        assert!(!x.is_empty() && x.len() == y.len());
        let nf = x[0].len();
        assert!(x.iter().all(|r| r.len() == nf));
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let mut trees = Vec::with_capacity(p.trees);
        for _ in 0..p.trees.max(1) {
            let mut idx: Vec<usize> = (0..x.len()).map(|_| rng.random_range(0..x.len())).collect();
            let tree_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let mut b = Builder { x, y, p, rng: tree_rng, nodes: Vec::new() };
            b.build(&mut idx, 0);
            trees.push(Tree { nodes: b.nodes });
        }
        Forest { trees, features: nf }
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let preds: Vec<f64> = self.trees.iter().map(|t| t.predict(x)).collect();
        if preds.iter().all(|v| *v == preds[0]) {
            return preds[0];
        }
        preds.iter().sum::<f64>() / preds.len() as f64
    }
}

/// Deterministic permutation of `0..n`.
pub fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    v
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_target_is_exact() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * 7 % 5) as f64]).collect();
        let y = vec![0.3; 20];
        let f = Forest::fit(&x, &y, &ForestParams::default());
        assert_eq!(f.predict(&[3.5, 1.0]), 0.3);
    }

    #[test]
    fn step_function_is_learned() {
        let x: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..100).map(|i| if i < 50 { 1.0 } else { 5.0 }).collect();
        let f = Forest::fit(&x, &y, &ForestParams::default());
        assert!((f.predict(&[10.0]) - 1.0).abs() < 0.2);
        assert!((f.predict(&[90.0]) - 5.0).abs() < 0.2);
    }

    #[test]
    fn fit_is_deterministic() {
        let x: Vec<Vec<f64>> = (0..60).map(|i| vec![(i * 13 % 17) as f64, i as f64]).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0] * 2.0 + r[1]).collect();
        let a = Forest::fit(&x, &y, &ForestParams::default());
        let b = Forest::fit(&x, &y, &ForestParams::default());
        assert_eq!(a, b);
    }
}
