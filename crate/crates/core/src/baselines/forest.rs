//! Bagged shallow Gini trees with per-split feature subsampling.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::seed::rng_from_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `ceil(sqrt(n_features))`.
    pub max_features: Option<usize>,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 100,
            max_depth: 2,
            min_leaf: 5,
            max_features: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(p) => return p,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomForest {
    trees: Vec<Tree>,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    cfg: &'a ForestConfig,
    n_try: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        self.nodes.push(Node::Leaf(pos as f64 / idx.len() as f64));
        self.nodes.len() - 1
    }

    /// Best `(weighted impurity, feature, threshold)` over a random feature subset.
    fn best_split(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Option<(f64, usize, f64)> {
        let n_features = self.x[0].len();
        let n = idx.len();
        let total_pos = idx.iter().filter(|&&i| self.y[i]).count();
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<(f64, bool)> = Vec::with_capacity(n);
        for feature in index::sample(rng, n_features, self.n_try.min(n_features)) {
            order.clear();
            order.extend(idx.iter().map(|&i| (self.x[i][feature], self.y[i])));
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0;
            for split in 1..n {
                left_pos += usize::from(order[split - 1].1);
                if order[split].0 == order[split - 1].0 || split < self.cfg.min_leaf || n - split < self.cfg.min_leaf {
                    continue;
                }
                let impurity = (split as f64 * gini(left_pos, split)
                    + (n - split) as f64 * gini(total_pos - left_pos, n - split))
                    / n as f64;
                if best.is_none_or(|(b, _, _)| impurity < b) {
                    let threshold = 0.5 * (order[split - 1].0 + order[split].0);
                    best = Some((impurity, feature, threshold));
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        if depth >= self.cfg.max_depth || pos == 0 || pos == idx.len() || idx.len() < 2 * self.cfg.min_leaf {
            return self.leaf(idx);
        }
        let Some((impurity, feature, threshold)) = self.best_split(idx, rng) else {
            return self.leaf(idx);
        };
        if impurity >= gini(pos, idx.len()) {
            return self.leaf(idx);
        }
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf(0.0));
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let left = self.grow(&l, depth + 1, rng);
        let right = self.grow(&r, depth + 1, rng);
        self.nodes[slot] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        slot
    }
}

impl RandomForest {
    /// Fits on rows `x` (all the same width) with boolean labels `y`.
    pub fn fit(x: &[Vec<f64>], y: &[bool], cfg: &ForestConfig, seed: u64) -> RandomForest {
        assert_eq!(x.len(), y.len(), "rows and labels differ in length");
        assert!(!x.is_empty(), "cannot fit on an empty set");
        let n_features = x[0].len();
        let n_try = cfg
            .max_features
            .unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize)
            .max(1);
        let trees = (0..cfg.trees)
            .map(|t| {
                let mut rng = rng_from_seed(crate::seed::hash_words(&[seed, t as u64]));
                let bootstrap: Vec<usize> = (0..x.len()).map(|_| rng.random_range(0..x.len())).collect();
                if n_features == 0 {
                    let pos = bootstrap.iter().filter(|&&i| y[i]).count();
                    return Tree {
                        nodes: vec![Node::Leaf(pos as f64 / bootstrap.len() as f64)],
                    };
                }
                let mut b = Builder {
                    x,
                    y,
                    cfg,
                    n_try,
                    nodes: Vec::new(),
                };
                b.grow(&bootstrap, 0, &mut rng);
                Tree { nodes: b.nodes }
            })
            .collect();
        RandomForest { trees }
    }

    /// Mean over trees of the member fraction in the reached leaf.
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_feature_is_found() {
        let x: Vec<Vec<f64>> = (0..100)
            .map(|i| vec![(i % 7) as f64, if i < 50 { 1.0 } else { 0.0 }, (i % 3) as f64])
            .collect();
        let y: Vec<bool> = (0..100).map(|i| i < 50).collect();
        let cfg = ForestConfig {
            max_features: Some(3),
            ..ForestConfig::default()
        };
        let f = RandomForest::fit(&x, &y, &cfg, 1);
        assert!(f.predict(&[0.0, 1.0, 0.0]) > 0.9);
        assert!(f.predict(&[0.0, 0.0, 0.0]) < 0.1);
    }

    #[test]
    fn leaves_respect_min_size_and_depth() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64]).collect();
        let y: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let f = RandomForest::fit(&x, &y, &ForestConfig::default(), 3);
        for t in &f.trees {
            assert!(t.nodes.len() <= 7);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let x: Vec<Vec<f64>> = (0..60).map(|i| vec![(i * 7 % 13) as f64, (i % 5) as f64]).collect();
        let y: Vec<bool> = (0..60).map(|i| i % 3 == 0).collect();
        let a = RandomForest::fit(&x, &y, &ForestConfig::default(), 9);
        let b = RandomForest::fit(&x, &y, &ForestConfig::default(), 9);
        assert_eq!(a, b);
    }
}
