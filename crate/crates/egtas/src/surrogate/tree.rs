//! CART regression trees with variance-reduction splits; the building
//! block for both the decision-tree and random-forest surrogates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Features considered per split; None = all.
    pub feature_subsample: Option<usize>,
}

impl TreeConfig {
    pub fn cart_default() -> TreeConfig {
        TreeConfig { max_depth: Some(8), min_leaf: 2, feature_subsample: None }
    }

    pub fn forest_default(num_features: usize) -> TreeConfig {
        let k = (num_features as f64).sqrt().ceil() as usize;
        TreeConfig { max_depth: Some(8), min_leaf: 2, feature_subsample: Some(k.max(1)) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

struct FitCtx<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    cfg: &'a TreeConfig,
}

impl Tree {
    pub fn fit(x: &[Vec<f64>], y: &[f64], cfg: &TreeConfig, rng: &mut ChaCha8Rng) -> Tree {
        assert_eq!(x.len(), y.len());
        assert!(!x.is_empty());
        let mut tree = Tree { nodes: Vec::new() };
        let idx: Vec<usize> = (0..x.len()).collect();
        let ctx = FitCtx { x, y, cfg };
        tree.build(&ctx, idx, 0, rng);
        tree
    }

    fn build(&mut self, ctx: &FitCtx, idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let mean = idx.iter().map(|&i| ctx.y[i]).sum::<f64>() / idx.len() as f64;
        let sse: f64 = idx.iter().map(|&i| (ctx.y[i] - mean) * (ctx.y[i] - mean)).sum();
        let at_max = ctx.cfg.max_depth.is_some_and(|d| depth >= d);
        if at_max || idx.len() < 2 * ctx.cfg.min_leaf || sse <= 1e-18 {
            self.nodes.push(Node::Leaf { value: mean });
            return self.nodes.len() - 1;
        }

        let num_features = ctx.x[0].len();
        let mut features: Vec<usize> = (0..num_features).collect();
        if let Some(k) = ctx.cfg.feature_subsample {
            // partial Fisher-Yates: first k entries are a uniform subset
            let k = k.min(num_features);
            for i in 0..k {
                let j = rng.gen_range(i..num_features);
                features.swap(i, j);
            }
            features.truncate(k);
            features.sort_unstable();
        }

        let mut best: Option<(f64, usize, f64)> = None; // (split SSE, feature, threshold)
        for &f in &features {
            let mut pairs: Vec<(f64, f64)> =
                idx.iter().map(|&i| (ctx.x[i][f], ctx.y[i])).collect();
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let total_sum: f64 = pairs.iter().map(|p| p.1).sum();
            let total_sq: f64 = pairs.iter().map(|p| p.1 * p.1).sum();
            let n = pairs.len();
            let mut left_sum = 0.0;
            let mut left_sq = 0.0;
            for split_at in 1..n {
                left_sum += pairs[split_at - 1].1;
                left_sq += pairs[split_at - 1].1 * pairs[split_at - 1].1;
                if pairs[split_at].0 == pairs[split_at - 1].0 {
                    continue;
                }
                if split_at < ctx.cfg.min_leaf || n - split_at < ctx.cfg.min_leaf {
                    continue;
                }
                let nl = split_at as f64;
                let nr = (n - split_at) as f64;
                let right_sum = total_sum - left_sum;
                let right_sq = total_sq - left_sq;
                let split_sse =
                    (left_sq - left_sum * left_sum / nl) + (right_sq - right_sum * right_sum / nr);
                let threshold = (pairs[split_at - 1].0 + pairs[split_at].0) / 2.0;
                let better = match best {
                    None => true,
                    Some((s, _, _)) => split_sse < s - 1e-15,
                };
                if better {
                    best = Some((split_sse, f, threshold));
                }
            }
        }

        let Some((split_sse, feature, threshold)) = best else {
            self.nodes.push(Node::Leaf { value: mean });
            return self.nodes.len() - 1;
        };
        if split_sse >= sse - 1e-15 {
            self.nodes.push(Node::Leaf { value: mean });
            return self.nodes.len() - 1;
        }

        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| ctx.x[i][feature] <= threshold);
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { value: mean }); // placeholder
        let left = self.build(ctx, left_idx, depth + 1, rng);
        let right = self.build(ctx, right_idx, depth + 1, rng);
        self.nodes[slot] = Node::Split { feature, threshold, left, right };
        slot
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    /// Every feature index used by a split, in node order.
    pub fn split_features(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .collect()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn single_feature_step_is_learned_exactly() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..20).map(|i| if i < 10 { 1.0 } else { 5.0 }).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tree = Tree::fit(&x, &y, &TreeConfig::cart_default(), &mut rng);
        assert_eq!(tree.predict(&[3.0]), 1.0);
        assert_eq!(tree.predict(&[15.0]), 5.0);
        assert_eq!(tree.split_features(), vec![0]);
    }

    #[test]
    fn depth_limit_is_respected() {
        let x: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..64).map(|i| (i * i) as f64).collect();
        let cfg = TreeConfig { max_depth: Some(3), min_leaf: 1, feature_subsample: None };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tree = Tree::fit(&x, &y, &cfg, &mut rng);
        assert!(tree.depth() <= 3);
    }

    #[test]
    fn min_leaf_keeps_two_samples_per_leaf() {
        let x: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let cfg = TreeConfig { max_depth: None, min_leaf: 2, feature_subsample: None };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tree = Tree::fit(&x, &y, &cfg, &mut rng);
        // 9 samples with 2 per leaf allow at most 4 leaves
        let leaves = tree.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count();
        assert!(leaves <= 4, "{leaves} leaves");
    }
}
