/// A regression tree node: either an axis-aligned split or a leaf weight.
#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        weight: f64,
    },
}

impl TreeNode {
    /// Routes `x[feature] < threshold` left, otherwise right.
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            TreeNode::Leaf { weight } => *weight,
            TreeNode::Split { feature, threshold, left, right } => {
                if x[*feature] < *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// Feature indices this tree actually splits on.
    pub fn used_features(&self, out: &mut std::collections::HashSet<usize>) {
        if let TreeNode::Split { feature, left, right, .. } = self {
            out.insert(*feature);
            left.used_features(out);
            right.used_features(out);
        }
    }
}
