//! Support classifier: a linear layer plus softmax over the episode's
//! classes, trained on the support vectors themselves.
//!
//! This is the fast-learner head. Its weight matrix is shaped by the episode
//! way, so it only makes sense while the way stays fixed; the trainer
//! enforces that.

use crate::numerics::{Graph, NodeId, Tensor, TensorError};

/// The fast-learner parameter block: `weight` is `[way, hidden_dim]`, `bias`
/// is `[way]`. Both start at zero, which makes the first-episode support loss
/// exactly `ln(way)` regardless of the encoder state.
#[derive(Debug, Clone)]
pub struct ClassifierParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifierParams {
    pub fn zeros(way: usize, hidden_dim: usize) -> ClassifierParams {
        ClassifierParams {
            weight: Tensor::zeros(&[way, hidden_dim]),
            bias: Tensor::zeros(&[way]),
        }
    }

    pub fn way(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Graph handles for one registration of the classifier parameters.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl ClassifierNodes {
    pub fn register(graph: &mut Graph, params: &mut ClassifierParams) -> ClassifierNodes {
        ClassifierNodes {
            weight: graph.param(&mut params.weight),
            bias: graph.param(&mut params.bias),
        }
    }

    pub fn from_nodes(weight: NodeId, bias: NodeId) -> ClassifierNodes {
        ClassifierNodes { weight, bias }
    }
}

/// Class distribution for one support vector: `softmax(W e + b)`, shape
/// `[way]`.
pub fn classify_support(
    graph: &mut Graph,
    nodes: &ClassifierNodes,
    support_vec: NodeId,
) -> Result<NodeId, TensorError> {
    let logits = graph.matmul(nodes.weight, support_vec)?;
    let shifted = graph.add(logits, nodes.bias)?;
    graph.softmax(shifted)
}

/// Support loss: mean cross-entropy of every support vector's distribution
/// against its own class row.
pub fn support_loss(
    graph: &mut Graph,
    nodes: &ClassifierNodes,
    support_vectors: &[Vec<NodeId>],
) -> Result<NodeId, TensorError> {
    let total: usize = support_vectors.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(TensorError::EmptyInput { op: "support_loss" });
    }
    let mut losses = Vec::with_capacity(total);
    for (class_row, row) in support_vectors.iter().enumerate() {
        for &sv in row {
            let dist = classify_support(graph, nodes, sv)?;
            losses.push(graph.cross_entropy(dist, class_row)?);
        }
    }
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = graph.add(acc, l)?;
    }
    graph.scale(acc, 1.0 / total as f64)
}
