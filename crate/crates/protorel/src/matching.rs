//! Prototypical matching: class prototypes as support-vector means, query
//! scoring by negative squared Euclidean distance, and the matching loss.
//!
//! Ties in the argmax break toward the lowest class index, and every
//! reduction runs in a fixed order, so identical inputs always produce
//! identical predictions and losses.

use crate::numerics::{Graph, NodeId, TensorError};

/// One prototype per episode class, kept alongside the labels so score rows
/// stay attributable.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    pub class_labels: Vec<String>,
    pub protos: Vec<NodeId>,
}

impl PrototypeSet {
    pub fn way(&self) -> usize {
        self.protos.len()
    }
}

/// Mean of each class's support vectors: sum the K vectors, scale by `1/K`.
pub fn compute_prototypes(
    graph: &mut Graph,
    class_labels: &[String],
    support_vectors: &[Vec<NodeId>],
) -> Result<PrototypeSet, TensorError> {
    if class_labels.len() != support_vectors.len() {
        return Err(TensorError::ShapeMismatch {
            op: "prototypes",
            left: vec![class_labels.len()],
            right: vec![support_vectors.len()],
        });
    }
    let mut protos = Vec::with_capacity(support_vectors.len());
    for row in support_vectors {
        let k = row.len();
        if k == 0 {
            return Err(TensorError::EmptyInput { op: "prototypes" });
        }
        let mut acc = row[0];
        for &v in &row[1..] {
            acc = graph.add(acc, v)?;
        }
        protos.push(graph.scale(acc, 1.0 / k as f64)?);
    }
    Ok(PrototypeSet {
        class_labels: class_labels.to_vec(),
        protos,
    })
}

/// Score a query vector against every prototype. Returns the score vector
/// node (`[way]`, entries are negated squared distances) and the predicted
/// class row (highest score, lowest index on ties).
pub fn match_query(
    graph: &mut Graph,
    protos: &PrototypeSet,
    query_vec: NodeId,
) -> Result<(NodeId, usize), TensorError> {
    if protos.protos.is_empty() {
        return Err(TensorError::EmptyInput { op: "match_query" });
    }
    let mut parts = Vec::with_capacity(protos.way());
    for &p in &protos.protos {
        let d = graph.sq_dist(query_vec, p)?;
        parts.push(graph.negate(d)?);
    }
    let scores = graph.concat(&parts)?;
    let data = graph.value(scores).data();
    let mut best = 0;
    for (i, &s) in data.iter().enumerate().skip(1) {
        if s > data[best] {
            best = i;
        }
    }
    Ok((scores, best))
}

/// Matching loss over a query grid: mean cross-entropy of each query's
/// softmaxed score vector against its true class row. Also returns the
/// predicted rows, shaped like the query grid.
pub fn match_loss(
    graph: &mut Graph,
    protos: &PrototypeSet,
    query_vectors: &[Vec<NodeId>],
) -> Result<(NodeId, Vec<Vec<usize>>), TensorError> {
    let total: usize = query_vectors.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(TensorError::EmptyInput { op: "match_loss" });
    }
    if query_vectors.len() != protos.way() {
        return Err(TensorError::ShapeMismatch {
            op: "match_loss",
            left: vec![query_vectors.len()],
            right: vec![protos.way()],
        });
    }
    let mut losses = Vec::with_capacity(total);
    let mut predictions = Vec::with_capacity(query_vectors.len());
    for (class_row, row) in query_vectors.iter().enumerate() {
        let mut preds = Vec::with_capacity(row.len());
        for &qv in row {
            let (scores, predicted) = match_query(graph, protos, qv)?;
            preds.push(predicted);
            let dist = graph.softmax(scores)?;
            losses.push(graph.cross_entropy(dist, class_row)?);
        }
        predictions.push(preds);
    }
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = graph.add(acc, l)?;
    }
    let mean = graph.scale(acc, 1.0 / total as f64)?;
    Ok((mean, predictions))
}
