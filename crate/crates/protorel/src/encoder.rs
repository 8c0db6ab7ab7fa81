//! Sentence encoder: token + position embeddings, a 1-D convolution over the
//! concatenated embedding rows, ReLU, and max-over-time pooling.
//!
//! Every instance becomes a fixed-size vector `E` of dimension `hidden_dim`.
//! Pooling only sees the true (non-padding) rows, so the same sentence padded
//! to different lengths encodes to bitwise-identical vectors as long as the
//! position bucket space matches.

use rand::Rng;

use crate::data::{EncodedInstance, PAD_ID};
use crate::numerics::{Graph, NodeId, Tensor, TensorError};

/// Shape configuration for [`EncoderParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderShape {
    /// Vocabulary size including the reserved padding/unknown ids.
    pub vocab_size: usize,
    /// Token embedding width.
    pub word_dim: usize,
    /// Position embedding width (applied twice: head and tail offsets).
    pub pos_dim: usize,
    /// Number of position buckets, `2 * max_len - 1`.
    pub pos_buckets: usize,
    /// Convolution output channels; the final sentence vector length.
    pub hidden_dim: usize,
    /// Convolution window width.
    pub window: usize,
}

impl EncoderShape {
    /// Per-row input width seen by the convolution.
    pub fn input_dim(&self) -> usize {
        self.word_dim + 2 * self.pos_dim
    }
}

/// The slow-learner parameter block: embedding tables plus conv filters.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub word: Tensor,
    pub pos_head: Tensor,
    pub pos_tail: Tensor,
    pub filters: Tensor,
    pub bias: Tensor,
    pub shape: EncoderShape,
}

impl EncoderParams {
    /// Draw fresh parameters. Embedding entries are uniform in
    /// `[-0.1, 0.1)` with the padding row zeroed; filters are uniform in
    /// `[-s, s)` with `s = 1/sqrt(window * input_dim)`; bias starts at zero.
    pub fn init(shape: EncoderShape, rng: &mut impl Rng) -> EncoderParams {
        let mut word = Tensor::uniform(&[shape.vocab_size, shape.word_dim], -0.1, 0.1, rng);
        word.data_mut()[PAD_ID * shape.word_dim..(PAD_ID + 1) * shape.word_dim].fill(0.0);
        let pos_head = Tensor::uniform(&[shape.pos_buckets, shape.pos_dim], -0.1, 0.1, rng);
        let pos_tail = Tensor::uniform(&[shape.pos_buckets, shape.pos_dim], -0.1, 0.1, rng);
        let s = 1.0 / ((shape.window * shape.input_dim()) as f64).sqrt();
        let filters = Tensor::uniform(&[shape.hidden_dim, shape.window * shape.input_dim()], -s, s, rng);
        let bias = Tensor::zeros(&[shape.hidden_dim]);
        EncoderParams {
            word,
            pos_head,
            pos_tail,
            filters,
            bias,
            shape,
        }
    }

    /// The parameters as named views, in a fixed order shared by the
    /// checkpoint format and the slow-learner accumulator.
    pub fn named(&self) -> [(&'static str, &Tensor); 5] {
        [
            ("word", &self.word),
            ("pos_head", &self.pos_head),
            ("pos_tail", &self.pos_tail),
            ("filters", &self.filters),
            ("bias", &self.bias),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 5] {
        [
            ("word", &mut self.word),
            ("pos_head", &mut self.pos_head),
            ("pos_tail", &mut self.pos_tail),
            ("filters", &mut self.filters),
            ("bias", &mut self.bias),
        ]
    }
}

/// Graph handles for one registration of the encoder parameters. Rebuilt per
/// episode along with the graph itself.
#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    pub word: NodeId,
    pub pos_head: NodeId,
    pub pos_tail: NodeId,
    pub filters: NodeId,
    pub bias: NodeId,
    pub window: usize,
}

impl EncoderNodes {
    /// Register every encoder tensor as a graph parameter.
    pub fn register(graph: &mut Graph, params: &mut EncoderParams) -> EncoderNodes {
        EncoderNodes {
            word: graph.param(&mut params.word),
            pos_head: graph.param(&mut params.pos_head),
            pos_tail: graph.param(&mut params.pos_tail),
            filters: graph.param(&mut params.filters),
            bias: graph.param(&mut params.bias),
            window: params.shape.window,
        }
    }

    /// Raw node handles for callers that build the leaves themselves
    /// (gradient checks drive the same assembly off cloned leaf tensors).
    pub fn from_nodes(
        word: NodeId,
        pos_head: NodeId,
        pos_tail: NodeId,
        filters: NodeId,
        bias: NodeId,
        window: usize,
    ) -> EncoderNodes {
        EncoderNodes {
            word,
            pos_head,
            pos_tail,
            filters,
            bias,
            window,
        }
    }
}

/// Gather the per-token input matrix `[max_len, word_dim + 2*pos_dim]`:
/// token embedding rows joined with the two position embedding rows.
pub fn embed_input(
    graph: &mut Graph,
    nodes: &EncoderNodes,
    inst: &EncodedInstance,
) -> Result<NodeId, TensorError> {
    let w = graph.lookup(nodes.word, &inst.token_ids)?;
    let ph = graph.lookup(nodes.pos_head, &inst.pos_head)?;
    let pt = graph.lookup(nodes.pos_tail, &inst.pos_tail)?;
    graph.concat_cols(&[w, ph, pt])
}

/// Encode one instance to its sentence vector `[hidden_dim]`.
pub fn encode_sentence(
    graph: &mut Graph,
    nodes: &EncoderNodes,
    inst: &EncodedInstance,
) -> Result<NodeId, TensorError> {
    let x = embed_input(graph, nodes, inst)?;
    let conv = graph.conv1d(x, nodes.filters, nodes.bias, inst.true_length, nodes.window)?;
    let act = graph.relu(conv)?;
    graph.max_rows(act)
}
