//! Finite-difference verification of every graph primitive and of the
//! composite losses, each at 10 random points. The library's unit tests
//! check single hand-picked points; this suite sweeps seeded random ones
//! and is the gradient-correctness gate for the whole crate.

use protorel::classifier::{support_loss, ClassifierNodes};
use protorel::data::{sample_episode, seeded_rng, Episode, Vocab, VocabMode};
use protorel::encoder::{encode_sentence, EncoderNodes};
use protorel::matching::{compute_prototypes, match_loss};
use protorel::numerics::grad_check;
use protorel::synthetic::{separable_corpus, SeparableSpec};
use protorel::trainer::episode_loss;
use protorel::{Graph, NodeId, Tensor, TensorError};
use rand::Rng;

const EPS: f64 = 1e-5;
const BOUND: f64 = 1e-4;
const POINTS: u64 = 10;

/// Deterministic scalar reduction so every primitive can sit under a scalar
/// root: 1-D values go straight into a squared distance against a probe
/// vector; 2-D values are first collapsed to 1-D with a probe matvec. The
/// probes depend only on the shape, so repeated builds agree bitwise.
fn reduce_to_scalar(graph: &mut Graph, node: NodeId) -> Result<NodeId, TensorError> {
    let probe = |n: usize, phase: f64| -> Tensor {
        Tensor::vector((0..n).map(|j| 0.5 * ((j as f64 + 1.0) * phase).sin()).collect())
    };
    let shape = graph.value(node).shape().to_vec();
    match shape.len() {
        1 => {
            let p = graph.leaf(probe(shape[0], 0.7));
            graph.sq_dist(node, p)
        }
        2 => {
            let col = graph.leaf(probe(shape[1], 0.7));
            let collapsed = graph.matmul(node, col)?;
            let p = graph.leaf(probe(shape[0], 1.3));
            graph.sq_dist(collapsed, p)
        }
        other => panic!("no reduction for rank {other}"),
    }
}

/// Run `grad_check` at `POINTS` seeded random points. `make_params` draws
/// the leaf tensors for one point; `build` records the computation.
/// Check the build at `POINTS` random draws. A draw can park a relu
/// pre-activation (or a max-pool tie) inside the finite-difference stencil,
/// where the central difference is wrong by construction while the analytic
/// gradient is right; such draws are redrawn. The caps keep detection
/// power: a real defect fails at every draw and still aborts.
fn sweep<F, G>(name: &str, make_params: F, build: G)
where
    F: Fn(&mut rand_chacha::ChaCha8Rng) -> Vec<Tensor>,
    G: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError> + Copy,
{
    let mut redraws_left = 3u32;
    for point in 0..POINTS {
        let mut attempt = 0u64;
        loop {
            let mut rng = seeded_rng(0xA11CE ^ point ^ (attempt << 32));
            let params = make_params(&mut rng);
            let err = grad_check(build, &params, EPS)
                .unwrap_or_else(|e| panic!("{name} point {point}: {e}"));
            if err < BOUND {
                break;
            }
            assert!(
                redraws_left > 0 && attempt < 2,
                "{name} point {point}: worst relative error {err:e} >= {BOUND:e} \
                 (persists across redraws, so this is not a kink collision)"
            );
            redraws_left -= 1;
            attempt += 1;
        }
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Uniform values pushed away from zero so `relu` kinks sit farther from the
/// evaluation point than the finite-difference step.
fn uniform_off_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape);
    for v in t.data_mut() {
        *v += if *v >= 0.0 { 0.2 } else { -0.2 };
    }
    t
}

/// Uniform matrix redrawn until every column's row values are pairwise
/// separated, so `max_rows` keeps the same argmax under perturbation.
fn uniform_separated(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    loop {
        let t = uniform(rng, &[rows, cols]);
        let gap_ok = (0..cols).all(|c| {
            (0..rows).all(|a| {
                (a + 1..rows).all(|b| (t.data()[a * cols + c] - t.data()[b * cols + c]).abs() > 1e-3)
            })
        });
        if gap_ok {
            return t;
        }
    }
}

#[test]
fn matmul_matrix_matrix() {
    sweep(
        "matmul 2d*2d",
        |rng| vec![uniform(rng, &[3, 4]), uniform(rng, &[4, 2])],
        |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            reduce_to_scalar(g, y)
        },
    );
}

#[test]
fn matmul_matrix_vector() {
    sweep(
        "matmul 2d*1d",
        |rng| vec![uniform(rng, &[3, 4]), uniform(rng, &[4])],
        |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            reduce_to_scalar(g, y)
        },
    );
}

#[test]
fn add_vectors() {
    sweep(
        "add",
        |rng| vec![uniform(rng, &[5]), uniform(rng, &[5])],
        |g, ids| {
            let y = g.add(ids[0], ids[1])?;
            reduce_to_scalar(g, y)
        },
    );
}

#[test]
fn scale_by_constant() {
    sweep(
        "scale",
        |rng| vec![uniform(rng, &[4])],
        |g, ids| {
            let y = g.scale(ids[0], 1.7)?;
            reduce_to_scalar(g, y)
        },
    );
}

#[test]
fn negate_vector() {
    sweep(
        "negate",
        |rng| vec![uniform(rng, &[4])],
        |g, ids| {
            let y = g.negate(ids[0])?;
            reduce_to_scalar(g, y)
        },
    );
}

#[test]
fn relu_away_from_kinks() {
    sweep(
        "relu",
        |rng| vec![uniform_off_zero(rng, &[6])],
        |g, ids| {
            let y = g.relu(ids[0])?;
            reduce_to_scalar(g, y)
        },
    );
}

#[test]
fn concat_vectors() {
    sweep(
        "concat",
        |rng| vec![uniform(rng, &[2]), uniform(rng, &[3]), uniform(rng, &[4])],
        |g, ids| {
            let y = g.concat(&[ids[0], ids[1], ids[2]])?;
            reduce_to_scalar(g, y)
        },
    );
}

#[test]
fn concat_matrix_columns() {
    sweep(
        "concat_cols",
        |rng| {
            vec![
                uniform(rng, &[3, 2]),
                uniform(rng, &[3, 1]),
                uniform(rng, &[3, 3]),
            ]
        },
        |g, ids| {
            let y = g.concat_cols(&[ids[0], ids[1], ids[2]])?;
            reduce_to_scalar(g, y)
        },
    );
}

#[test]
fn lookup_with_repeated_rows() {
    // Index 2 appears twice so its row gradient must accumulate.
    sweep(
        "lookup",
        |rng| vec![uniform(rng, &[6, 3])],
        |g, ids| {
            let y = g.lookup(ids[0], &[4, 0, 2, 2])?;
            reduce_to_scalar(g, y)
        },
    );
}

#[test]
fn conv1d_with_padding_rows() {
    // true_len below the row count exercises the virtual zero padding; the
    // padding rows must come back with zero gradient.
    sweep(
        "conv1d",
        |rng| {
            vec![
                uniform(rng, &[5, 4]),
                uniform(rng, &[3, 2 * 4]),
                uniform(rng, &[3]),
            ]
        },
        |g, ids| {
            let y = g.conv1d(ids[0], ids[1], ids[2], 4, 2)?;
            reduce_to_scalar(g, y)
        },
    );
}

#[test]
fn max_rows_with_separated_columns() {
    sweep(
        "max_rows",
        |rng| vec![uniform_separated(rng, 4, 3)],
        |g, ids| {
            let y = g.max_rows(ids[0])?;
            reduce_to_scalar(g, y)
        },
    );
}

#[test]
fn softmax_distribution() {
    sweep(
        "softmax",
        |rng| vec![uniform(rng, &[5])],
        |g, ids| {
            let y = g.softmax(ids[0])?;
            reduce_to_scalar(g, y)
        },
    );
}

#[test]
fn cross_entropy_through_softmax() {
    // Perturbing a normalized distribution directly would break its own
    // input contract, so the check drives cross-entropy through softmax,
    // which also exercises its backward pass. The target cycles across
    // points.
    for point in 0..POINTS {
        let mut rng = seeded_rng(0xA11CE ^ point);
        let params = vec![uniform(&mut rng, &[5])];
        let target = (point as usize) % 5;
        let err = grad_check(
            |g, ids| {
                let dist = g.softmax(ids[0])?;
                g.cross_entropy(dist, target)
            },
            &params,
            EPS,
        )
        .unwrap();
        assert!(err < BOUND, "cross_entropy point {point}: {err:e}");
    }
}

#[test]
fn sq_dist_between_vectors() {
    sweep(
        "sq_dist",
        |rng| vec![uniform(rng, &[4]), uniform(rng, &[4])],
        |g, ids| g.sq_dist(ids[0], ids[1]),
    );
}

// ---- composite checks -----------------------------------------------------

const WORD_DIM: usize = 4;
const POS_DIM: usize = 2;
const HIDDEN: usize = 6;
const WINDOW: usize = 3;
const MAX_LEN: usize = 12;

/// Encoder parameter tensors in the order word, pos_head, pos_tail,
/// filters, bias. Scale 0.3 keeps pre-activations comfortably away from
/// relu kinks relative to the finite-difference step.
fn encoder_param_tensors(vocab_size: usize, rng: &mut impl Rng) -> Vec<Tensor> {
    let input_dim = WORD_DIM + 2 * POS_DIM;
    let buckets = 2 * MAX_LEN - 1;
    vec![
        Tensor::uniform(&[vocab_size, WORD_DIM], -0.3, 0.3, rng),
        Tensor::uniform(&[buckets, POS_DIM], -0.3, 0.3, rng),
        Tensor::uniform(&[buckets, POS_DIM], -0.3, 0.3, rng),
        Tensor::uniform(&[HIDDEN, WINDOW * input_dim], -0.3, 0.3, rng),
        Tensor::uniform(&[HIDDEN], -0.3, 0.3, rng),
    ]
}

fn encoder_nodes_from(ids: &[NodeId]) -> EncoderNodes {
    EncoderNodes::from_nodes(ids[0], ids[1], ids[2], ids[3], ids[4], WINDOW)
}

/// A fixed 2-way 2-shot 2-query episode over the synthetic corpus, plus the
/// vocabulary that encoded it.
fn fixed_episode() -> (Episode, Vocab) {
    let spec = SeparableSpec {
        train_relations: 3,
        test_relations: 1,
        instances_per_class: 5,
        seed: 9,
    };
    let (train, _) = separable_corpus(&spec);
    let vocab = Vocab::build(&[&train], VocabMode::Word);
    let mut rng = seeded_rng(42);
    let episode = sample_episode(&train, 2, 2, 2, &vocab, MAX_LEN, &mut rng).unwrap();
    (episode, vocab)
}

#[test]
fn encoder_composite() {
    let (episode, vocab) = fixed_episode();
    let inst = episode.support[0][0].clone();
    let vocab_size = vocab.len();
    sweep(
        "encoder",
        |rng| encoder_param_tensors(vocab_size, rng),
        |g, ids| {
            let nodes = encoder_nodes_from(ids);
            let vec = encode_sentence(g, &nodes, &inst)?;
            reduce_to_scalar(g, vec)
        },
    );
}

#[test]
fn support_loss_composite() {
    let (episode, vocab) = fixed_episode();
    let support = episode.support.clone();
    let way = episode.way();
    let vocab_size = vocab.len();
    sweep(
        "support loss",
        |rng| {
            let mut p = encoder_param_tensors(vocab_size, rng);
            p.push(Tensor::uniform(&[way, HIDDEN], -0.3, 0.3, rng));
            p.push(Tensor::uniform(&[way], -0.3, 0.3, rng));
            p
        },
        |g, ids| {
            let enc = encoder_nodes_from(ids);
            let cls = ClassifierNodes::from_nodes(ids[5], ids[6]);
            let mut vectors = Vec::new();
            for row in &support {
                let mut vrow = Vec::new();
                for inst in row {
                    vrow.push(encode_sentence(g, &enc, inst)?);
                }
                vectors.push(vrow);
            }
            support_loss(g, &cls, &vectors)
        },
    );
}

#[test]
fn match_loss_composite() {
    let (episode, vocab) = fixed_episode();
    let vocab_size = vocab.len();
    sweep(
        "match loss",
        |rng| encoder_param_tensors(vocab_size, rng),
        |g, ids| {
            let enc = encoder_nodes_from(ids);
            let mut support = Vec::new();
            for row in &episode.support {
                let mut vrow = Vec::new();
                for inst in row {
                    vrow.push(encode_sentence(g, &enc, inst)?);
                }
                support.push(vrow);
            }
            let protos = compute_prototypes(g, &episode.class_labels, &support)?;
            let mut queries = Vec::new();
            for row in &episode.query {
                let mut vrow = Vec::new();
                for inst in row {
                    vrow.push(encode_sentence(g, &enc, inst)?);
                }
                queries.push(vrow);
            }
            Ok(match_loss(g, &protos, &queries)?.0)
        },
    );
}

#[test]
fn full_episode_loss() {
    let (episode, vocab) = fixed_episode();
    let way = episode.way();
    let vocab_size = vocab.len();
    sweep(
        "episode loss",
        |rng| {
            let mut p = encoder_param_tensors(vocab_size, rng);
            p.push(Tensor::uniform(&[way, HIDDEN], -0.3, 0.3, rng));
            p.push(Tensor::uniform(&[way], -0.3, 0.3, rng));
            p
        },
        |g, ids| {
            let enc = encoder_nodes_from(ids);
            let cls = ClassifierNodes::from_nodes(ids[5], ids[6]);
            let nodes = episode_loss(g, &enc, &cls, &episode)
                .map_err(|e| panic!("episode loss assembly: {e}"))
                .unwrap();
            Ok(nodes.l_total)
        },
    );
}
