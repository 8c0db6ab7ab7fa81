//! The episodic training loop: per-episode fast updates to the support
//! classifier, slow-loss accumulation over a fixed period for the encoder,
//! three-phase task enrichment, and the evaluation harness.
//!
//! Parameters split into two disjoint partitions. The fast partition (the
//! classifier's `W` and `b`) moves after every episode at rate `fast_lr`.
//! The slow partition (embedding tables and convolution parameters) moves
//! once every `slow_every` episodes at rate `slow_lr`, on the gradient of
//! the summed episode losses accumulated since the previous slow step.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::classifier::{support_loss, ClassifierNodes, ClassifierParams};
use crate::data::{
    sample_episode, sample_from_pool, seeded_rng, task_seed, verify_disjoint, DataError, Dataset,
    Episode, Vocab, VocabMode,
};
use crate::encoder::{encode_sentence, EncoderNodes, EncoderParams, EncoderShape};
use crate::matching::{compute_prototypes, match_loss, match_query, PrototypeSet};
use crate::numerics::{sgd_step, sgd_update, Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] TensorError),
    #[error("invalid training config: {reason}")]
    Config { reason: String },
    #[error("episode way {episode} does not match classifier way {classifier}")]
    WayMismatch { episode: usize, classifier: usize },
    #[error("relation labels appear in both corpora: {labels:?}")]
    LabelCollision { labels: Vec<String> },
    #[error("slow step after {accumulated} accumulated episodes; period is {needed}")]
    SlowStepEarly { accumulated: usize, needed: usize },
}

/// Everything the training loop needs to know up front. Field names mirror
/// the config-file keys of the command-line tool.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Classes per training episode.
    pub n_train: usize,
    /// Support instances per class per training episode.
    pub k_train: usize,
    /// Query instances per class per training episode.
    pub queries: usize,
    /// Fast-learner (classifier) learning rate.
    pub fast_lr: f64,
    /// Slow-learner (encoder) learning rate.
    pub slow_lr: f64,
    /// Episodes between consecutive slow steps.
    pub slow_every: usize,
    /// Episode counts for the three phases: original corpus, enriched union,
    /// original corpus again.
    pub phase_episodes: (usize, usize, usize),
    /// Padded sentence length.
    pub max_len: usize,
    /// Token embedding width.
    pub word_dim: usize,
    /// Position embedding width.
    pub pos_dim: usize,
    /// Sentence vector width (convolution channels).
    pub hidden_dim: usize,
    /// Convolution window.
    pub window: usize,
    pub vocab_mode: VocabMode,
    pub seed: u64,
    /// Re-zero the classifier at the start of every episode instead of
    /// letting it carry over. Off by default.
    pub fast_reset: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_train: 5,
            k_train: 5,
            queries: 5,
            fast_lr: 0.1,
            slow_lr: 0.1,
            slow_every: 5,
            phase_episodes: (1000, 1000, 1000),
            max_len: 128,
            word_dim: 50,
            pos_dim: 5,
            hidden_dim: 230,
            window: 3,
            vocab_mode: VocabMode::Word,
            seed: 0,
            fast_reset: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.fast_lr.is_finite() && self.fast_lr > 0.0) {
            return Err(format!("fast_lr must be positive and finite, got {}", self.fast_lr));
        }
        if !(self.slow_lr.is_finite() && self.slow_lr > 0.0) {
            return Err(format!("slow_lr must be positive and finite, got {}", self.slow_lr));
        }
        if self.slow_every == 0 {
            return Err("slow_every must be at least 1".into());
        }
        for (name, v) in [
            ("n_train", self.n_train),
            ("k_train", self.k_train),
            ("queries", self.queries),
            ("max_len", self.max_len),
            ("word_dim", self.word_dim),
            ("pos_dim", self.pos_dim),
            ("hidden_dim", self.hidden_dim),
            ("window", self.window),
        ] {
            if v == 0 {
                return Err(format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn total_episodes(&self) -> usize {
        self.phase_episodes.0 + self.phase_episodes.1 + self.phase_episodes.2
    }

    pub fn encoder_shape(&self, vocab_size: usize) -> EncoderShape {
        EncoderShape {
            vocab_size,
            word_dim: self.word_dim,
            pos_dim: self.pos_dim,
            pos_buckets: 2 * self.max_len - 1,
            hidden_dim: self.hidden_dim,
            window: self.window,
        }
    }
}

/// Which training phase an episode belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Original corpus only.
    Warmup,
    /// Union of the original and cross-domain class pools.
    Enrichment,
    /// Original corpus only, after enrichment.
    Review,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::Warmup => 1,
            Phase::Enrichment => 2,
            Phase::Review => 3,
        }
    }

    /// Phase of the episode with 0-based index `episode` under the given
    /// phase lengths.
    pub fn of(episode: usize, phases: (usize, usize, usize)) -> Phase {
        if episode < phases.0 {
            Phase::Warmup
        } else if episode < phases.0 + phases.1 {
            Phase::Enrichment
        } else {
            Phase::Review
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Both parameter partitions.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub classifier: ClassifierParams,
}

impl ModelParams {
    /// Every tensor with a stable name, encoder partition first. The
    /// checkpoint format serializes exactly this list in this order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut all: Vec<(&'static str, &Tensor)> = self.encoder.named().to_vec();
        all.push(("cls_weight", &self.classifier.weight));
        all.push(("cls_bias", &self.classifier.bias));
        all
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut all: Vec<(&'static str, &mut Tensor)> = self.encoder.named_mut().into();
        all.push(("cls_weight", &mut self.classifier.weight));
        all.push(("cls_bias", &mut self.classifier.bias));
        all
    }
}

/// Counters and the per-episode metrics trail.
#[derive(Debug, Clone, Default)]
pub struct TrainState {
    pub episode_counter: usize,
    pub fast_update_count: usize,
    pub slow_update_count: usize,
    pub metrics: Vec<EpisodeMetrics>,
}

/// One line of the metrics trail.
#[derive(Debug, Clone)]
pub struct EpisodeMetrics {
    /// 1-based episode index.
    pub episode: usize,
    pub phase: Phase,
    pub l_sup: f64,
    pub l_match: f64,
    pub accuracy: f64,
    /// Mean squared distance of support vectors to their class prototype.
    pub dispersion: f64,
    /// The classes this episode drew, in slot order.
    pub class_labels: Vec<String>,
}

/// Loss nodes and per-query predictions for one assembled episode.
#[derive(Debug)]
pub struct EpisodeLossNodes {
    pub l_sup: NodeId,
    pub l_match: NodeId,
    pub l_total: NodeId,
    pub predictions: Vec<Vec<usize>>,
    pub support_vectors: Vec<Vec<NodeId>>,
    pub prototypes: PrototypeSet,
}

/// Assemble the full episode loss into `graph`: encode every support and
/// query instance once, take the support loss over support vectors, build
/// prototypes, take the matching loss over queries, and sum the two.
///
/// Exposed separately from [`run_episode`] so gradient checks can drive the
/// identical assembly from raw leaf nodes.
pub fn episode_loss(
    graph: &mut Graph,
    enc_nodes: &EncoderNodes,
    cls_nodes: &ClassifierNodes,
    episode: &Episode,
) -> Result<EpisodeLossNodes, TrainError> {
    let mut support_vectors = Vec::with_capacity(episode.way());
    for row in &episode.support {
        let mut vrow = Vec::with_capacity(row.len());
        for inst in row {
            vrow.push(encode_sentence(graph, enc_nodes, inst)?);
        }
        support_vectors.push(vrow);
    }
    let mut query_vectors = Vec::with_capacity(episode.way());
    for row in &episode.query {
        let mut vrow = Vec::with_capacity(row.len());
        for inst in row {
            vrow.push(encode_sentence(graph, enc_nodes, inst)?);
        }
        query_vectors.push(vrow);
    }
    let l_sup = support_loss(graph, cls_nodes, &support_vectors)?;
    let prototypes = compute_prototypes(graph, &episode.class_labels, &support_vectors)?;
    let (l_match, predictions) = match_loss(graph, &prototypes, &query_vectors)?;
    let l_total = graph.add(l_sup, l_match)?;
    Ok(EpisodeLossNodes {
        l_sup,
        l_match,
        l_total,
        predictions,
        support_vectors,
        prototypes,
    })
}

/// A completed episode: the graph (with gradients of the total loss already
/// computed), the parameter handles, and forward metrics.
#[derive(Debug)]
pub struct EpisodeOutcome {
    pub graph: Graph,
    pub enc_nodes: EncoderNodes,
    pub cls_nodes: ClassifierNodes,
    pub nodes: EpisodeLossNodes,
    pub accuracy: f64,
    pub dispersion: f64,
}

impl EpisodeOutcome {
    pub fn l_sup(&self) -> f64 {
        self.graph.value(self.nodes.l_sup).item()
    }

    pub fn l_match(&self) -> f64 {
        self.graph.value(self.nodes.l_match).item()
    }

    pub fn l_total(&self) -> f64 {
        self.graph.value(self.nodes.l_total).item()
    }
}

/// Run one episode: build the loss, run one backward pass from the total
/// loss, and measure query accuracy and support dispersion.
pub fn run_episode(
    params: &mut ModelParams,
    episode: &Episode,
) -> Result<EpisodeOutcome, TrainError> {
    let way = episode.way();
    let classifier_way = params.classifier.way();
    if way != classifier_way {
        return Err(TrainError::WayMismatch {
            episode: way,
            classifier: classifier_way,
        });
    }
    let mut graph = Graph::new();
    let enc_nodes = EncoderNodes::register(&mut graph, &mut params.encoder);
    let cls_nodes = ClassifierNodes::register(&mut graph, &mut params.classifier);
    let nodes = episode_loss(&mut graph, &enc_nodes, &cls_nodes, episode)?;
    graph.backward(nodes.l_total)?;
    let accuracy = prediction_accuracy(&nodes.predictions);
    let dispersion = support_dispersion(&graph, &nodes);
    Ok(EpisodeOutcome {
        graph,
        enc_nodes,
        cls_nodes,
        nodes,
        accuracy,
        dispersion,
    })
}

fn prediction_accuracy(predictions: &[Vec<usize>]) -> f64 {
    let total: usize = predictions.iter().map(Vec::len).sum();
    let correct: usize = predictions
        .iter()
        .enumerate()
        .map(|(row, preds)| preds.iter().filter(|&&p| p == row).count())
        .sum();
    correct as f64 / total as f64
}

fn support_dispersion(graph: &Graph, nodes: &EpisodeLossNodes) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (row, svs) in nodes.support_vectors.iter().enumerate() {
        let proto = graph.value(nodes.prototypes.protos[row]).data();
        for &sv in svs {
            let e = graph.value(sv).data();
            sum += e
                .iter()
                .zip(proto)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            count += 1;
        }
    }
    sum / count as f64
}

/// Apply the fast update: move only the classifier's `W` and `b` along the
/// gradients recorded in the episode graph, at rate `fast_lr`.
///
/// The matching loss has no path through the classifier, so the recorded
/// gradient of the total loss equals the gradient of the support loss for
/// these two tensors.
pub fn fast_step(
    classifier: &mut ClassifierParams,
    graph: &Graph,
    state: &mut TrainState,
    fast_lr: f64,
) -> Result<(), TrainError> {
    sgd_update(
        &mut [&mut classifier.weight, &mut classifier.bias],
        graph,
        fast_lr,
    )?;
    state.fast_update_count += 1;
    Ok(())
}

/// Fixed order of the slow-partition tensors inside [`SlowAccum`], matching
/// [`EncoderParams::named`].
pub const SLOW_PARAM_NAMES: [&str; 5] = ["word", "pos_head", "pos_tail", "filters", "bias"];

/// Accumulator for the slow partition: running sums of the per-episode
/// encoder gradients and of the episode losses. Summing gradients across
/// episodes is exact for the gradient of the summed loss, because
/// differentiation is linear.
#[derive(Debug, Clone)]
pub struct SlowAccum {
    grads: [Tensor; 5],
    episodes: usize,
    loss_sum: f64,
}

impl SlowAccum {
    pub fn new(encoder: &EncoderParams) -> SlowAccum {
        let shapes = encoder.named();
        SlowAccum {
            grads: std::array::from_fn(|i| Tensor::zeros(shapes[i].1.shape())),
            episodes: 0,
            loss_sum: 0.0,
        }
    }

    /// Fold one completed episode's encoder gradients into the running sums.
    pub fn add(
        &mut self,
        graph: &Graph,
        enc_nodes: &EncoderNodes,
        episode_loss_value: f64,
    ) -> Result<(), TrainError> {
        let ids = [
            enc_nodes.word,
            enc_nodes.pos_head,
            enc_nodes.pos_tail,
            enc_nodes.filters,
            enc_nodes.bias,
        ];
        for (acc, id) in self.grads.iter_mut().zip(ids) {
            let g = graph.gradient_or_zeros(id);
            if g.shape() != acc.shape() {
                return Err(TrainError::Numerics(TensorError::ShapeMismatch {
                    op: "slow_accumulate",
                    left: acc.shape().to_vec(),
                    right: g.shape().to_vec(),
                }));
            }
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        self.episodes += 1;
        self.loss_sum += episode_loss_value;
        Ok(())
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    pub fn loss_sum(&self) -> f64 {
        self.loss_sum
    }

    pub fn gradients(&self) -> &[Tensor; 5] {
        &self.grads
    }

    pub fn reset(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
        self.episodes = 0;
        self.loss_sum = 0.0;
    }
}

/// Apply the slow update: move only the encoder tensors along the
/// accumulated gradient sums at rate `slow_lr`, then reset the accumulator.
/// Requires exactly `slow_every` accumulated episodes.
pub fn slow_step(
    encoder: &mut EncoderParams,
    accum: &mut SlowAccum,
    state: &mut TrainState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if accum.episodes != cfg.slow_every {
        return Err(TrainError::SlowStepEarly {
            accumulated: accum.episodes,
            needed: cfg.slow_every,
        });
    }
    for ((_, param), grad) in encoder.named_mut().into_iter().zip(&accum.grads) {
        sgd_step(param, grad, cfg.slow_lr)?;
    }
    accum.reset();
    state.slow_update_count += 1;
    Ok(())
}

/// The full training loop over two corpora.
#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    original: Dataset,
    cross: Option<Dataset>,
    vocab: Vocab,
    params: ModelParams,
    state: TrainState,
    accum: SlowAccum,
    rng: ChaCha8Rng,
    total_episodes: usize,
}

impl Trainer {
    /// Validate the config, build the vocabulary over both corpora, and
    /// initialize parameters from the seed. A relation label present in both
    /// corpora would make union-pool episodes ambiguous, so that aborts
    /// construction. Without a cross-domain corpus the enrichment phase is
    /// forced to zero episodes.
    pub fn new(
        original: Dataset,
        cross: Option<Dataset>,
        cfg: TrainConfig,
    ) -> Result<Trainer, TrainError> {
        Trainer::with_vocab_sources(original, cross, &[], cfg)
    }

    /// Like [`Trainer::new`], but the vocabulary additionally covers the
    /// tokens of `extra_vocab` corpora that never join any sampling pool —
    /// typically the evaluation corpus, so its tokens don't all collapse to
    /// the unknown id at test time. Only tokens are taken from them; no
    /// instance or label influences training, and embedding rows for tokens
    /// absent from the training corpora keep their initial values.
    pub fn with_vocab_sources(
        original: Dataset,
        cross: Option<Dataset>,
        extra_vocab: &[&Dataset],
        mut cfg: TrainConfig,
    ) -> Result<Trainer, TrainError> {
        cfg.validate().map_err(|reason| TrainError::Config { reason })?;
        if let Some(c) = &cross {
            let shared = verify_disjoint(&original, c);
            if !shared.is_empty() {
                return Err(TrainError::LabelCollision { labels: shared });
            }
        }
        if cross.is_none() {
            cfg.phase_episodes.1 = 0;
        }
        let mut sources: Vec<&Dataset> = vec![&original];
        sources.extend(&cross);
        sources.extend(extra_vocab);
        let vocab = Vocab::build(&sources, cfg.vocab_mode);
        let mut rng = seeded_rng(cfg.seed);
        let encoder = EncoderParams::init(cfg.encoder_shape(vocab.len()), &mut rng);
        let classifier = ClassifierParams::zeros(cfg.n_train, cfg.hidden_dim);
        let accum = SlowAccum::new(&encoder);
        let total_episodes = cfg.total_episodes();
        Ok(Trainer {
            cfg,
            original,
            cross,
            vocab,
            params: ModelParams { encoder, classifier },
            state: TrainState::default(),
            accum,
            rng,
            total_episodes,
        })
    }

    /// Run one episode end to end: sample by phase, compute losses, apply
    /// the fast step, accumulate for the slow learner, and apply the slow
    /// step when the period completes. Returns `None` once the configured
    /// episode budget is exhausted.
    pub fn step(&mut self) -> Result<Option<EpisodeMetrics>, TrainError> {
        if self.state.episode_counter >= self.total_episodes {
            return Ok(None);
        }
        let phase = Phase::of(self.state.episode_counter, self.cfg.phase_episodes);
        let episode = {
            let mut pool = self.original.pool();
            if phase == Phase::Enrichment {
                if let Some(c) = &self.cross {
                    pool.extend(c.pool());
                }
            }
            sample_from_pool(
                &pool,
                self.cfg.n_train,
                self.cfg.k_train,
                self.cfg.queries,
                &self.vocab,
                self.cfg.max_len,
                &mut self.rng,
            )?
        };
        if self.cfg.fast_reset {
            self.params.classifier = ClassifierParams::zeros(self.cfg.n_train, self.cfg.hidden_dim);
        }
        let outcome = run_episode(&mut self.params, &episode)?;
        fast_step(
            &mut self.params.classifier,
            &outcome.graph,
            &mut self.state,
            self.cfg.fast_lr,
        )?;
        self.accum
            .add(&outcome.graph, &outcome.enc_nodes, outcome.l_total())?;
        self.state.episode_counter += 1;
        if self.state.episode_counter.is_multiple_of(self.cfg.slow_every) {
            slow_step(&mut self.params.encoder, &mut self.accum, &mut self.state, &self.cfg)?;
        }
        let metrics = EpisodeMetrics {
            episode: self.state.episode_counter,
            phase,
            l_sup: outcome.l_sup(),
            l_match: outcome.l_match(),
            accuracy: outcome.accuracy,
            dispersion: outcome.dispersion,
            class_labels: episode.class_labels,
        };
        self.state.metrics.push(metrics.clone());
        Ok(Some(metrics))
    }

    /// Run every remaining episode, invoking `on_episode` after each one.
    pub fn run(&mut self, mut on_episode: impl FnMut(&EpisodeMetrics)) -> Result<(), TrainError> {
        while let Some(m) = self.step()? {
            on_episode(&m);
        }
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_parts(self) -> (ModelParams, Vocab, TrainState) {
        (self.params, self.vocab, self.state)
    }
}

/// Train start to finish and return the final parameters, vocabulary, and
/// state (counters plus the metrics trail).
pub fn train(
    original: Dataset,
    cross: Option<Dataset>,
    cfg: TrainConfig,
) -> Result<(ModelParams, Vocab, TrainState), TrainError> {
    let mut trainer = Trainer::new(original, cross, cfg)?;
    trainer.run(|_| {})?;
    Ok(trainer.into_parts())
}

/// An evaluation run's summary: mean and population standard deviation of
/// per-task query accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean: f64,
    pub std: f64,
    pub tasks: usize,
    pub way: usize,
    pub shots: usize,
    pub queries: usize,
    pub seed: u64,
}

/// Evaluate a frozen encoder on a test corpus: sample `task_count` episodes
/// and classify each query by its nearest class prototype. The support
/// classifier takes no part in this; the signature admits only the encoder.
///
/// Each task draws from its own RNG seeded by `(seed, task index)`, so task
/// `i`'s content never depends on how many tasks ran before it.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    test: &Dataset,
    encoder: &EncoderParams,
    vocab: &Vocab,
    n: usize,
    k: usize,
    q: usize,
    task_count: usize,
    seed: u64,
) -> Result<EvalReport, TrainError> {
    if task_count == 0 {
        return Err(TrainError::Config {
            reason: "task_count must be at least 1".into(),
        });
    }
    // The encoder was trained against a fixed bucket space; recover the
    // padded length from it rather than trusting a caller-supplied one.
    let max_len = encoder.shape.pos_buckets.div_ceil(2);
    let mut accuracies = Vec::with_capacity(task_count);
    for task_ix in 0..task_count {
        let mut rng = seeded_rng(task_seed(seed, task_ix as u64));
        let episode = sample_episode(test, n, k, q, vocab, max_len, &mut rng)?;
        accuracies.push(eval_task(encoder, &episode)?);
    }
    let mean = accuracies.iter().sum::<f64>() / task_count as f64;
    let var = accuracies
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / task_count as f64;
    Ok(EvalReport {
        mean,
        std: var.sqrt(),
        tasks: task_count,
        way: n,
        shots: k,
        queries: q,
        seed,
    })
}

fn eval_task(encoder: &EncoderParams, episode: &Episode) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let word = g.leaf(encoder.word.clone());
    let pos_head = g.leaf(encoder.pos_head.clone());
    let pos_tail = g.leaf(encoder.pos_tail.clone());
    let filters = g.leaf(encoder.filters.clone());
    let bias = g.leaf(encoder.bias.clone());
    let nodes = EncoderNodes::from_nodes(word, pos_head, pos_tail, filters, bias, encoder.shape.window);
    let mut support_vectors = Vec::with_capacity(episode.way());
    for row in &episode.support {
        let mut vrow = Vec::with_capacity(row.len());
        for inst in row {
            vrow.push(encode_sentence(&mut g, &nodes, inst)?);
        }
        support_vectors.push(vrow);
    }
    let prototypes = compute_prototypes(&mut g, &episode.class_labels, &support_vectors)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (row, qrow) in episode.query.iter().enumerate() {
        for inst in qrow {
            let qv = encode_sentence(&mut g, &nodes, inst)?;
            let (_, predicted) = match_query(&mut g, &prototypes, qv)?;
            if predicted == row {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}
