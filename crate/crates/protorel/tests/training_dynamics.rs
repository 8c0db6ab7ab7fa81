//! Scheduling and loss-identity behavior of the training loop: exact
//! fast/slow update counts, bitwise parameter-partition discipline, closed
//! form first-episode losses, and run-to-run determinism.

use protorel::classifier::ClassifierParams;
use protorel::data::{sample_episode, seeded_rng, Dataset, Vocab, VocabMode};
use protorel::encoder::EncoderParams;
use protorel::matching::{compute_prototypes, match_loss};
use protorel::synthetic::{separable_corpus, SeparableSpec};
use protorel::trainer::{
    evaluate, fast_step, run_episode, slow_step, ModelParams, SlowAccum, TrainConfig, TrainState,
    Trainer,
};
use protorel::{Graph, Tensor};

fn small_corpus() -> (Dataset, Dataset) {
    separable_corpus(&SeparableSpec {
        train_relations: 6,
        test_relations: 2,
        instances_per_class: 12,
        seed: 3,
    })
}

fn small_config(episodes: usize, slow_every: usize) -> TrainConfig {
    TrainConfig {
        n_train: 3,
        k_train: 2,
        queries: 2,
        fast_lr: 0.1,
        slow_lr: 0.1,
        slow_every,
        phase_episodes: (episodes, 0, 0),
        max_len: 12,
        word_dim: 8,
        pos_dim: 2,
        hidden_dim: 16,
        window: 3,
        vocab_mode: VocabMode::Word,
        seed: 0,
        fast_reset: false,
    }
}

fn bits_of(params: &ModelParams) -> Vec<(&'static str, Vec<u64>)> {
    params
        .named()
        .into_iter()
        .map(|(name, t)| (name, t.bits()))
        .collect()
}

#[test]
fn update_counts_match_the_schedule_exactly() {
    let (train, _) = small_corpus();
    for (episodes, slow_every) in [(10usize, 1usize), (10, 5), (13, 5), (100, 7)] {
        let cfg = small_config(episodes, slow_every);
        let mut trainer = Trainer::new(train.clone(), None, cfg).unwrap();
        trainer.run(|_| {}).unwrap();
        let state = trainer.state();
        assert_eq!(
            state.fast_update_count, episodes,
            "fast updates for ({episodes}, {slow_every})"
        );
        assert_eq!(
            state.slow_update_count,
            episodes / slow_every,
            "slow updates for ({episodes}, {slow_every})"
        );
        assert_eq!(state.episode_counter, episodes);
    }
}

/// Drive the loop by hand so the parameter partition can be inspected at
/// every boundary: the encoder must hold bitwise still except at slow
/// steps, and the slow step itself must not move the classifier.
#[test]
fn parameter_partition_is_bitwise_disciplined() {
    let (train, _) = small_corpus();
    let cfg = small_config(9, 3);
    let vocab = Vocab::build(&[&train], VocabMode::Word);
    let mut rng = seeded_rng(7);
    let mut params = ModelParams {
        encoder: EncoderParams::init(cfg.encoder_shape(vocab.len()), &mut rng),
        classifier: ClassifierParams::zeros(cfg.n_train, cfg.hidden_dim),
    };
    let mut state = TrainState::default();
    let mut accum = SlowAccum::new(&params.encoder);

    let encoder_bits = |p: &ModelParams| {
        p.encoder
            .named()
            .iter()
            .map(|(_, t)| t.bits())
            .collect::<Vec<_>>()
    };
    let classifier_bits =
        |p: &ModelParams| (p.classifier.weight.bits(), p.classifier.bias.bits());

    let mut encoder_snapshot = encoder_bits(&params);
    for episode_ix in 1..=9usize {
        let episode = sample_episode(
            &train,
            cfg.n_train,
            cfg.k_train,
            cfg.queries,
            &vocab,
            cfg.max_len,
            &mut rng,
        )
        .unwrap();

        let before = bits_of(&params);
        let outcome = run_episode(&mut params, &episode).unwrap();
        assert_eq!(
            before,
            bits_of(&params),
            "running an episode must not move any parameter"
        );

        let cls_before_fast = classifier_bits(&params);
        fast_step(&mut params.classifier, &outcome.graph, &mut state, cfg.fast_lr).unwrap();
        assert_eq!(
            encoder_snapshot,
            encoder_bits(&params),
            "fast step must not move the encoder"
        );
        assert_ne!(
            cls_before_fast,
            classifier_bits(&params),
            "fast step must move the classifier at episode {episode_ix}"
        );

        accum
            .add(&outcome.graph, &outcome.enc_nodes, outcome.l_total())
            .unwrap();
        state.episode_counter += 1;

        if state.episode_counter % cfg.slow_every == 0 {
            let cls_before_slow = classifier_bits(&params);
            slow_step(&mut params.encoder, &mut accum, &mut state, &cfg).unwrap();
            assert_eq!(
                cls_before_slow,
                classifier_bits(&params),
                "slow step must not move the classifier"
            );
            assert_ne!(
                encoder_snapshot,
                encoder_bits(&params),
                "slow step must move the encoder at episode {episode_ix}"
            );
            assert_eq!(accum.episodes(), 0, "slow step must reset the accumulator");
            encoder_snapshot = encoder_bits(&params);
        } else {
            assert_eq!(
                encoder_snapshot,
                encoder_bits(&params),
                "encoder moved between slow steps at episode {episode_ix}"
            );
        }
    }
    assert_eq!(state.fast_update_count, 9);
    assert_eq!(state.slow_update_count, 3);
}

/// The config validator refuses a zero learning rate, so the bitwise no-op
/// guarantee of `lr == 0` is exercised at the `fast_step` level directly.
#[test]
fn zero_fast_rate_keeps_the_classifier_bitwise_frozen() {
    let (train, _) = small_corpus();
    let cfg = small_config(10, 5);
    let vocab = Vocab::build(&[&train], VocabMode::Word);
    let mut rng = seeded_rng(11);
    let mut params = ModelParams {
        encoder: EncoderParams::init(cfg.encoder_shape(vocab.len()), &mut rng),
        classifier: ClassifierParams::zeros(cfg.n_train, cfg.hidden_dim),
    };
    let mut state = TrainState::default();
    let init_bits = (params.classifier.weight.bits(), params.classifier.bias.bits());
    for _ in 0..10 {
        let episode = sample_episode(
            &train,
            cfg.n_train,
            cfg.k_train,
            cfg.queries,
            &vocab,
            cfg.max_len,
            &mut rng,
        )
        .unwrap();
        let outcome = run_episode(&mut params, &episode).unwrap();
        fast_step(&mut params.classifier, &outcome.graph, &mut state, 0.0).unwrap();
    }
    assert_eq!(
        init_bits,
        (params.classifier.weight.bits(), params.classifier.bias.bits()),
        "a zero fast rate must be a bitwise no-op on the classifier"
    );
    assert_eq!(state.fast_update_count, 10);
}

#[test]
fn first_episode_support_loss_is_ln_n() {
    let (train, _) = small_corpus();
    for n in [2usize, 3, 5] {
        let mut cfg = small_config(4, 2);
        cfg.n_train = n;
        let mut trainer = Trainer::new(train.clone(), None, cfg).unwrap();
        let metrics = trainer.step().unwrap().unwrap();
        let expected = (n as f64).ln();
        assert!(
            (metrics.l_sup - expected).abs() < 1e-12,
            "{n}-way first-episode support loss {:e} is not ln({n}) = {expected:e}",
            metrics.l_sup
        );
    }
}

#[test]
fn equidistant_prototypes_give_ln_n_match_loss() {
    // One-hot prototypes are all at squared distance 1 from the origin, so
    // a query at the origin sees a uniform score vector and pays ln(way)
    // whatever its class.
    for way in [2usize, 5, 7] {
        let mut graph = Graph::new();
        let labels: Vec<String> = (0..way).map(|i| format!("r{i}")).collect();
        let mut support = Vec::new();
        for i in 0..way {
            let mut v = vec![0.0; way];
            v[i] = 1.0;
            let id = graph.leaf(Tensor::vector(v));
            support.push(vec![id]);
        }
        let protos = compute_prototypes(&mut graph, &labels, &support).unwrap();
        let queries: Vec<Vec<_>> = (0..way)
            .map(|_| vec![graph.leaf(Tensor::vector(vec![0.0; way]))])
            .collect();
        let (loss, _) = match_loss(&mut graph, &protos, &queries).unwrap();
        let got = graph.value(loss).item();
        let expected = (way as f64).ln();
        assert!(
            (got - expected).abs() < 1e-9,
            "{way}-way equidistant match loss {got:e} is not ln({way}) = {expected:e}"
        );
    }
}

#[test]
fn equal_seeds_give_bitwise_equal_runs() {
    let (train, _) = small_corpus();
    let cfg = small_config(12, 4);
    let run = || {
        let mut t = Trainer::new(train.clone(), None, cfg.clone()).unwrap();
        t.run(|_| {}).unwrap();
        let metrics: Vec<(f64, f64, f64)> = t
            .state()
            .metrics
            .iter()
            .map(|m| (m.l_sup, m.l_match, m.accuracy))
            .collect();
        let bits: Vec<(&'static str, Vec<u64>)> = bits_of(t.params());
        (metrics, bits)
    };
    let a = run();
    let b = run();
    assert_eq!(a.0, b.0, "per-episode metrics must match bitwise");
    assert_eq!(a.1, b.1, "final parameters must match bitwise");
}

#[test]
fn evaluation_reads_only_the_encoder() {
    let (train, test) = small_corpus();
    let cfg = small_config(10, 5);
    let mut trainer = Trainer::with_vocab_sources(train, None, &[&test], cfg).unwrap();
    trainer.run(|_| {}).unwrap();
    let (mut params, vocab, _) = trainer.into_parts();
    let before = evaluate(&test, &params.encoder, &vocab, 2, 1, 1, 20, 99).unwrap();
    // Scrambling the classifier cannot matter: prototype matching never
    // consults it, and the signature admits only the encoder.
    for v in params.classifier.weight.data_mut() {
        *v = 123.456;
    }
    for v in params.classifier.bias.data_mut() {
        *v = -7.0;
    }
    let after = evaluate(&test, &params.encoder, &vocab, 2, 1, 1, 20, 99).unwrap();
    assert_eq!(before, after);
}
