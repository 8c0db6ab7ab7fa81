//! Subcommand implementations. Every command reads its inputs, drives the
//! library, and writes its artifacts; all diagnostics flow back as a
//! [`CliError`] carrying the process exit code.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use protorel::align::{
    char_instance, extract_candidates, segmentation_filter, word_instance, AlignError,
    EntityDictionary,
};
use protorel::data::{
    load_dataset, sample_episode, seeded_rng, verify_disjoint, DataError, Dataset, Origin, Vocab,
    VocabMode,
};
use protorel::trainer::{evaluate, TrainError, Trainer};
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{self, ConfigError};

/// Process-level failure classes; [`CliError::exit_code`] maps them to the
/// documented exit codes (1 validation, 2 I/O, 3 internal).
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> CliError {
        CliError::Validation(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> CliError {
        match e {
            DataError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> CliError {
        match e {
            CheckpointError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<AlignError> for CliError {
    fn from(e: AlignError) -> CliError {
        match e {
            AlignError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::Data(inner) => inner.into(),
            TrainError::Config { .. } | TrainError::WayMismatch { .. } => {
                CliError::Validation(e.to_string())
            }
            TrainError::LabelCollision { .. } => CliError::Validation(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn create_file(path: &Path) -> Result<BufWriter<std::fs::File>, CliError> {
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(file))
}

fn write_line(w: &mut impl Write, path: &Path, line: &str) -> Result<(), CliError> {
    writeln!(w, "{line}").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn config_echo(cfg: &protorel::trainer::TrainConfig) -> BTreeMap<&'static str, String> {
    config::pairs(cfg).into_iter().collect()
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub train: PathBuf,
    pub cross: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub sets: Vec<String>,
}

#[derive(Serialize)]
struct MetricsHeader<'a> {
    config: &'a BTreeMap<&'static str, String>,
    train_classes: usize,
    cross_classes: usize,
    vocab_size: usize,
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    episode: usize,
    phase: u8,
    l_sup: f64,
    l_match: f64,
    accuracy: f64,
    dispersion: f64,
    classes: &'a [String],
}

pub fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(path) => config::parse(&read_file(path)?, &path.display().to_string())?,
        None => protorel::trainer::TrainConfig::default(),
    };
    config::apply_overrides(&mut cfg, &args.sets)?;
    let cfg = config::validated(cfg)?;

    let train = load_dataset(&args.train, Origin::Original)?;
    let cross = match &args.cross {
        Some(path) => Some(load_dataset(path, Origin::CrossDomain)?),
        None => None,
    };
    let test = match &args.test {
        Some(path) => Some(load_dataset(path, Origin::Original)?),
        None => None,
    };

    // The declared test set must share no relation with any training
    // corpus; refuse before any episode runs.
    if let Some(test) = &test {
        let mut shared = verify_disjoint(&train, test);
        if let Some(cross) = &cross {
            shared.extend(verify_disjoint(cross, test));
        }
        shared.sort();
        shared.dedup();
        if !shared.is_empty() {
            return Err(CliError::Validation(format!(
                "test relations overlap the training corpora: {}",
                shared.join(", ")
            )));
        }
    }

    let train_classes = train.class_count();
    let cross_classes = cross.as_ref().map_or(0, Dataset::class_count);

    // The test corpus contributes tokens (never labels or instances) so its
    // sentences stay encodable by the trained embeddings.
    let extra: Vec<&Dataset> = test.iter().collect();
    let mut trainer = Trainer::with_vocab_sources(train, cross, &extra, cfg)?;

    let echo = config_echo(trainer.config());
    let header = MetricsHeader {
        config: &echo,
        train_classes,
        cross_classes,
        vocab_size: trainer.vocab().len(),
    };
    let mut metrics = create_file(&args.metrics)?;
    write_line(
        &mut metrics,
        &args.metrics,
        &serde_json::to_string(&header).expect("header serializes"),
    )?;

    while let Some(m) = trainer.step()? {
        let line = MetricsLine {
            episode: m.episode,
            phase: m.phase.number(),
            l_sup: m.l_sup,
            l_match: m.l_match,
            accuracy: m.accuracy,
            dispersion: m.dispersion,
            classes: &m.class_labels,
        };
        write_line(
            &mut metrics,
            &args.metrics,
            &serde_json::to_string(&line).expect("metrics line serializes"),
        )?;
    }
    metrics
        .flush()
        .map_err(|e| CliError::Io(format!("{}: {e}", args.metrics.display())))?;

    let state = trainer.state();
    let (episodes, fast, slow) = (
        state.episode_counter,
        state.fast_update_count,
        state.slow_update_count,
    );
    let last = state.metrics.last().map(|m| (m.l_sup, m.l_match, m.accuracy));

    let ck = Checkpoint::from_model(trainer.config(), trainer.vocab(), trainer.params());
    ck.save(&args.checkpoint)?;

    println!("trained {episodes} episodes ({fast} fast updates, {slow} slow updates)");
    if let Some((l_sup, l_match, accuracy)) = last {
        println!(
            "final episode: l_sup {l_sup:.6} l_match {l_match:.6} accuracy {accuracy:.4}"
        );
    }
    println!("checkpoint: {}", args.checkpoint.display());
    println!("metrics: {}", args.metrics.display());
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub test: PathBuf,
    pub way: usize,
    pub shots: usize,
    pub queries: usize,
    pub tasks: usize,
    pub seed: u64,
    pub report: Option<PathBuf>,
}

#[derive(Serialize)]
struct ReportFile {
    mean: f64,
    std: f64,
    tasks: usize,
    way: usize,
    shots: usize,
    queries: usize,
    seed: u64,
    config: BTreeMap<&'static str, String>,
}

pub fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = ck.config()?;
    let model = ck.to_model()?;
    let test = load_dataset(&args.test, Origin::Original)?;

    let report = evaluate(
        &test,
        &model.encoder,
        &ck.vocab,
        args.way,
        args.shots,
        args.queries,
        args.tasks,
        args.seed,
    )?;

    println!(
        "mean accuracy {:.4} (std {:.4}) over {} tasks, {}-way {}-shot, seed {}",
        report.mean, report.std, report.tasks, report.way, report.shots, report.seed
    );
    println!("checkpoint config:");
    for (key, value) in config::pairs(&cfg) {
        println!("  {key} = {value}");
    }

    if let Some(path) = &args.report {
        let file = ReportFile {
            mean: report.mean,
            std: report.std,
            tasks: report.tasks,
            way: report.way,
            shots: report.shots,
            queries: report.queries,
            seed: report.seed,
            config: config_echo(&cfg),
        };
        let mut out = create_file(path)?;
        write_line(
            &mut out,
            path,
            &serde_json::to_string_pretty(&file).expect("report serializes"),
        )?;
        out.flush()
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        println!("report: {}", path.display());
    }
    Ok(())
}

pub struct AlignArgs {
    pub corpus: PathBuf,
    pub dictionary: PathBuf,
    pub segmentation: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn cmd_align(args: AlignArgs) -> Result<(), CliError> {
    let dict = EntityDictionary::load(&args.dictionary)?;
    let corpus_text = read_file(&args.corpus)?;
    let lines: Vec<&str> = corpus_text.lines().collect();

    let segmentation: Option<Vec<Vec<String>>> = match &args.segmentation {
        Some(path) => {
            let text = read_file(path)?;
            let seg: Vec<Vec<String>> = text
                .lines()
                .map(|l| l.split('\t').map(str::to_string).collect())
                .collect();
            if seg.len() < lines.len() {
                return Err(CliError::Validation(format!(
                    "segmentation has {} lines, corpus has {}",
                    seg.len(),
                    lines.len()
                )));
            }
            Some(seg)
        }
        None => None,
    };

    let (candidates, summary) = extract_candidates(lines.iter().copied(), &dict);

    let mut written = 0usize;
    let mut seg_filtered = 0usize;
    let mut span_invalid = 0usize;
    let mut out = create_file(&args.out)?;
    for cand in &candidates {
        let instance = match &segmentation {
            Some(seg) => {
                let words = &seg[cand.line - 1];
                let keep = segmentation_filter(cand, words).map_err(|e| {
                    CliError::Validation(format!("line {}: {e}", cand.line))
                })?;
                if !keep {
                    seg_filtered += 1;
                    continue;
                }
                word_instance(cand, words)
            }
            None => char_instance(cand),
        };
        match instance {
            Ok(inst) => {
                write_line(
                    &mut out,
                    &args.out,
                    &serde_json::to_string(&inst).expect("instance serializes"),
                )?;
                written += 1;
            }
            Err(AlignError::InvalidCandidate { .. }) => span_invalid += 1,
            Err(other) => return Err(other.into()),
        }
    }
    out.flush()
        .map_err(|e| CliError::Io(format!("{}: {e}", args.out.display())))?;

    println!("sentences {}", summary.sentences);
    println!("kept {}", summary.kept);
    println!("dropped {}", summary.dropped);
    println!("multi-pair {}", summary.multi_pair_sentences);
    println!("candidates {}", summary.candidates);
    if segmentation.is_some() {
        println!("segmentation-filtered {seg_filtered}");
    }
    println!("overlapping-span pairs skipped {span_invalid}");
    println!("written {written} -> {}", args.out.display());
    Ok(())
}

pub fn cmd_stats(paths: &[PathBuf]) -> Result<(), CliError> {
    if paths.is_empty() {
        return Err(CliError::Validation("no data files given".into()));
    }
    println!(
        "{:<30} {:>8} {:>10} {:>10} {:>10} {:>10}",
        "file", "classes", "instances", "min/class", "max/class", "tokens"
    );
    for path in paths {
        let ds = load_dataset(path, Origin::Original)?;
        let sizes: Vec<usize> = ds
            .labels()
            .map(|l| ds.instances_of(l).map_or(0, <[_]>::len))
            .collect();
        let distinct: std::collections::BTreeSet<&str> = ds
            .instances()
            .flat_map(|i| i.tokens.iter().map(String::as_str))
            .collect();
        println!(
            "{:<30} {:>8} {:>10} {:>10} {:>10} {:>10}",
            path.display(),
            ds.class_count(),
            ds.instance_count(),
            sizes.iter().min().copied().unwrap_or(0),
            sizes.iter().max().copied().unwrap_or(0),
            distinct.len()
        );
    }
    Ok(())
}

pub struct SampleArgs {
    pub data: PathBuf,
    pub way: usize,
    pub shots: usize,
    pub queries: usize,
    pub seed: u64,
    pub max_len: usize,
}

#[derive(Serialize)]
struct InstanceDump {
    token_ids: Vec<usize>,
    pos_head: Vec<usize>,
    pos_tail: Vec<usize>,
    true_length: usize,
    relation_slot: usize,
}

#[derive(Serialize)]
struct EpisodeDump {
    classes: Vec<String>,
    way: usize,
    shots: usize,
    queries_per_class: usize,
    vocab_size: usize,
    support: Vec<Vec<InstanceDump>>,
    query: Vec<Vec<InstanceDump>>,
}

pub fn cmd_sample_episode(args: SampleArgs) -> Result<(), CliError> {
    let ds = load_dataset(&args.data, Origin::Original)?;
    let vocab = Vocab::build(&[&ds], VocabMode::Word);
    let mut rng = seeded_rng(args.seed);
    let episode = sample_episode(
        &ds,
        args.way,
        args.shots,
        args.queries,
        &vocab,
        args.max_len,
        &mut rng,
    )?;
    // Trim the padded tails so the dump shows only the real positions.
    let dump_row = |row: &[protorel::data::EncodedInstance]| -> Vec<InstanceDump> {
        row.iter()
            .map(|inst| InstanceDump {
                token_ids: inst.token_ids[..inst.true_length].to_vec(),
                pos_head: inst.pos_head[..inst.true_length].to_vec(),
                pos_tail: inst.pos_tail[..inst.true_length].to_vec(),
                true_length: inst.true_length,
                relation_slot: inst.relation_slot,
            })
            .collect()
    };
    let dump = EpisodeDump {
        classes: episode.class_labels.clone(),
        way: episode.way(),
        shots: episode.shots(),
        queries_per_class: episode.queries_per_class(),
        vocab_size: vocab.len(),
        support: episode.support.iter().map(|r| dump_row(r)).collect(),
        query: episode.query.iter().map(|r| dump_row(r)).collect(),
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&dump).expect("episode dump serializes")
    );
    Ok(())
}
