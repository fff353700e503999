//! Command-line front end. Each subcommand wraps one library operation.
//!
//! Exit codes: 0 success, 1 usage, 2 data or configuration error, 3 numeric
//! failure.

pub mod experiment;
pub mod rerank;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bm25::{build_index, Bm25Params, InvertedIndex};
use crate::cka::{self, Selector};
use crate::corpus::{self, generate_synthetic, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, Gain};
use crate::model::{load_any, AnyModel, Float, Model, ModelConfig, PositionMode, Precision};
use crate::perturb::{self, PerturbMode};
use crate::tokenizer::{load_vocab, save_vocab, TokenizedPair, Vocab};
use crate::train::{encode_triples, train, TrainConfig, TrainLog};

pub use experiment::{run_experiment, Condition, ExperimentResult, ExperimentSpec};
pub use rerank::{pair_key, rerank, RerankOptions, Scorer};

#[derive(Debug, Parser)]
#[command(name = "bowrank", version, about = "Word-order sensitivity of transformer re-rankers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic collection, queries, qrels and triples.
    Generate(GenerateArgs),
    /// Build a vocabulary from a collection and queries.
    Vocab(VocabArgs),
    /// Build a BM25 index.
    Index(IndexArgs),
    /// Retrieve a BM25 run.
    Retrieve(RetrieveArgs),
    /// Train a cross-encoder on triples.
    Train(TrainArgs),
    /// Re-score the top of a run with a checkpoint.
    Rerank(RerankArgs),
    /// Score a run against qrels.
    Evaluate(EvaluateArgs),
    /// Show how a perturbation rearranges a text.
    PerturbText(PerturbTextArgs),
    /// Layerwise CKA between two models or input conditions.
    Cka(CkaArgs),
    /// Run the full condition matrix.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// TOML file with generator settings; defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    #[arg(long)]
    pub collection: PathBuf,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long, default_value_t = 1200)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub collection: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[arg(long, default_value_t = 1.2)]
    pub k1: f64,
    #[arg(long, default_value_t = 0.75)]
    pub b: f64,
    #[arg(long, default_value = "bm25")]
    pub tag: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Model and training settings read from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub triples: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Checkpoint path; logs are written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with `[model]` and `[train]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `desk` or `paper`; replaces the `[train]` table.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub position_mode: Option<PositionMode>,
    #[arg(long)]
    pub train_perturb: Option<PerturbMode>,
    #[arg(long)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep one perturbation per example for the whole run.
    #[arg(long)]
    pub shuffle_fixed: bool,
    #[command(flatten)]
    pub dev: DevArgs,
}

/// Held-out data for checkpoint selection; all four or none.
#[derive(Debug, Args)]
pub struct DevArgs {
    #[arg(long)]
    pub dev_queries: Option<PathBuf>,
    #[arg(long)]
    pub dev_qrels: Option<PathBuf>,
    #[arg(long)]
    pub dev_run: Option<PathBuf>,
    #[arg(long)]
    pub collection: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub collection: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[arg(long, default_value = "natural")]
    pub perturb: PerturbMode,
    #[arg(long, default_value = "rerank")]
    pub tag: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub ndcg_k: usize,
    #[arg(long, default_value_t = 100)]
    pub recall_k: usize,
    #[arg(long, default_value_t = 10)]
    pub mrr_k: usize,
    #[arg(long, default_value_t = 1)]
    pub threshold: u32,
    #[arg(long, default_value = "linear")]
    pub gain: Gain,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PerturbTextArgs {
    /// Query text.
    pub text: String,
    #[arg(long)]
    pub passage: Option<String>,
    #[arg(long, default_value = "natural")]
    pub mode: PerturbMode,
    /// Example key for seeded modes.
    #[arg(long, default_value = "0")]
    pub key: String,
    /// Vocabulary file; built from the text itself when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CkaArgs {
    #[arg(long)]
    pub model_a: PathBuf,
    /// Defaults to `--model-a`.
    #[arg(long)]
    pub model_b: Option<PathBuf>,
    #[arg(long, default_value = "natural")]
    pub perturb_a: PerturbMode,
    #[arg(long, default_value = "natural")]
    pub perturb_b: PerturbMode,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub collection: PathBuf,
    /// Query/passage pairs are taken from the top of this run.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub docs_per_query: usize,
    #[arg(long, default_value = "cls_only")]
    pub selector: Selector,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// TOML experiment spec; defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replaces every seed of the default spec; ignored with `--config`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, S>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 {
                write!(stdout, "{}", e.render())
            } else {
                write!(stderr, "{}", e.render())
            };
            return code;
        }
    };
    match run(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn emit(text: &str, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(p) => corpus::write_text(p, text),
        None => stdout
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    toml::from_str(&corpus::read_text(path)?)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn run(command: Command, stdout: &mut dyn Write) -> Result<()> {
    match command {
        Command::Generate(a) => cmd_generate(a),
        Command::Vocab(a) => {
            let collection = corpus::load_collection(&a.collection)?;
            let queries = a.queries.as_ref().map(corpus::load_queries).transpose()?;
            let texts = collection
                .iter()
                .map(|(_, t)| t)
                .chain(queries.iter().flat_map(|q| q.iter().map(|(_, t)| t)));
            save_vocab(&Vocab::build(texts, a.size)?, &a.out)
        }
        Command::Index(a) => build_index(&corpus::load_collection(&a.collection)?)?.save(&a.out),
        Command::Retrieve(a) => {
            let index = InvertedIndex::load(&a.index)?;
            let params = Bm25Params { k1: a.k1, b: a.b };
            let run = index.retrieve_run(&corpus::load_queries(&a.queries)?, a.k, &params, &a.tag)?;
            emit(&run.to_trec(), a.out.as_deref(), stdout)
        }
        Command::Train(a) => cmd_train(a),
        Command::Rerank(a) => {
            let model = load_any(&a.model)?;
            let opts = RerankOptions {
                k: a.k,
                perturb: a.perturb,
                tag: a.tag,
            };
            let out = rerank(
                &model,
                &load_vocab(&a.vocab)?,
                &corpus::load_queries(&a.queries)?,
                &corpus::load_collection(&a.collection)?,
                &corpus::load_run(&a.run)?,
                &opts,
            )?;
            emit(&out.to_trec(), a.out.as_deref(), stdout)
        }
        Command::Evaluate(a) => {
            let opts = EvalOptions {
                ndcg_k: a.ndcg_k,
                recall_k: a.recall_k,
                mrr_k: a.mrr_k,
                threshold: a.threshold,
                gain: a.gain,
            };
            let report = evaluate(&corpus::load_run(&a.run)?, &corpus::load_qrels(&a.qrels)?, &opts)?;
            if report.skipped > 0 {
                log::warn!("{} queries without relevant documents skipped", report.skipped);
            }
            emit(&report.to_tsv(), a.out.as_deref(), stdout)
        }
        Command::PerturbText(a) => emit(&perturb_text(&a)?, None, stdout),
        Command::Cka(a) => cmd_cka(a, stdout),
        Command::Experiment(a) => {
            let spec = match (&a.config, a.seed) {
                (Some(p), _) => ExperimentSpec::from_toml(&corpus::read_text(p)?)?,
                (None, Some(seed)) => ExperimentSpec::with_seed(seed),
                (None, None) => ExperimentSpec::default(),
            };
            let result = run_experiment(&spec, &a.out)?;
            emit(&result.summary, None, stdout)?;
            match result.rows.iter().find_map(|r| r.error.as_ref()) {
                Some(e) => Err(Error::Invalid(format!("some conditions failed, first: {e}"))),
                None => Ok(()),
            }
        }
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &a.config {
        Some(p) => read_toml(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let s = generate_synthetic(&spec)?;
    corpus::write_collection(&s.collection, a.out.join("collection.tsv"))?;
    corpus::write_queries(&s.queries, a.out.join("queries.tsv"))?;
    corpus::write_qrels(&s.qrels, a.out.join("qrels.txt"))?;
    corpus::write_triples(&s.triples, a.out.join("triples.tsv"))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut file: TrainFile = match &a.config {
        Some(p) => read_toml(p)?,
        None => TrainFile::default(),
    };
    if let Some(name) = &a.preset {
        file.train = TrainConfig::preset(name)?;
    }
    if let Some(m) = a.position_mode {
        file.model.position_mode = m;
    }
    if let Some(p) = a.train_perturb {
        file.train.train_perturb = p;
    }
    if let Some(p) = a.precision {
        file.model.precision = p;
    }
    if let Some(s) = a.steps {
        file.train.total_steps = s;
        file.train.warmup_steps = file.train.warmup_steps.min(s);
    }
    if let Some(s) = a.seed {
        file.train.seed = s;
    }
    file.train.shuffle_fixed |= a.shuffle_fixed;

    let vocab = load_vocab(&a.vocab)?;
    file.model.vocab_size = vocab.len();
    let examples = encode_triples(&corpus::load_triples(&a.triples)?, &vocab, file.model.max_len)?;
    let dev = load_dev(&a.dev)?;
    let (model, log) = match file.model.precision {
        Precision::F32 => train_cmd_typed::<f32>(&file, &examples, &vocab, dev.as_ref()),
        Precision::F64 => train_cmd_typed::<f64>(&file, &examples, &vocab, dev.as_ref()),
    }?;
    let dir = a.out.parent().unwrap_or(Path::new("."));
    log.write(dir)?;
    model.save(&a.out)
}

struct Dev {
    queries: corpus::QuerySet,
    qrels: corpus::Qrels,
    run: corpus::Run,
    collection: corpus::Collection,
}

fn load_dev(a: &DevArgs) -> Result<Option<Dev>> {
    match (&a.dev_queries, &a.dev_qrels, &a.dev_run, &a.collection) {
        (Some(q), Some(j), Some(r), Some(c)) => Ok(Some(Dev {
            queries: corpus::load_queries(q)?,
            qrels: corpus::load_qrels(j)?,
            run: corpus::load_run(r)?,
            collection: corpus::load_collection(c)?,
        })),
        (None, None, None, None) => Ok(None),
        _ => Err(Error::Config(
            "--dev-queries, --dev-qrels, --dev-run and --collection go together".into(),
        )),
    }
}

fn train_cmd_typed<T: Float>(
    file: &TrainFile,
    examples: &[[crate::train::Example; 2]],
    vocab: &Vocab,
    dev: Option<&Dev>,
) -> Result<(AnyModel, TrainLog)>
where
    AnyModel: From<Model<T>>,
{
    let model = Model::<T>::init(file.model.clone(), file.train.seed)?;
    let mode = file.train.train_perturb;
    let mut hook = |m: &Model<T>| -> Result<f64> {
        let d = dev.expect("hook only installed with dev data");
        let opts = RerankOptions {
            perturb: mode,
            ..RerankOptions::default()
        };
        let run = rerank(m, vocab, &d.queries, &d.collection, &d.run, &opts)?;
        Ok(evaluate(&run, &d.qrels, &EvalOptions::default())?.mean.ndcg)
    };
    let hook: Option<&mut crate::train::EvalHook<'_, T>> = match dev {
        Some(_) => Some(&mut hook),
        None => None,
    };
    let (model, log) = train(model, examples, &file.train, hook)?;
    Ok((model.into(), log))
}

/// Tokenizes, perturbs and decodes; one line per span.
pub fn perturb_text(a: &PerturbTextArgs) -> Result<String> {
    let passage = a.passage.as_deref().unwrap_or("");
    let vocab = match &a.vocab {
        Some(p) => load_vocab(p)?,
        None => Vocab::build([a.text.as_str(), passage], usize::MAX)?,
    };
    let pair = TokenizedPair::from_parts(&vocab.tokenize(&a.text), &vocab.tokenize(passage));
    let out = perturb::apply(&pair, a.mode, &a.key);
    let mut text = vocab.decode(out.query_ids()).join(" ");
    text.push('\n');
    if a.passage.is_some() {
        text.push_str(&vocab.decode(out.passage_ids()).join(" "));
        text.push('\n');
    }
    Ok(text)
}

fn cmd_cka(a: CkaArgs, stdout: &mut dyn Write) -> Result<()> {
    let model_a = load_any(&a.model_a)?;
    let model_b = match &a.model_b {
        Some(p) => load_any(p)?,
        None => model_a.clone(),
    };
    let vocab = load_vocab(&a.vocab)?;
    let queries = corpus::load_queries(&a.queries)?;
    let collection = corpus::load_collection(&a.collection)?;
    let run = corpus::load_run(&a.run)?;
    let max_len = model_a.config().max_len.min(model_b.config().max_len);
    let mut pairs = Vec::new();
    let mut keys = Vec::new();
    for (qid, entries) in run.queries() {
        let q = queries
            .get(qid)
            .ok_or_else(|| Error::Invalid(format!("query {qid} of the run has no text")))?;
        for e in entries.iter().take(a.docs_per_query) {
            let d = collection
                .get(&e.doc_id)
                .ok_or_else(|| Error::Invalid(format!("document {} is not in the collection", e.doc_id)))?;
            pairs.push(vocab.encode_pair(q, d, max_len)?);
            keys.push(pair_key(qid, &e.doc_id));
        }
    }
    let report = match (&model_a, &model_b) {
        (AnyModel::F32(x), AnyModel::F32(y)) => {
            cka::compare(x, a.perturb_a, y, a.perturb_b, &pairs, &keys, a.selector, a.batch_size)
        }
        (AnyModel::F64(x), AnyModel::F64(y)) => {
            cka::compare(x, a.perturb_a, y, a.perturb_b, &pairs, &keys, a.selector, a.batch_size)
        }
        _ => Err(Error::Config("compared models must share precision".into())),
    }?;
    emit(&report.to_csv(), a.out.as_deref(), stdout)
}
