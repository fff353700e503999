//! Condition-matrix experiment: one model per (position mode, training
//! perturbation), each evaluated under its evaluation perturbations by
//! re-ranking a BM25 candidate run, plus representation-similarity
//! analyses.
//!
//! Output layout (all paths relative to the output directory):
//!
//! ```text
//! config.toml                     spec used for the run
//! data/                           collection, queries, qrels, train triples,
//!                                 query split, vocabulary
//! runs/bm25_{dev,test}.run        first-stage candidates
//! models/<model>/model.ckpt       best checkpoint (+ train/eval logs)
//! runs/<condition>.run            re-ranked test run
//! metrics/<condition>.tsv         per-query and mean metrics
//! metrics/bm25.tsv
//! summary.tsv                     one row per condition
//! cka/cls.tsv                     [CLS] similarity, natural vs perturbed
//! cka/layerwise_<a>_vs_<b>.csv    per-layer similarity of two models
//! ```
//!
//! A condition whose metrics file exists is not recomputed, and a model
//! whose checkpoint exists is not retrained.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rerank::{pair_key, rerank, RerankOptions};
use crate::bm25::{build_index, Bm25Params};
use crate::cka::{self, CkaReport, Selector};
use crate::corpus::{
    self, generate_synthetic, Collection, Qrels, QuerySet, Run, SyntheticSpec, TripleStream,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, MetricsReport, QueryMetrics};
use crate::model::{load_any, AnyModel, Float, Model, ModelConfig, PositionMode, Precision};
use crate::perturb::{self, PerturbMode};
use crate::tokenizer::{TokenizedPair, Vocab};
use crate::train::{encode_triples, train, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub position_mode: PositionMode,
    pub train_perturb: PerturbMode,
    pub eval_perturb: PerturbMode,
}

fn slug(mode: PerturbMode) -> String {
    mode.to_string().replace(':', "")
}

impl Condition {
    pub fn new(position_mode: PositionMode, train_perturb: PerturbMode, eval_perturb: PerturbMode) -> Self {
        Condition {
            position_mode,
            train_perturb,
            eval_perturb,
        }
    }

    /// Name of the model this condition evaluates, e.g. `learned-natural`.
    pub fn model_name(&self) -> String {
        format!("{}-{}", self.position_mode.label(), slug(self.train_perturb))
    }

    /// e.g. `learned-natural__shuffle13`
    pub fn name(&self) -> String {
        format!("{}__{}", self.model_name(), slug(self.eval_perturb))
    }
}

/// The eight train/eval combinations: natural, sorted and shuffled training
/// crossed with matching and natural evaluation, natural training under
/// perturbed evaluation, and a model without position embeddings.
pub fn default_conditions(shuffle_seed: u64) -> Vec<Condition> {
    use PerturbMode::{Natural, SortDesc};
    let shuffle = PerturbMode::Shuffle { seed: shuffle_seed };
    let l = PositionMode::Learned;
    vec![
        Condition::new(l, Natural, Natural),
        Condition::new(l, Natural, SortDesc),
        Condition::new(l, SortDesc, SortDesc),
        Condition::new(l, SortDesc, Natural),
        Condition::new(l, Natural, shuffle),
        Condition::new(l, shuffle, shuffle),
        Condition::new(l, shuffle, Natural),
        Condition::new(PositionMode::None, Natural, Natural),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    /// Used when no collection file is given.
    pub synthetic: SyntheticSpec,
    pub collection: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub triples: Option<PathBuf>,
    pub dev_queries: usize,
    pub test_queries: usize,
    /// Target vocabulary size of the tokenizer.
    pub vocab_size: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            // a small term inventory seen often enough to learn matching
            // from scratch
            synthetic: SyntheticSpec {
                vocab_size: 600,
                n_docs: 20_000,
                n_queries: 2000,
                title_window: 4,
                off_topic_rate: 0.6,
                ..SyntheticSpec::default()
            },
            collection: None,
            queries: None,
            qrels: None,
            triples: None,
            dev_queries: 100,
            test_queries: 200,
            vocab_size: 900,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSpec {
    pub bm25: Bm25Params,
    /// BM25 candidates per query.
    pub depth: usize,
    /// Candidates re-scored by the cross-encoder.
    pub rerank_k: usize,
}

impl Default for RetrievalSpec {
    fn default() -> Self {
        RetrievalSpec {
            bm25: Bm25Params::default(),
            depth: 100,
            rerank_k: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CkaSpec {
    pub enabled: bool,
    pub batch_size: usize,
    /// Top BM25 passages per test query used as inputs.
    pub docs_per_query: usize,
}

impl Default for CkaSpec {
    fn default() -> Self {
        CkaSpec {
            enabled: true,
            batch_size: 64,
            docs_per_query: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Model initialisation, query split and analysis shuffles.
    pub seed: u64,
    pub data: DataSpec,
    pub model: ModelConfig,
    /// `train_perturb` is taken from each condition.
    pub train: TrainConfig,
    pub retrieval: RetrievalSpec,
    pub eval: EvalOptions,
    pub cka: CkaSpec,
    pub conditions: Vec<Condition>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec::with_seed(13)
    }
}

impl ExperimentSpec {
    /// Default spec with every seed (data, init, training, shuffles) set to
    /// `seed`.
    pub fn with_seed(seed: u64) -> Self {
        ExperimentSpec {
            seed,
            data: DataSpec {
                synthetic: SyntheticSpec {
                    seed,
                    ..DataSpec::default().synthetic
                },
                ..DataSpec::default()
            },
            model: ModelConfig {
                dropout: 0.0,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                batch_size: 32,
                lr_peak: 1e-3,
                warmup_steps: 200,
                total_steps: 10_000,
                epoch_size: 2000,
                seed,
                ..TrainConfig::default()
            },
            retrieval: RetrievalSpec::default(),
            eval: EvalOptions::default(),
            cka: CkaSpec::default(),
            conditions: default_conditions(seed),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.conditions.is_empty() {
            return Err(Error::Config("experiment needs at least one condition".into()));
        }
        self.train.validate()?;
        self.eval.validate()?;
        self.retrieval.bm25.validate()?;
        if self.retrieval.depth == 0 || self.retrieval.rerank_k == 0 {
            return Err(Error::Config("retrieval depth and rerank_k must be positive".into()));
        }
        if self.data.dev_queries == 0 || self.data.test_queries == 0 {
            return Err(Error::Config("dev and test splits must be non-empty".into()));
        }
        let paths = [&self.data.collection, &self.data.queries, &self.data.qrels, &self.data.triples];
        let given = paths.iter().filter(|p| p.is_some()).count();
        if given != 0 && given != paths.len() {
            return Err(Error::Config(
                "give all of collection, queries, qrels and triples, or none".into(),
            ));
        }
        Ok(())
    }

    /// Distinct models in order of first appearance.
    pub fn models(&self) -> Vec<(PositionMode, PerturbMode)> {
        let mut out = Vec::new();
        for c in &self.conditions {
            let m = (c.position_mode, c.train_perturb);
            if !out.contains(&m) {
                out.push(m);
            }
        }
        out
    }
}

/// Loaded or generated inputs of an experiment.
pub struct Prepared {
    pub collection: Collection,
    pub queries: QuerySet,
    pub qrels: Qrels,
    pub train_triples: TripleStream,
    pub dev_qids: Vec<String>,
    pub test_qids: Vec<String>,
    pub vocab: Vocab,
}

const SPLIT_FILE: &str = "split.tsv";

fn prepare_data(spec: &ExperimentSpec, out: &Path) -> Result<Prepared> {
    let dir = out.join("data");
    let files = [
        "collection.tsv",
        "queries.tsv",
        "qrels.txt",
        "train_triples.tsv",
        SPLIT_FILE,
        "vocab.txt",
    ];
    if files.iter().all(|f| dir.join(f).exists()) {
        return load_prepared(&dir);
    }

    let (collection, queries, qrels, triples, triple_qids) = match &spec.data.collection {
        Some(c) => {
            let p = |o: &Option<PathBuf>| o.clone().expect("validated");
            (
                corpus::load_collection(c)?,
                corpus::load_queries(p(&spec.data.queries))?,
                corpus::load_qrels(p(&spec.data.qrels))?,
                corpus::load_triples(p(&spec.data.triples))?,
                None,
            )
        }
        None => {
            let s = generate_synthetic(&spec.data.synthetic)?;
            (s.collection, s.queries, s.qrels, s.triples, Some(s.triple_qids))
        }
    };

    // Queries with at least one relevant passage are split into dev and
    // test; everything else may contribute training triples.
    let threshold = spec.eval.threshold;
    let mut judged: Vec<String> = qrels
        .queries()
        .filter(|(q, docs)| queries.get(q).is_some() && docs.values().any(|&g| g >= threshold))
        .map(|(q, _)| q.to_string())
        .collect();
    let (nd, nt) = (spec.data.dev_queries, spec.data.test_queries);
    if judged.len() < nd + nt {
        return Err(Error::Invalid(format!(
            "{} judged queries cannot fill dev ({nd}) and test ({nt}) splits",
            judged.len()
        )));
    }
    perturb::fisher_yates(&mut judged, &mut ChaCha8Rng::seed_from_u64(spec.seed));
    let dev_qids: Vec<String> = judged[..nd].to_vec();
    let test_qids: Vec<String> = judged[nd..nd + nt].to_vec();
    let train_triples: TripleStream = match triple_qids {
        Some(qids) => {
            let held_out: std::collections::HashSet<&str> =
                dev_qids.iter().chain(&test_qids).map(String::as_str).collect();
            triples
                .into_iter()
                .zip(qids)
                .filter(|(_, q)| !held_out.contains(q.as_str()))
                .map(|(t, _)| t)
                .collect()
        }
        None => triples,
    };
    if train_triples.is_empty() {
        return Err(Error::Invalid("no training triples left after the split".into()));
    }
    let vocab = Vocab::build(
        collection.iter().map(|(_, t)| t).chain(queries.iter().map(|(_, t)| t)),
        spec.data.vocab_size,
    )?;

    corpus::write_collection(&collection, dir.join("collection.tsv"))?;
    corpus::write_queries(&queries, dir.join("queries.tsv"))?;
    corpus::write_qrels(&qrels, dir.join("qrels.txt"))?;
    corpus::write_triples(&train_triples, dir.join("train_triples.tsv"))?;
    crate::tokenizer::save_vocab(&vocab, dir.join("vocab.txt"))?;
    let mut split = String::new();
    for q in &dev_qids {
        writeln!(split, "{q}\tdev").expect("write to string");
    }
    for q in &test_qids {
        writeln!(split, "{q}\ttest").expect("write to string");
    }
    corpus::write_text(&dir.join(SPLIT_FILE), &split)?;
    Ok(Prepared {
        collection,
        queries,
        qrels,
        train_triples,
        dev_qids,
        test_qids,
        vocab,
    })
}

fn load_prepared(dir: &Path) -> Result<Prepared> {
    let split_path = dir.join(SPLIT_FILE);
    let mut dev_qids = Vec::new();
    let mut test_qids = Vec::new();
    for (i, line) in corpus::read_text(&split_path)?.lines().enumerate() {
        match line.split_once('\t') {
            Some((q, "dev")) => dev_qids.push(q.to_string()),
            Some((q, "test")) => test_qids.push(q.to_string()),
            _ => {
                return Err(Error::parse(
                    split_path.display().to_string(),
                    i + 1,
                    "expected `qid<TAB>dev|test`",
                ))
            }
        }
    }
    Ok(Prepared {
        collection: corpus::load_collection(dir.join("collection.tsv"))?,
        queries: corpus::load_queries(dir.join("queries.tsv"))?,
        qrels: corpus::load_qrels(dir.join("qrels.txt"))?,
        train_triples: corpus::load_triples(dir.join("train_triples.tsv"))?,
        dev_qids,
        test_qids,
        vocab: crate::tokenizer::load_vocab(dir.join("vocab.txt"))?,
    })
}

/// Held-out material shared by all conditions.
struct Stage<'a> {
    spec: &'a ExperimentSpec,
    data: &'a Prepared,
    dev_queries: QuerySet,
    dev_qrels: Qrels,
    dev_run: Run,
    test_queries: QuerySet,
    test_qrels: Qrels,
    test_run: Run,
}

impl Stage<'_> {
    fn rerank_and_eval<T: Float>(&self, model: &Model<T>, mode: PerturbMode, dev: bool) -> Result<(Run, MetricsReport)> {
        let (queries, run, qrels) = if dev {
            (&self.dev_queries, &self.dev_run, &self.dev_qrels)
        } else {
            (&self.test_queries, &self.test_run, &self.test_qrels)
        };
        let opts = RerankOptions {
            k: self.spec.retrieval.rerank_k,
            perturb: mode,
            tag: "bowrank".into(),
        };
        let out = rerank(model, &self.data.vocab, queries, &self.data.collection, run, &opts)?;
        let report = evaluate(&out, qrels, &self.spec.eval)?;
        Ok((out, report))
    }
}

fn train_one<T: Float>(
    stage: &Stage<'_>,
    config: ModelConfig,
    train_perturb: PerturbMode,
) -> Result<(Model<T>, TrainLog)> {
    let spec = stage.spec;
    let examples = encode_triples(&stage.data.train_triples, &stage.data.vocab, config.max_len)?;
    let model = Model::<T>::init(config, spec.seed)?;
    let cfg = TrainConfig {
        train_perturb,
        ..spec.train.clone()
    };
    // model selection on the dev queries under the training perturbation
    let mut hook = |m: &Model<T>| Ok(stage.rerank_and_eval(m, train_perturb, true)?.1.mean.ndcg);
    train(model, &examples, &cfg, Some(&mut hook))
}

fn obtain_model(stage: &Stage<'_>, config: &ModelConfig, train_perturb: PerturbMode, dir: &Path) -> Result<(AnyModel, bool)> {
    let ckpt = dir.join("model.ckpt");
    if ckpt.exists() {
        let m = load_any(&ckpt)?;
        if m.config() != config {
            return Err(Error::Checkpoint(format!(
                "{} was trained with a different model config",
                ckpt.display()
            )));
        }
        return Ok((m, false));
    }
    log::info!("training {}", dir.display());
    let (model, log) = match config.precision {
        Precision::F32 => {
            let (m, l) = train_one::<f32>(stage, config.clone(), train_perturb)?;
            (AnyModel::F32(m), l)
        }
        Precision::F64 => {
            let (m, l) = train_one::<f64>(stage, config.clone(), train_perturb)?;
            (AnyModel::F64(m), l)
        }
    };
    log.write(dir)?;
    // checkpoint last: its presence marks the model as complete
    model.save(&ckpt)?;
    Ok((model, true))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionResult {
    pub condition: Condition,
    pub metrics: Option<QueryMetrics>,
    pub error: Option<String>,
    /// False when the metrics were read back from an earlier run.
    pub recomputed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsCka {
    pub model: String,
    pub natural_vs_shuffle: Option<f64>,
    pub natural_vs_sort: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub rows: Vec<ConditionResult>,
    pub bm25: QueryMetrics,
    /// Models trained by this invocation (not loaded from checkpoints).
    pub trained: Vec<String>,
    pub cls_cka: Vec<ClsCka>,
    /// `(model a, model b, report)` over all tokens, natural inputs.
    pub layerwise: Vec<(String, String, CkaReport)>,
    pub summary: String,
}

impl ExperimentResult {
    pub fn metrics(&self, condition: &Condition) -> Option<QueryMetrics> {
        self.rows.iter().find(|r| &r.condition == condition).and_then(|r| r.metrics)
    }
}

fn fmt_metrics(m: &QueryMetrics) -> String {
    format!("{:.4}\t{:.4}\t{:.4}\t{:.4}", m.ndcg, m.map, m.recall, m.mrr)
}

/// Reads the `all` rows of a metrics file written by [`MetricsReport::to_tsv`].
fn read_means(path: &Path, names: &[String; 4]) -> Result<QueryMetrics> {
    let text = corpus::read_text(path)?;
    let mut values = BTreeMap::new();
    for line in text.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() == 3 && f[1] == "all" {
            if let Ok(v) = f[2].parse::<f64>() {
                values.insert(f[0].to_string(), v);
            }
        }
    }
    let get = |n: &String| {
        values
            .get(n)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("{} lacks the mean of {n}", path.display())))
    };
    Ok(QueryMetrics {
        ndcg: get(&names[0])?,
        map: get(&names[1])?,
        recall: get(&names[2])?,
        mrr: get(&names[3])?,
    })
}

fn metric_names(opts: &EvalOptions) -> [String; 4] {
    [
        format!("ndcg@{}", opts.ndcg_k),
        "map".to_string(),
        format!("recall@{}", opts.recall_k),
        format!("mrr@{}", opts.mrr_k),
    ]
}

fn eval_condition(stage: &Stage<'_>, model: &AnyModel, c: &Condition, out: &Path) -> Result<QueryMetrics> {
    let (run, report) = match model {
        AnyModel::F32(m) => stage.rerank_and_eval(m, c.eval_perturb, false)?,
        AnyModel::F64(m) => stage.rerank_and_eval(m, c.eval_perturb, false)?,
    };
    corpus::write_run(&run, out.join("runs").join(format!("{}.run", c.name())))?;
    // metrics file last: it marks the condition as complete
    corpus::write_text(&out.join("metrics").join(format!("{}.tsv", c.name())), &report.to_tsv())?;
    Ok(report.mean)
}

fn build_stage<'a>(spec: &'a ExperimentSpec, data: &'a Prepared, out: &Path) -> Result<Stage<'a>> {
    let index = build_index(&data.collection)?;
    let dev_queries = data.queries.subset(data.dev_qids.iter().map(String::as_str));
    let test_queries = data.queries.subset(data.test_qids.iter().map(String::as_str));
    let p = &spec.retrieval;
    let dev_run = index.retrieve_run(&dev_queries, p.depth, &p.bm25, "bm25")?;
    let test_run = index.retrieve_run(&test_queries, p.depth, &p.bm25, "bm25")?;
    corpus::write_run(&dev_run, out.join("runs/bm25_dev.run"))?;
    corpus::write_run(&test_run, out.join("runs/bm25_test.run"))?;
    Ok(Stage {
        spec,
        data,
        dev_qrels: data.qrels.subset(data.dev_qids.iter().map(String::as_str)),
        test_qrels: data.qrels.subset(data.test_qids.iter().map(String::as_str)),
        dev_queries,
        dev_run,
        test_queries,
        test_run,
    })
}

/// Runs (or resumes) the experiment in `out`.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path) -> Result<ExperimentResult> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    corpus::write_text(&out.join("config.toml"), &spec.to_toml())?;
    let data = prepare_data(spec, out)?;

    let stage = build_stage(spec, &data, out)?;
    let bm25 = evaluate(&stage.test_run, &stage.test_qrels, &spec.eval)?;
    corpus::write_text(&out.join("metrics/bm25.tsv"), &bm25.to_tsv())?;

    let mut config = spec.model.clone();
    config.vocab_size = data.vocab.len();
    let names = metric_names(&spec.eval);

    let mut models = LoadedModels::new();
    let mut trained = Vec::new();
    let mut rows = Vec::new();
    for c in &spec.conditions {
        let metrics_path = out.join("metrics").join(format!("{}.tsv", c.name()));
        if metrics_path.exists() {
            if let Ok(m) = read_means(&metrics_path, &names) {
                rows.push(ConditionResult {
                    condition: *c,
                    metrics: Some(m),
                    error: None,
                    recomputed: false,
                });
                continue;
            }
        }
        let mut cfg = config.clone();
        cfg.position_mode = c.position_mode;
        let name = c.model_name();
        if !models.contains_key(&name) {
            let got = obtain_model(&stage, &cfg, c.train_perturb, &out.join("models").join(&name));
            let got = got.map(|(m, fresh)| {
                if fresh {
                    trained.push(name.clone());
                }
                m
            });
            models.insert(name.clone(), got.map_err(|e| e.to_string()));
        }
        let result = match &models[&name] {
            Ok(m) => eval_condition(&stage, m, c, out).map_err(|e| e.to_string()),
            Err(e) => Err(format!("model {name}: {e}")),
        };
        if let Err(e) = &result {
            log::error!("condition {} failed: {e}", c.name());
        }
        rows.push(ConditionResult {
            condition: *c,
            metrics: result.as_ref().ok().copied(),
            error: result.err(),
            recomputed: true,
        });
    }

    let mut summary = format!(
        "position_mode\ttrain_perturb\teval_perturb\t{}\n",
        names.join("\t")
    );
    for r in &rows {
        let c = &r.condition;
        let values = r
            .metrics
            .as_ref()
            .map_or_else(|| ["failed"; 4].join("\t"), fmt_metrics);
        writeln!(
            summary,
            "{}\t{}\t{}\t{values}",
            c.position_mode.label(),
            c.train_perturb,
            c.eval_perturb
        )
        .expect("write to string");
    }
    corpus::write_text(&out.join("summary.tsv"), &summary)?;

    let (cls_cka, layerwise) = if spec.cka.enabled {
        cka_stage(&stage, models, out)?
    } else {
        (Vec::new(), Vec::new())
    };

    Ok(ExperimentResult {
        rows,
        bm25: bm25.mean,
        trained,
        cls_cka,
        layerwise,
        summary,
    })
}

type LoadedModels = BTreeMap<String, std::result::Result<AnyModel, String>>;

/// CKA analyses of the models of a completed experiment in `out`: [CLS]
/// similarity of each model on natural vs perturbed input, and layerwise
/// similarity of every model to the learned-position natural baseline.
pub fn analyze_cka(
    spec: &ExperimentSpec,
    out: &Path,
) -> Result<(Vec<ClsCka>, Vec<(String, String, CkaReport)>)> {
    spec.validate()?;
    let data = prepare_data(spec, out)?;
    let stage = build_stage(spec, &data, out)?;
    cka_stage(&stage, LoadedModels::new(), out)
}

fn cka_stage(
    stage: &Stage<'_>,
    mut models: LoadedModels,
    out: &Path,
) -> Result<(Vec<ClsCka>, Vec<(String, String, CkaReport)>)> {
    let spec = stage.spec;
    for (pos, train_perturb) in spec.models() {
        let name = Condition::new(pos, train_perturb, PerturbMode::Natural).model_name();
        if !models.contains_key(&name) {
            let ckpt = out.join("models").join(&name).join("model.ckpt");
            models.insert(name, load_any(&ckpt).map_err(|e| e.to_string()));
        }
    }
    let loaded: Vec<(String, &AnyModel)> = spec
        .models()
        .into_iter()
        .filter_map(|(pos, tp)| {
            let name = Condition::new(pos, tp, PerturbMode::Natural).model_name();
            match &models[&name] {
                Ok(m) => Some((name, m)),
                Err(e) => {
                    log::warn!("CKA skips model {name}: {e}");
                    None
                }
            }
        })
        .collect();
    run_cka(stage, &loaded, out)
}

fn cka_inputs(stage: &Stage<'_>, max_len: usize) -> Result<(Vec<TokenizedPair>, Vec<String>)> {
    let mut pairs = Vec::new();
    let mut keys = Vec::new();
    for (qid, entries) in stage.test_run.queries() {
        let query = stage.test_queries.get(qid).expect("test query");
        for e in entries.iter().take(stage.spec.cka.docs_per_query) {
            let text = stage.data.collection.get(&e.doc_id).expect("retrieved doc");
            pairs.push(stage.data.vocab.encode_pair(query, text, max_len)?);
            keys.push(pair_key(qid, &e.doc_id));
        }
    }
    Ok((pairs, keys))
}

fn compare_any(
    a: &AnyModel,
    pa: PerturbMode,
    b: &AnyModel,
    pb: PerturbMode,
    pairs: &[TokenizedPair],
    keys: &[String],
    selector: Selector,
    batch: usize,
) -> Result<CkaReport> {
    match (a, b) {
        (AnyModel::F32(a), AnyModel::F32(b)) => cka::compare(a, pa, b, pb, pairs, keys, selector, batch),
        (AnyModel::F64(a), AnyModel::F64(b)) => cka::compare(a, pa, b, pb, pairs, keys, selector, batch),
        _ => Err(Error::Config("compared models must share precision".into())),
    }
}

fn run_cka(
    stage: &Stage<'_>,
    models: &[(String, &AnyModel)],
    out: &Path,
) -> Result<(Vec<ClsCka>, Vec<(String, String, CkaReport)>)> {
    let Some((_, first)) = models.first() else {
        return Ok((Vec::new(), Vec::new()));
    };
    let (pairs, keys) = cka_inputs(stage, first.config().max_len)?;
    let batch = stage.spec.cka.batch_size;
    let shuffle = PerturbMode::Shuffle { seed: stage.spec.seed };
    let nat = PerturbMode::Natural;

    let mut cls = Vec::new();
    let mut table = String::from("model\tnatural_vs_shuffle\tnatural_vs_sort\n");
    for (name, m) in models {
        let sh = compare_any(m, nat, m, shuffle, &pairs, &keys, Selector::ClsOnly, batch)?;
        let so = compare_any(m, nat, m, PerturbMode::SortDesc, &pairs, &keys, Selector::ClsOnly, batch)?;
        let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.4}"));
        writeln!(table, "{name}\t{}\t{}", fmt(sh.last()), fmt(so.last())).expect("write to string");
        corpus::write_text(&out.join(format!("cka/cls_layers_{name}_shuffle.csv")), &sh.to_csv())?;
        corpus::write_text(&out.join(format!("cka/cls_layers_{name}_sort.csv")), &so.to_csv())?;
        cls.push(ClsCka {
            model: name.clone(),
            natural_vs_shuffle: sh.last(),
            natural_vs_sort: so.last(),
        });
    }
    corpus::write_text(&out.join("cka/cls.tsv"), &table)?;

    // every other model against the learned-position natural baseline
    let mut layerwise = Vec::new();
    let baseline = models.iter().find(|(n, _)| n == "learned-natural");
    if let Some((base_name, base)) = baseline {
        for (name, m) in models.iter().filter(|(n, _)| n != base_name) {
            let r = compare_any(base, nat, m, nat, &pairs, &keys, Selector::AllTokens, batch)?;
            corpus::write_text(&out.join(format!("cka/layerwise_{base_name}_vs_{name}.csv")), &r.to_csv())?;
            layerwise.push((base_name.clone(), name.clone(), r));
        }
    }
    Ok((cls, layerwise))
}
