//! Staged experiment pipeline with artifacts persisted between stages.
//!
//! Every stage reads its inputs from the output directory and writes its
//! outputs there, so `run` is exactly the sequence of single stages and any
//! stage can be re-run on its own. All randomness comes from the root seed,
//! split per stage with [`derive_seed`].
//!
//! Directory layout:
//!
//! ```text
//! manifest.json                 resolved config, overrides, defaulted keys
//! embeddings.txt                word vectors (toy table or a copy of the input)
//! train.jsonl, test.jsonl       samples
//! gen.json                      generator config and unseen pool
//! vocab.json                    frequencies and categories
//! graph_{train,test}.json       graph structure
//! graph_{train,test}_features.json
//! {arm}.ckpt, {arm}.losses.json trained models
//! predictions_{arm}.jsonl       per-sample predictions with top-5 logits
//! report_{arm}.json             evaluation report
//! reports.csv                   one B,C,R,U,T,M,BNG row per arm
//! attention_test.csv            open-arm attention over the test graph
//! sweep/eps_{ε}/                open arm retrained per ε of the grid
//! ```
//!
//! Files without a JSON envelope (`.jsonl`, `.csv`, `.txt`) get a
//! `<name>.meta.json` sidecar carrying the provenance.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::embedding::{EmbeddingTable, Phrase};
use crate::error::{Error, Result};
use crate::graph::{build_answer_graph, read_json, write_json, AnswerGraph};
use crate::head::{
    compute_mask_feature, train_closed, train_open, BackboneProjection, ClosedHead, ClosedModel,
    OpenPredictor, OpenVocabModel, Prediction, TrainConfig,
};
use crate::metrics::{evaluate_report, EvalReport};
use crate::provenance::{Fingerprint, Provenance};
use crate::seeding::{derive_seed, rng_for};
use crate::synth::{
    rank_answers, sample_dataset, toy_embedding_table, GenConfig, ToyEmbeddingConfig,
};
use crate::verbalizer::{self, VerbalizerModel, EPSILON_GRID};
use crate::vocab::{build_vocabularies, load_samples, save_samples, AnswerVocabulary, QaSample};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSource {
    /// GloVe-format text file; when absent a toy table is generated.
    pub path: Option<PathBuf>,
    pub toy: ToyEmbeddingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub k_neighbors: usize,
    pub hops: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 5,
            hops: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerbalizerConfig {
    pub layers: usize,
    pub epsilon: f64,
    pub leaky_slope: f64,
}

impl Default for VerbalizerConfig {
    fn default() -> Self {
        Self {
            layers: verbalizer::DEFAULT_LAYERS,
            epsilon: verbalizer::DEFAULT_EPSILON,
            leaky_slope: verbalizer::DEFAULT_LEAKY_SLOPE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            temperature: t.temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmsConfig {
    /// Train the top-k closed-vocabulary classifier as a baseline.
    pub closed_baseline: bool,
    pub closed_top_k: usize,
    /// Train an ε = 1 arm that bypasses smoothing.
    pub ablation: bool,
}

impl Default for ArmsConfig {
    fn default() -> Self {
        Self {
            closed_baseline: true,
            closed_top_k: 1000,
            ablation: true,
        }
    }
}

/// One experiment, read from a TOML file. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub embeddings: EmbeddingSource,
    /// `gen.seed` is ignored and replaced by a seed derived from `seed`.
    pub gen: GenConfig,
    pub graph: GraphConfig,
    pub verbalizer: VerbalizerConfig,
    pub train: TrainSection,
    pub arms: ArmsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            embeddings: EmbeddingSource::default(),
            gen: GenConfig::default(),
            graph: GraphConfig::default(),
            verbalizer: VerbalizerConfig::default(),
            train: TrainSection::default(),
            arms: ArmsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Fills in the per-stage seeds derived from the root seed.
    pub fn resolved(mut self) -> Self {
        self.gen.seed = derive_seed(self.seed, "gen");
        self.embeddings.toy.seed = derive_seed(self.seed, "toy-embeddings");
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.train_config(self.verbalizer.epsilon).validate()?;
        if self.train.epochs > 0 && self.train.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.graph.k_neighbors == 0 {
            return Err(Error::Config("graph.k_neighbors must be positive".into()));
        }
        if self.verbalizer.layers == 0 {
            return Err(Error::Config("verbalizer.layers must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.verbalizer.epsilon) {
            return Err(Error::Config(
                "verbalizer.epsilon must lie in [0, 1]".into(),
            ));
        }
        if !(self.verbalizer.leaky_slope.is_finite() && self.verbalizer.leaky_slope > 0.0) {
            return Err(Error::Config(
                "verbalizer.leaky_slope must be positive".into(),
            ));
        }
        if self.arms.closed_baseline && self.arms.closed_top_k == 0 {
            return Err(Error::Config("arms.closed_top_k must be positive".into()));
        }
        if let Some(p) = &self.embeddings.path {
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "embeddings.path {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn train_config(&self, epsilon: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: derive_seed(self.seed, "batches"),
            epsilon,
            temperature: self.train.temperature,
        }
    }

    pub fn fingerprint(&self, epsilon: f64) -> Fingerprint {
        Fingerprint {
            seed: self.seed,
            epsilon,
            hops: self.graph.hops,
            k_neighbors: self.graph.k_neighbors,
            layers: self.verbalizer.layers,
        }
    }

    pub fn provenance(&self, epsilon: f64) -> Provenance {
        Provenance::new(self.fingerprint(epsilon))
    }
}

/// A config as loaded from disk plus command-line overrides.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// `key=value` overrides in the order applied.
    pub overrides: Vec<String>,
    /// Dotted keys that neither the file nor an override set.
    pub defaulted: Vec<String>,
}

fn flatten_keys(prefix: &str, table: &toml::Table, out: &mut BTreeSet<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten_keys(&key, t, out),
            _ => {
                out.insert(key);
            }
        }
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Config(format!("empty override key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        cur = match cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override {key}: {p} is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Builds a config from optional TOML text and `key=value` overrides.
pub fn load_config(text: Option<&str>, overrides: &[String]) -> Result<LoadedConfig> {
    let mut table: toml::Table = match text {
        Some(t) => t
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?,
        None => toml::Table::new(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        set_dotted(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    let mut given = BTreeSet::new();
    flatten_keys("", &table, &mut given);

    let config: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    if config.gen.seed != 0 {
        log::warn!("gen.seed is derived from the root seed; the configured value is ignored");
    }
    // Derived seeds can exceed TOML's i64 range, so list keys before resolving.
    let full = toml::Value::try_from(&config).map_err(|e| Error::Config(e.to_string()))?;
    let mut all = BTreeSet::new();
    if let toml::Value::Table(t) = &full {
        flatten_keys("", t, &mut all);
    }
    let defaulted = all.difference(&given).cloned().collect();
    let config = config.resolved();
    config.validate()?;
    Ok(LoadedConfig {
        config,
        overrides: overrides.to_vec(),
        defaulted,
    })
}

pub fn load_config_file(path: Option<&Path>, overrides: &[String]) -> Result<LoadedConfig> {
    let text = match path {
        Some(p) => Some(
            fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
        ),
        None => None,
    };
    load_config(text.as_deref(), overrides)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Config,
    Gen,
    Vocab,
    Graph,
    Train,
    Predict,
    Eval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Gen => "gen",
            Stage::Vocab => "vocab",
            Stage::Graph => "graph",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Eval => "eval",
        };
        f.write_str(s)
    }
}

/// An error tagged with the stage that raised it.
#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        self.source.exit_code()
    }
}

trait Tag<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> Tag<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArmKind {
    Open,
    Closed,
}

/// One trained model: its file stem, kind and ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub kind: ArmKind,
    pub epsilon: f64,
}

impl Arm {
    pub fn open(epsilon: f64) -> Self {
        Self {
            name: "open".into(),
            kind: ArmKind::Open,
            epsilon,
        }
    }

    pub fn ablation() -> Self {
        Self {
            name: "ablation".into(),
            kind: ArmKind::Open,
            epsilon: 1.0,
        }
    }

    pub fn closed() -> Self {
        Self {
            name: "closed".into(),
            kind: ArmKind::Closed,
            epsilon: 1.0,
        }
    }

    fn fingerprint(&self, config: &ExperimentConfig) -> Fingerprint {
        let mut f = config.fingerprint(self.epsilon);
        if self.kind == ArmKind::Closed {
            f.layers = 0;
        }
        f
    }
}

/// The arms a config asks for, open arm first.
pub fn arms_for(config: &ExperimentConfig) -> Vec<Arm> {
    let mut arms = vec![Arm::open(config.verbalizer.epsilon)];
    if config.arms.ablation && config.verbalizer.epsilon != 1.0 {
        arms.push(Arm::ablation());
    }
    if config.arms.closed_baseline {
        arms.push(Arm::closed());
    }
    arms
}

/// File names inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn manifest(&self) -> PathBuf {
        self.file("manifest.json")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.file("embeddings.txt")
    }
    pub fn train_samples(&self) -> PathBuf {
        self.file("train.jsonl")
    }
    pub fn test_samples(&self) -> PathBuf {
        self.file("test.jsonl")
    }
    pub fn gen_manifest(&self) -> PathBuf {
        self.file("gen.json")
    }
    pub fn vocab(&self) -> PathBuf {
        self.file("vocab.json")
    }
    pub fn graph(&self, split: &str) -> (PathBuf, PathBuf) {
        (
            self.file(&format!("graph_{split}.json")),
            self.file(&format!("graph_{split}_features.json")),
        )
    }
    pub fn checkpoint(&self, arm: &str) -> PathBuf {
        self.file(&format!("{arm}.ckpt"))
    }
    pub fn losses(&self, arm: &str) -> PathBuf {
        self.file(&format!("{arm}.losses.json"))
    }
    pub fn predictions(&self, arm: &str) -> PathBuf {
        self.file(&format!("predictions_{arm}.jsonl"))
    }
    pub fn report(&self, arm: &str) -> PathBuf {
        self.file(&format!("report_{arm}.json"))
    }
    pub fn reports_csv(&self) -> PathBuf {
        self.file("reports.csv")
    }
    pub fn attention(&self) -> PathBuf {
        self.file("attention_test.csv")
    }
    pub fn sweep_arm(&self, epsilon: f64) -> Layout {
        Layout::new(self.root.join("sweep").join(format!("eps_{epsilon:.1}")))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_sidecar(path: &Path, provenance: &Provenance) -> Result<()> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    write_json(&path.with_file_name(name), provenance)
}

#[derive(Serialize)]
struct Manifest<'a> {
    provenance: Provenance,
    config: &'a ExperimentConfig,
    overrides: &'a [String],
    defaulted: &'a [String],
}

pub fn write_manifest(loaded: &LoadedConfig, layout: &Layout) -> Result<()> {
    create_dir(&layout.root)?;
    let c = &loaded.config;
    write_json(
        &layout.manifest(),
        &Manifest {
            provenance: c.provenance(c.verbalizer.epsilon),
            config: c,
            overrides: &loaded.overrides,
            defaulted: &loaded.defaulted,
        },
    )
}

#[derive(Serialize, Deserialize)]
struct GenManifest {
    provenance: Provenance,
    gen: GenConfig,
    embedding_source: String,
    ranked_answers: Vec<Phrase>,
    unseen_answers: Vec<Phrase>,
}

/// Writes the embedding table and the train/test samples.
pub fn stage_gen(config: &ExperimentConfig, layout: &Layout) -> StageResult<()> {
    let s = Stage::Gen;
    create_dir(&layout.root).at(s)?;
    let prov = config.provenance(config.verbalizer.epsilon);
    let (table, source) = match &config.embeddings.path {
        Some(p) => (
            EmbeddingTable::load(p, None).at(s)?,
            p.display().to_string(),
        ),
        None => (
            toy_embedding_table(&config.embeddings.toy).at(s)?,
            "toy".to_string(),
        ),
    };
    table.save(&layout.embeddings()).at(s)?;
    write_sidecar(&layout.embeddings(), &prov).at(s)?;

    let ranking = rank_answers(&config.gen, &table).at(s)?;
    let (train, test) = sample_dataset(&config.gen, &table).at(s)?;
    save_samples(&layout.train_samples(), &train).at(s)?;
    save_samples(&layout.test_samples(), &test).at(s)?;
    write_sidecar(&layout.train_samples(), &prov).at(s)?;
    write_sidecar(&layout.test_samples(), &prov).at(s)?;
    write_json(
        &layout.gen_manifest(),
        &GenManifest {
            provenance: prov,
            gen: config.gen.clone(),
            embedding_source: source,
            ranked_answers: ranking.ranked,
            unseen_answers: ranking.unseen,
        },
    )
    .at(s)?;
    log::info!("gen: {} train / {} test samples", train.len(), test.len());
    Ok(())
}

pub fn stage_vocab(_config: &ExperimentConfig, layout: &Layout) -> StageResult<()> {
    let s = Stage::Vocab;
    let train = load_samples(&layout.train_samples()).at(s)?;
    let test = load_samples(&layout.test_samples()).at(s)?;
    let vocab = build_vocabularies(&train, &test);
    vocab.save(&layout.vocab()).at(s)?;
    log::info!(
        "vocab: {} train answers, {} test answers",
        vocab.train_answers.len(),
        vocab.test_answers.len()
    );
    Ok(())
}

fn load_table(layout: &Layout) -> Result<EmbeddingTable> {
    EmbeddingTable::load(&layout.embeddings(), None)
}

pub fn stage_graph(config: &ExperimentConfig, layout: &Layout) -> StageResult<()> {
    let s = Stage::Graph;
    let table = load_table(layout).at(s)?;
    let vocab = AnswerVocabulary::load(&layout.vocab()).at(s)?;
    for (split, answers) in [
        ("train", &vocab.train_answers),
        ("test", &vocab.test_answers),
    ] {
        let g = build_answer_graph(answers, &table, config.graph.k_neighbors, config.graph.hops)
            .at(s)?;
        let (gp, fp) = layout.graph(split);
        g.save(&gp, &fp).at(s)?;
        log::info!(
            "graph {split}: {} nodes, {} edges",
            g.len(),
            g.edges().len()
        );
    }
    Ok(())
}

fn load_graph(layout: &Layout, split: &str) -> Result<AnswerGraph> {
    let (gp, fp) = layout.graph(split);
    AnswerGraph::load(&gp, &fp)
}

/// Initial open-head parameters: `P` is drawn first, then the verbalizer, from
/// one seeded stream shared by every open arm.
pub fn init_open_model(
    config: &ExperimentConfig,
    dim: usize,
    feature_dim: usize,
    epsilon: f64,
) -> Result<OpenVocabModel> {
    let mut rng = rng_for(config.seed, "init-open");
    let projection = BackboneProjection::init(dim, feature_dim, &mut rng);
    let verbalizer = VerbalizerModel::init(
        dim,
        config.verbalizer.layers,
        epsilon,
        config.verbalizer.leaky_slope,
        &mut rng,
    )?;
    Ok(OpenVocabModel {
        projection,
        verbalizer,
    })
}

pub fn init_closed_model(
    config: &ExperimentConfig,
    vocab: &AnswerVocabulary,
    dim: usize,
    feature_dim: usize,
) -> Result<ClosedModel> {
    let mut rng = rng_for(config.seed, "init-closed");
    let projection = BackboneProjection::init(dim, feature_dim, &mut rng);
    let head = ClosedHead::init(vocab, config.arms.closed_top_k, dim, &mut rng)?;
    Ok(ClosedModel { projection, head })
}

fn feature_dim(samples: &[QaSample]) -> Result<usize> {
    let f = samples
        .first()
        .map(|s| s.feature.len())
        .ok_or_else(|| Error::Data("no training samples".into()))?;
    if let Some(bad) = samples.iter().find(|s| s.feature.len() != f) {
        return Err(Error::Data(format!(
            "sample {} has {} features, expected {f}",
            bad.sample_id,
            bad.feature.len()
        )));
    }
    Ok(f)
}

#[derive(Serialize, Deserialize)]
struct LossLog {
    provenance: Provenance,
    epoch_losses: Vec<f64>,
}

/// Trains one arm from the persisted samples, vocabulary and train graph,
/// writing its checkpoint into `arm_dir`.
pub fn stage_train_arm(
    config: &ExperimentConfig,
    layout: &Layout,
    arm_dir: &Layout,
    arm: &Arm,
) -> StageResult<()> {
    let s = Stage::Train;
    create_dir(&arm_dir.root).at(s)?;
    let train = load_samples(&layout.train_samples()).at(s)?;
    let vocab = AnswerVocabulary::load(&layout.vocab()).at(s)?;
    let graph = load_graph(layout, "train").at(s)?;
    let f = feature_dim(&train).at(s)?;
    let prov = Provenance::new(arm.fingerprint(config));
    let tc = config.train_config(arm.epsilon);
    let (bytes, losses) = match arm.kind {
        ArmKind::Open => {
            let mut model = init_open_model(config, graph.dim(), f, arm.epsilon).at(s)?;
            let losses = train_open(&mut model, &graph, &vocab, &train, &tc).at(s)?;
            (checkpoint::encode_open(&model, &prov).at(s)?, losses)
        }
        ArmKind::Closed => {
            let mut model = init_closed_model(config, &vocab, graph.dim(), f).at(s)?;
            let losses = train_closed(&mut model, &train, &tc).at(s)?;
            (checkpoint::encode_closed(&model, &prov).at(s)?, losses)
        }
    };
    checkpoint::save(&arm_dir.checkpoint(&arm.name), &bytes).at(s)?;
    write_json(
        &arm_dir.losses(&arm.name),
        &LossLog {
            provenance: prov,
            epoch_losses: losses.clone(),
        },
    )
    .at(s)?;
    log::info!(
        "train {}: final loss {}",
        arm.name,
        losses
            .last()
            .map_or("n/a".to_string(), |l| format!("{l:.4}"))
    );
    Ok(())
}

pub fn stage_train(config: &ExperimentConfig, layout: &Layout) -> StageResult<()> {
    for arm in arms_for(config) {
        stage_train_arm(config, layout, layout, &arm)?;
    }
    Ok(())
}

fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for p in preds {
        serde_json::to_writer(&mut out, p).map_err(|e| Error::json(path, e))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

fn gold_category(vocab: &AnswerVocabulary, gold: &Phrase) -> Result<String> {
    vocab
        .category_of(gold)
        .map(|c| c.to_string())
        .ok_or_else(|| Error::UncategorizedAnswer(gold.to_string()))
}

/// Scores every test sample with one trained arm.
pub fn stage_predict_arm(layout: &Layout, arm_dir: &Layout, arm: &Arm) -> StageResult<()> {
    let s = Stage::Predict;
    let test = load_samples(&layout.test_samples()).at(s)?;
    let vocab = AnswerVocabulary::load(&layout.vocab()).at(s)?;
    let bytes = checkpoint::read(&arm_dir.checkpoint(&arm.name)).at(s)?;
    let mut preds = Vec::with_capacity(test.len());
    let provenance = match arm.kind {
        ArmKind::Open => {
            let (model, header) = checkpoint::decode_open(&bytes).at(s)?;
            let graph = load_graph(layout, "test").at(s)?;
            // Temperature does not change the ranking; report logits at T = 1.
            let predictor = OpenPredictor::new(&model, &graph, 1.0).at(s)?;
            for sample in &test {
                let top = predictor.rank(sample, 5).at(s)?;
                preds.push(Prediction {
                    sample_id: sample.sample_id.clone(),
                    predicted: top[0].0.clone(),
                    gold: sample.answer.clone(),
                    gold_category: gold_category(&vocab, &sample.answer).at(s)?,
                    logit_top5: top,
                });
            }
            header.provenance
        }
        ArmKind::Closed => {
            let (model, header) = checkpoint::decode_closed(&bytes).at(s)?;
            for sample in &test {
                let m = compute_mask_feature(&model.projection, sample).at(s)?;
                let top = model.head.rank(&m, 5).at(s)?;
                preds.push(Prediction {
                    sample_id: sample.sample_id.clone(),
                    predicted: top[0].0.clone(),
                    gold: sample.answer.clone(),
                    gold_category: gold_category(&vocab, &sample.answer).at(s)?,
                    logit_top5: top,
                });
            }
            header.provenance
        }
    };
    let path = arm_dir.predictions(&arm.name);
    write_predictions(&path, &preds).at(s)?;
    write_sidecar(&path, &provenance).at(s)?;
    Ok(())
}

/// Writes the per-layer attention of the open arm over the test graph.
pub fn export_attention(layout: &Layout, arm_dir: &Layout, arm: &Arm) -> StageResult<()> {
    let s = Stage::Predict;
    let (model, header) =
        checkpoint::decode_open(&checkpoint::read(&arm_dir.checkpoint(&arm.name)).at(s)?).at(s)?;
    let graph = load_graph(layout, "test").at(s)?;
    let path = arm_dir.attention();
    let file = fs::File::create(&path)
        .map_err(|e| Error::io(&path, e))
        .at(s)?;
    let mut out = BufWriter::new(file);
    verbalizer::write_attention_csv(&model.verbalizer, &graph, &mut out).at(s)?;
    out.flush().map_err(|e| Error::io(&path, e)).at(s)?;
    write_sidecar(&path, &header.provenance).at(s)?;
    Ok(())
}

pub fn stage_predict(config: &ExperimentConfig, layout: &Layout) -> StageResult<()> {
    let arms = arms_for(config);
    for arm in &arms {
        stage_predict_arm(layout, layout, arm)?;
    }
    export_attention(layout, layout, &arms[0])
}

/// Contents of `report_{arm}.json`; percentages rounded to one decimal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub provenance: Provenance,
    pub arm: String,
    pub report: EvalReport,
}

/// Full-precision report for one arm's persisted predictions.
pub fn evaluate_arm(layout: &Layout, arm_dir: &Layout, arm: &Arm) -> Result<EvalReport> {
    let vocab = AnswerVocabulary::load(&layout.vocab())?;
    let preds = load_predictions(&arm_dir.predictions(&arm.name))?;
    let pairs: Vec<(Phrase, Phrase)> = preds.into_iter().map(|p| (p.gold, p.predicted)).collect();
    evaluate_report(&pairs, &vocab)
}

pub fn stage_eval_arms(
    config: &ExperimentConfig,
    layout: &Layout,
    arm_dir: &Layout,
    arms: &[Arm],
) -> StageResult<()> {
    let s = Stage::Eval;
    let mut csv = format!("arm,{}\n", EvalReport::CSV_HEADER);
    for arm in arms {
        let report = evaluate_arm(layout, arm_dir, arm).at(s)?;
        csv.push_str(&format!("{},{}\n", arm.name, report.csv_row()));
        write_json(
            &arm_dir.report(&arm.name),
            &ReportFile {
                provenance: Provenance::new(arm.fingerprint(config)),
                arm: arm.name.clone(),
                report: report.rounded(),
            },
        )
        .at(s)?;
        log::info!("eval {}: {}", arm.name, report.csv_row());
    }
    let path = arm_dir.reports_csv();
    fs::write(&path, csv)
        .map_err(|e| Error::io(&path, e))
        .at(s)?;
    write_sidecar(&path, &config.provenance(arms[0].epsilon)).at(s)?;
    Ok(())
}

pub fn stage_eval(config: &ExperimentConfig, layout: &Layout) -> StageResult<()> {
    stage_eval_arms(config, layout, layout, &arms_for(config))
}

/// The whole pipeline, one persisted stage after another.
pub fn run_experiment(loaded: &LoadedConfig) -> StageResult<Layout> {
    let config = &loaded.config;
    let layout = Layout::new(&config.out_dir);
    write_manifest(loaded, &layout).at(Stage::Config)?;
    stage_gen(config, &layout)?;
    stage_vocab(config, &layout)?;
    stage_graph(config, &layout)?;
    stage_train(config, &layout)?;
    stage_predict(config, &layout)?;
    stage_eval(config, &layout)?;
    Ok(layout)
}

/// Runs the shared stages once, then retrains, predicts and evaluates the
/// open arm for every ε in `grid`, concurrently.
pub fn run_sweep(loaded: &LoadedConfig, grid: &[f64]) -> StageResult<Vec<Layout>> {
    let config = &loaded.config;
    let layout = Layout::new(&config.out_dir);
    write_manifest(loaded, &layout).at(Stage::Config)?;
    stage_gen(config, &layout)?;
    stage_vocab(config, &layout)?;
    stage_graph(config, &layout)?;

    let results: Vec<StageResult<Layout>> = std::thread::scope(|scope| {
        let handles: Vec<_> = grid
            .iter()
            .map(|&eps| {
                let layout = &layout;
                scope.spawn(move || -> StageResult<Layout> {
                    let dir = layout.sweep_arm(eps);
                    let arm = Arm::open(eps);
                    stage_train_arm(config, layout, &dir, &arm)?;
                    stage_predict_arm(layout, &dir, &arm)?;
                    stage_eval_arms(config, layout, &dir, std::slice::from_ref(&arm))?;
                    Ok(dir)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep arm panicked"))
            .collect()
    });
    let dirs = results.into_iter().collect::<StageResult<Vec<Layout>>>()?;

    let mut csv = format!("epsilon,{}\n", EvalReport::CSV_HEADER);
    for (eps, dir) in grid.iter().zip(&dirs) {
        let r: ReportFile = read_json(&dir.report("open")).at(Stage::Eval)?;
        csv.push_str(&format!("{eps},{}\n", r.report.csv_row()));
    }
    let path = layout.root.join("sweep").join("sweep.csv");
    fs::write(&path, csv)
        .map_err(|e| Error::io(&path, e))
        .at(Stage::Eval)?;
    Ok(dirs)
}

pub fn default_grid() -> Vec<f64> {
    EPSILON_GRID.to_vec()
}
