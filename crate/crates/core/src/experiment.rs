//! Experiment runner: configuration, single runs, scenario sweeps and the
//! artifacts each one leaves on disk.
//!
//! A configuration is a TOML file with flat dotted keys:
//!
//! ```toml
//! seed = 1
//! dataset.kind = "synthetic"
//! dataset.per_cluster = 200
//! head.n_p = 2
//! head.k = 3
//! gar.c_alpha = 0.1
//! train.batch_size = 128
//! scenario.mode = "single"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acol::{assign_annotations, parent_probabilities, AcolHead, AnnotationAssignment, HeadConfig};
use crate::checkpoint;
use crate::data::{
    apply_partition, load_idx, split_indices, synthetic_raw, LabeledDataset, ParentPartition,
    RawDataset, Standardizer,
};
use crate::error::{Error, Result};
use crate::eval::{
    annotation_nodes, clustering_accuracy, embeddings_csv, export_graph, parent_accuracy,
    KMeansParams, PerParentKMeans,
};
use crate::gar::GarCoefficients;
use crate::network::{init_model, train_with_progress, EpochRecord, Model, TrainConfig, TrainReport};
use crate::numeric::{relu, Matrix};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Gaussian blobs; the test set is a seeded fraction of them.
    Synthetic {
        /// Defaults to `n_p·k`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        clusters: Option<usize>,
        per_cluster: usize,
        dim: usize,
        separation: f64,
        test_fraction: f64,
        /// Standardize features with training-split statistics.
        #[serde(default)]
        standardize: bool,
    },
    /// IDX image/label pairs for a training and a test set.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Seeded random subset of the training file.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        /// Seeded random subset of the test file.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    /// Fine label at sorted position `i` goes to parent `(i mod n_p) + 1`.
    Interleaved,
    /// Two parents split at `threshold`.
    Threshold,
    /// Explicit `groups`.
    Groups,
    /// Seeded equal-size random groups.
    Random,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub kind: PartitionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub exclude: Vec<usize>,
}

impl PartitionConfig {
    pub fn build(&self, labels: &[usize], n_parents: usize, seed: u64) -> Result<ParentPartition> {
        let p = match self.kind {
            PartitionKind::Interleaved => ParentPartition::interleaved(labels, n_parents)?,
            PartitionKind::Threshold => {
                let t = self
                    .threshold
                    .ok_or_else(|| Error::Config("partition.threshold is required".into()))?;
                ParentPartition::threshold(labels.iter().copied(), t)?
            }
            PartitionKind::Groups => ParentPartition::from_groups(
                self.groups
                    .as_ref()
                    .ok_or_else(|| Error::Config("partition.groups is required".into()))?,
            )?,
            PartitionKind::Random => ParentPartition::random(labels, n_parents, seed)?,
            PartitionKind::Identity => ParentPartition::identity(labels.iter().copied())?,
        };
        p.excluding(self.exclude.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output sizes come from the data and head.
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub validation_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch_size: d.batch_size,
            epochs: d.epochs,
            lr: d.learning_rate,
            momentum: d.momentum,
            validation_size: d.validation_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioMode {
    Single,
    RandomPartitions,
    InterParent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub mode: ScenarioMode,
    /// Number of random partitions.
    #[serde(default)]
    pub count: usize,
    /// Extra fine labels dropped in each inter-parent scenario.
    #[serde(default)]
    pub exclusions: Vec<Vec<usize>>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            mode: ScenarioMode::Single,
            count: 0,
            exclusions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub head: HeadConfig,
    pub model: ModelConfig,
    pub gar: GarCoefficients,
    pub train: TrainSection,
    #[serde(default)]
    pub scenario: ScenarioConfig,
}

impl ExperimentConfig {
    /// Two parents with three blobs each, 200 points per blob in 8
    /// dimensions, 10 apart.
    pub fn synthetic_default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            dataset: DatasetConfig::Synthetic {
                clusters: None,
                per_cluster: 200,
                dim: 8,
                separation: 10.0,
                test_fraction: 0.25,
                standardize: true,
            },
            partition: PartitionConfig {
                kind: PartitionKind::Interleaved,
                threshold: None,
                groups: None,
                exclude: Vec::new(),
            },
            head: HeadConfig { n_p: 2, k: 3 },
            model: ModelConfig { hidden: vec![512] },
            gar: GarCoefficients::default(),
            train: TrainSection {
                lr: 0.03,
                validation_size: 100,
                ..TrainSection::default()
            },
            scenario: ScenarioConfig::default(),
        }
    }

    /// Digits below 5 against the rest, `k = 5`, a 784-256-128-10 network.
    pub fn mnist_default(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            seed: 0,
            out_dir: None,
            dataset: DatasetConfig::Idx {
                train_images: dir.join("train-images-idx3-ubyte"),
                train_labels: dir.join("train-labels-idx1-ubyte"),
                test_images: dir.join("t10k-images-idx3-ubyte"),
                test_labels: dir.join("t10k-labels-idx1-ubyte"),
                train_limit: Some(10_000),
                test_limit: None,
            },
            partition: PartitionConfig {
                kind: PartitionKind::Threshold,
                threshold: Some(5),
                groups: None,
                exclude: Vec::new(),
            },
            head: HeadConfig { n_p: 2, k: 5 },
            model: ModelConfig {
                hidden: vec![256, 128],
            },
            gar: GarCoefficients::default(),
            train: TrainSection {
                lr: 0.03,
                ..TrainSection::default()
            },
            scenario: ScenarioConfig::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            learning_rate: self.train.lr,
            momentum: self.train.momentum,
            gar: self.gar,
            seed: self.seed,
            validation_size: self.train.validation_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        AcolHead::from_config(self.head)?;
        self.train_config().validate()?;
        if let DatasetConfig::Synthetic {
            test_fraction,
            clusters,
            ..
        } = &self.dataset
        {
            if !(0.0..1.0).contains(test_fraction) {
                return Err(Error::Config(format!(
                    "dataset.test_fraction must be in [0, 1), got {test_fraction}"
                )));
            }
            if clusters == &Some(0) {
                return Err(Error::Config("dataset.clusters must be positive".into()));
            }
        }
        if self.partition.kind == PartitionKind::Threshold && self.head.n_p != 2 {
            return Err(Error::Config(format!(
                "a threshold partition has 2 parents but head.n_p = {}",
                self.head.n_p
            )));
        }
        if let Some(groups) = &self.partition.groups {
            if self.partition.kind == PartitionKind::Groups && groups.len() != self.head.n_p {
                return Err(Error::Config(format!(
                    "partition.groups has {} parents but head.n_p = {}",
                    groups.len(),
                    self.head.n_p
                )));
            }
        }
        Ok(())
    }
}

/// Fine-labelled train and test sets before any partition.
#[derive(Debug, Clone)]
pub struct RawSplit {
    pub train: RawDataset,
    pub test: RawDataset,
}

fn limit(raw: RawDataset, n: Option<usize>, seed: u64, stream: Stream) -> RawDataset {
    match n {
        Some(n) if n < raw.len() => {
            let (_, keep) = split_indices(raw.len(), n, &mut stream_rng(seed, stream));
            raw.subset(&keep)
        }
        _ => raw,
    }
}

pub fn load_raw(cfg: &ExperimentConfig) -> Result<RawSplit> {
    match &cfg.dataset {
        DatasetConfig::Synthetic {
            clusters,
            per_cluster,
            dim,
            separation,
            test_fraction,
            standardize,
        } => {
            let clusters = clusters.unwrap_or(cfg.head.n_p * cfg.head.k);
            let raw = synthetic_raw(clusters, *per_cluster, *dim, *separation, cfg.seed)?;
            let n_test = (raw.len() as f64 * test_fraction).round() as usize;
            let (train, test) =
                split_indices(raw.len(), n_test, &mut stream_rng(cfg.seed, Stream::TestSplit));
            let mut split = RawSplit {
                train: raw.subset(&train),
                test: raw.subset(&test),
            };
            if *standardize {
                let st = Standardizer::fit(&split.train.features)?;
                st.apply(&mut split.train.features)?;
                st.apply(&mut split.test.features)?;
            }
            Ok(split)
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_limit,
            test_limit,
        } => {
            let train = load_idx(train_images, train_labels)?;
            let test = load_idx(test_images, test_labels)?;
            Ok(RawSplit {
                train: limit(train, *train_limit, cfg.seed, Stream::Subset),
                test: limit(test, *test_limit, cfg.seed, Stream::TestSplit),
            })
        }
    }
}

/// Fine labels seen in either split.
fn label_universe(raw: &RawSplit) -> Vec<usize> {
    let mut labels = raw.train.label_set();
    labels.extend(raw.test.label_set());
    labels.sort_unstable();
    labels.dedup();
    labels
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub partition: ParentPartition,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn prepare(raw: &RawSplit, partition: ParentPartition, head: HeadConfig) -> Result<Prepared> {
    if partition.n_parents() != head.n_p {
        return Err(Error::Config(format!(
            "partition has {} parents but head.n_p = {}",
            partition.n_parents(),
            head.n_p
        )));
    }
    Ok(Prepared {
        train: apply_partition(&raw.train, &partition)?,
        test: apply_partition(&raw.test, &partition)?,
        partition,
    })
}

/// Annotations and scores of a frozen model on one dataset.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub z: Matrix,
    pub annotations: Vec<AnnotationAssignment>,
    /// Clustering accuracy against fine labels, when known.
    pub acc: Option<f64>,
    /// Clustering accuracy restricted to examples of parent 1.
    pub first_parent_acc: Option<f64>,
    pub parent_acc: f64,
    /// Per output node: share of its parent's examples annotated with it.
    pub node_shares: Vec<f64>,
}

pub fn evaluate(model: &Model, data: &LabeledDataset) -> Result<Evaluation> {
    let z = model.pre_softmax(&data.features)?;
    let annotations = assign_annotations(&z, &model.head)?;
    let y = parent_probabilities(&z, &model.head)?;
    let parent_acc = parent_accuracy(&y, &data.parents)?;
    let nodes = annotation_nodes(&annotations);
    let (acc, first_parent_acc) = match &data.fine {
        Some(fine) if !fine.is_empty() => {
            let acc = clustering_accuracy(&nodes, fine)?.accuracy;
            let first = data.indices_of_parent(1);
            let first_acc = if first.is_empty() {
                None
            } else {
                let a: Vec<usize> = first.iter().map(|&i| nodes[i]).collect();
                let t: Vec<usize> = first.iter().map(|&i| fine[i]).collect();
                Some(clustering_accuracy(&a, &t)?.accuracy)
            };
            (Some(acc), first_acc)
        }
        _ => (None, None),
    };
    let head = &model.head;
    let mut per_parent = vec![0usize; head.n_parents()];
    for &t in &data.parents {
        per_parent[t - 1] += 1;
    }
    let mut per_node = vec![0usize; head.n()];
    for &node in &nodes {
        per_node[node - 1] += 1;
    }
    let node_shares = (1..=head.n())
        .map(|node| {
            let total = per_parent[head.parent_of(node) - 1];
            if total == 0 {
                0.0
            } else {
                per_node[node - 1] as f64 / total as f64
            }
        })
        .collect();
    Ok(Evaluation {
        z,
        annotations,
        acc,
        first_parent_acc,
        parent_acc,
        node_shares,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub partition: String,
    pub n_parents: usize,
    pub k: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    pub selected_epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_parent_acc: Option<f64>,
    pub parent_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_acc: Option<f64>,
    pub node_shares: Vec<f64>,
}

impl RunSummary {
    /// One `key=value` line for stdout.
    pub fn line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "na".to_string(), |v| format!("{v:.6}"));
        format!(
            "acc={} parent_acc={:.6} first_parent_acc={} selected_epoch={} train_examples={} test_examples={}",
            opt(self.acc),
            self.parent_acc,
            opt(self.first_parent_acc),
            self.selected_epoch,
            self.train_examples,
            self.test_examples
        )
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const SUMMARY_FILE: &str = "summary.toml";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub quiet: bool,
}

/// Everything one training run produced, before anything is written.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub report: TrainReport,
    pub test_eval: Evaluation,
    pub summary: RunSummary,
}

fn log_epoch(quiet: bool, r: &EpochRecord) {
    if !quiet {
        let val = r.val_parent_acc.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        eprintln!(
            "epoch {:>4}  loss {:.5}  affinity {:.4}  balance {:.4}  frob {:.3}  train {:.4}  val {}",
            r.epoch, r.sup_loss, r.affinity, r.balance, r.frobenius, r.train_parent_acc, val
        );
    }
}

/// Trains on a prepared split and evaluates on its test half.
pub fn train_prepared(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    seed: u64,
    opts: RunOptions,
) -> Result<TrainOutcome> {
    let head = AcolHead::from_config(cfg.head)?;
    let mut sizes = vec![prepared.train.features.cols()];
    sizes.extend(&cfg.model.hidden);
    sizes.push(head.n());
    let model = init_model(&sizes, head, seed)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train_config()
    };
    let (model, report) = train_with_progress(&model, prepared.train.training_data(), &train_cfg, |r| {
        log_epoch(opts.quiet, r)
    })?;
    let test_eval = evaluate(&model, &prepared.test)?;
    let train_acc = evaluate(&model, &prepared.train)?.acc;
    let summary = RunSummary {
        seed,
        partition: prepared.partition.describe(),
        n_parents: cfg.head.n_p,
        k: cfg.head.k,
        train_examples: prepared.train.len(),
        test_examples: prepared.test.len(),
        selected_epoch: report.selected_epoch,
        acc: test_eval.acc,
        first_parent_acc: test_eval.first_parent_acc,
        parent_acc: test_eval.parent_acc,
        train_acc,
        node_shares: test_eval.node_shares.clone(),
    };
    Ok(TrainOutcome {
        model,
        report,
        test_eval,
        summary,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

/// Trains once and writes checkpoint, metrics CSV, test-set embeddings,
/// summary and the effective configuration into `out_dir`.
pub fn run_train(cfg: &ExperimentConfig, out_dir: &Path, opts: RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let raw = load_raw(cfg)?;
    let partition = cfg
        .partition
        .build(&label_universe(&raw), cfg.head.n_p, cfg.seed)?;
    let prepared = prepare(&raw, partition, cfg.head)?;
    let outcome = train_prepared(cfg, &prepared, cfg.seed, opts)?;

    ensure_dir(out_dir)?;
    checkpoint::save(
        &outcome.model,
        outcome.report.selected_epoch,
        out_dir.join(CHECKPOINT_FILE),
    )?;
    write_file(out_dir.join(METRICS_FILE), outcome.report.to_csv())?;
    write_file(
        out_dir.join(EMBEDDINGS_FILE),
        embeddings_csv(
            &outcome.test_eval.z,
            &outcome.test_eval.annotations,
            prepared.test.fine.as_deref(),
        )?,
    )?;
    write_file(out_dir.join(SUMMARY_FILE), toml::to_string(&outcome.summary)?)?;
    cfg.save(out_dir.join(CONFIG_FILE))?;
    Ok(outcome.summary)
}

/// Reloads a checkpoint and evaluates it on the configured test set.
pub fn run_eval(checkpoint_path: &Path, cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let (model, header) = checkpoint::load(checkpoint_path)?;
    if model.head.config() != cfg.head {
        return Err(Error::Checkpoint(format!(
            "checkpoint head is n_p={} k={}, configuration says n_p={} k={}",
            header.n_parents, header.k, cfg.head.n_p, cfg.head.k
        )));
    }
    let raw = load_raw(cfg)?;
    let partition = cfg
        .partition
        .build(&label_universe(&raw), cfg.head.n_p, cfg.seed)?;
    let prepared = prepare(&raw, partition, cfg.head)?;
    if prepared.test.features.cols() != model.input_dim() {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {} inputs, dataset has {}",
            model.input_dim(),
            prepared.test.features.cols()
        )));
    }
    let test_eval = evaluate(&model, &prepared.test)?;
    let train_acc = evaluate(&model, &prepared.train)?.acc;
    Ok(RunSummary {
        seed: cfg.seed,
        partition: prepared.partition.describe(),
        n_parents: cfg.head.n_p,
        k: cfg.head.k,
        train_examples: prepared.train.len(),
        test_examples: prepared.test.len(),
        selected_epoch: header.epoch,
        acc: test_eval.acc,
        first_parent_acc: test_eval.first_parent_acc,
        parent_acc: test_eval.parent_acc,
        train_acc,
        node_shares: test_eval.node_shares,
    })
}

/// Per-parent k-means fit on the training split, scored on the test split.
pub fn baseline_acc(prepared: &Prepared, k: usize, seed: u64) -> Result<Option<f64>> {
    let n_p = prepared.partition.n_parents();
    let model = PerParentKMeans::fit(
        &prepared.train.features,
        &prepared.train.parents,
        n_p,
        k,
        seed,
        KMeansParams::default(),
    )?;
    let ids = model.predict(&prepared.test.features, &prepared.test.parents)?;
    match &prepared.test.fine {
        Some(fine) => Ok(Some(clustering_accuracy(&ids, fine)?.accuracy)),
        None => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub seed: u64,
    pub partition: String,
    pub k: usize,
    pub test_examples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
}

pub fn run_baseline(cfg: &ExperimentConfig) -> Result<BaselineSummary> {
    cfg.validate()?;
    let raw = load_raw(cfg)?;
    let partition = cfg
        .partition
        .build(&label_universe(&raw), cfg.head.n_p, cfg.seed)?;
    let prepared = prepare(&raw, partition, cfg.head)?;
    Ok(BaselineSummary {
        seed: cfg.seed,
        partition: prepared.partition.describe(),
        k: cfg.head.k,
        test_examples: prepared.test.len(),
        acc: baseline_acc(&prepared, cfg.head.k, cfg.seed)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: usize,
    pub seed: u64,
    pub partition: String,
    pub train_examples: usize,
    pub test_examples: usize,
    pub acc: Option<f64>,
    pub first_parent_acc: Option<f64>,
    pub parent_acc: f64,
    pub baseline_acc: Option<f64>,
}

/// Worst / median / best / mean of a metric across scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub worst: f64,
    pub median: f64,
    pub best: f64,
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        Some(Self {
            worst: v[0],
            median,
            best: v[n - 1],
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioAggregate {
    pub acol: Option<Spread>,
    pub baseline: Option<Spread>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub rows: Vec<ScenarioRow>,
    pub aggregate: ScenarioAggregate,
}

pub const SCENARIO_HEADER: &str =
    "scenario,seed,partition,train_examples,test_examples,acc,first_parent_acc,parent_acc,baseline_acc";

impl ScenarioReport {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut out = format!("{SCENARIO_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:.6},{}\n",
                r.scenario,
                r.seed,
                r.partition,
                r.train_examples,
                r.test_examples,
                opt(r.acc),
                opt(r.first_parent_acc),
                r.parent_acc,
                opt(r.baseline_acc)
            ));
        }
        out
    }

    /// Test error (1 − ACC) spread per method, laid out as
    /// `method,worst,median,best,mean,std`.
    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("method,worst,median,best,mean,std\n");
        for (name, spread) in [("kmeans", self.aggregate.baseline), ("acol", self.aggregate.acol)] {
            if let Some(s) = spread {
                // error is 1 - accuracy, so the worst error is the lowest accuracy
                out.push_str(&format!(
                    "{name},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                    1.0 - s.worst,
                    1.0 - s.median,
                    1.0 - s.best,
                    1.0 - s.mean,
                    s.std
                ));
            }
        }
        out
    }
}

pub const SCENARIOS_FILE: &str = "scenarios.csv";
pub const SCENARIO_AGGREGATE_FILE: &str = "scenarios_aggregate.csv";

/// The list of (partition, seed) pairs a sweep will run.
pub fn scenario_plan(cfg: &ExperimentConfig, labels: &[usize]) -> Result<Vec<(ParentPartition, u64)>> {
    let n_p = cfg.head.n_p;
    match cfg.scenario.mode {
        ScenarioMode::Single => Ok(vec![(cfg.partition.build(labels, n_p, cfg.seed)?, cfg.seed)]),
        ScenarioMode::RandomPartitions => {
            if cfg.scenario.count == 0 {
                return Err(Error::Config("scenario.count must be positive".into()));
            }
            (0..cfg.scenario.count as u64)
                .map(|i| {
                    let seed = cfg.seed.wrapping_add(i);
                    let rule = PartitionConfig {
                        kind: PartitionKind::Random,
                        ..cfg.partition.clone()
                    };
                    Ok((rule.build(labels, n_p, seed)?, seed))
                })
                .collect()
        }
        ScenarioMode::InterParent => {
            if cfg.scenario.exclusions.is_empty() {
                return Err(Error::Config("scenario.exclusions must list at least one case".into()));
            }
            cfg.scenario
                .exclusions
                .iter()
                .enumerate()
                .map(|(i, extra)| {
                    let seed = cfg.seed.wrapping_add(i as u64);
                    let base = cfg.partition.build(labels, n_p, seed)?;
                    Ok((base.excluding(extra.iter().copied())?, seed))
                })
                .collect()
        }
    }
}

/// Runs every scenario in order, each with seed `base_seed + index`, and
/// compares against the per-parent k-means baseline on the same examples.
pub fn run_scenarios(cfg: &ExperimentConfig, out_dir: &Path, opts: RunOptions) -> Result<ScenarioReport> {
    cfg.validate()?;
    let raw = load_raw(cfg)?;
    let plan = scenario_plan(cfg, &label_universe(&raw))?;
    let mut rows = Vec::with_capacity(plan.len());
    for (i, (partition, seed)) in plan.into_iter().enumerate() {
        let prepared = prepare(&raw, partition, cfg.head)?;
        if !opts.quiet {
            eprintln!(
                "scenario {i}: partition {} ({} train / {} test)",
                prepared.partition.describe(),
                prepared.train.len(),
                prepared.test.len()
            );
        }
        let outcome = train_prepared(cfg, &prepared, seed, opts)?;
        let baseline = baseline_acc(&prepared, cfg.head.k, seed)?;
        rows.push(ScenarioRow {
            scenario: i,
            seed,
            partition: outcome.summary.partition.clone(),
            train_examples: outcome.summary.train_examples,
            test_examples: outcome.summary.test_examples,
            acc: outcome.summary.acc,
            first_parent_acc: outcome.summary.first_parent_acc,
            parent_acc: outcome.summary.parent_acc,
            baseline_acc: baseline,
        });
    }
    let accs: Vec<f64> = rows.iter().filter_map(|r| r.acc).collect();
    let base: Vec<f64> = rows.iter().filter_map(|r| r.baseline_acc).collect();
    let report = ScenarioReport {
        aggregate: ScenarioAggregate {
            acol: Spread::of(&accs),
            baseline: Spread::of(&base),
        },
        rows,
    };
    ensure_dir(out_dir)?;
    write_file(out_dir.join(SCENARIOS_FILE), report.to_csv())?;
    write_file(out_dir.join(SCENARIO_AGGREGATE_FILE), report.aggregate_csv())?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphSource {
    /// Rectified activities `B`; edges are `BBᵀ`.
    Activity,
    /// Pooled parent probabilities `Y`; edges are `YYᵀ`.
    Parents,
}

/// Exports the similarity graph of the first `limit` test examples of a
/// trained checkpoint, vertices labelled with fine labels when known.
pub fn run_export_graph(
    checkpoint_path: &Path,
    cfg: &ExperimentConfig,
    source: GraphSource,
    threshold: f64,
    limit: usize,
    path: &Path,
) -> Result<usize> {
    cfg.validate()?;
    let (model, _) = checkpoint::load(checkpoint_path)?;
    if model.head.config() != cfg.head {
        return Err(Error::Checkpoint("checkpoint head does not match configuration".into()));
    }
    let raw = load_raw(cfg)?;
    let partition = cfg
        .partition
        .build(&label_universe(&raw), cfg.head.n_p, cfg.seed)?;
    let prepared = prepare(&raw, partition, cfg.head)?;
    let n = limit.min(prepared.test.len());
    let idx: Vec<usize> = (0..n).collect();
    let subset = prepared.test.subset(&idx);
    let z = model.pre_softmax(&subset.features)?;
    let activity = match source {
        GraphSource::Activity => relu(&z),
        GraphSource::Parents => parent_probabilities(&z, &model.head)?,
    };
    export_graph(&activity, threshold, subset.fine.as_deref(), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip() {
        for cfg in [
            ExperimentConfig::synthetic_default(),
            ExperimentConfig::mnist_default("/data/mnist"),
        ] {
            let text = cfg.to_toml_string().unwrap();
            let back = ExperimentConfig::from_toml_str(&text).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn flat_dotted_keys_parse() {
        let text = r#"
seed = 3
dataset.kind = "synthetic"
dataset.per_cluster = 20
dataset.dim = 4
dataset.separation = 8.0
dataset.test_fraction = 0.2
partition.kind = "interleaved"
head.n_p = 2
head.k = 2
model.hidden = [8]
gar.c_alpha = 0.1
gar.c_beta = 0.1
gar.c_f = 0.0003
train.batch_size = 16
train.epochs = 2
train.lr = 0.01
train.momentum = 0.9
train.validation_size = 8
scenario.mode = "random-partitions"
scenario.count = 2
"#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.scenario.mode, ScenarioMode::RandomPartitions);
        assert_eq!(cfg.train.batch_size, 16);
    }

    #[test]
    fn inconsistent_configs_rejected() {
        let mut cfg = ExperimentConfig::mnist_default("/x");
        cfg.head.n_p = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::synthetic_default();
        cfg.train.batch_size = 1;
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_toml_str("seed = 1\nbogus = 2").is_err());
    }

    #[test]
    fn spread_of_values() {
        let s = Spread::of(&[0.9, 0.5, 0.7, 0.8]).unwrap();
        assert_eq!((s.worst, s.best), (0.5, 0.9));
        assert!((s.median - 0.75).abs() < 1e-12);
        assert!((s.mean - 0.725).abs() < 1e-12);
        assert!(Spread::of(&[]).is_none());
    }

    #[test]
    fn inter_parent_plan_shrinks() {
        let mut cfg = ExperimentConfig::mnist_default("/x");
        cfg.scenario = ScenarioConfig {
            mode: ScenarioMode::InterParent,
            count: 0,
            exclusions: vec![vec![], vec![9], vec![9, 8]],
        };
        let labels: Vec<usize> = (0..10).collect();
        let plan = scenario_plan(&cfg, &labels).unwrap();
        let sizes: Vec<usize> = plan.iter().map(|(p, _)| p.groups()[1].len()).collect();
        assert_eq!(sizes, vec![5, 4, 3]);
        assert_eq!(plan[2].0.describe(), "{0 1 2 3 4}|{5 6 7}");
    }

    #[test]
    fn shipped_configs_match_defaults() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut syn = ExperimentConfig::load(root.join("synthetic.toml")).unwrap();
        syn.out_dir = None;
        assert_eq!(syn, ExperimentConfig::synthetic_default());
        let mut mnist = ExperimentConfig::load(root.join("mnist.toml")).unwrap();
        mnist.out_dir = None;
        assert_eq!(mnist, ExperimentConfig::mnist_default("data/mnist"));
    }
}
