//! Experiment runner: trains per method and seed on the source domains,
//! evaluates held-out domains with each test-time normalization scheme, and
//! emits per-seed rows, seed summaries and parameter sweeps as CSV.

mod config;

pub use config::{parse_key_values, AblationFile};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bank::{ImageBank, SelectionPolicy};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MiouReport};
use crate::normstats::whole_set_stats;
use crate::segnet::{self, init_params, ModelParams, NetworkConfig, NormMode};
use crate::synth::{derive_seed, DomainDataset};
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, TrainLogRow, TrainMethod, Trainer, IGNORE_LABEL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TestMethod {
    /// Accumulated source statistics.
    Bn,
    /// Statistics of the test batch itself.
    Tn,
    /// Test image plus the most recent bank entries.
    Qib,
    /// Test image plus the closest-style bank entries.
    Sib,
    /// Statistics of the whole held-out set.
    AdaBn,
}

impl TestMethod {
    pub const ALL: [TestMethod; 5] = [Self::Bn, Self::Tn, Self::Qib, Self::Sib, Self::AdaBn];

    pub fn uses_bank(self) -> bool {
        matches!(self, Self::Qib | Self::Sib)
    }
}

impl FromStr for TestMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bn" => Ok(Self::Bn),
            "tn" => Ok(Self::Tn),
            "qib" => Ok(Self::Qib),
            "sib" => Ok(Self::Sib),
            "adabn" => Ok(Self::AdaBn),
            other => Err(Error::Config(format!("unknown test method '{other}'"))),
        }
    }
}

impl fmt::Display for TestMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bn => "bn",
            Self::Tn => "tn",
            Self::Qib => "qib",
            Self::Sib => "sib",
            Self::AdaBn => "adabn",
        })
    }
}

/// Test-time settings shared by every evaluation of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TestSettings {
    /// Test batch size for TN, companion count for the bank methods.
    pub m: usize,
    /// Bank capacity.
    pub q: usize,
    /// 1-based layer whose statistics form the style signature.
    pub style_layer: usize,
}

impl Default for TestSettings {
    fn default() -> Self {
        Self { m: 4, q: 128, style_layer: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub report: MiouReport,
    /// Share of bank companions from the query's own domain; only for bank
    /// methods over several interleaved held-out domains.
    pub selection_acc: Option<f64>,
    pub images: usize,
    pub wall_seconds: f64,
}

/// Held-out images in stream order: round-robin over the domains.
fn interleave<'a>(targets: &[&'a DomainDataset]) -> Vec<(u32, &'a Tensor, usize, usize)> {
    let longest = targets.iter().map(|d| d.len()).max().unwrap_or(0);
    let mut stream = Vec::new();
    for i in 0..longest {
        for (slot, d) in targets.iter().enumerate() {
            if i < d.len() {
                stream.push((d.domain_id, &d.images[i], slot, i));
            }
        }
    }
    stream
}

/// Scores `params` on the held-out domains with one test method. Bank
/// methods see the images strictly one at a time in interleaved order; TN
/// with `m > 1` groups a seeded shuffle of the images into batches of `m`.
pub fn evaluate(
    params: &ModelParams,
    targets: &[&DomainDataset],
    method: TestMethod,
    settings: &TestSettings,
    seed: u64,
) -> Result<EvalOutcome> {
    if targets.is_empty() || targets.iter().all(|d| d.is_empty()) {
        return Err(Error::Config("no held-out images to evaluate".into()));
    }
    let started = Instant::now();
    let mut params = params.clone();
    if settings.style_layer == 0 || settings.style_layer > params.config.num_layers() {
        return Err(Error::Config(format!(
            "style layer {} outside 1..={}",
            settings.style_layer,
            params.config.num_layers()
        )));
    }
    params.config.style_layer = settings.style_layer;
    let stream = interleave(targets);
    let mut cm = ConfusionMatrix::new(params.config.num_classes);
    let mask = |slot: usize, i: usize| &targets[slot].masks[i];
    let mut selection = (0usize, 0usize);
    match method {
        TestMethod::Bn => {
            for &(_, image, slot, i) in &stream {
                cm.add(&segnet::predict(&params, image, &NormMode::SourceRunning)?, mask(slot, i), IGNORE_LABEL)?;
            }
        }
        TestMethod::AdaBn => {
            let images: Vec<Tensor> = stream.iter().map(|s| s.1.clone()).collect();
            let mode = NormMode::ExternalStats(whole_set_stats(&images, &params)?);
            for &(_, image, slot, i) in &stream {
                cm.add(&segnet::predict(&params, image, &mode)?, mask(slot, i), IGNORE_LABEL)?;
            }
        }
        TestMethod::Tn => {
            if settings.m == 0 {
                return Err(Error::Config("target-specific testing needs a batch size m >= 1".into()));
            }
            let mut order: Vec<usize> = (0..stream.len()).collect();
            if settings.m > 1 {
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7e57])));
            }
            for group in order.chunks(settings.m) {
                let images: Vec<&Tensor> = group.iter().map(|&k| stream[k].1).collect();
                let labels = segnet::predict(&params, &Tensor::concat_batch(&images)?, &NormMode::TargetSpecific)?;
                for (j, &k) in group.iter().enumerate() {
                    let (_, _, slot, i) = stream[k];
                    cm.add(&labels.sample(j), mask(slot, i), IGNORE_LABEL)?;
                }
            }
        }
        TestMethod::Qib | TestMethod::Sib => {
            let policy = if method == TestMethod::Sib { SelectionPolicy::Style } else { SelectionPolicy::Queue };
            let mut bank = ImageBank::new(settings.q, policy)?;
            for (n, &(domain, image, slot, i)) in stream.iter().enumerate() {
                let out = bank.predict(image, &params, settings.m, Some(domain))?;
                assert_eq!(bank.len(), (n + 1).min(settings.q), "bank must grow by one image per query");
                selection.0 += out.companion_tags.iter().filter(|t| **t == Some(domain)).count();
                selection.1 += out.companion_tags.len();
                cm.add(&out.labels, mask(slot, i), IGNORE_LABEL)?;
            }
        }
    }
    let selection_acc =
        (method.uses_bank() && targets.len() > 1 && selection.1 > 0).then(|| selection.0 as f64 / selection.1 as f64);
    Ok(EvalOutcome {
        report: cm.report()?,
        selection_acc,
        images: stream.len(),
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Everything one experiment needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train_methods: Vec<TrainMethod>,
    pub test_methods: Vec<TestMethod>,
    /// Held-out domain ids; several are evaluated as one interleaved stream.
    pub holdout: Vec<u32>,
    /// Source domain ids; `None` uses every domain not held out.
    pub sources: Option<Vec<u32>>,
    pub seeds: Vec<u64>,
    pub network: NetworkConfig,
    /// Base training settings; method and seed are overridden per run.
    pub train: TrainConfig,
    pub test: TestSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train_methods: vec![TrainMethod::Agg, TrainMethod::Mldg],
            test_methods: vec![TestMethod::Bn, TestMethod::Tn, TestMethod::Qib, TestMethod::Sib],
            holdout: vec![4],
            sources: None,
            seeds: (0..5).collect(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            test: TestSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.holdout.is_empty() {
            return Err(Error::Config("at least one held-out domain is required".into()));
        }
        if self.train_methods.is_empty() || self.test_methods.is_empty() {
            return Err(Error::Config("train and test method lists must be nonempty".into()));
        }
        if let Some(sources) = &self.sources {
            if let Some(h) = sources.iter().find(|s| self.holdout.contains(s)) {
                return Err(Error::Config(format!("held-out domain {h} is also a training source")));
            }
        }
        if self.test.q == 0 && self.test_methods.iter().any(|t| t.uses_bank()) {
            return Err(Error::Config("bank capacity q must be positive".into()));
        }
        self.network.validate()?;
        self.train.validate()
    }

    pub fn holdout_label(&self) -> String {
        self.holdout.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("+")
    }
}

/// One evaluated cell for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub method_train: String,
    pub method_test: String,
    pub holdout: String,
    pub seed: u64,
    pub miou: f64,
    pub per_class_ious: Vec<Option<f64>>,
    pub selection_acc: Option<f64>,
    pub wall_seconds: f64,
}

impl ResultRow {
    pub const CSV_HEADER: &'static str =
        "method_train,method_test,holdout,seed,miou,per_class_ious,selection_acc,wall_seconds";

    /// Absent classes print as `nan` in the per-class list.
    pub fn to_csv(&self) -> String {
        let per_class: Vec<String> =
            self.per_class_ious.iter().map(|v| v.map_or("nan".to_string(), |x| x.to_string())).collect();
        format!(
            "{},{},{},{},{},{},{},{:.6}",
            self.method_train,
            self.method_test,
            self.holdout,
            self.seed,
            self.miou,
            per_class.join(";"),
            self.selection_acc.map(|v| v.to_string()).unwrap_or_default(),
            self.wall_seconds
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Format(format!("expected 8 result columns, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("bad number '{s}': {e}")));
        let per_class_ious = if f[5].is_empty() {
            Vec::new()
        } else {
            f[5].split(';').map(|v| if v == "nan" { Ok(None) } else { num(v).map(Some) }).collect::<Result<_>>()?
        };
        Ok(Self {
            method_train: f[0].into(),
            method_test: f[1].into(),
            holdout: f[2].into(),
            seed: f[3].parse().map_err(|e| Error::Format(format!("bad seed: {e}")))?,
            miou: num(f[4])?,
            per_class_ious,
            selection_acc: if f[6].is_empty() { None } else { Some(num(f[6])?) },
            wall_seconds: num(f[7])?,
        })
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method_train: String,
    pub method_test: String,
    pub holdout: String,
    pub seeds: usize,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub selection_acc_mean: Option<f64>,
    pub wall_seconds_mean: f64,
}

impl SummaryRow {
    pub const CSV_HEADER: &'static str =
        "method_train,method_test,holdout,seeds,miou_mean,miou_std,selection_acc_mean,wall_seconds_mean";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.6}",
            self.method_train,
            self.method_test,
            self.holdout,
            self.seeds,
            self.miou_mean,
            self.miou_std,
            self.selection_acc_mean.map(|v| v.to_string()).unwrap_or_default(),
            self.wall_seconds_mean
        )
    }
}

/// Groups rows by (train, test, holdout) in first-appearance order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.method_train.clone(), r.method_test.clone(), r.holdout.clone());
        if !groups.contains_key(&key) {
            keys.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    keys.into_iter()
        .map(|key| {
            let group = &groups[&key];
            let mious: Vec<f64> = group.iter().map(|r| r.miou).collect();
            let (miou_mean, miou_std) = mean_std(&mious);
            let accs: Vec<f64> = group.iter().filter_map(|r| r.selection_acc).collect();
            let walls: Vec<f64> = group.iter().map(|r| r.wall_seconds).collect();
            SummaryRow {
                method_train: key.0,
                method_test: key.1,
                holdout: key.2,
                seeds: group.len(),
                miou_mean,
                miou_std,
                selection_acc_mean: (!accs.is_empty()).then(|| mean_std(&accs).0),
                wall_seconds_mean: mean_std(&walls).0,
            }
        })
        .collect()
}

/// Trains and evaluates over a fixed set of domains, reusing trained models
/// across test-only changes.
pub struct Experiment<'a> {
    domains: &'a [DomainDataset],
    /// Keyed by the full training setup.
    cache: BTreeMap<String, ModelParams>,
    logs: Vec<(String, Vec<TrainLogRow>)>,
}

impl<'a> Experiment<'a> {
    pub fn new(domains: &'a [DomainDataset]) -> Self {
        Self { domains, cache: BTreeMap::new(), logs: Vec::new() }
    }

    fn select(&self, ids: &[u32]) -> Result<Vec<&'a DomainDataset>> {
        ids.iter()
            .map(|id| {
                self.domains
                    .iter()
                    .find(|d| d.domain_id == *id)
                    .ok_or_else(|| Error::Config(format!("domain {id} not found in the data")))
            })
            .collect()
    }

    fn source_ids(&self, config: &ExperimentConfig) -> Vec<u32> {
        match &config.sources {
            Some(ids) => ids.clone(),
            None => self.domains.iter().map(|d| d.domain_id).filter(|id| !config.holdout.contains(id)).collect(),
        }
    }

    /// Model for one training method and seed, trained on first request.
    pub fn trained(&mut self, config: &ExperimentConfig, method: TrainMethod, seed: u64) -> Result<&ModelParams> {
        let mut train = TrainConfig { method, seed, ..config.train.clone() };
        let source_ids = self.source_ids(config);
        // resolve the split so equivalent setups share one model
        train.split = match method {
            TrainMethod::Mldg => Some(train.split_for(source_ids.len())?),
            TrainMethod::Agg => None,
        };
        let key = format!("{source_ids:?}|{train:?}|{:?}", config.network);
        if !self.cache.contains_key(&key) {
            let sources: Vec<DomainDataset> = self.select(&source_ids)?.into_iter().cloned().collect();
            let init = init_params(&config.network, init_seed(seed))?;
            let mut trainer = Trainer::new(train.clone(), &sources, init)?;
            let mut log = Vec::new();
            trainer.run(|row, _| {
                log.push(row.clone());
                Ok(())
            })?;
            let label = match train.split {
                Some((a, b)) => format!("{method}_seed{seed}_split{a}-{b}"),
                None => format!("{method}_seed{seed}"),
            };
            self.logs.push((label, log));
            self.cache.insert(key.clone(), trainer.into_params());
        }
        Ok(&self.cache[&key])
    }

    /// Training logs of every model trained so far, in training order.
    pub fn training_logs(&self) -> &[(String, Vec<TrainLogRow>)] {
        &self.logs
    }

    /// Every (seed, train method, test method) cell.
    pub fn run(&mut self, config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
        config.validate()?;
        let targets = self.select(&config.holdout)?;
        let mut rows = Vec::new();
        for &seed in &config.seeds {
            for &train in &config.train_methods {
                let params = self.trained(config, train, seed)?.clone();
                for &test in &config.test_methods {
                    let out = evaluate(&params, &targets, test, &config.test, seed)?;
                    rows.push(ResultRow {
                        method_train: train.to_string(),
                        method_test: test.to_string(),
                        holdout: config.holdout_label(),
                        seed,
                        miou: out.report.mean,
                        per_class_ious: out.report.per_class,
                        selection_acc: out.selection_acc,
                        wall_seconds: out.wall_seconds,
                    });
                }
            }
        }
        Ok(rows)
    }

    /// One full run per value of `parameter`, sharing seeds. Test-only
    /// parameters reuse the trained models.
    pub fn sweep(&mut self, parameter: SweepParameter, values: &[String], base: &ExperimentConfig) -> Result<Vec<SweepRow>> {
        parameter.check_applicable(base)?;
        let mut rows = Vec::new();
        for value in values {
            let mut config = base.clone();
            parameter.apply(&mut config, value)?;
            for row in self.run(&config)? {
                rows.push(SweepRow { parameter, value: value.clone(), row });
            }
        }
        Ok(rows)
    }
}

/// Seed for the initial weights of the model trained with run seed `seed`.
pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, &[0x1417])
}

/// Train and evaluate in one call.
pub fn run_experiment(config: &ExperimentConfig, domains: &[DomainDataset]) -> Result<Vec<ResultRow>> {
    Experiment::new(domains).run(config)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParameter {
    M,
    Q,
    StyleLayer,
    Split,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            Self::M => "m",
            Self::Q => "q",
            Self::StyleLayer => "style_layer",
            Self::Split => "split",
        }
    }

    fn check_applicable(self, config: &ExperimentConfig) -> Result<()> {
        let tests = &config.test_methods;
        let ok = match self {
            Self::M => tests.iter().any(|t| matches!(t, TestMethod::Tn | TestMethod::Qib | TestMethod::Sib)),
            Self::Q => tests.iter().any(|t| t.uses_bank()),
            Self::StyleLayer => tests.contains(&TestMethod::Sib),
            Self::Split => config.train_methods.contains(&TrainMethod::Mldg),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("sweeping {} has no effect on the configured methods", self.name())))
        }
    }

    fn apply(self, config: &mut ExperimentConfig, value: &str) -> Result<()> {
        let int = || value.parse::<usize>().map_err(|e| Error::Config(format!("bad {} value '{value}': {e}", self.name())));
        match self {
            Self::M => config.test.m = int()?,
            Self::Q => config.test.q = int()?,
            Self::StyleLayer => config.test.style_layer = int()?,
            Self::Split => config.train.split = Some(parse_split(value)?),
        }
        Ok(())
    }
}

impl FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m" => Ok(Self::M),
            "q" => Ok(Self::Q),
            "style_layer" => Ok(Self::StyleLayer),
            "split" => Ok(Self::Split),
            other => Err(Error::Config(format!("unknown sweep parameter '{other}'"))),
        }
    }
}

/// `"n:m"` into a meta-train / meta-test domain count pair.
pub fn parse_split(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s.split_once(':').ok_or_else(|| Error::Config(format!("split '{s}' is not n:m")))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| Error::Config(format!("bad split '{s}': {e}")));
    Ok((parse(a)?, parse(b)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub parameter: SweepParameter,
    pub value: String,
    pub row: ResultRow,
}

impl SweepRow {
    pub fn csv_header() -> String {
        format!("parameter,value,{}", ResultRow::CSV_HEADER)
    }

    pub fn to_csv(&self) -> String {
        format!("{},{},{}", self.parameter.name(), self.value, self.row.to_csv())
    }
}

/// Writes via a temporary file and rename so a result file is never partial.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(ResultRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SummaryRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn train_log_csv(rows: &[TrainLogRow]) -> String {
    let mut out = String::from(TrainLogRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Runs the grid and any sweeps described by `file`, writing
/// `results.csv`, `summary.csv`, `sweep_<parameter>.csv` and training logs
/// under `out_dir`.
pub fn ablate(file: &AblationFile, domains: &[DomainDataset], out_dir: &Path) -> Result<Vec<ResultRow>> {
    fs::create_dir_all(out_dir)?;
    let mut experiment = Experiment::new(domains);
    let rows = experiment.run(&file.experiment)?;
    write_atomic(&out_dir.join("results.csv"), &results_csv(&rows))?;
    write_atomic(&out_dir.join("summary.csv"), &summary_csv(&summarize(&rows)))?;
    for (parameter, values) in &file.sweeps {
        let sweep = experiment.sweep(*parameter, values, &file.experiment)?;
        let mut csv = SweepRow::csv_header();
        csv.push('\n');
        for r in &sweep {
            csv.push_str(&r.to_csv());
            csv.push('\n');
        }
        write_atomic(&out_dir.join(format!("sweep_{}.csv", parameter.name())), &csv)?;
    }
    let log_dir = out_dir.join("train_logs");
    fs::create_dir_all(&log_dir)?;
    for (label, log) in experiment.training_logs() {
        write_atomic(&log_dir.join(format!("{label}.csv")), &train_log_csv(log))?;
    }
    Ok(rows)
}
