use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use metaseg_core::bank::{ImageBank, SelectionPolicy};
use metaseg_core::harness::{self, evaluate, init_seed, AblationFile, ResultRow, TestMethod, TestSettings};
use metaseg_core::segnet::{init_params, load_checkpoint, save_checkpoint, NetworkConfig};
use metaseg_core::synth::{build_benchmark, load_benchmark, preset_styles, save_benchmark, DomainDataset, SceneSpec};
use metaseg_core::trainer::{TrainConfig, TrainMethod, Trainer};

#[derive(Parser)]
#[command(name = "metaseg", version, about = "Domain-generalized segmentation with test-time image banks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic multi-domain benchmark to disk.
    GenData(GenData),
    /// Train one model on every domain except the held-out ones.
    Train(Train),
    /// Score a checkpoint on held-out domains with one test method.
    Eval(Eval),
    /// Run a grid and its sweeps from a key = value file.
    Ablate(Ablate),
    /// Stream held-out images through a bank and dump its final contents.
    InspectBank(InspectBank),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    /// Number of domains, taken from the preset styles in order.
    #[arg(long, default_value_t = 5)]
    domains: usize,
    #[arg(long, default_value_t = 40)]
    per_domain: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 5)]
    min_size: usize,
    #[arg(long, default_value_t = 16)]
    max_size: usize,
}

#[derive(Args)]
struct NetArgs {
    /// Channel widths of the convolution blocks.
    #[arg(long, value_delimiter = ',', default_value = "8,8,8")]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    num_classes: usize,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    holdout: Vec<u32>,
    #[arg(long, default_value = "mldg")]
    method: TrainMethod,
    #[arg(long, default_value_t = 1e-3)]
    inner_lr: f64,
    #[arg(long, default_value_t = 0.05)]
    outer_lr: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Meta-train:meta-test domain counts, e.g. 2:2.
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value_t = 12)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    net: NetArgs,
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss log as CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    holdout: Vec<u32>,
    #[arg(long = "test")]
    test: TestMethod,
    #[arg(long, default_value_t = 4)]
    m: usize,
    #[arg(long, default_value_t = 128)]
    q: usize,
    #[arg(long, default_value_t = 1)]
    style_layer: usize,
    /// Seed for the TN batch grouping and the seed column.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Value of the method_train column.
    #[arg(long, default_value = "unknown")]
    train_label: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory; overrides `data` in the config file.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct InspectBank {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    holdout: Vec<u32>,
    #[arg(long, default_value = "sib")]
    policy: SelectionPolicy,
    #[arg(long, default_value_t = 4)]
    m: usize,
    #[arg(long, default_value_t = 128)]
    q: usize,
    #[arg(long, default_value_t = 1)]
    style_layer: usize,
    #[arg(long)]
    dump: PathBuf,
}

fn targets<'a>(domains: &'a [DomainDataset], ids: &[u32]) -> Result<Vec<&'a DomainDataset>> {
    ids.iter()
        .map(|id| domains.iter().find(|d| d.domain_id == *id).with_context(|| format!("domain {id} not in the data")))
        .collect()
}

fn gen_data(a: GenData) -> Result<()> {
    let styles = preset_styles();
    if a.domains == 0 || a.domains > styles.len() {
        bail!("--domains must be between 1 and {}", styles.len());
    }
    let spec = SceneSpec {
        height: a.height,
        width: a.width,
        min_size: a.min_size,
        max_size: a.max_size,
        ..SceneSpec::default()
    };
    let data = build_benchmark(a.per_domain, &spec, &styles[..a.domains], a.seed)?;
    save_benchmark(&a.out, &data)?;
    for d in &data {
        println!("domain {} ({}): {} images", d.domain_id, d.style_name, d.len());
    }
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let domains = load_benchmark(&a.data)?;
    targets(&domains, &a.holdout)?;
    let sources: Vec<DomainDataset> = domains.into_iter().filter(|d| !a.holdout.contains(&d.domain_id)).collect();
    let network = NetworkConfig { widths: a.net.widths, num_classes: a.net.num_classes, ..NetworkConfig::default() };
    let config = TrainConfig {
        method: a.method,
        inner_lr: a.inner_lr,
        outer_lr: a.outer_lr,
        alpha: a.alpha,
        split: a.split.as_deref().map(harness::parse_split).transpose()?,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config, &sources, init_params(&network, init_seed(a.seed))?)?;
    let mut log = Vec::new();
    let total = trainer.total_steps();
    trainer.run(|row, _| {
        if row.step % 50 == 0 || row.step + 1 == total {
            eprintln!("step {}/{total} loss {:.4}", row.step + 1, row.losses.total);
        }
        log.push(row.clone());
        Ok(())
    })?;
    save_checkpoint(trainer.params(), &a.out)?;
    if let Some(path) = a.log {
        harness::write_atomic(&path, &harness::train_log_csv(&log))?;
    }
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let params = load_checkpoint(&a.ckpt)?;
    let domains = load_benchmark(&a.data)?;
    let settings = TestSettings { m: a.m, q: a.q, style_layer: a.style_layer };
    let out = evaluate(&params, &targets(&domains, &a.holdout)?, a.test, &settings, a.seed)?;
    let row = ResultRow {
        method_train: a.train_label,
        method_test: a.test.to_string(),
        holdout: a.holdout.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("+"),
        seed: a.seed,
        miou: out.report.mean,
        per_class_ious: out.report.per_class,
        selection_acc: out.selection_acc,
        wall_seconds: out.wall_seconds,
    };
    harness::write_atomic(&a.out, &harness::results_csv(std::slice::from_ref(&row)))?;
    println!("mIoU {:.4} over {} images", row.miou, out.images);
    if let Some(acc) = row.selection_acc {
        println!("selection accuracy {acc:.4}");
    }
    Ok(())
}

fn ablate(a: Ablate) -> Result<()> {
    let text = std::fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let file = AblationFile::parse(&text)?;
    let data = match (a.data, &file.data) {
        (Some(d), _) => d,
        (None, Some(d)) => a.config.parent().unwrap_or(Path::new(".")).join(d),
        (None, None) => bail!("no dataset: set `data` in the config or pass --data"),
    };
    let domains = load_benchmark(&data)?;
    let rows = harness::ablate(&file, &domains, &a.out)?;
    for s in harness::summarize(&rows) {
        println!("{:>5} + {:<6} {:.4} +/- {:.4}", s.method_train, s.method_test, s.miou_mean, s.miou_std);
    }
    Ok(())
}

fn inspect_bank(a: InspectBank) -> Result<()> {
    let mut params = load_checkpoint(&a.ckpt)?;
    if a.style_layer == 0 || a.style_layer > params.config.num_layers() {
        bail!("--style-layer must be between 1 and {}", params.config.num_layers());
    }
    params.config.style_layer = a.style_layer;
    let domains = load_benchmark(&a.data)?;
    let targets = targets(&domains, &a.holdout)?;
    let mut bank = ImageBank::new(a.q, a.policy)?;
    let longest = targets.iter().map(|d| d.len()).max().unwrap_or(0);
    for i in 0..longest {
        for d in targets.iter().filter(|d| i < d.len()) {
            bank.predict(&d.images[i], &params, a.m, Some(d.domain_id))?;
        }
    }
    harness::write_atomic(&a.dump, &bank.to_csv())?;
    println!("{} entries written", bank.len());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::InspectBank(a) => inspect_bank(a),
    }
}
