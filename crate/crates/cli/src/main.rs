//! `mla`: dataset generation, training, leave-one-domain-out experiments
//! and saliency maps.

mod config;

use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use mla_core::data::{self, generate, load_dataset, save_dataset, split_leave_one_out};
use mla_core::model::{load_checkpoint, save_checkpoint, write_atomic, MultiLevelAttentionNet};
use mla_core::protocol::{self, render_report, run_experiment_on, ExperimentConfig, Variant};
use mla_core::saliency::{self, compute_saliency, Objective, Reduce, SaliencyOptions};
use mla_core::train::{evaluate, train_with};
use mla_core::Error;

use config::{CliConfig, DataSection, TrainOverrides};

#[derive(Parser, Debug)]
#[command(name = "mla", version, about = "Multi-level channel-attention CNN toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic multi-domain dataset to an MLDG1 file.
    Datagen(DatagenArgs),
    /// Train one model, optionally holding out a domain.
    Train(TrainArgs),
    /// Leave-one-domain-out experiment over variants and seeds.
    Experiment(ExperimentArgs),
    /// Input-gradient saliency maps for dataset samples.
    Saliency(SaliencyArgs),
}

#[derive(Args, Debug)]
struct DatagenArgs {
    /// JSON config; its `data` section supplies defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of shape classes (2..=7).
    #[arg(long)]
    classes: Option<usize>,
    /// Number of rendering domains.
    #[arg(long)]
    domains: Option<usize>,
    /// Samples per (domain, class) cell.
    #[arg(long)]
    per_cell: Option<usize>,
    /// Image side length in pixels (>= 16).
    #[arg(long)]
    size: Option<usize>,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Probability that the shape wears its domain's class colour.
    #[arg(long)]
    spurious: Option<f64>,
    /// Output MLDG1 file.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing output file.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainFlags {
    /// Training epochs; the decay epoch follows at 80% unless given.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum in [0, 1).
    #[arg(long)]
    momentum: Option<f64>,
    /// Multiplier applied to the rate from the decay epoch on.
    #[arg(long)]
    decay_factor: Option<f64>,
    /// 1-based epoch from which the decayed rate applies.
    #[arg(long)]
    decay_epoch: Option<usize>,
    /// L2 penalty added to every gradient.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Global gradient-norm ceiling.
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Disable per-epoch shuffling.
    #[arg(long)]
    no_shuffle: bool,
}

impl TrainFlags {
    fn overrides(&self) -> TrainOverrides {
        TrainOverrides {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            decay_factor: self.decay_factor,
            decay_epoch: self.decay_epoch,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            shuffle: self.no_shuffle.then_some(false),
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON config with optional `model`, `train`, `experiment`, `data` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// MLDG1 dataset.
    #[arg(long)]
    dataset: PathBuf,
    /// Run directory (must not exist unless --force).
    #[arg(long)]
    out: PathBuf,
    /// Domain to hold out; evaluated after training.
    #[arg(long)]
    held_out: Option<String>,
    /// `attention` or `baseline` (branches removed).
    #[arg(long, default_value = "attention")]
    variant: Variant,
    /// Seed for model init and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    train: TrainFlags,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// JSON config; see `train --help`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// MLDG1 dataset.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for reports and per-run subdirectories.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds, e.g. `0,1,2`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated subset of `attention,baseline`.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
    #[command(flatten)]
    train: TrainFlags,
    /// Run the jobs one after another instead of on the thread pool.
    #[arg(long)]
    sequential: bool,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct SaliencyArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// MLDG1 dataset the sample ids index into.
    #[arg(long)]
    dataset: PathBuf,
    /// Sample index; repeat or comma-separate for several.
    #[arg(long = "sample-id", value_delimiter = ',', required = true)]
    sample_ids: Vec<usize>,
    /// Class to explain (default: each sample's true label).
    #[arg(long = "class")]
    class: Option<usize>,
    /// Output directory for `sample-<id>.pgm` and `.json` sidecars.
    #[arg(long)]
    out: PathBuf,
    /// Differentiate the class logit instead of the loss.
    #[arg(long)]
    score: bool,
    /// Channel reduction of gradient magnitudes.
    #[arg(long, default_value = "max")]
    reduce: Reduce,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Datagen(a) => cmd_datagen(a),
        Command::Train(a) => cmd_train(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Saliency(a) => cmd_saliency(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Usage(_))));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

/// Creates a fresh run directory. An existing non-empty one is a usage
/// error unless `force`, which clears it first.
fn fresh_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        if !force {
            return Err(Error::Usage(format!(
                "{} already exists; choose a new directory or pass --force",
                dir.display()
            ))
            .into());
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn cmd_datagen(a: DatagenArgs) -> Result<()> {
    let file = CliConfig::load(a.config.as_deref())?;
    let data = DataSection {
        classes: a.classes.unwrap_or(file.data.classes),
        domains: a.domains.unwrap_or(file.data.domains),
        per_cell: a.per_cell.unwrap_or(file.data.per_cell),
        size: a.size.unwrap_or(file.data.size),
        seed: a.seed.unwrap_or(file.data.seed),
        spurious: a.spurious.unwrap_or(file.data.spurious),
    };
    if a.out.exists() && !a.force {
        return Err(Error::Usage(format!("{} already exists; pass --force to overwrite", a.out.display())).into());
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let ds = generate(&data.spec())?;
    save_dataset(&ds, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {}: {} samples, {} classes x {} domains x {} per cell, {}x{}",
        a.out.display(),
        ds.len(),
        ds.n_classes,
        ds.n_domains(),
        data.per_cell,
        ds.height,
        ds.width
    );
    for (d, counts) in ds.cell_counts().iter().enumerate() {
        println!("  {:<8} {:?}", ds.domain_names[d], counts);
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
    let mut cfg = CliConfig::load(a.config.as_deref())?;
    cfg.apply_train(&a.train.overrides(), a.seed);
    let model = a.variant.model_config(&cfg.resolve_model(&ds)?);
    cfg.model = Some(model.clone());
    cfg.train.validate()?;

    let (train_set, test_set) = match &a.held_out {
        Some(d) => {
            let (tr, te) = split_leave_one_out(&ds, d)?;
            (tr, Some(te))
        }
        None => (ds, None),
    };
    fresh_dir(&a.out, a.force)?;
    write_json(&a.out.join("config.json"), &cfg)?;

    let mut net = MultiLevelAttentionNet::new(model)?;
    let mut log_lines = String::new();
    let mut timing = String::new();
    let logs = train_with(&mut net, &train_set, &cfg.train, |l| {
        log::info!(
            "epoch {}/{}: loss {:.4}, train acc {:.3}, lr {}, {:.1}s",
            l.epoch,
            cfg.train.epochs,
            l.mean_loss,
            l.train_accuracy,
            l.lr_in_effect,
            l.wall_time
        );
        log_lines.push_str(&serde_json::to_string(l).expect("epoch log serializes"));
        log_lines.push('\n');
        timing.push_str(&format!("{{\"epoch\":{},\"wall_time\":{}}}\n", l.epoch, l.wall_time));
        ControlFlow::Continue(())
    })?;
    write_atomic(&a.out.join(protocol::TRAIN_LOG), log_lines.as_bytes())?;
    write_atomic(&a.out.join(protocol::TIMING_LOG), timing.as_bytes())?;
    save_checkpoint(&net, &a.out.join(protocol::CHECKPOINT_DIR))?;

    let held_out_accuracy = test_set.as_ref().map(|t| evaluate(&net, t)).transpose()?;
    let summary = serde_json::json!({
        "variant": a.variant,
        "held_out": a.held_out,
        "held_out_accuracy": held_out_accuracy,
        "final_train_accuracy": logs.last().map(|l| l.train_accuracy),
        "final_train_loss": logs.last().map(|l| l.mean_loss),
    });
    write_json(&a.out.join(protocol::RESULT_FILE), &summary)?;
    if let (Some(d), Some(acc)) = (&a.held_out, held_out_accuracy) {
        println!("held-out {d}: {:.2}%", 100.0 * acc);
    }
    println!("run written to {}", a.out.display());
    Ok(())
}

fn cmd_experiment(a: ExperimentArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
    let mut cfg = CliConfig::load(a.config.as_deref())?;
    cfg.apply_train(&a.train.overrides(), None);
    if let Some(seeds) = a.seeds {
        cfg.experiment.seeds = seeds;
    }
    if let Some(variants) = a.variants {
        cfg.experiment.variants = variants;
    }
    let model = cfg.resolve_model(&ds)?;
    cfg.model = Some(model.clone());
    let exp = ExperimentConfig {
        dataset: a.dataset.clone(),
        model,
        train: cfg.train.clone(),
        seeds: cfg.experiment.seeds.clone(),
        variants: cfg.experiment.variants.clone(),
        output_dir: a.out.clone(),
    };
    exp.validate()?;
    fresh_dir(&a.out, a.force)?;
    write_json(&a.out.join("config.json"), &cfg)?;

    log::info!(
        "{} runs: {} variant(s) x {} domain(s) x {} seed(s)",
        exp.variants.len() * ds.n_domains() * exp.seeds.len(),
        exp.variants.len(),
        ds.n_domains(),
        exp.seeds.len()
    );
    if a.sequential {
        mla_core::exec::set_parallel(false);
    }
    let report = run_experiment_on(&exp, &ds)?;
    print!("{}", render_report(&report)?.text);
    Ok(())
}

fn cmd_saliency(a: SaliencyArgs) -> Result<()> {
    let net = load_checkpoint(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let ds = load_dataset(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
    let opts = SaliencyOptions {
        objective: if a.score { Objective::Score } else { Objective::Loss },
        reduce: a.reduce,
        scale: 1.0,
    };
    fresh_dir(&a.out, a.force)?;
    for &id in &a.sample_ids {
        let sample = ds
            .samples
            .get(id)
            .ok_or_else(|| Error::Input(format!("sample id {id} out of range (dataset has {})", ds.len())))?;
        let class = a.class.unwrap_or(sample.class_label as usize);
        let (c, h, w) = (3, ds.height as usize, ds.width as usize);
        let image = mla_core::Tensor::new(sample.image.iter().map(|&v| data::pixel_to_input(v)).collect(), &[c, h, w])?;
        let mut map = compute_saliency(&net, &image, class, &opts)?;
        map.sample_id = Some(id);
        let stem = a.out.join(format!("sample-{id}"));
        saliency::write_pgm(&map, &stem.with_extension("pgm"))?;
        saliency::write_sidecar(&map, &opts, &stem.with_extension("json"))?;
        println!("sample {id} (class {class}): raw |grad| in [{:.3e}, {:.3e}]", map.min, map.max);
    }
    Ok(())
}
