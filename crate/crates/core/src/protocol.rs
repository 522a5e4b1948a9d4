//! Leave-one-domain-out experiments over several seeds and model variants,
//! with table/CSV/JSON reporting.

use std::fmt::{self, Write as _};
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, split_leave_one_out, DomainDataset};
use crate::model::{save_checkpoint, write_atomic, ModelConfig, MultiLevelAttentionNet};
use crate::train::{evaluate, train_with, TrainConfig};
use crate::{exec, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// The configured model, attention branches included.
    Attention,
    /// Same backbone and classifier scheme with every branch removed.
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Attention, Variant::Baseline];

    pub fn model_config(self, cfg: &ModelConfig) -> ModelConfig {
        match self {
            Variant::Attention => cfg.clone(),
            Variant::Baseline => baseline_variant(cfg),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Attention => "attention",
            Variant::Baseline => "baseline",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Variant::Attention),
            "baseline" => Ok(Variant::Baseline),
            _ => Err(Error::Usage(format!("unknown variant `{s}` (attention, baseline)"))),
        }
    }
}

/// The backbone-only ablation: taps emptied, so the classifier sees the
/// pooled final features alone.
pub fn baseline_variant(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig {
        branches: Vec::new(),
        ..cfg.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Each seed drives both model init and shuffling of one run.
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("at least one variant is required".into()));
        }
        let mut v = self.variants.clone();
        v.sort_unstable();
        v.dedup();
        if v.len() != self.variants.len() {
            return Err(Error::Config("variants must be distinct".into()));
        }
        self.model.validate()?;
        self.train.validate()
    }
}

/// One (variant, held-out domain) cell over all seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: Variant,
    pub domain: String,
    pub seeds: Vec<u64>,
    /// Held-out accuracy per seed, same order as `seeds`.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (0 for a single seed).
    pub std: f64,
    /// Accuracy of each seed's final model on its own training split.
    pub source_train_accuracies: Vec<f64>,
}

impl CellResult {
    pub fn new(variant: Variant, domain: &str, seeds: Vec<u64>, accuracies: Vec<f64>, source: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&accuracies);
        CellResult {
            variant,
            domain: domain.to_string(),
            seeds,
            accuracies,
            mean,
            std,
            source_train_accuracies: source,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    /// Arithmetic mean of the per-domain means.
    pub average: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub domains: Vec<String>,
    pub variants: Vec<Variant>,
    pub cells: Vec<CellResult>,
    pub summaries: Vec<VariantSummary>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl RunReport {
    /// Assembles a report and fills in per-variant averages. Cells may be
    /// missing; [`render_report`] refuses incomplete reports.
    pub fn assemble(domains: Vec<String>, variants: Vec<Variant>, cells: Vec<CellResult>) -> Self {
        let summaries = variants
            .iter()
            .map(|&variant| {
                let means: Vec<f64> = domains
                    .iter()
                    .filter_map(|d| {
                        cells
                            .iter()
                            .find(|c| c.variant == variant && &c.domain == d)
                            .map(|c| c.mean)
                    })
                    .collect();
                VariantSummary {
                    variant,
                    average: mean_std(&means).0,
                }
            })
            .collect();
        RunReport {
            domains,
            variants,
            cells,
            summaries,
        }
    }

    pub fn cell(&self, variant: Variant, domain: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.variant == variant && c.domain == domain)
    }

    pub fn average(&self, variant: Variant) -> Option<f64> {
        self.summaries.iter().find(|s| s.variant == variant).map(|s| s.average)
    }

    /// Cells that are absent or hold no finite accuracy, as `variant/domain`.
    pub fn missing_cells(&self) -> Vec<String> {
        let mut missing = Vec::new();
        for &v in &self.variants {
            for d in &self.domains {
                let ok = self
                    .cell(v, d)
                    .is_some_and(|c| !c.accuracies.is_empty() && c.mean.is_finite());
                if !ok {
                    missing.push(format!("{v}/{d}"));
                }
            }
        }
        missing
    }

    /// `rows[variant][domain..., average]` of mean accuracies.
    pub fn grid(&self) -> Result<Vec<Vec<f64>>> {
        let missing = self.missing_cells();
        if !missing.is_empty() {
            return Err(Error::Render(missing));
        }
        Ok(self
            .variants
            .iter()
            .map(|&v| {
                let mut row: Vec<f64> = self.domains.iter().map(|d| self.cell(v, d).unwrap().mean).collect();
                row.push(self.average(v).unwrap_or(f64::NAN));
                row
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedReport {
    pub text: String,
    pub csv: String,
    pub json: String,
}

/// Text table in percent (best value per column in `**bold**`), CSV of
/// mean accuracies with columns `variant,<domains...>,average`, and JSON of
/// the full report.
pub fn render_report(report: &RunReport) -> Result<RenderedReport> {
    let grid = report.grid()?;
    let n_cols = report.domains.len() + 1;
    let best: Vec<f64> = (0..n_cols)
        .map(|j| grid.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max))
        .collect();

    let mut header = vec!["Method".to_string()];
    header.extend(report.domains.iter().cloned());
    header.push("Average".into());
    let mut rows = vec![header];
    for (v, r) in report.variants.iter().zip(&grid) {
        let mut cells = vec![v.to_string()];
        for (j, &x) in r.iter().enumerate() {
            let s = format!("{:.2}", 100.0 * x);
            // Compare at printed precision so visually equal values both bold.
            let is_best = s == format!("{:.2}", 100.0 * best[j]);
            cells.push(if is_best && grid.len() > 1 { format!("**{s}**") } else { s });
        }
        rows.push(cells);
    }
    let widths: Vec<usize> = (0..=n_cols)
        .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (c, &w))| if j == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        writeln!(text, "{}", line.join(" | ").trim_end()).unwrap();
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            writeln!(text, "{}", rule.join("-|-")).unwrap();
        }
    }

    let mut csv = format!("variant,{},average\n", report.domains.join(","));
    for (v, r) in report.variants.iter().zip(&grid) {
        let vals: Vec<String> = r.iter().map(|x| x.to_string()).collect();
        writeln!(csv, "{v},{}", vals.join(",")).unwrap();
    }

    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    Ok(RenderedReport { text, csv, json })
}

/// Parses the CSV written by [`render_report`] back into
/// `(domains, [(variant, row)])`.
pub fn parse_report_csv(csv: &str) -> Result<(Vec<String>, Vec<ReportRow>)> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format("empty report CSV".into()))?
        .split(',')
        .collect();
    if header.len() < 3 || header[0] != "variant" || header[header.len() - 1] != "average" {
        return Err(Error::Format("unexpected report CSV header".into()));
    }
    let domains = header[1..header.len() - 1].iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(Error::Format(format!("report CSV row has {} fields", fields.len())));
        }
        let values = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| Error::Format(format!("report CSV value `{f}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push((fields[0].parse()?, values));
    }
    Ok((domains, rows))
}

/// One CSV row: a variant and its per-domain values followed by the average.
pub type ReportRow = (Variant, Vec<f64>);

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const TIMING_LOG: &str = "timing.jsonl";
pub const RESULT_FILE: &str = "result.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: Variant,
    pub domain: String,
    pub seed: u64,
    pub held_out_accuracy: f64,
    pub source_train_accuracy: f64,
    pub final_train_loss: Option<f64>,
}

/// `<out>/runs/<variant>/<domain>/seed-<seed>`.
pub fn run_dir(out: &Path, variant: Variant, domain: &str, seed: u64) -> PathBuf {
    out.join("runs")
        .join(variant.to_string())
        .join(domain)
        .join(format!("seed-{seed}"))
}

/// Trains one (variant, held-out domain, seed) run and, if `dir` is given,
/// persists its checkpoint, epoch log and result there.
pub fn run_single(
    data: &DomainDataset,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    variant: Variant,
    domain: &str,
    seed: u64,
    dir: Option<&Path>,
) -> Result<RunResult> {
    let (train_set, test_set) = split_leave_one_out(data, domain)?;
    let target = data.domain_index(domain)?;
    if let Some(i) = train_set.samples.iter().position(|s| s.domain_label == target) {
        // split_leave_one_out guarantees this; checked again on every batch.
        return Err(Error::Leakage {
            domain: format!("{domain} (sample {i})"),
        });
    }
    let mut model_cfg = variant.model_config(model);
    model_cfg.seed = seed;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let mut net = MultiLevelAttentionNet::new(model_cfg)?;

    let mut log_lines = String::new();
    let mut timing_lines = String::new();
    let logs = train_with(&mut net, &train_set, &cfg, |log| {
        log_lines.push_str(&serde_json::to_string(log).expect("epoch log serializes"));
        log_lines.push('\n');
        timing_lines.push_str(&format!("{{\"epoch\":{},\"wall_time\":{}}}\n", log.epoch, log.wall_time));
        ControlFlow::Continue(())
    })?;
    let result = RunResult {
        variant,
        domain: domain.to_string(),
        seed,
        held_out_accuracy: evaluate(&net, &test_set)?,
        source_train_accuracy: evaluate(&net, &train_set)?,
        final_train_loss: logs.last().map(|l| l.mean_loss),
    };
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        save_checkpoint(&net, &dir.join(CHECKPOINT_DIR))?;
        write_atomic(&dir.join(TRAIN_LOG), log_lines.as_bytes())?;
        write_atomic(&dir.join(TIMING_LOG), timing_lines.as_bytes())?;
        let mut bytes = serde_json::to_vec_pretty(&result)?;
        bytes.push(b'\n');
        write_atomic(&dir.join(RESULT_FILE), &bytes)?;
    }
    log::info!(
        "{variant}/{domain}/seed {seed}: held-out {:.4}, source {:.4}",
        result.held_out_accuracy,
        result.source_train_accuracy
    );
    Ok(result)
}

/// Loads the dataset named in `cfg` and runs [`run_experiment_on`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let data = load_dataset(&cfg.dataset)?;
    run_experiment_on(cfg, &data)
}

/// Every variant × held-out domain × seed, each from a fresh init. Runs
/// are independent and fan out over the thread pool; the report is
/// assembled in fixed (variant, domain, seed) order and written to
/// `cfg.output_dir` as JSON, CSV and text.
pub fn run_experiment_on(cfg: &ExperimentConfig, data: &DomainDataset) -> Result<RunReport> {
    cfg.validate()?;
    if data.n_domains() < 2 {
        return Err(Error::Input(format!(
            "leave-one-domain-out needs at least 2 domains, dataset has {}",
            data.n_domains()
        )));
    }
    let domains = data.domain_names.clone();
    let mut jobs = Vec::new();
    for &variant in &cfg.variants {
        for domain in &domains {
            for &seed in &cfg.seeds {
                jobs.push((variant, domain.as_str(), seed));
            }
        }
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let results = exec::map_indexed(jobs.len(), |i| {
        let (variant, domain, seed) = jobs[i];
        let dir = run_dir(&cfg.output_dir, variant, domain, seed);
        run_single(data, &cfg.model, &cfg.train, variant, domain, seed, Some(&dir)).map_err(|e| Error::Run {
            variant: variant.to_string(),
            domain: domain.to_string(),
            seed,
            source: Box::new(e),
        })
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    for &variant in &cfg.variants {
        for domain in &domains {
            let runs: Vec<&RunResult> = results
                .iter()
                .filter(|r| r.variant == variant && &r.domain == domain)
                .collect();
            cells.push(CellResult::new(
                variant,
                domain,
                runs.iter().map(|r| r.seed).collect(),
                runs.iter().map(|r| r.held_out_accuracy).collect(),
                runs.iter().map(|r| r.source_train_accuracy).collect(),
            ));
        }
    }
    let report = RunReport::assemble(domains, cfg.variants.clone(), cells);
    write_report(&report, &cfg.output_dir)?;
    Ok(report)
}

/// Writes `report.json`, `report.csv` and `report.txt` into `dir`.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<()> {
    let r = render_report(report)?;
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join(REPORT_JSON), r.json.as_bytes())?;
    write_atomic(&dir.join(REPORT_CSV), r.csv.as_bytes())?;
    write_atomic(&dir.join(REPORT_TXT), r.text.as_bytes())?;
    Ok(())
}
