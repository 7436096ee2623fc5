//! Command-line front end: `train`, `eval`, `verify-theory` and `gen-data`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analytics::verify_opposite_monotonicity;
use crate::data::{gen_synthetic, load_domain, make_folds, save_domain, DomainDataset, DomainTask, SyntheticConfig};
use crate::error::{Error, Result};
use crate::model::{init_model, ArchConfig};
use crate::trainer::{evaluate, log_header, mean, Split, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECKPOINT: i32 = 3;

/// Everything a run needs, read from one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// One sparse data file per domain. Ignored when `synthetic` is set.
    pub domains: Vec<PathBuf>,
    /// Generate domains instead of loading them.
    pub synthetic: Option<SyntheticConfig>,
    /// Number of classes; inferred from the largest label when absent.
    pub num_classes: Option<usize>,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub folds: usize,
    pub trials: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            domains: Vec::new(),
            synthetic: None,
            num_classes: None,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            folds: 5,
            trials: 1,
            out: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        if self.folds == 0 {
            return Err(Error::Config("folds must be >= 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if let Some(syn) = &self.synthetic {
            if syn.feature_dim != self.arch.input_dim {
                return Err(Error::Config(format!(
                    "synthetic.feature_dim {} differs from arch.input_dim {}",
                    syn.feature_dim, self.arch.input_dim
                )));
            }
        } else if self.domains.is_empty() {
            return Err(Error::Config("no domains given and no synthetic section".into()));
        }
        if self.num_classes == Some(0) {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load_datasets(&self) -> Result<Vec<DomainDataset>> {
        match &self.synthetic {
            Some(syn) => gen_synthetic(syn),
            None => self
                .domains
                .iter()
                .map(|p| load_domain(p, self.arch.input_dim))
                .collect(),
        }
    }

    /// At least 2, and large enough for every label present.
    pub fn resolve_num_classes(&self, datasets: &[DomainDataset]) -> Result<usize> {
        let seen = datasets.iter().filter_map(|d| d.max_label()).max().map_or(0, |m| m + 1);
        match self.num_classes {
            Some(k) if k < seen => Err(Error::Data(format!("num_classes is {k} but labels go up to {seen}"))),
            Some(k) => Ok(k),
            None => Ok(seen.max(2)),
        }
    }

    /// Seed of trial `t`, used for the fold plan and the model.
    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.train.seed.wrapping_add(trial as u64)
    }

    /// Domain tasks for one (trial, test fold) pair.
    pub fn tasks(&self, datasets: &[DomainDataset], trial: usize, fold: usize) -> Result<Vec<DomainTask>> {
        let plan = make_folds(datasets, self.folds, self.trial_seed(trial))?;
        plan.split(datasets, fold)
    }
}

#[derive(Debug, Parser)]
#[command(name = "mbf", version, about = "Multi-domain text classification with batch Frobenius norm regularization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cross-validated training; writes logs, checkpoints and results.tsv.
    Train(RunArgs),
    /// Per-domain accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Check the opposite monotonicity of row square-sum and entropy.
    VerifyTheory(TheoryArgs),
    /// Write synthetic domain files and a manifest.
    GenData(RunArgs),
}

#[derive(Debug, Default, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Fold count.
    #[arg(long)]
    pub k: Option<usize>,
}

impl RunArgs {
    /// Reads the config file (or defaults) and applies flag overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.alpha {
            cfg.train.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.train.beta = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
            if let Some(syn) = cfg.synthetic.as_mut() {
                syn.seed = v;
            }
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = self.trials {
            cfg.trials = v;
        }
        if let Some(v) = self.k {
            cfg.folds = v;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test fold whose split is evaluated.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long, default_value_t = 0)]
    pub trial: usize,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![2, 3, 5, 10])]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::CheckpointMismatch { .. } | Error::Checkpoint(_) => EXIT_CHECKPOINT,
        Error::Config(_)
        | Error::Data(_)
        | Error::Parse { .. }
        | Error::FileIo { .. }
        | Error::Json(_)
        | Error::Index { .. } => EXIT_DATA,
        _ => EXIT_INTERNAL,
    }
}

/// Runs a parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<i32> {
    match cli.command {
        Command::Train(args) => cmd_train(&args.resolve()?, out),
        Command::Eval(args) => cmd_eval(&args.run.resolve()?, &args.checkpoint, args.trial, args.fold, args.split.into(), out),
        Command::VerifyTheory(args) => cmd_verify_theory(args.trials, &args.k, args.seed, out),
        Command::GenData(args) => cmd_gen_data(&args.resolve()?, out),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::file(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::file(path, e))
}

fn echo_config(cfg: &RunConfig) -> Result<()> {
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("config.json"), &(serde_json::to_string_pretty(cfg)? + "\n"))
}

fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// `domain mean_acc std_acc` rows plus `AVG`, in percent with 2 decimals.
///
/// `runs[r][d]` is the accuracy of domain `d` in run `r`, in `[0, 1]`.
pub fn results_table(names: &[String], runs: &[Vec<f64>]) -> String {
    let mut s = String::from("domain\tmean_acc\tstd_acc\n");
    let column = |d: usize| runs.iter().map(|r| 100.0 * r[d]).collect::<Vec<_>>();
    for (d, name) in names.iter().enumerate() {
        let c = column(d);
        let _ = writeln!(s, "{name}\t{:.2}\t{:.2}", mean(&c), std_dev(&c));
    }
    let avg: Vec<f64> = runs.iter().map(|r| 100.0 * mean(r)).collect();
    let _ = writeln!(s, "AVG\t{:.2}\t{:.2}", mean(&avg), std_dev(&avg));
    s
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<i32> {
    cfg.validate()?;
    let datasets = cfg.load_datasets()?;
    let num_classes = cfg.resolve_num_classes(&datasets)?;
    let names: Vec<String> = datasets.iter().map(|d| d.name.clone()).collect();
    echo_config(cfg)?;

    // Per trial: the mean over folds. With one trial, the folds themselves.
    let mut trial_means: Vec<Vec<f64>> = Vec::with_capacity(cfg.trials);
    let mut fold_rows: Vec<Vec<f64>> = Vec::new();
    for trial in 0..cfg.trials {
        let seed = cfg.trial_seed(trial);
        let mut per_fold = Vec::with_capacity(cfg.folds);
        for fold in 0..cfg.folds {
            let dir = cfg.out.join(format!("trial{trial}")).join(format!("fold{fold}"));
            create_dir(&dir)?;
            let tasks = cfg.tasks(&datasets, trial, fold)?;
            let model = init_model(&cfg.arch, tasks.len(), num_classes, seed)?;
            let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
            let mut log = format!("{}\n", log_header(tasks.len()));
            let mut trainer = Trainer::new(&tasks, model, train_cfg)?;
            let fitted = trainer.fit(|r| {
                let _ = writeln!(log, "{}", r.log_line(tasks.len()));
            });
            write_file(&dir.join("train.log"), &log)?;
            let outcome = match fitted {
                Ok(o) => o,
                Err(e) => {
                    let snap = dir.join("diverged.ckpt");
                    trainer.model().save_file(&snap)?;
                    writeln!(out, "trial {trial} fold {fold}: {e}; snapshot saved to {}", snap.display())?;
                    return Err(e);
                }
            };
            outcome.model.save_file(dir.join("model.ckpt"))?;
            let acc = evaluate(&outcome.model, &tasks, Split::Test)?;
            let acc_text = acc.iter().map(|a| format!("{:.2}", 100.0 * a)).collect::<Vec<_>>().join("\t");
            writeln!(out, "trial {trial} fold {fold}\t{acc_text}\tmean {:.2}", 100.0 * mean(&acc))?;
            per_fold.push(acc);
        }
        let m = names.len();
        trial_means.push((0..m).map(|d| mean(&per_fold.iter().map(|r| r[d]).collect::<Vec<_>>())).collect());
        fold_rows.extend(per_fold);
    }
    let rows = if cfg.trials == 1 { &fold_rows } else { &trial_means };
    let table = results_table(&names, rows);
    write_file(&cfg.out.join("results.tsv"), &table)?;
    write!(out, "{table}")?;
    Ok(EXIT_OK)
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    trial: usize,
    fold: usize,
    split: Split,
    out: &mut dyn std::io::Write,
) -> Result<i32> {
    cfg.validate()?;
    if trial >= cfg.trials {
        return Err(Error::Config(format!("trial {trial} out of range for {} trials", cfg.trials)));
    }
    let datasets = cfg.load_datasets()?;
    let num_classes = cfg.resolve_num_classes(&datasets)?;
    let tasks = cfg.tasks(&datasets, trial, fold)?;
    let mut model = init_model(&cfg.arch, tasks.len(), num_classes, 0)?;
    model.load_file(checkpoint)?;
    let acc = evaluate(&model, &tasks, split)?;
    writeln!(out, "domain\tacc")?;
    for (t, a) in tasks.iter().zip(&acc) {
        writeln!(out, "{}\t{:.2}", t.name, 100.0 * a)?;
    }
    writeln!(out, "AVG\t{:.2}", 100.0 * mean(&acc))?;
    Ok(EXIT_OK)
}

pub fn cmd_verify_theory(trials: usize, ks: &[usize], seed: u64, out: &mut dyn std::io::Write) -> Result<i32> {
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    if ks.is_empty() {
        return Err(Error::Config("no class counts given".into()));
    }
    let mut ok = true;
    for &k in ks {
        let report = verify_opposite_monotonicity(trials, k, seed)?;
        writeln!(out, "# k={k}")?;
        writeln!(out, "{report}")?;
        ok &= report.passed();
    }
    Ok(if ok { EXIT_OK } else { EXIT_INTERNAL })
}

#[derive(Serialize)]
struct Manifest<'a> {
    generator: &'a SyntheticConfig,
    files: Vec<ManifestEntry>,
}

#[derive(Serialize)]
struct ManifestEntry {
    name: String,
    file: String,
    labeled: usize,
    unlabeled: usize,
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<i32> {
    let syn = cfg.synthetic.clone().unwrap_or_else(|| SyntheticConfig {
        feature_dim: cfg.arch.input_dim,
        ..Default::default()
    });
    let datasets = gen_synthetic(&syn)?;
    create_dir(&cfg.out)?;
    let mut files = Vec::with_capacity(datasets.len());
    for ds in &datasets {
        let file = format!("{}.txt", ds.name);
        save_domain(ds, cfg.out.join(&file))?;
        writeln!(out, "{}", cfg.out.join(&file).display())?;
        files.push(ManifestEntry {
            name: ds.name.clone(),
            file,
            labeled: ds.labeled.len(),
            unlabeled: ds.unlabeled.len(),
        });
    }
    let manifest = Manifest { generator: &syn, files };
    write_file(&cfg.out.join("manifest.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"folds": 3, "alpha": 1}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"train": {"alpah": 1}}"#), Err(Error::Config(_))));
        let cfg = RunConfig::from_json(r#"{"folds": 3, "train": {"alpha": 0.25}}"#).unwrap();
        assert_eq!(cfg.folds, 3);
        assert_eq!(cfg.train.alpha, 0.25);
        assert_eq!(cfg.train.beta, 1.0);
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"trials": 3, "train": {"alpha": 0.25, "epochs": 7}}"#).unwrap();
        let args = RunArgs {
            config: Some(path),
            alpha: Some(0.0),
            beta: Some(0.0),
            k: Some(2),
            ..Default::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!((cfg.train.alpha, cfg.train.beta, cfg.train.epochs), (0.0, 0.0, 7));
        assert_eq!((cfg.trials, cfg.folds), (3, 2));
    }

    #[test]
    fn results_table_layout() {
        let names = vec!["books".to_string(), "dvd".to_string()];
        let t = results_table(&names, &[vec![0.8, 0.9], vec![0.9, 0.9]]);
        assert_eq!(t, "domain\tmean_acc\tstd_acc\nbooks\t85.00\t7.07\ndvd\t90.00\t0.00\nAVG\t87.50\t3.54\n");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_DATA);
        assert_eq!(
            exit_code(&Error::CheckpointMismatch {
                name: "a".into(),
                detail: "b".into()
            }),
            EXIT_CHECKPOINT
        );
        assert_eq!(exit_code(&Error::NonFinite("x".into())), EXIT_INTERNAL);
    }

    #[test]
    fn verify_theory_single_trial() {
        let mut buf = Vec::new();
        assert_eq!(cmd_verify_theory(1, &[3], 0, &mut buf).unwrap(), EXIT_OK);
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "# k=3\nchecked=1 sign_failures=0 fd_failures=0\n");
    }
}
