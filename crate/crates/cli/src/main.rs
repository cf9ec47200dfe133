mod config;

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pebal::experiment::{self, ExperimentConfig};
use pebal::gradcheck::{finite_diff_check, GradCheckConfig};
use pebal::inference::ScoreRule;
use pebal::model::{
    featurize, pretrain_on_features, Checkpoint, EpochLoss, FeatureExtractor, FeatureSample,
};
use pebal::netpbm::{score_map_to_raster, write_labels};
use pebal::scenegen::{Benchmark, Split};
use pebal::PebalError;
use sha2::{Digest, Sha256};

use config::{ConfigError, ConfigFile};

/// Gradient checks fail above this relative error.
const GRADCHECK_TOLERANCE: f64 = 1e-4;
const LOCK_FILE: &str = ".pebal.lock";

#[derive(Parser)]
#[command(
    name = "pebal",
    version,
    about = "Pixel-wise energy-biased abstention learning on synthetic driving scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`section.key = value` lines); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the inlier head with cross-entropy.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a pretrained checkpoint with the abstention objective.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split and write metrics, score maps and predictions.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "pebal")]
        baseline: ScoreRule,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the ablation ladder over `ablate.seeds`.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of the objective.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Pebal(#[from] PebalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("gradient check failed: max relative error {0:e} >= {GRADCHECK_TOLERANCE:e}")]
    GradCheck(f64),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Pebal(PebalError::Numerical(_) | PebalError::Diverged { .. })
            | CliError::GradCheck(_) => 3,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Exclusive ownership of an output directory for the life of the command.
struct OutDir {
    path: PathBuf,
    lock: PathBuf,
}

impl OutDir {
    /// Creates `path` if needed (its parent must exist) and takes the lock.
    fn acquire(path: &Path) -> Result<Self> {
        if !path.is_dir() {
            fs::create_dir(path).map_err(io_err(path))?;
        }
        let lock = path.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(io_err(&lock))?;
        Ok(Self {
            path: path.to_path_buf(),
            lock,
        })
    }

    fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.join(name);
        fs::write(&p, contents).map_err(io_err(&p))
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

fn load_config(common: &Common) -> Result<ConfigFile> {
    let mut file = match &common.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    if let Some(seed) = common.seed {
        file.seed = seed;
    }
    Ok(file)
}

fn load_data(dir: &Path, config: &ExperimentConfig) -> Result<Benchmark> {
    let bench = Benchmark::load(dir)?;
    if bench.num_inlier_classes != config.scene.num_inlier_classes {
        return Err(CliError::Data(format!(
            "{}: dataset has {} inlier classes, config expects {}",
            dir.display(),
            bench.num_inlier_classes,
            config.scene.num_inlier_classes
        )));
    }
    Ok(bench)
}

fn trace_tsv(trace: &[EpochLoss]) -> String {
    let mut s = String::from("epoch\tpal\tebm_in\tebm_out\treg\ttotal\n");
    for (i, e) in trace.iter().enumerate() {
        writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            i + 1,
            e.pal,
            e.ebm_in,
            e.ebm_out,
            e.reg,
            e.total
        )
        .expect("string write");
    }
    s
}

fn train_inliers(extractor: &FeatureExtractor, bench: &Benchmark) -> Result<Vec<FeatureSample>> {
    let train: Vec<_> = bench.split(Split::Train).into_iter().cloned().collect();
    Ok(featurize(extractor, &train, false)?)
}

fn gen_data(common: &Common, out: &Path) -> Result<()> {
    let file = load_config(common)?;
    let cfg = file.to_experiment();
    let dir = OutDir::acquire(out)?;
    let bench = experiment::generate_data(&cfg)?;
    bench.write(out)?;
    dir.write("config.toml", file.to_text())?;
    for split in Split::ALL {
        let records = bench.split_records(split);
        let anomalous = records.iter().filter(|r| r.anomaly_pixels > 0).count();
        println!(
            "{split}\t{} scenes\t{anomalous} with anomalies",
            records.len()
        );
    }
    println!("objects\t{}", bench.train_pool.len());
    Ok(())
}

fn pretrain(common: &Common, data: &Path, out: &Path) -> Result<()> {
    let file = load_config(common)?;
    let cfg = file.to_experiment();
    let bench = load_data(data, &cfg)?;
    let dir = OutDir::acquire(out)?;
    let extractor = experiment::build_extractor(&cfg, &bench)?;
    let inliers = train_inliers(&extractor, &bench)?;
    let y = cfg.scene.num_inlier_classes as usize;
    let outcome = pretrain_on_features(extractor.num_filters(), &inliers, y, &cfg.pretrain)?;
    let ck = Checkpoint::new(extractor, outcome.head, y)?;
    ck.save(&dir.join("pretrain.ckpt"))?;
    dir.write("pretrain_trace.tsv", trace_tsv(&outcome.trace))?;
    dir.write("config.toml", file.to_text())?;
    if let Some(l) = outcome.trace.last() {
        println!(
            "pretrain\t{} epochs\tfinal loss {}",
            outcome.trace.len(),
            l.total
        );
    }
    Ok(())
}

fn finetune(common: &Common, data: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let file = load_config(common)?;
    let cfg = file.to_experiment();
    let bench = load_data(data, &cfg)?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.has_abstention() {
        return Err(CliError::Data(format!(
            "{}: checkpoint is already fine-tuned",
            checkpoint.display()
        )));
    }
    let dir = OutDir::acquire(out)?;
    let mix = experiment::build_outlier_set(&cfg, &bench)?;
    let prepared = experiment::Prepared {
        inliers: train_inliers(&ck.extractor, &bench)?,
        outliers: featurize(&ck.extractor, &mix.samples, true)?,
        mix_skipped: mix.skipped,
        extractor: ck.extractor.clone(),
    };
    let outcome = experiment::finetune(&prepared, &ck.head, &cfg.finetune)?;
    let fine = Checkpoint::new(ck.extractor, outcome.head, ck.num_inlier_classes)?;
    fine.save(&dir.join("finetune.ckpt"))?;
    dir.write("finetune_trace.tsv", trace_tsv(&outcome.trace))?;
    dir.write("config.toml", file.to_text())?;
    println!(
        "finetune\t{} epochs\t{} outlier images\t{} skipped pastes",
        outcome.trace.len(),
        prepared.outliers.len(),
        prepared.mix_skipped
    );
    Ok(())
}

fn run_id(
    checkpoint: &[u8],
    data: &Benchmark,
    split: Split,
    rule: ScoreRule,
    config: &str,
) -> String {
    let mut h = Sha256::new();
    h.update(checkpoint);
    h.update(data.seed.to_le_bytes());
    h.update(split.to_string().as_bytes());
    h.update(rule.name().as_bytes());
    h.update(config.as_bytes());
    hex::encode(&h.finalize()[..8])
}

fn eval(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    split: Split,
    rule: ScoreRule,
    out: &Path,
) -> Result<()> {
    let file = load_config(common)?;
    let cfg = file.to_experiment();
    let bench = load_data(data, &cfg)?;
    let ck = Checkpoint::load(checkpoint)?;
    let dir = OutDir::acquire(out)?;
    let (report, preds, tau) =
        experiment::evaluate_checkpoint(&ck, &bench, split, rule, cfg.smoothing, cfg.tpr_target)?;
    for sub in ["scores", "pred"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    for (rec, p) in bench.split_records(split).iter().zip(&preds) {
        let (raster, (lo, hi)) = score_map_to_raster(&p.score)?;
        raster.write(&dir.join(&format!("scores/{}.pgm", rec.id)))?;
        dir.write(
            &format!("scores/{}.range.txt", rec.id),
            format!("{lo}\t{hi}\n"),
        )?;
        write_labels(&dir.join(&format!("pred/{}.pgm", rec.id)), &p.pred)?;
    }
    let text = file.to_text();
    report.write_tsv(&dir.join("report.tsv"))?;
    dir.write("threshold.txt", format!("{tau}\n"))?;
    dir.write("config.toml", &text)?;
    let id = run_id(&ck.to_bytes(), &bench, split, rule, &text);
    report.append_run_log(&dir.join("runs.tsv"), &id)?;
    print!("{}", report.to_tsv());
    for (metric, reason) in &report.undefined {
        eprintln!("warning: {metric} undefined: {reason}");
    }
    Ok(())
}

fn ablate(common: &Common, data: &Path, out: &Path) -> Result<()> {
    let file = load_config(common)?;
    let cfg = file.to_experiment();
    let bench = load_data(data, &cfg)?;
    let dir = OutDir::acquire(out)?;
    let table = experiment::run_ablation_on(&cfg, &bench, &file.ablate.seeds)?;
    let tsv = table.to_tsv();
    dir.write("ablation.tsv", &tsv)?;
    dir.write("config.toml", file.to_text())?;
    print!("{tsv}");
    Ok(())
}

fn gradcheck(common: &Common, trials: usize, out: Option<&Path>) -> Result<()> {
    let file = load_config(common)?;
    let cfg = file.to_experiment();
    let gc = GradCheckConfig {
        trials,
        seed: file.seed,
        loss: cfg.finetune.loss,
        ..GradCheckConfig::default()
    };
    let report = finite_diff_check(&gc)?;
    let tsv = format!(
        "key\tvalue\ntrials\t{}\nexcluded_near_kink\t{}\nmax_rel_err_logits\t{:e}\nmax_rel_err_params\t{:e}\n",
        report.trials, report.excluded_near_kink, report.max_rel_err_logits, report.max_rel_err_params
    );
    print!("{tsv}");
    if let Some(out) = out {
        let dir = OutDir::acquire(out)?;
        dir.write("gradcheck.tsv", &tsv)?;
    }
    if report.max_rel_err() >= GRADCHECK_TOLERANCE {
        return Err(CliError::GradCheck(report.max_rel_err()));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { common, out } => gen_data(common, out),
        Command::Pretrain { common, data, out } => pretrain(common, data, out),
        Command::Finetune {
            common,
            data,
            checkpoint,
            out,
        } => finetune(common, data, checkpoint, out),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            baseline,
            out,
        } => eval(common, checkpoint, data, *split, *baseline, out),
        Command::Ablate { common, data, out } => ablate(common, data, out),
        Command::Gradcheck {
            common,
            trials,
            out,
        } => gradcheck(common, *trials, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
