//! `colearn`: the co-learning pipeline as subcommands.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numeric failure. `COLEARN_THREADS` sets the worker thread count.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use colearn_core::dataset::{preprocess_dataset, read_labels_csv};
use colearn_core::gbdt::GbdtConfig;
use colearn_core::network::load_checkpoint;
use colearn_core::phantom::{
    generate_phantom_dataset, read_manifest, split_dataset, write_manifest, PhantomConfig, Preset,
};
use colearn_core::pipeline::{
    attention_export, crossval, dataset_split, evaluate_arms, predict_cnn, read_clinical, read_scores_csv,
    score_fusion, train_cnn, train_fusion, write_fusion_outputs, write_scores_csv, RunConfig,
};
use colearn_core::seeds::{self, stream};
use colearn_core::train::{read_predictions_csv, write_predictions_csv};
use colearn_core::{dataset::load_samples, Error};

#[derive(Parser)]
#[command(name = "colearn", version, about = "Co-learning of 3D CT nodules and clinical features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root (manifest.json, labels.csv, clinical.csv, subjects/).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Subset {
    All,
    Test,
    Cohort,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a fixed split.
    GenPhantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// IMG_STRONG or COMPLEMENTARY.
        #[arg(long, default_value = "IMG_STRONG")]
        preset: String,
        /// Full generator configuration JSON; replaces the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        test_frac: f64,
        #[arg(long, default_value_t = 4)]
        folds: usize,
    },
    /// Write the network input channels of every subject.
    Preprocess(Common),
    /// Train the CNN on one fold of the split.
    TrainCnn {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Softmax image features from a trained checkpoint.
    PredictCnn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        subset: Subset,
    },
    /// Fit the boosted classifier on clinical (plus image) features of the
    /// training cohort and score the test subjects.
    TrainFusion {
        #[command(flatten)]
        common: Common,
        /// Predictions CSV with image_feature_0/1; omitted means clinical only.
        #[arg(long)]
        image_features: Option<PathBuf>,
    },
    /// Compare score files on a common ROC plot and report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// `subject_id,score` CSV (or a predictions CSV); repeat for overlays.
        #[arg(long, required = true)]
        scores: Vec<PathBuf>,
    },
    /// Export upsampled attention maps.
    AttentionExport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        subset: Subset,
    },
    /// Full protocol: per-fold CNNs, fusion and comparison on the test subjects.
    Crossval(Common),
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Numeric(_)) { 3 } else { 2 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

struct Context {
    cfg: RunConfig,
    data: PathBuf,
    out: PathBuf,
    seed: u64,
}

impl Common {
    fn resolve(&self) -> CliResult<Context> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        let data = self
            .data
            .clone()
            .or_else(|| cfg.paths.data.clone())
            .ok_or_else(|| usage("--data is required"))?;
        let out = self
            .out
            .clone()
            .or_else(|| cfg.paths.out.clone())
            .ok_or_else(|| usage("--out is required"))?;
        let seed = cfg.train.seed;
        cfg.paths.data = Some(data.clone());
        cfg.paths.out = Some(out.clone());
        std::fs::create_dir_all(&out).map_err(|e| Error::Invalid(format!("{}: {e}", out.display())))?;
        Ok(Context { cfg, data, out, seed })
    }
}

fn subset_ids(data: &Path, ctx: &Context, subset: Subset) -> CliResult<Vec<String>> {
    Ok(match subset {
        Subset::All => read_manifest(data)?.ids(),
        Subset::Test => dataset_split(data, &ctx.cfg.crossval, ctx.seed)?.test,
        Subset::Cohort => {
            let mut ids: Vec<String> = dataset_split(data, &ctx.cfg.crossval, ctx.seed)?.folds.concat();
            ids.sort();
            ids
        }
    })
}

fn checkpoint_path(flag: &Option<PathBuf>, ctx: &Context) -> CliResult<PathBuf> {
    flag.clone()
        .or_else(|| ctx.cfg.paths.checkpoint.clone())
        .ok_or_else(|| usage("--checkpoint is required"))
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenPhantom {
            out,
            n,
            side,
            seed,
            preset,
            config,
            test_frac,
            folds,
        } => {
            let cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                    serde_json::from_str::<PhantomConfig>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
                }
                None => PhantomConfig::preset(preset.parse::<Preset>().map_err(|e| usage(e.to_string()))?, n, side, seed),
            };
            let mut manifest = generate_phantom_dataset(&cfg, &out)?;
            manifest.split = Some(split_dataset(&manifest.ids(), test_frac, folds, cfg.seed)?);
            write_manifest(&manifest, &out)?;
        }
        Command::Preprocess(common) => {
            let ctx = common.resolve()?;
            ctx.cfg.echo(&ctx.out)?;
            let ids = read_manifest(&ctx.data)?.ids();
            preprocess_dataset(&ctx.data, &ids, &ctx.cfg.preprocess, &ctx.out)?;
        }
        Command::TrainCnn { common, fold } => {
            let ctx = common.resolve()?;
            let split = dataset_split(&ctx.data, &ctx.cfg.crossval, ctx.seed)?;
            if fold >= split.folds.len() {
                return Err(usage(format!("--fold {fold} out of range ({} folds)", split.folds.len())));
            }
            ctx.cfg.echo(&ctx.out)?;
            let init = seeds::derive(ctx.seed, &[stream::INIT, fold as u64]);
            let (history, _) = train_cnn(&ctx.cfg, &ctx.data, &split.train_ids(fold), split.val_ids(fold), init, &ctx.out)?;
            if let Some(best) = history.best_epoch {
                println!("best epoch {best}");
            }
        }
        Command::PredictCnn {
            common,
            checkpoint,
            subset,
        } => {
            let ctx = common.resolve()?;
            let ckpt = checkpoint_path(&checkpoint, &ctx)?;
            let ids = subset_ids(&ctx.data, &ctx, subset)?;
            let preds = predict_cnn(&ckpt, &ctx.data, &ids, &ctx.cfg)?;
            ctx.cfg.echo(&ctx.out)?;
            write_predictions_csv(&preds, ctx.out.join("predictions.csv"))?;
        }
        Command::TrainFusion {
            common,
            image_features,
        } => {
            let ctx = common.resolve()?;
            let image_features = image_features.or_else(|| ctx.cfg.paths.image_features.clone());
            let split = dataset_split(&ctx.data, &ctx.cfg.crossval, ctx.seed)?;
            let mut cohort = split.folds.concat();
            cohort.sort();
            let records = read_clinical(&ctx.data)?;
            let preds = image_features.map(read_predictions_csv).transpose()?;
            let gcfg = GbdtConfig {
                seed: ctx.seed,
                ..ctx.cfg.gbdt.clone()
            };
            let model = train_fusion(&records, preds.as_deref(), &cohort, &gcfg)?;
            let stem = if preds.is_some() { "fusion" } else { "clinical" };
            ctx.cfg.echo(&ctx.out)?;
            write_fusion_outputs(&model, &ctx.out, stem)?;
            let scores = score_fusion(&model, &records, preds.as_deref(), &split.test)?;
            write_scores_csv(&scores, ctx.out.join(format!("scores_{stem}.csv")))?;
        }
        Command::Evaluate { common, scores } => {
            let ctx = common.resolve()?;
            let labels = read_labels_csv(ctx.data.join("labels.csv"))?;
            let mut arms = Vec::new();
            for path in &scores {
                let name = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().trim_start_matches("scores_").to_string())
                    .unwrap_or_default();
                if arms.iter().any(|(n, _)| n == &name) {
                    return Err(usage(format!("two score files share the name `{name}`")));
                }
                arms.push((name, read_scores_csv(path)?));
            }
            let cmp = evaluate_arms(&arms, &labels, &ctx.out)?;
            for a in &cmp.arms {
                println!("{}\tAUC {:.4}", a.name, a.metrics.auc);
            }
        }
        Command::AttentionExport {
            common,
            checkpoint,
            subset,
        } => {
            let ctx = common.resolve()?;
            let ckpt = checkpoint_path(&checkpoint, &ctx)?;
            let pg = load_checkpoint::<f32>(&ckpt)?;
            let ids = subset_ids(&ctx.data, &ctx, subset)?;
            let samples = load_samples(&ctx.data, &ids, &ctx.cfg.preprocess)?;
            ctx.cfg.echo(&ctx.out)?;
            attention_export(&pg, &samples, Some(&ctx.out))?;
        }
        Command::Crossval(common) => {
            let ctx = common.resolve()?;
            let report = crossval(&ctx.cfg, &ctx.data, ctx.seed, &ctx.out)?;
            for a in &report.comparison.arms {
                println!("{}\tAUC {:.4}", a.name, a.metrics.auc);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = std::env::var("COLEARN_THREADS").ok().filter(|s| !s.is_empty()) {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: COLEARN_THREADS must be a positive integer, got `{n}`");
                return ExitCode::from(1);
            }
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
