use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vipa::commands::{self, AblateArgs, Baseline, TrainArgs};
use vipa::config::{RunConfig, SEED_ENV};
use vipa::dataset::{load_sample, Dataset, SplitCounts, StoredSample};
use vipa::pnm::{Image, Kind};
use vipa::report::{metric_table, write_metric_csv};
use vipa::{Error, Result};
use vipa_core::encoders::SceneImage;
use vipa_core::scene::Split;

#[derive(Parser)]
#[command(name = "vipa", version, about = "Referring segmentation with visual informative part attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with manifest and vocabulary.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Train scenes.
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        val: usize,
        /// Scenes whose referent is a held-out attribute combination.
        #[arg(long, default_value_t = 0)]
        heldout: usize,
        /// Root seed; falls back to VIPA_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train on the train split, writing a checkpoint after every epoch.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// CSV log of step, seg_loss, contrastive_loss, lr.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// oIoU, mIoU and P@{0.5,0.7} of a checkpoint on one split.
    Eval {
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Score a trivial predictor (gt or background) instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        baseline: Option<Baseline>,
    },
    /// Predict one mask and write it as a 0/255 graymap.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample directory (image.ppm, expression.txt).
        #[arg(long, conflicts_with_all = ["image", "expression"])]
        sample: Option<PathBuf>,
        #[arg(long, requires = "expression")]
        image: Option<PathBuf>,
        #[arg(long, requires = "image")]
        expression: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate a grid of configurations.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "kv", value_delimiter = ',', default_values = ["vanilla_LE", "advanced_LE", "VE"])]
        kv_sources: Vec<String>,
        #[arg(long = "fusions", value_delimiter = ',', default_values = ["early"])]
        fusions: Vec<String>,
        #[arg(long = "ratios", value_delimiter = ',', default_values_t = [0.1, 0.3, 0.8])]
        ratios: Vec<f64>,
        /// Add cells with step1, step2, global_cue, local_cue, articles and
        /// contrastive switched off one at a time.
        #[arg(long)]
        toggles: bool,
        #[arg(long, default_value = "val", value_parser = parse_split)]
        eval_split: Split,
    },
    /// Relevance map, retrieval mask and decoder attention of one sample.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Run configuration sources, lowest precedence first: config file,
/// `VIPA_SEED`, `--set`, dedicated flags.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    kv_source: Option<String>,
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let mut cfg = RunConfig::default();
                cfg.apply_text(&text)?;
                cfg
            }
            None => RunConfig::default(),
        };
        cfg.apply_env()?;
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::usage(format!("--set expects key=value, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(Error::usage)?;
        }
        let flags: [(&str, Option<String>); 9] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("kv_source", self.kv_source.clone()),
            ("fusion", self.fusion.clone()),
            ("ratio", self.ratio.map(|v| v.to_string())),
            ("precision", self.precision.clone()),
            ("threads", self.threads.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v).map_err(Error::usage)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_all<T: std::str::FromStr<Err = vipa_core::Error>>(values: &[String]) -> Result<Vec<T>> {
    values.iter().map(|s| s.parse().map_err(|e: vipa_core::Error| Error::usage(e.to_string()))).collect()
}

fn required(path: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.or_else(|| fallback.clone()).ok_or_else(|| Error::usage(format!("--{what} is required (or set `{what}` in the config)")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { out, n, val, heldout, seed, size } => {
            let seed = match seed {
                Some(s) => s,
                None => match std::env::var(SEED_ENV) {
                    Ok(v) => v.trim().parse().map_err(|_| Error::usage(format!("{SEED_ENV}: cannot parse {v:?}")))?,
                    Err(_) => 0,
                },
            };
            let total = commands::gen(&out, seed, size, SplitCounts { train: n, val, held_out: heldout })?;
            println!("wrote {total} samples to {}", out.display());
        }
        Command::Train { run, data, checkpoint, log, resume } => {
            let cfg = run.resolve()?;
            let args = TrainArgs {
                data: required(data, &cfg.data, "data")?,
                checkpoint: required(checkpoint, &cfg.checkpoint, "checkpoint")?,
                log,
                resume,
            };
            let summary = commands::train(&cfg, &args)?;
            match summary.epochs.last() {
                Some(e) => println!("step {} epoch {} train mIoU {:.4}", summary.step, e.epoch, e.train_miou),
                None => println!("step {} (no epochs left to run)", summary.step),
            }
        }
        Command::Eval { checkpoint, data, split, csv, threads, baseline } => {
            let report = match (baseline, checkpoint) {
                (Some(b), _) => commands::evaluate_baseline(&Dataset::open(&data)?.load(split)?, b)?,
                (None, Some(ck)) => commands::evaluate(&ck, &data, split, threads)?,
                (None, None) => return Err(Error::usage("--checkpoint or --baseline is required")),
            };
            print!("{}", metric_table(&report));
            if let Some(path) = csv {
                write_metric_csv(&path, &report)?;
            }
        }
        Command::Infer { checkpoint, sample, image, expression, out } => {
            let stored = match (sample, image, expression) {
                (Some(dir), _, _) => load_sample(&dir)?,
                (None, Some(img), Some(text)) => {
                    let pix = Image::read(&img, Kind::Rgb)?;
                    let pixels = pix.data.iter().map(|&b| b as f64 / 255.0).collect();
                    StoredSample {
                        image: SceneImage::new(pix.height, pix.width, pixels)?,
                        mask: vec![false; pix.width * pix.height],
                        expression: text,
                    }
                }
                _ => return Err(Error::usage("give --sample, or --image with --expression")),
            };
            let mask = commands::infer(&checkpoint, &stored, &out)?;
            println!("{} of {} pixels predicted; mask written to {}", mask.iter().filter(|&&m| m).count(), mask.len(), out.display());
        }
        Command::Ablate { run, data, out, kv_sources, fusions, ratios, toggles, eval_split } => {
            let cfg = run.resolve()?;
            let args = AblateArgs {
                data: required(data, &cfg.data, "data")?,
                kv_sources: parse_all(&kv_sources)?,
                fusions: parse_all(&fusions)?,
                ratios,
                toggles,
                eval_split,
            };
            let rows = commands::ablate(&cfg, &args)?;
            commands::write_ablation_csv(&out, &rows)?;
            print!("{}", commands::ablation_summary(&rows));
        }
        Command::DumpAttention { checkpoint, sample, out } => {
            let dump = commands::dump_attention(&checkpoint, &load_sample(&sample)?, &out)?;
            println!(
                "wrote {} files to {}; grid {}×{}, mask rows {:?} (N_p {:?}), max decoder attention row-sum error {:.2e}",
                dump.files.len(),
                out.display(),
                dump.grid,
                dump.grid,
                dump.mask_row_sums,
                dump.n_p,
                dump.attention_row_error
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
