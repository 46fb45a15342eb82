use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mcbeit::ablate::{run_ablation, write_ablation_csv, Axis};
use mcbeit::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mcbeit::config::{parse_overrides, TrainConfig};
use mcbeit::data::{generate_toy_dataset, Dataset};
use mcbeit::eval::{append_results, fine_tune, linear_probe};
use mcbeit::gradcheck::{grad_check, GradCheckOptions, Precision};
use mcbeit::inspect::inspect_targets;
use mcbeit::netpbm::load_dataset_dir;
use mcbeit::train::{fit_tokenizer, pretrain, write_metrics_csv, TrainState};
use mcbeit::{Error, Result};

/// Environment variable naming the output directory (default `out`).
const OUT_ENV: &str = "MCBEIT_OUT";

#[derive(Parser)]
#[command(
    name = "mcbeit",
    version,
    about = "Multi-choice masked image modeling at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configuration overrides as `--key value` pairs, e.g. `--target.tau 2`.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "OVERRIDES"
    )]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig::load(self.config.as_deref(), &parse_overrides(&self.overrides)?)?;
        for key in cfg.unimplemented_keys() {
            eprintln!("warning: `{key}` is recorded but has no effect");
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit the k-means tokenizer and save it as a codebook-only checkpoint.
    TokenizerFit {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pre-train the encoder; writes metrics.csv and checkpoints.
    Pretrain {
        /// Codebook checkpoint to use instead of fitting one.
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Continue from a checkpoint (optimizer moments restart at zero).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Linear probe on frozen features; appends to results.csv.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "probe")]
        run_id: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fine-tune all layers with layer-wise lr decay; appends to results.csv.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "finetune")]
        run_id: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sweep one hyper-parameter; writes ablation_<axis>.csv.
    Ablate {
        /// tau | omega | mask
        #[arg(long)]
        axis: String,
        /// Comma-separated values (mask values read `strategy:ratio`).
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Dump token ids, targets and the affinity heatmap for one image.
    InspectTargets {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Compare analytic gradients with central finite differences.
    GradCheck {
        #[arg(long, default_value = "f64")]
        precision: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Entries probed per tensor.
        #[arg(long, default_value_t = 4)]
        samples: usize,
        /// Override of the equilibrium coefficient.
        #[arg(long)]
        omega: Option<f64>,
        /// Only check tensors whose name starts with this prefix.
        #[arg(long)]
        prefix: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn out_dir() -> Result<PathBuf> {
    let dir = PathBuf::from(std::env::var(OUT_ENV).unwrap_or_else(|_| "out".into()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn dataset(cfg: &TrainConfig) -> Result<Dataset> {
    match &cfg.data.dir {
        Some(dir) => load_dataset_dir(dir, cfg.data.image_size, cfg.data.channels),
        None => generate_toy_dataset(&cfg.dataset_spec()),
    }
}

/// Checkpoint config with command-line overrides applied on top.
fn checkpoint_config(ck: &Checkpoint, args: &ConfigArgs) -> Result<TrainConfig> {
    let mut pairs: Vec<(String, String)> = ck
        .config
        .to_pairs()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    if let Some(path) = &args.config {
        pairs.extend(TrainConfig::parse_text(&std::fs::read_to_string(path)?)?);
    }
    pairs.extend(parse_overrides(&args.overrides)?);
    TrainConfig::from_pairs(&pairs)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::TokenizerFit { cfg } => {
            let cfg = cfg.load()?;
            let data = dataset(&cfg)?;
            let (codebook, report) = fit_tokenizer(&cfg, &data.train)?;
            let path = out_dir()?.join("codebook.ckpt");
            save_checkpoint(
                &path,
                &Checkpoint {
                    config: cfg,
                    step: 0,
                    params: None,
                    codebook: Some(codebook),
                },
            )?;
            println!(
                "codebook: {} ({} Lloyd steps, inertia {}, converged {})",
                path.display(),
                report.inertia.len(),
                report.final_inertia(),
                report.converged
            );
        }
        Command::Pretrain {
            codebook,
            resume,
            cfg,
        } => {
            let cfg = cfg.load()?;
            let out = out_dir()?;
            let data = dataset(&cfg)?;
            let codebook = match codebook {
                Some(p) => load_checkpoint(&p)?.require_codebook()?.clone(),
                None => fit_tokenizer(&cfg, &data.train)?.0,
            };
            let mut state = match resume {
                Some(p) => {
                    let ck = load_checkpoint(&p)?;
                    TrainState::from_params(ck.require_params()?.clone(), cfg.seed, ck.step)
                }
                None => TrainState::new(&cfg)?,
            };
            let save = |path: &Path, state: &TrainState| {
                save_checkpoint(
                    path,
                    &Checkpoint {
                        config: cfg.clone(),
                        step: state.step,
                        params: Some(state.params.clone()),
                        codebook: Some(codebook.clone()),
                    },
                )
            };
            let metrics = pretrain(&cfg, &codebook, &data.train, &mut state, |epoch, st| {
                if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                    save(&out.join(format!("epoch{epoch:04}.ckpt")), st)?;
                }
                Ok(())
            })?;
            write_metrics_csv(&out.join("metrics.csv"), &metrics)?;
            save(&out.join("final.ckpt"), &state)?;
            if let (Some(first), Some(last)) = (metrics.first(), metrics.last()) {
                println!(
                    "pretrain: {} steps, loss {} -> {}, checkpoint {}",
                    metrics.len(),
                    first.loss,
                    last.loss,
                    out.join("final.ckpt").display()
                );
            }
        }
        Command::Probe {
            checkpoint,
            run_id,
            cfg,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = checkpoint_config(&ck, &cfg)?;
            let data = dataset(&cfg)?;
            let row = linear_probe(&cfg, ck.require_params()?, &data, &run_id)?;
            append_results(&out_dir()?.join("results.csv"), std::slice::from_ref(&row))?;
            println!("{}", row.to_csv());
        }
        Command::Finetune {
            checkpoint,
            run_id,
            cfg,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = checkpoint_config(&ck, &cfg)?;
            let data = dataset(&cfg)?;
            let (row, params) = fine_tune(&cfg, ck.require_params()?, &data, &run_id)?;
            let out = out_dir()?;
            append_results(&out.join("results.csv"), std::slice::from_ref(&row))?;
            save_checkpoint(
                &out.join("finetuned.ckpt"),
                &Checkpoint {
                    params: Some(params),
                    ..ck
                },
            )?;
            println!("{}", row.to_csv());
        }
        Command::Ablate { axis, values, cfg } => {
            let axis: Axis = axis
                .parse()
                .map_err(|e: String| Error::InvalidArgument(e))?;
            let cfg = cfg.load()?;
            let values = if values.is_empty() {
                axis.default_values()
            } else {
                values
            };
            let data = dataset(&cfg)?;
            let (codebook, _) = fit_tokenizer(&cfg, &data.train)?;
            let rows = run_ablation(&cfg, axis, &values, &data, &codebook, |r| {
                eprintln!(
                    "{axis}={}: top1 {} final loss {}",
                    r.value, r.top1, r.final_loss
                );
            })?;
            let path = out_dir()?.join(format!("ablation_{axis}.csv"));
            write_ablation_csv(&path, &rows)?;
            println!("ablation: {}", path.display());
        }
        Command::InspectTargets { checkpoint, index } => {
            let ck = load_checkpoint(&checkpoint)?;
            let data = dataset(&ck.config)?;
            let dir = out_dir()?.join("inspect");
            let s = inspect_targets(
                &ck.config,
                ck.require_params()?,
                ck.require_codebook()?,
                &data.train,
                index,
                &dir,
            )?;
            println!(
                "image {}: {} masked, mean entropy of targets {} (tokenizer {}; log V {})",
                s.index, s.masked, s.mean_entropy_z_hat, s.mean_entropy_p, s.log_vocab
            );
            for f in &s.files {
                println!("  {}", f.display());
            }
        }
        Command::GradCheck {
            precision,
            seed,
            samples,
            omega,
            prefix,
            cfg,
        } => {
            let precision: Precision = precision
                .parse()
                .map_err(|e: String| Error::InvalidArgument(e))?;
            let cfg = cfg.load()?;
            let opts = GradCheckOptions {
                samples_per_tensor: samples,
                omega,
                prefix,
                ..Default::default()
            };
            let r = grad_check(&cfg, seed, precision, &opts)?;
            for t in &r.tensors {
                println!(
                    "{:32} checked {:2}  max rel {:.3e}  max abs {:.3e}",
                    t.name, t.checked, t.max_rel_err, t.max_abs_err
                );
            }
            let bound = match precision {
                Precision::F64 => 1e-6,
                Precision::F32 => 1e-4,
            };
            let pass = r.max_rel_err < bound;
            println!(
                "grad-check {}: {} entries, max relative error {:.3e} (bound {:.0e}) in {:.1}s: {}",
                r.precision,
                r.entries_checked(),
                r.max_rel_err,
                bound,
                r.elapsed_secs,
                if pass { "PASS" } else { "FAIL" }
            );
            if !pass {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
