use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ground3d::pipeline::{evaluate, export_viz, load_checkpoint, run_ablation, train, TrainConfig};
use ground3d::synth_data::{generate_corpus, Corpus, GenConfig};
use ground3d::Error;

/// Weakly supervised 3D visual grounding on synthetic scenes.
#[derive(Parser)]
#[command(name = "ground3d", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (JSONL plus vocabulary, metadata and embedding sidecars).
    GenData {
        #[arg(long)]
        scenes: usize,
        #[arg(long)]
        seed: u64,
        /// Generator config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write best.ckpt and train_log.jsonl to the output directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint and write the recall report as CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Extra checkpoints (e.g. MIL baselines) reported alongside.
        #[arg(long = "baseline")]
        baselines: Vec<PathBuf>,
    },
    /// Train the ablation rows and write their recall table as CSV.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Corpus to evaluate on; the training corpus when omitted.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Write the boxes and scores of one scene as JSON for an external viewer.
    ExportViz {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene_id: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        nms_iou: f64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 3,
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

fn load_gen_config(path: Option<&Path>) -> ground3d::Result<GenConfig> {
    let Some(path) = path else {
        return Ok(GenConfig::default());
    };
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> ground3d::Result<()> {
    match cli.command {
        Command::GenData {
            scenes,
            seed,
            config,
            out,
        } => {
            let gen = load_gen_config(config.as_deref())?;
            let corpus = generate_corpus(&gen, scenes, seed)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            corpus.write(&out)?;
            log::info!(
                "wrote {} scenes and {} sentences to {}",
                corpus.records.len(),
                corpus.num_sentences(),
                out.display()
            );
        }
        Command::Train {
            data,
            config,
            out,
            seed,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let corpus = Corpus::read(&data)?;
            let outcome = train(&corpus, &cfg, Some(&out))?;
            log::info!("best epoch {} written to {}", outcome.best_epoch, out.join("best.ckpt").display());
        }
        Command::Eval {
            ckpt,
            data,
            report,
            baselines,
        } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let others = baselines
                .iter()
                .map(|p| load_checkpoint(p).map(|(m, _)| m))
                .collect::<ground3d::Result<Vec<_>>>()?;
            let corpus = Corpus::read(&data)?;
            let refs: Vec<_> = others.iter().collect();
            let r = evaluate(&model, &corpus, &refs)?;
            std::fs::write(&report, r.to_csv())?;
        }
        Command::Ablate {
            data,
            config,
            out,
            eval_data,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let corpus = Corpus::read(&data)?;
            let eval_corpus = match eval_data {
                Some(p) => Corpus::read(&p)?,
                None => corpus.clone(),
            };
            let r = run_ablation(&corpus, &eval_corpus, &cfg)?;
            std::fs::write(&out, r.to_csv())?;
        }
        Command::ExportViz {
            data,
            ckpt,
            scene_id,
            out,
            nms_iou,
        } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let corpus = Corpus::read(&data)?;
            let viz = export_viz(&model, &corpus, &scene_id, nms_iou)?;
            std::fs::write(&out, serde_json::to_vec_pretty(&viz)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
