use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use yolco_cli::commands::{self, Run};
use yolco_cli::{CliError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "yolco", version, about = "Synthetic smear-slide screening pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of train-val-test loops.
    #[arg(long, global = true)]
    repeats: Option<usize>,
    /// Overwrite existing generated data.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    tile_side: Option<usize>,
    #[arg(long, global = true)]
    collect_n: Option<usize>,
    #[arg(long, global = true)]
    collect_d: Option<f64>,
    /// topn | bbox
    #[arg(long, global = true)]
    collect_mode: Option<String>,
    /// svm | rnn | lstm | transformer
    #[arg(long, global = true)]
    classifier: Option<String>,
    /// none | skip | half_inc | inc
    #[arg(long, global = true)]
    connection_mode: Option<String>,
    /// dual | cls_only
    #[arg(long, global = true)]
    loss_mode: Option<String>,
    /// Which loop of a repeated run a single stage works on.
    #[arg(long, global = true, default_value_t = 0)]
    repeat: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Draw synthetic slides, manifests, annotations and the split.
    GenData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        pos_fraction: Option<f64>,
    },
    /// Train the patch-level detector.
    TrainDetector,
    /// Detector mAP on fixed crops of a split.
    EvalPatch {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Tile, encode and collect a feature sequence for every slide.
    EncodeWsi,
    /// Train the slide classifier on the training split's sequences.
    TrainClassifier,
    /// Slide-level metrics and ROC on a split.
    EvalWsi {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Sweep connection mode, loss mode and collection settings.
    Ablate,
    /// Gather plot-ready CSVs of a finished loop.
    PlotData,
    /// Every stage after data generation, for each repeat.
    Run,
}

fn resolve(g: &Global) -> Result<RunConfig, CliError> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Overrides {
        seed: g.seed,
        repeats: g.repeats,
        tile_side: g.tile_side,
        collect_n: g.collect_n,
        collect_d: g.collect_d,
        collect_mode: g.collect_mode.clone(),
        classifier: g.classifier.clone(),
        connection_mode: g.connection_mode.clone(),
        loss_mode: g.loss_mode.clone(),
    }
    .apply(&mut cfg)?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = resolve(&cli.global)?;
    if let Command::GenData { count, pos_fraction } = &cli.command {
        if let Some(c) = count {
            cfg.data.count = *c;
        }
        if let Some(p) = pos_fraction {
            cfg.data.pos_fraction = *p;
        }
    }
    cfg.validate()?;
    if cli.global.repeat >= cfg.repeats {
        return Err(CliError::Config(format!("--repeat {} is out of range for {} repeats", cli.global.repeat, cfg.repeats)));
    }
    let run = Run::new(&cfg, cli.global.repeat);
    match cli.command {
        Command::GenData { .. } => {
            let idx = commands::gen_data(&cfg, cli.global.force)?;
            let s = &idx.split;
            println!("{} slides: {} train, {} val, {} test", idx.slides.len(), s.train.len(), s.val.len(), s.test.len());
        }
        Command::TrainDetector => {
            commands::train_detector(&run)?;
        }
        Command::EvalPatch { split } => println!("{}\n{}", commands::PATCH_EVAL_HEADER, commands::eval_patch(&run, &split)?),
        Command::EncodeWsi => commands::encode_wsi(&run)?,
        Command::TrainClassifier => {
            commands::train_classifier_stage(&run)?;
        }
        Command::EvalWsi { split } => {
            let ev = commands::eval_wsi(&run, &split)?;
            println!("{}\n{}", yolco_core::metrics::METRICS_CSV_HEADER, ev.metrics.csv_row());
        }
        Command::Ablate => {
            println!("{}", commands::ABLATION_HEADER);
            for row in commands::ablate(&cfg)? {
                println!("{}", row.csv_row());
            }
        }
        Command::PlotData => commands::plot_data(&run)?,
        Command::Run => {
            for (r, ev) in commands::run_all(&cfg)?.iter().enumerate() {
                println!("repeat {r}: {}", ev.metrics.csv_row());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
