use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand};
use uda_core::data::{self, Recipe, SOURCE_TRAIN, TARGET_TRAIN};
use uda_core::harness::{aggregate, csv_rows, evaluate, text_table, train, EvalReport, Model, StepLog, TrainConfig};

const CHECKPOINT: &str = "checkpoint.json";
const BEST_CHECKPOINT: &str = "best.json";
const LOG_FILE: &str = "train_log.csv";
const CONFIG_FILE: &str = "config.txt";
const REPORT_SUFFIX: &str = "report.json";

#[derive(Parser)]
#[command(name = "uda", version, about = "Domain-adaptive object detection on synthetic terrain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a dataset (source_train, target_train, target_test) from a named recipe.
    Generate {
        /// mini-mars or mini-asteroid
        #[arg(long)]
        recipe: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        source_train: Option<usize>,
        #[arg(long)]
        target_train: Option<usize>,
        #[arg(long)]
        target_test: Option<usize>,
    },
    /// Train one method; trailing `--key value` pairs override the config file.
    Train {
        /// `key = value` config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints and the step log.
        #[arg(long)]
        out: PathBuf,
        /// Labeled split used to pick the best checkpoint every `val_every` epochs.
        #[arg(long)]
        val_split: Option<String>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on a labeled split and write an evaluation report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "target_test")]
        split: String,
        /// Where to write the JSON report; only the summary is printed when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.25)]
        conf: f64,
        #[arg(long, default_value_t = 0.7)]
        nms_iou: f64,
        #[arg(long, default_value_t = 0.5)]
        map_iou: f64,
    },
    /// Aggregate evaluation reports (files, or directories searched for
    /// `*report.json`) into one row per method.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Also write the rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Command::Train { overrides, .. } = &cli.command {
        if let Err(msg) = check_overrides(overrides) {
            eprintln!("error: {msg}\n");
            let mut cmd = Cli::command();
            cmd.build();
            if let Some(train) = cmd.find_subcommand_mut("train") {
                eprintln!("{}", train.render_help());
            }
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Rejects override tokens that are not `--known_key value` pairs.
fn check_overrides(args: &[String]) -> std::result::Result<(), String> {
    let mut it = args.iter();
    while let Some(tok) = it.next() {
        let Some(flag) = tok.strip_prefix("--") else {
            return Err(format!("unexpected argument `{tok}`"));
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, _)) => (k, true),
            None => (flag, false),
        };
        if !TrainConfig::KEYS.contains(&key.replace('-', "_").as_str()) {
            return Err(format!("unknown flag `--{key}`"));
        }
        if !inline && it.next().is_none() {
            return Err(format!("missing value for `--{key}`"));
        }
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate {
            recipe,
            seed,
            out,
            source_train,
            target_train,
            target_test,
        } => {
            let mut r = Recipe::named(&recipe)?;
            r = r.clone().with_sizes(
                source_train.unwrap_or(r.source_train),
                target_train.unwrap_or(r.target_train),
                target_test.unwrap_or(r.target_test),
            );
            let s = data::generate(&r, seed, &out)?;
            println!(
                "wrote {} images with {} objects to {}",
                s.images,
                s.objects,
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            data: dir,
            out,
            val_split,
            overrides,
        } => train_command(config.as_deref(), &dir, &out, val_split.as_deref(), &overrides),
        Command::Eval {
            checkpoint,
            data: dir,
            split,
            out,
            conf,
            nms_iou,
            map_iou,
        } => {
            let model = Model::load(&checkpoint)?;
            let images = data::read_dataset(&dir, &split)?;
            let report = evaluate(&model, &images, conf, nms_iou, map_iou)?;
            for c in &report.per_class {
                match c.ap {
                    Some(ap) => println!("{:<10} AP@{map_iou} {ap:.4} ({} gt, {} det)", c.name, c.ground_truth, c.detections),
                    None => println!("{:<10} absent from ground truth", c.name),
                }
            }
            println!("mAP@{map_iou} {:.4}", report.map);
            if let Some(path) = out {
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
                }
                report.save(&path)?;
            }
            Ok(())
        }
        Command::Report { inputs, csv } => {
            let mut reports = Vec::new();
            for input in &inputs {
                collect_reports(input, &mut reports)?;
            }
            if reports.is_empty() {
                bail!("no evaluation reports found");
            }
            let rows = aggregate(&reports);
            print!("{}", text_table(&rows));
            if let Some(path) = csv {
                fs::write(&path, csv_rows(&rows)).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
    }
}

fn collect_reports(path: &Path, out: &mut Vec<EvalReport>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            let is_report = p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(REPORT_SUFFIX));
            if p.is_dir() || is_report {
                collect_reports(&p, out)?;
            }
        }
        return Ok(());
    }
    out.push(EvalReport::load(path)?);
    Ok(())
}

fn train_command(config: Option<&Path>, dir: &Path, out: &Path, val_split: Option<&str>, overrides: &[String]) -> Result<()> {
    let mut cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_text(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    let manifest = data::read_manifest(dir)?;
    let source = data::read_dataset(dir, SOURCE_TRAIN)?;
    let target = data::read_dataset(dir, TARGET_TRAIN)?;
    let validation = val_split.map(|s| data::read_dataset(dir, s)).transpose()?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    let log_path = out.join(LOG_FILE);
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log, "{}", StepLog::CSV_HEADER)?;
    let mut write_err = None;
    log::info!("training {} (config {})", cfg.method, cfg.fingerprint());
    let outcome = train(&cfg, &manifest.classes, &source, &target, validation.as_deref(), |s| {
        if let Err(e) = writeln!(log, "{}", s.csv_line()) {
            write_err.get_or_insert(e);
        }
        if s.step % 25 == 0 {
            log::info!("step {} L_total {:.4} L_yolo {:.4} lr {:.5}", s.step, s.total, s.yolo, s.lr);
        }
    });
    log.flush()?;
    if let Some(e) = write_err {
        return Err(e).context("writing step log");
    }
    let outcome = outcome?;
    let path = out.join(CHECKPOINT);
    outcome.model.save(&path)?;
    println!("wrote {}", path.display());
    if let Some((map, epoch, store)) = outcome.best {
        let mut best = outcome.model.clone();
        best.store = store;
        let p = out.join(BEST_CHECKPOINT);
        best.save(&p)?;
        println!("best validation mAP@0.5 {map:.4} at epoch {epoch}, wrote {}", p.display());
    }
    Ok(())
}
