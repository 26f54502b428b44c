use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hatexfer::embeddings::{encode, load_embeddings, tokenize};
use hatexfer::evaluation::compare;
use hatexfer::experiments::{
    collect_reports, desk_config, prepare, run_bootstrap, run_crosslingual, run_evaluate, run_imbalance_sweep,
    sample_english, sample_sweep, ExperimentConfig, ExperimentError, Run, Stage,
};
use hatexfer::synthetic::{write_world, World, WorldConfig};

#[derive(Parser)]
#[command(name = "hatexfer", version, about = "Zero-shot cross-lingual hate speech detection pipeline")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config's seed and every seed derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Relabel and split every configured corpus into prepared/*.tsv.
    Prepare,
    /// Write the resampled training sets into sampled/.
    Sample,
    /// Train on English and evaluate zero-shot on DE-TEST.
    Train,
    /// Ensemble-label German text, fine-tune and compare on DE-TEST.
    Bootstrap,
    /// Evaluate saved checkpoints on DE-TEST.
    Evaluate {
        /// Checkpoint directory; repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
    },
    /// Monolingual imbalance sweep over the configured sampling specs.
    Sweep,
    /// Compare every report below a directory (default: <out>/reports).
    Report {
        #[arg(long)]
        reports: Option<PathBuf>,
        /// Report to diff against; index in path order.
        #[arg(long, default_value_t = 0)]
        baseline: usize,
    },
    /// Tokenize and encode text (one post per line, stdin or --text).
    Encode {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long = "max-len")]
        max_len: usize,
        #[arg(long)]
        text: Option<String>,
    },
    /// Write a synthetic fixture tree and desk-scale configs into --out.
    Synth {
        #[arg(long, default_value_t = 300)]
        forum_posts: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_run(cli: &Cli) -> Result<Run, ExperimentError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| ExperimentError::Validation("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    let seed = cli.seed.unwrap_or(cfg.seed);
    cfg.apply_seed(seed);
    Run::new(cfg)
}

fn print(text: &str) -> Result<(), ExperimentError> {
    io::stdout()
        .write_all(text.as_bytes())
        .map_err(|e| ExperimentError::Io {
            path: "stdout".into(),
            source: e,
        })
}

fn dispatch(cli: Cli) -> Result<(), ExperimentError> {
    match &cli.command {
        Command::Prepare => {
            let run = load_run(&cli)?;
            let p = prepare(&run)?;
            let mut out = String::new();
            if let Some(en) = &p.en {
                for ds in [&en.train, &en.dev, &en.test, &en.unassigned] {
                    out += &format!("{}\t{}\n", ds.name, ds.class_counts());
                }
            }
            for ds in [&p.de_train, &p.de_dev, &p.de_test] {
                out += &format!("{}\t{}\n", ds.name, ds.class_counts());
            }
            if let Some(ds) = &p.de_new {
                out += &format!("{}\t{} unlabelled\n", ds.name, ds.len());
            }
            print(&out)
        }
        Command::Sample => {
            let run = load_run(&cli)?;
            let p = prepare(&run)?;
            let mut out = String::new();
            if p.en.is_some() {
                let ds = sample_english(&run, &p)?;
                out += &format!("{}\t{}\n", ds.name, ds.class_counts());
            }
            for (_, ds) in sample_sweep(&run, &p)? {
                out += &format!("{}\t{}\n", ds.name, ds.class_counts());
            }
            print(&out)
        }
        Command::Train => {
            let run = load_run(&cli)?;
            let r = run_crosslingual(&run)?;
            print(&compare(&r.reports, 0)?.to_text())
        }
        Command::Bootstrap => {
            let run = load_run(&cli)?;
            let r = run_bootstrap(&run)?;
            let mut out = String::new();
            for b in &r.labelled {
                out += &format!("{}\t{}\t{} dropped\n", b.dataset.name, b.dataset.class_counts(), b.dropped.len());
            }
            if let Some(a) = &r.audit {
                out += &a.to_text();
            }
            for s in &r.lr_selection {
                out += &format!("{}: fine-tuning learning rate {:e}\n", s.architecture, s.chosen);
            }
            for (b, a) in r.before.iter().zip(&r.after) {
                out += &compare(&[b.clone(), a.clone()], 0)?.to_text();
            }
            print(&out)
        }
        Command::Evaluate { models } => {
            let run = load_run(&cli)?;
            let reports = run_evaluate(&run, models)?;
            print(&compare(&reports, 0)?.to_text())
        }
        Command::Sweep => {
            let run = load_run(&cli)?;
            let reports = run_imbalance_sweep(&run)?;
            print(&compare(&reports, 0)?.to_text())
        }
        Command::Report { reports, baseline } => {
            let dir = match (reports, &cli.out, &cli.config) {
                (Some(d), _, _) => d.clone(),
                (None, Some(out), _) => out.join("reports"),
                (None, None, Some(_)) => load_run(&cli)?.cfg.out_dir.join("reports"),
                (None, None, None) => {
                    return Err(ExperimentError::Validation("give --reports, --out or --config".into()))
                }
            };
            if !dir.is_dir() {
                return Err(ExperimentError::Validation(format!("{} is not a directory", dir.display())));
            }
            let found = collect_reports(&dir)?;
            if found.is_empty() {
                return Err(ExperimentError::Validation(format!("no reports below {}", dir.display())));
            }
            let c = compare(&found, *baseline)?;
            print(&c.to_text())
        }
        Command::Encode { emb, max_len, text } => {
            if *max_len == 0 {
                return Err(ExperimentError::Validation("--max-len must be at least 1".into()));
            }
            if !emb.exists() {
                return Err(ExperimentError::Validation(format!("{} does not exist", emb.display())));
            }
            let table = load_embeddings(emb, None)?;
            let lines: Vec<String> = match text {
                Some(t) => vec![t.clone()],
                None => io::stdin()
                    .lock()
                    .lines()
                    .collect::<Result<_, _>>()
                    .map_err(|e| io_err(Path::new("stdin"), e))?,
            };
            let mut out = String::new();
            for line in lines {
                let tokens = tokenize(&line);
                let enc = encode(&tokens, &table, *max_len);
                let json = serde_json::json!({
                    "tokens": tokens,
                    "indices": enc.indices,
                    "true_length": enc.true_length,
                });
                out += &format!("{json}\n");
            }
            print(&out)
        }
        Command::Synth { forum_posts } => {
            let out = cli
                .out
                .clone()
                .ok_or_else(|| ExperimentError::Validation("--out is required".into()))?;
            let mut wc = WorldConfig::default();
            if let Some(seed) = cli.seed {
                wc.seed = seed;
            }
            let world = World::new(&wc);
            write_world(&world, &out.join("world"), *forum_posts)?;
            let seed = cli.seed.unwrap_or(1);
            for (stage, file) in [
                (Stage::Crosslingual, "crosslingual.toml"),
                (Stage::Bootstrap, "bootstrap.toml"),
                (Stage::ImbalanceSweep, "sweep.toml"),
            ] {
                let path = out.join(file);
                std::fs::write(&path, desk_config(stage, seed)).map_err(|e| io_err(&path, e))?;
            }
            print(&format!("synthetic fixtures and configs written to {}\n", out.display()))
        }
    }
}

fn io_err(path: &Path, source: io::Error) -> ExperimentError {
    ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}
