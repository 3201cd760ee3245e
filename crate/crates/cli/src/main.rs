use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pmf_core::data::{generate_synthetic_pair, write_kg_pair, SyntheticSpec};
use pmf_core::experiment::{
    cap_range, evaluate_run, format_report, report, run_training, sweep_delta, write_json, ExperimentConfig,
};
use pmf_core::{Modality, PmfError, Result};

#[derive(Parser)]
#[command(name = "pmf", version, about = "Multi-modal entity alignment with progressive modality freezing")]
struct Cli {
    /// Overrides the random seed of the config or spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config file (TOML). For `generate`, a synthetic spec.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root for default output directories.
    #[arg(long, global = true, env = "PMF_OUT_ROOT", default_value = "runs")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    /// frm, iff, rff, cm or static_integration=epoch:N. Repeatable.
    #[arg(long = "ablate")]
    ablate: Vec<String>,
    /// Comma separated modalities to drop.
    #[arg(long = "drop-modalities", value_delimiter = ',')]
    drop_modalities: Vec<Modality>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic dataset pair.
    Generate {
        /// Synthetic spec file; `--config` is accepted too.
        spec: Option<PathBuf>,
    },
    /// Trains one configuration into a run directory.
    Train {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Recomputes test metrics of a run directory.
    Evaluate {
        run: PathBuf,
        /// Also writes one-to-one greedy matches of the test entities.
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        dump_embeddings: bool,
    },
    /// One run per threshold cap.
    SweepDelta {
        /// Explicit caps, comma separated.
        #[arg(long, value_delimiter = ',')]
        caps: Vec<f64>,
        #[arg(long, default_value_t = 0.1)]
        cap_start: f64,
        #[arg(long, default_value_t = 0.95)]
        cap_end: f64,
        #[arg(long, default_value_t = 0.05)]
        cap_step: f64,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Merges the metrics of several run directories.
    Report { runs: Vec<PathBuf> },
}

fn load_config(cli: &Cli, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    for a in &overrides.ablate {
        cfg.apply_ablation(a)?;
    }
    for m in &overrides.drop_modalities {
        if !cfg.ablation.drop_modalities.contains(m) {
            cfg.ablation.drop_modalities.push(*m);
        }
    }
    if let Some(p) = cfg.dataset.path.take() {
        let abs = fs::canonicalize(&p).map_err(|_| PmfError::MissingFile(p))?;
        cfg.dataset.path = Some(abs);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg_dir: Option<&Path>, default_name: &str) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg_dir.map(Path::to_path_buf))
        .unwrap_or_else(|| cli.out_root.join(default_name))
}

fn generate(cli: &Cli, spec: Option<&PathBuf>) -> Result<()> {
    let path = spec.or(cli.config.as_ref());
    let mut spec = match path {
        Some(p) => {
            if !p.exists() {
                return Err(PmfError::MissingFile(p.clone()));
            }
            let text = fs::read_to_string(p).map_err(|e| PmfError::Config(format!("{}: {e}", p.display())))?;
            toml::from_str::<SyntheticSpec>(&text).map_err(|e| PmfError::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    let generated = generate_synthetic_pair(&spec)?;
    let dir = out_dir(cli, None, "dataset");
    write_kg_pair(&dir, &generated.pair)?;
    let p = &generated.pair;
    println!("wrote {}", dir.display());
    println!(
        "entities {}/{}  triples {}/{}  pairs {}",
        p.source.n_entities,
        p.target.n_entities,
        p.source.triples.len(),
        p.target.triples.len(),
        p.pairs.len()
    );
    for m in Modality::ALL {
        println!("corrupted {m}: {}", generated.labels.count(m));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { spec } => generate(cli, spec.as_ref()),
        Command::Train { overrides } => {
            let cfg = load_config(cli, overrides)?;
            let name = format!("run-{}", &cfg.hash()?[..12]);
            let dir = out_dir(cli, cfg.output.dir.as_deref(), &name);
            let outcome = run_training(&cfg, &dir)?;
            let m = &outcome.metrics.test.mean;
            println!("wrote {}", dir.display());
            println!("test H@1 {:.4}  H@10 {:.4}  MRR {:.4}", m.hits1, m.hits10, m.mrr);
            Ok(())
        }
        Command::Evaluate {
            run,
            greedy,
            dump_embeddings,
        } => {
            let out = evaluate_run(run, *greedy, *dump_embeddings)?;
            write_json(&run.join("evaluation.json"), &out.metrics)?;
            let m = &out.metrics.mean;
            println!("test H@1 {:.4}  H@10 {:.4}  MRR {:.4}", m.hits1, m.hits10, m.mrr);
            if let Some(g) = out.matches {
                let correct = g.matches.iter().filter(|(s, t, _)| s == t).count();
                println!("greedy matches {}  identical ids {correct}", g.matches.len());
            }
            Ok(())
        }
        Command::SweepDelta {
            caps,
            cap_start,
            cap_end,
            cap_step,
            overrides,
        } => {
            let cfg = load_config(cli, overrides)?;
            let caps = if caps.is_empty() {
                cap_range(*cap_start, *cap_end, *cap_step)?
            } else {
                caps.clone()
            };
            let dir = out_dir(cli, None, "sweep");
            let rows = sweep_delta(&cfg, &caps, &dir)?;
            for r in rows {
                let f = r.img_frozen_ratio.map_or("-".to_string(), |x| format!("{x:.4}"));
                println!("cap {:.2}  img frozen {f}  H@1 {:.4}", r.cap, r.hits1);
            }
            Ok(())
        }
        Command::Report { runs } => {
            if runs.is_empty() {
                return Err(PmfError::Config("report needs at least one run directory".into()));
            }
            let rows = report(runs, cli.out.as_deref())?;
            print!("{}", format_report(&rows));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
