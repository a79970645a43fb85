use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tagrank::pipeline::{self, ExperimentConfig, Method, MethodReport};
use tagrank::synthgen::{generate, SynthSpec};
use tagrank::Error;

/// Personalized tag ranking experiments.
#[derive(Parser)]
#[command(name = "tagrank", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, default_value = "run")]
    dir: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Filter the raw corpus, split it and write the artifacts.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Raw record file (overrides the config).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train tag embeddings and per-user ranking models.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate methods on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of ranker,ptrerank,candidates_only,random_user.
        #[arg(long, value_delimiter = ',', default_value = "ranker,ptrerank,candidates_only")]
        methods: Vec<String>,
        /// Report path (defaults to <dir>/report.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare each user's model with a randomly drawn other user's model.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the candidate list of one image as CSV.
    DumpCandidates {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: String,
    },
    /// Print per-tag statistics of the training split as CSV.
    DumpStats {
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic corpus with planted user preferences.
    Synth {
        /// Output record file.
        #[arg(long)]
        out: PathBuf,
        /// Optional directory for the latent ground truth.
        #[arg(long)]
        truth_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        users: usize,
        #[arg(long, default_value_t = 40)]
        images_per_user: usize,
        #[arg(long, default_value_t = 300)]
        vocab_size: usize,
        #[arg(long, default_value_t = 10)]
        tags_per_image: usize,
        #[arg(long, default_value_t = 30)]
        visible_tags: usize,
        #[arg(long, default_value_t = 3.0)]
        scene_focus: f64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::from_toml_file(path)?,
        None => {
            let saved = common.dir.join(pipeline::CONFIG_FILE);
            if saved.exists() {
                ExperimentConfig::from_toml_file(saved)?
            } else {
                ExperimentConfig::default()
            }
        }
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn print_reports(reports: &[MethodReport<f64>], k: usize) {
    println!(
        "{:<22} {:>7} {:>10} {:>10} {:>10} {:>10}  paired t-test",
        "config",
        "n_tags",
        "dcg/img",
        format!("dcg{k}/img"),
        "dcg/user",
        format!("dcg{k}/user"),
    );
    for r in reports {
        let e = &r.report;
        let test = match (&r.compared_to, &r.test) {
            (Some(other), Some(t)) => format!("vs {other}: t={:.3} p={:.3e}", t.t_statistic, t.p_value),
            _ => String::new(),
        };
        println!(
            "{:<22} {:>7} {:>10.4} {:>10.4} {:>10.4} {:>10.4}  {}",
            e.label, e.n_tags, e.dcg_per_image, e.dcg_at_k_per_image, e.dcg_per_user, e.dcg_at_k_per_user, test
        );
    }
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>, Error> {
    names.iter().map(|n| n.trim().parse()).collect()
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Prepare { common, corpus } => {
            let mut config = load_config(&common)?;
            if let Some(c) = corpus {
                config.corpus = c;
            }
            let summary = pipeline::cmd_prepare(&config, &common.dir)?;
            println!("{summary}");
        }
        Command::Train { common } => {
            let config = load_config(&common)?;
            let skipped = pipeline::cmd_train(&config, &common.dir)?;
            for s in &skipped {
                println!("skipped {} ({}): {}", s.user, s.variant, s.reason);
            }
            println!("models written to {}", common.dir.display());
        }
        Command::Evaluate { common, methods, out } => {
            let config = load_config(&common)?;
            let methods = parse_methods(&methods)?;
            let reports = pipeline::cmd_evaluate(&config, &common.dir, &methods, out.as_deref())?;
            print_reports(&reports, config.k);
        }
        Command::Ablate { common, out } => {
            let config = load_config(&common)?;
            let out = out.unwrap_or_else(|| common.dir.join("ablation.csv"));
            let reports =
                pipeline::cmd_evaluate(&config, &common.dir, &[Method::Ranker, Method::RandomUser], Some(&out))?;
            print_reports(&reports, config.k);
        }
        Command::DumpCandidates { common, image } => {
            let config = load_config(&common)?;
            pipeline::cmd_dump_candidates(&config, &common.dir, &image, io::stdout().lock())?;
        }
        Command::DumpStats { common } => {
            let config = load_config(&common)?;
            pipeline::cmd_dump_stats(&config, &common.dir, io::stdout().lock())?;
        }
        Command::Synth {
            out,
            truth_dir,
            users,
            images_per_user,
            vocab_size,
            tags_per_image,
            visible_tags,
            scene_focus,
            noise,
            seed,
        } => {
            let spec = SynthSpec {
                n_users: users,
                images_per_user,
                vocab_size,
                tags_per_image,
                visible_tags,
                scene_focus,
                noise,
                seed,
                ..SynthSpec::default()
            };
            let synth = generate::<f64>(&spec)?;
            synth.write_records(File::create(&out)?)?;
            if let Some(dir) = truth_dir {
                write_truth(&synth.truth, &dir)?;
            }
            println!("wrote {} records to {}", synth.records.len(), out.display());
        }
    }
    io::stdout().flush()?;
    Ok(())
}

fn write_truth(truth: &tagrank::synthgen::LatentTruth<f64>, dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    truth.write_user_csv(File::create(dir.join("user_weights.csv"))?)?;
    truth.write_tag_csv(File::create(dir.join("tag_latents.csv"))?)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
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

fn exit_code(e: &Error) -> u8 {
    if matches!(e, Error::InvalidArgument(_)) {
        1
    } else if e.is_data_error() {
        2
    } else {
        3
    }
}
