use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fdg_core::data::generate_corpus;
use fdg_core::federation::{evaluate, Method};
use fdg_core::harness::{self, output_path, ExperimentConfig};
use fdg_core::Result;

#[derive(Parser)]
#[command(name = "fdg", version, about = "Federated domain generalization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML config file; defaults are used when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set rounds=10 --set mode=stablefdg`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(path) => ExperimentConfig::load(path, &self.overrides),
            None => ExperimentConfig::parse("", &self.overrides),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and write it to a directory.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short, default_value = "corpus")]
        out: PathBuf,
    },
    /// Run one federation (config mode, seed and target_domain).
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short, default_value = "run")]
        out: PathBuf,
        /// Write attention maps of the first target-domain samples here.
        #[arg(long)]
        dump_attention: Option<PathBuf>,
        /// Number of samples for --dump-attention.
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
    /// Evaluate a checkpoint on every domain of the corpus.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Leave-one-domain-out sweep over modes, seeds and targets.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short, default_value = "ablation")]
        out: PathBuf,
    },
    /// Write eval-mode attention maps of corpus samples as PGM and text.
    DumpAttention {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus sample indices.
        #[arg(long, value_delimiter = ',', required = true)]
        samples: Vec<usize>,
        #[arg(long, short, default_value = "attention")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let config = config.load()?;
            let out = output_path(&out);
            generate_corpus(&config.corpus)?.save(&out)?;
            println!("corpus written to {}", out.display());
        }
        Command::Train { config, out, dump_attention, samples } => {
            let config = config.load()?;
            let corpus = generate_corpus(&config.corpus)?;
            let out = output_path(&out);
            let outcome = harness::train_run(&config.federation, &corpus, Some(&out))?;
            print_eval(&outcome.final_eval.domain_acc, config.federation.target_domain);
            if let Some(dir) = dump_attention {
                let picks: Vec<usize> = corpus
                    .domain_indices(config.federation.target_domain)
                    .into_iter()
                    .take(samples)
                    .collect();
                let maps = harness::attention_maps(&outcome.params, &corpus, &picks)?;
                let dir = output_path(&dir);
                harness::write_attention_maps(&maps, &picks, &dir)?;
                println!("attention maps written to {}", dir.display());
            }
            println!("outputs in {}", out.display());
        }
        Command::Eval { config, checkpoint } => {
            let config = config.load()?;
            let corpus = generate_corpus(&config.corpus)?;
            let params = harness::load_checkpoint(&checkpoint)?;
            let report = evaluate(&params, &corpus, config.federation.target_domain)?;
            print_eval(&report.domain_acc, config.federation.target_domain);
        }
        Command::Ablate { config, out } => {
            let mut config = config.load()?;
            if config.modes.is_empty() {
                config.modes = Method::ALL.to_vec();
            }
            let out = output_path(&out);
            let result = harness::run_experiment(&config, Some(&out))?;
            print!("{}", result.table());
            println!("outputs in {}", out.display());
        }
        Command::DumpAttention { config, checkpoint, samples, out } => {
            let config = config.load()?;
            let corpus = generate_corpus(&config.corpus)?;
            let out = output_path(&out);
            harness::dump_attention(Path::new(&checkpoint), &corpus, &samples, &out)?;
            println!("attention maps written to {}", out.display());
        }
    }
    Ok(())
}

fn print_eval(domain_acc: &[f64], target: usize) {
    println!("domain,accuracy,role");
    for (d, a) in domain_acc.iter().enumerate() {
        println!("{d},{a:.4},{}", if d == target { "target" } else { "source" });
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
