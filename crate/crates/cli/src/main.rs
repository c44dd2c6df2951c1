use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use duocast_cli::config::PipelineConfig;
use duocast_cli::error::Result;
use duocast_cli::synthesize::{synthesize, validate_file, SynthOptions};
use duocast_cli::{corpus_cmd, eval, script_cmd, train};
use duocast_script::Language;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "duocast", version, about = "Two-speaker podcast generation pipeline")]
struct Cli {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic corpora and metadata filters.
    Corpus {
        #[command(subcommand)]
        action: CorpusAction,
    },
    /// Train one model; prerequisites must already exist.
    Train {
        #[arg(value_enum)]
        target: Target,
    },
    /// Document to script, codes and features.
    Synthesize {
        /// File path or http(s) URL.
        source: String,
        #[arg(long, default_value = "run")]
        name: String,
        /// Stop after the script is generated and validated.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        ode_steps: Option<usize>,
        #[arg(long)]
        chunk_seconds: Option<f64>,
        #[arg(long)]
        sigma_min: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lang: Option<Language>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        /// Generated-token budget.
        #[arg(long)]
        max_tokens: Option<usize>,
    },
    /// Evaluation report over the trained checkpoints.
    Eval {
        /// Fault injection: flip one block of the chunk mask.
        #[arg(long)]
        tamper_mask: bool,
    },
    /// Script generation tools.
    Script {
        #[command(subcommand)]
        action: ScriptAction,
    },
    /// Print the effective configuration as TOML.
    Config {
        /// Print the small preset instead.
        #[arg(long)]
        toy: bool,
    },
}

#[derive(Subcommand)]
enum CorpusAction {
    /// Generate the stage corpora, manifest and filter summary.
    Synth,
    /// Apply the quality and conversation filters to a manifest.
    Filter { manifest: PathBuf },
}

#[derive(Subcommand)]
enum ScriptAction {
    Brief {
        source: String,
        #[arg(long, default_value = "script")]
        name: String,
        #[arg(long)]
        lang: Option<Language>,
    },
    Generate {
        source: String,
        #[arg(long, default_value = "script")]
        name: String,
        #[arg(long)]
        lang: Option<Language>,
    },
    /// Check a script JSON file; exits 1 when any rule fails.
    Validate {
        script: PathBuf,
        #[arg(long, default_value = "en")]
        lang: Language,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Codec,
    Lm,
    Detok,
}

fn print<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn run(cli: Cli) -> Result<bool> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Config { toy: false } => print!("{}", config.to_toml()),
        Command::Config { toy: true } => print!("{}", PipelineConfig::toy().to_toml()),
        Command::Corpus { action: CorpusAction::Synth } => print(&corpus_cmd::synth(&config)?),
        Command::Corpus { action: CorpusAction::Filter { manifest } } => print(&corpus_cmd::filter(&config, &manifest)?),
        Command::Train { target: Target::Codec } => print(&train::codec(&config)?),
        Command::Train { target: Target::Lm } => print(&train::lm(&config)?),
        Command::Train { target: Target::Detok } => print(&train::detok(&config)?),
        Command::Synthesize {
            source,
            name,
            dry_run,
            ode_steps,
            chunk_seconds,
            sigma_min,
            seed,
            lang,
            top_k,
            top_p,
            temperature,
            max_tokens,
        } => {
            let mut config = config;
            let s = &mut config.sampler;
            s.top_k = top_k.unwrap_or(s.top_k);
            s.top_p = top_p.unwrap_or(s.top_p);
            s.temperature = temperature.unwrap_or(s.temperature);
            config.synthesize.max_tokens = max_tokens.unwrap_or(config.synthesize.max_tokens);
            config.validate()?;
            let opts = SynthOptions { source, name, dry_run, ode_steps, chunk_seconds, sigma_min, seed, language: lang };
            print(&synthesize(&config, &opts)?);
        }
        Command::Eval { tamper_mask } => {
            let report = eval::evaluate(&config, tamper_mask)?;
            for c in &report.criteria {
                eprintln!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.id, c.detail);
            }
            print(&report);
        }
        Command::Script { action } => match action {
            ScriptAction::Brief { source, name, lang } => {
                let out = script_cmd::generate(&config, &source, &name, lang, false)?;
                print!("{}", out.brief.to_text());
            }
            ScriptAction::Generate { source, name, lang } => {
                let out = script_cmd::generate(&config, &source, &name, lang, true)?;
                let validation = out.validation.expect("generated with script");
                print(&validation);
                return Ok(validation.pass);
            }
            ScriptAction::Validate { script, lang } => {
                let report = validate_file(&script, lang)?;
                print(&report);
                return Ok(report.pass);
            }
        },
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(2))
        }
    }
}
