use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pit_core::app::{self, DiagnoseInput, ExportWhich, TraceInjection};
use pit_core::io::RunConfig;
use pit_core::Error;

#[derive(Parser)]
#[command(name = "pit", version, about = "Train and audit pseudo-inverse tied token interfaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy language model. Any config key can be set with `--key value`.
    Train {
        /// `key = value` config file; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Print the resolved config and exit.
        #[arg(long)]
        dry_run: bool,
        /// `--key value` overrides.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Measure interface consistency of a checkpoint or an embedding-file pair.
    Diagnose {
        /// Checkpoint to diagnose.
        #[arg(conflicts_with_all = ["embedding", "unembedding"], required_unless_present = "embedding")]
        checkpoint: Option<PathBuf>,
        /// Embedding file (V×d).
        #[arg(long, requires = "unembedding")]
        embedding: Option<PathBuf>,
        /// Unembedding file, W_out (d×V) or its transpose (V×d).
        #[arg(long, requires = "embedding")]
        unembedding: Option<PathBuf>,
        /// Append one CSV row to this file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Turn a teacher embedding into a head-only PIT checkpoint.
    Canonicalize {
        embedding: PathBuf,
        output: PathBuf,
        /// Initialize T from the discarded polar factor instead of the identity.
        #[arg(long)]
        match_teacher_scale: bool,
    },
    /// Materialize the embedding or unembedding of a checkpoint.
    Export {
        checkpoint: PathBuf,
        #[arg(value_parser = ["embedding", "unembedding"])]
        which: String,
        output: PathBuf,
    },
    /// Layerwise top-k decoding of the prompt's last position.
    Trace {
        checkpoint: PathBuf,
        /// Prompt text, used as raw bytes.
        #[arg(long, conflicts_with = "prompt_file", required_unless_present = "prompt_file")]
        prompt: Option<String>,
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        #[arg(short, long, default_value_t = 5)]
        k: usize,
        /// Debug: overwrite the state after this layer with a token memory row.
        #[arg(long, requires = "inject_token")]
        inject_layer: Option<usize>,
        #[arg(long, requires = "inject_layer")]
        inject_token: Option<usize>,
    },
}

/// Applies `--key value` / `--key=value` pairs. Dashes in keys map to underscores.
fn apply_overrides(config: &mut RunConfig, args: &[String]) -> Result<bool> {
    let mut seed_set = false;
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            bail!("unexpected argument {arg:?}; overrides take the form --key value");
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().with_context(|| format!("--{flag} needs a value"))?;
                (flag.to_string(), v.clone())
            }
        };
        let key = key.replace('-', "_");
        seed_set |= key == "seed";
        config.set(&key, &value)?;
    }
    Ok(seed_set)
}

fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let mut flags = config.clone();
    let seed_flag = apply_overrides(&mut flags, overrides)?;
    if let Ok(seed) = std::env::var("PIT_SEED") {
        config.set("seed", &seed).context("PIT_SEED")?;
    }
    if !seed_flag {
        flags.seed = config.seed;
    }
    flags.validate()?;
    Ok(flags)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, dry_run, overrides } => {
            let cfg = resolve_config(config.as_deref(), &overrides)?;
            if dry_run {
                print!("{}", cfg.to_text());
                return Ok(());
            }
            let interval = cfg.log_interval.max(1);
            let steps = cfg.steps;
            let out = app::cmd_train(&cfg, |row| {
                if row.step % interval == 0 || row.step == steps {
                    eprintln!("step {:>6}  loss {:.4}  grad_norm {:.3}  {} ms", row.step, row.loss, row.grad_norm, row.wall_ms);
                }
            })?;
            eprintln!("checkpoint: {}", out.final_checkpoint.display());
            println!("{}", out.final_report.to_json()?);
        }
        Command::Diagnose { checkpoint, embedding, unembedding, csv } => {
            let input = match (checkpoint, embedding, unembedding) {
                (Some(c), None, None) => DiagnoseInput::Checkpoint(c),
                (None, Some(embedding), Some(unembedding)) => DiagnoseInput::Pair { embedding, unembedding },
                _ => bail!("give a checkpoint or both --embedding and --unembedding"),
            };
            let report = app::cmd_diagnose(&input, csv.as_deref())?;
            println!("{}", report.to_json()?);
        }
        Command::Canonicalize { embedding, output, match_teacher_scale } => {
            let s = app::cmd_canonicalize(&embedding, &output, match_teacher_scale)?;
            eprintln!("wrote {} ({}x{} head)", output.display(), s.vocab, s.dim);
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::Export { checkpoint, which, output } => {
            let which: ExportWhich = which.parse()?;
            let m = app::cmd_export(&checkpoint, which, &output)?;
            eprintln!("wrote {which} {}x{} to {}", m.rows(), m.cols(), output.display());
        }
        Command::Trace { checkpoint, prompt, prompt_file, k, inject_layer, inject_token } => {
            let bytes = match (prompt, prompt_file) {
                (Some(p), _) => p.into_bytes(),
                (None, Some(f)) => std::fs::read(&f).with_context(|| format!("reading {}", f.display()))?,
                (None, None) => bail!("give --prompt or --prompt-file"),
            };
            let inject = inject_layer.zip(inject_token).map(|(layer, token)| TraceInjection { layer, token });
            let out = app::cmd_trace(&checkpoint, &bytes, k, inject)?;
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::NonFiniteLoss { .. }) => 3,
        Some(Error::CorpusNotFound(_)) => 4,
        Some(Error::Format(_)) | Some(Error::HeadOnlyCheckpoint) | Some(Error::NotOrthonormal { .. }) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
