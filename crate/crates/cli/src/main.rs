//! `xmodal`: preprocess, train, eval and infer from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xmodal_core::Error;

#[derive(Parser, Debug)]
#[command(name = "xmodal", version, about = "Modular vision-language pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a vocabulary and tokenize a caption corpus.
    Preprocess {
        /// `id<TAB>caption` lines, or one caption per line.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
        #[arg(long, default_value_t = 16)]
        max_len: usize,
    },
    /// Train a pipeline; writes checkpoints, the training log and the vocabulary.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Caption a dataset directory and print BLEU4, ROUGEL and CIDEr.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Print one caption per features file.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
    },
}

/// 1 usage, 2 config or input, 3 numeric.
fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Preprocess {
            corpus,
            out,
            min_freq,
            max_len,
        } => commands::preprocess(&corpus, &out, min_freq, max_len),
        Command::Train { config, out, seed } => commands::train(&config, &out, seed),
        Command::Eval { config, ckpt, data, beam } => commands::eval(&config, &ckpt, &data, beam),
        Command::Infer {
            config,
            ckpt,
            input,
            beam,
        } => commands::infer(&config, &ckpt, &input, beam),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_kind() {
        let numeric = Error::Numeric { step: 3, message: "loss is NaN".into() };
        assert_eq!(exit_code(&numeric), 3);
        assert_eq!(exit_code(&Error::config("training", "lr", "bad")), 2);
        assert_eq!(exit_code(&Error::Format("empty".into())), 2);
        assert_eq!(exit_code(&Error::ConfigHashMismatch { expected: 1, found: 2 }), 2);
    }
}
