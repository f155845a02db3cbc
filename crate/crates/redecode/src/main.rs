use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use redecode::cli;

#[derive(Parser)]
#[command(name = "redecode", about = "Iterative-refinement paraphrase generation")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a key=value run config
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate paraphrases for each input line
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score generated paraphrases against references
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump per-decoder attention matrices for one sentence
    AttnDump {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sentence: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(args: Args) -> cli::Result<()> {
    match args.command {
        Command::Train { config, out } => cli::cmd_train(&config, &out),
        Command::Generate { ckpt, input, seed } => {
            let text = cli::cmd_generate(&ckpt, &input, seed)?;
            print!("{text}");
            Ok(())
        }
        Command::Eval { ckpt, pairs, out, seed } => {
            let table = cli::cmd_eval(&ckpt, &pairs, &out, seed)?;
            print!("{table}");
            Ok(())
        }
        Command::AttnDump { ckpt, sentence, out, seed } => {
            cli::cmd_attn_dump(&ckpt, &sentence, &out, seed)
        }
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(args) => args,
        Err(e) => {
            // clap handles help/version with success exits
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(cli::EXIT_USAGE as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
