use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use ifrm::asm::{assemble, disassemble};
use ifrm::vm::package_digest;

/// Build and inspect ifunc packages.
#[derive(Parser)]
#[command(name = "iftool", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Assemble a `.ifasm` source into a `.ifn` package.
    Asm {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Print a package as assembler source.
    Dis { input: PathBuf },
    /// Print the hex SHA-256 digest of a package.
    Digest { input: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Asm { input, output } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let bytes = assemble(&text).with_context(|| format!("assembling {}", input.display()))?;
            fs::write(&output, bytes).with_context(|| format!("writing {}", output.display()))?;
        }
        Cmd::Dis { input } => {
            let bytes = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            print!("{}", disassemble(&bytes).with_context(|| format!("disassembling {}", input.display()))?);
        }
        Cmd::Digest { input } => {
            let bytes = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            println!("{}", hex::encode(package_digest(&bytes)));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::FAILURE;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("iftool: {e:#}");
            ExitCode::FAILURE
        }
    }
}
