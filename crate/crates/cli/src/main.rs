//! `psp` command-line front end.
//!
//! Subcommands: `edit` (run an edit plan), `analyze` (slot-masking
//! experiments), `attnmap` (export one attention map), `otsu` (standalone
//! thresholding). Standard output is line-delimited JSON events.

mod commands;
mod plan;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "psp", about = "Prompt-driven cross-attention image editing engine")]
struct Cli {
    /// Override the plan's scheduler seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Suppress the JSON event log on stdout.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an edit plan and write z0.pspt, manifest.json, and captures.
    Edit {
        /// Path to the edit-plan JSON file.
        plan: PathBuf,
    },
    /// Baseline generation with slot masking; proves masked slots carry
    /// zero attention weight.
    Analyze {
        plan: PathBuf,
        /// Slot ranges to mask, e.g. "0-1" or "6-9,16-17".
        #[arg(long)]
        mask: String,
        /// Omit the aug term entirely.
        #[arg(long)]
        no_aug: bool,
    },
    /// Export one slot's attention map at a given step and layer.
    Attnmap {
        plan: PathBuf,
        #[arg(long)]
        step: usize,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        slot: usize,
        /// Output PGM path; the raw tensor lands next to it as .pspt.
        out_pgm: PathBuf,
    },
    /// Threshold a stored map and write the binary mask.
    Otsu {
        map: PathBuf,
        out_mask: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if let Ok(threads) = std::env::var("PSP_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) => {
                if let Err(e) = psp_core::set_max_threads(n) {
                    eprintln!("warning: PSP_THREADS ignored: {e}");
                }
            }
            Err(_) => eprintln!("warning: PSP_THREADS must be an integer, got `{threads}`"),
        }
    }

    let result = match &cli.command {
        Command::Edit { plan } => commands::cmd_edit(plan, &cli.out, cli.seed, cli.quiet),
        Command::Analyze { plan, mask, no_aug } => {
            commands::cmd_analyze(plan, mask, *no_aug, &cli.out, cli.seed, cli.quiet)
        }
        Command::Attnmap {
            plan,
            step,
            layer,
            slot,
            out_pgm,
        } => commands::cmd_attnmap(plan, *step, *layer, *slot, out_pgm, cli.seed, cli.quiet),
        Command::Otsu { map, out_mask } => commands::cmd_otsu(map, out_mask),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
