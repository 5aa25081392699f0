mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use log::LevelFilter;

use crate::args::{resolve, Cli, Command, Globals};

const EXIT_INPUT: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

fn run(globals: &Globals, command: Command) -> anyhow::Result<()> {
    match command {
        Command::Evaluate(a) => commands::evaluate(globals, a),
        Command::Ensemble(a) => commands::ensemble(globals, a),
        Command::Augment(a) => commands::augment(globals, a),
        Command::TtaMerge(a) => commands::tta_merge_cmd(globals, a),
        Command::MergeClasses(a) => commands::merge_classes(globals, a),
        Command::Synth(a) => commands::synth(globals, a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<segvote::Error>()) {
        Some(e) if !e.is_input_error() => EXIT_INVARIANT,
        _ => EXIT_INPUT,
    }
}

/// The error chain on one line, without causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if out.ends_with(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = resolve(cli).and_then(|(globals, command)| {
        // Builder::new() does not read the environment.
        env_logger::Builder::new()
            .filter_level(LevelFilter::Info)
            .format_timestamp(None)
            .format_target(false)
            .init();
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(n) = globals.threads {
            pool = pool.num_threads(n);
        }
        let pool = pool.build()?;
        pool.install(|| run(&globals, command))
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
