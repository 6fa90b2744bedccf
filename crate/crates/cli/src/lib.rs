//! Command-line front end for `gmix`: the `gmm/1` document format, CSV
//! emitters, run manifests, and one subcommand per library operation.
//!
//! Exit codes: 0 success, 2 validation, 3 parse or format, 4 numeric
//! failure, 5 I/O. Errors are reported on standard error as
//! `gmix: error[<category>]: <message>`.

pub mod commands;
pub mod csvio;
pub mod document;
pub mod error;
pub mod expr;
pub mod manifest;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;

use crate::commands::{execute, Cli, Command, Session};
use crate::error::{Category, CliError, CliResult};
use crate::manifest::{sha256_hex, FileDigest, RunManifest, MANIFEST_FORMAT};

pub use document::{DocumentError, GmmDocument, FORMAT_VERSION};

/// Path recorded in manifests for standard output.
pub const STDOUT_PATH: &str = "-";

/// A parsed and executed command whose outputs have not been written yet.
#[derive(Debug)]
pub struct Invocation {
    pub cli: Cli,
    pub session: Session,
}

/// Parses `argv` (without the program name) and runs it with relative paths
/// resolved against `cwd`, keeping all outputs in memory.
pub fn invoke(argv: &[String], cwd: &Path) -> CliResult<Invocation> {
    let cli = Cli::try_parse_from(std::iter::once("gmix".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| CliError::parse(e.to_string()))?;
    if let Command::Replay(_) = cli.command {
        return Err(CliError::validation("replay cannot be invoked in memory"));
    }
    let mut session = Session::new(cwd);
    execute(&cli.command, &mut session)?;
    Ok(Invocation { cli, session })
}

fn digest_outputs(session: &Session) -> Vec<FileDigest> {
    session
        .outputs
        .iter()
        .map(|(p, bytes)| FileDigest {
            path: p.clone().unwrap_or_else(|| STDOUT_PATH.to_string()),
            sha256: sha256_hex(bytes),
        })
        .collect()
}

/// Runs a full command line (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { Category::Parse.exit_code() } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_parsed(cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("gmix: {e}");
            e.category.exit_code()
        }
    }
}

fn run_parsed(cli: Cli, argv: Vec<String>) -> CliResult<()> {
    let cwd = std::env::current_dir().map_err(|e| CliError::io(format!("working directory: {e}")))?;
    if let Command::Replay(a) = &cli.command {
        let report = replay(&cwd.join(&a.manifest))?;
        println!("{report}");
        return Ok(());
    }
    let start = Instant::now();
    let mut session = Session::new(&cwd);
    execute(&cli.command, &mut session)?;
    let wall = start.elapsed().as_secs_f64();
    for m in &session.messages {
        eprintln!("gmix: {m}");
    }
    let mut first_file: Option<PathBuf> = None;
    for (path, bytes) in &session.outputs {
        match path {
            Some(p) => {
                let full = session.resolve(p);
                std::fs::write(&full, bytes).map_err(|e| CliError::io(format!("{p}: {e}")))?;
                first_file.get_or_insert(full);
            }
            None => {
                let mut stdout = std::io::stdout().lock();
                stdout
                    .write_all(bytes)
                    .and_then(|_| stdout.flush())
                    .map_err(|e| CliError::io(format!("standard output: {e}")))?;
            }
        }
    }
    if cli.no_manifest {
        return Ok(());
    }
    let target = match (&cli.manifest, first_file) {
        (Some(p), _) => cwd.join(p),
        (None, Some(f)) => {
            let mut s = f.into_os_string();
            s.push(".manifest.json");
            PathBuf::from(s)
        }
        // Nothing written to disk, so there is nothing to replay against.
        (None, None) => return Ok(()),
    };
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: cli.command.name().to_string(),
        argv,
        cwd: cwd.to_string_lossy().into_owned(),
        seed: cli.command.seed(),
        inputs: session.inputs.clone(),
        outputs: digest_outputs(&session),
        wall_time_seconds: wall,
    };
    std::fs::write(&target, manifest.to_json()).map_err(|e| CliError::io(format!("{}: {e}", target.display())))
}

/// Re-executes the command recorded in a manifest without writing anything
/// and checks every output hash. Changed inputs are a validation error; a
/// differing output is a numeric error.
pub fn replay(manifest_path: &Path) -> CliResult<String> {
    let m = RunManifest::read(manifest_path)?;
    let cwd = PathBuf::from(&m.cwd);
    for input in &m.inputs {
        let bytes = std::fs::read(cwd.join(&input.path)).map_err(|e| CliError::io(format!("{}: {e}", input.path)))?;
        if sha256_hex(&bytes) != input.sha256 {
            return Err(CliError::validation(format!("input `{}` changed since the recorded run", input.path)));
        }
    }
    let inv = invoke(&m.argv, &cwd)?;
    let produced = digest_outputs(&inv.session);
    if produced.len() != m.outputs.len() {
        return Err(CliError::new(
            Category::Numeric,
            format!("replay produced {} outputs, manifest records {}", produced.len(), m.outputs.len()),
        ));
    }
    for (want, got) in m.outputs.iter().zip(&produced) {
        if want != got {
            return Err(CliError::new(
                Category::Numeric,
                format!("output `{}` differs from the recorded run", want.path),
            ));
        }
    }
    Ok(format!("replay ok: {} output(s) of `{}` reproduced bit-exactly", produced.len(), m.command))
}
