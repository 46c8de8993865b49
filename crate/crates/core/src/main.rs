use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;

use cfi_heal::build::{run_build, BuildMode, BuildRequest};
use cfi_heal::census::census_dir;
use cfi_heal::config::{load_config, validate_config, ProjectConfig};
use cfi_heal::ignorelist::{Ignorelist, IGNORELIST_FILE};
use cfi_heal::lock::ProjectLock;
use cfi_heal::pipeline::{heal, PipelineState};
use cfi_heal::report::{emit_report, format_duration, load_report, ReportFormat};
use cfi_heal::visibility::{revert_patches, RepairLedger};

const EXIT_FAILURE: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "cfi-heal", version, about = "Make strict forward-edge CFI builds pass by repairing visibility and synthesizing a minimal ignorelist")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full build, test and repair loop.
    Heal {
        config: PathBuf,
        /// Undo every journalled visibility patch instead of healing.
        #[arg(long)]
        revert: bool,
    },
    /// Build the project once in the given mode.
    Build {
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
    },
    /// Print the indirect control-flow census of the `.ll` files in a directory.
    Census {
        ir_dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Re-render report.html from report.json and print a summary.
    Report { state_dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Baseline,
    Cfi,
}

fn load(path: &Path) -> Result<ProjectConfig, String> {
    let cfg = load_config(path).map_err(|e| e.to_string())?;
    let findings = validate_config(&cfg);
    if !findings.is_empty() {
        let text: Vec<String> = findings.iter().map(|f| f.to_string()).collect();
        return Err(format!("invalid configuration: {}", text.join("; ")));
    }
    Ok(cfg)
}

fn run(cmd: Cmd) -> Result<u8, String> {
    match cmd {
        Cmd::Heal { config, revert: true } => {
            let cfg = load(&config)?;
            let _lock = ProjectLock::acquire(&cfg.report_dir).map_err(|e| e.to_string())?;
            let n = revert_patches(&cfg.project_root, &cfg.report_dir).map_err(|e| e.to_string())?;
            if let Some(mut state) = PipelineState::load(&cfg.report_dir).map_err(|e| e.to_string())? {
                state.ledger = RepairLedger::default();
                state.save(&cfg.report_dir).map_err(|e| e.to_string())?;
            }
            println!("reverted {n} visibility patch(es)");
            Ok(0)
        }
        Cmd::Heal { config, revert: false } => {
            let cfg = load(&config)?;
            let outcome = heal(&cfg).map_err(|e| e.to_string())?;
            let r = &outcome.report;
            println!("violations:      {}", r.violations.len());
            println!("fixed:           {}", r.fixed);
            println!("unresolvable:    {}", r.unresolvable);
            println!("ignorelist:      {} entr{}", r.ignorelist.len(), if r.ignorelist.len() == 1 { "y" } else { "ies" });
            println!("patches:         {} ({} new)", r.ledger.patches.len(), outcome.new_patches);
            println!(
                "per function:    {:.2} / {:.2} / {:.2}",
                r.per_function.protected, r.per_function.default_visibility, r.per_function.ignored
            );
            println!(
                "per call site:   {:.2} / {:.2} / {:.2}",
                r.per_call_site.protected, r.per_call_site.default_visibility, r.per_call_site.ignored
            );
            println!("duration:        {}", format_duration(r.duration));
            println!("report:          {}", cfg.report_dir.join("report.html").display());
            Ok(outcome.exit_code() as u8)
        }
        Cmd::Build { config, mode } => {
            let cfg = load(&config)?;
            let _lock = ProjectLock::acquire(&cfg.report_dir).map_err(|e| e.to_string())?;
            let mode = match mode {
                Mode::Baseline => BuildMode::Baseline,
                Mode::Cfi => {
                    let path = cfg.report_dir.join(IGNORELIST_FILE);
                    if !path.exists() {
                        Ignorelist::new().write(&path).map_err(|e| e.to_string())?;
                    }
                    BuildMode::Cfi {
                        ignorelist: path,
                        variants: cfg.cfi_variants.clone(),
                    }
                }
            };
            let outcome = run_build(&cfg, &mode, &BuildRequest::default(), &_lock).map_err(|e| e.to_string())?;
            for d in &outcome.diagnostics {
                println!("{:?}\t{}\t{}", d.kind, d.symbol.as_deref().unwrap_or("-"), d.message);
            }
            if let Some(log) = &outcome.log_path {
                println!("log: {}", log.display());
            }
            println!("{} build {}", mode.label(), if outcome.succeeded { "succeeded" } else { "failed" });
            Ok(if outcome.succeeded { 0 } else { EXIT_FAILURE })
        }
        Cmd::Census { ir_dir, json } => {
            let m = census_dir(&ir_dir).map_err(|e| format!("{}: {e}", ir_dir.display()))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&m.census).map_err(|e| e.to_string())?);
            } else {
                print!("{}", m.census);
            }
            for d in &m.diagnostics {
                eprintln!(
                    "{}:{}: {}",
                    d.source.as_ref().map_or_else(String::new, |p| p.display().to_string()),
                    d.line,
                    d.reason
                );
            }
            Ok(0)
        }
        Cmd::Report { state_dir } => {
            let report = load_report(&state_dir).map_err(|e| e.to_string())?;
            emit_report(&report, &state_dir, &[ReportFormat::Html]).map_err(|e| e.to_string())?;
            println!(
                "{} violation(s), {} fixed, {} unresolvable; IR coverage {:.2}%",
                report.violations.len(),
                report.fixed,
                report.unresolvable,
                report.total_cfi_coverage
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            error!("{message}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
