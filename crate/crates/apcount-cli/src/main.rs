//! `apcount`: an experiment harness for solution counting in boxes, sieve
//! sums, local densities, and circle-method predictions.
//!
//! Every run prints one JSON report to stdout. Value fields are
//! deterministic for a fixed config: reruns and different worker counts
//! produce byte-identical `values` arrays. Exit codes: 0 success, 1
//! verification failures, 2 invalid configuration, 3 budget refusal,
//! 4 internal error.

mod cache;
mod config;
mod exec;
mod report;

use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use config::{ExperimentConfig, RunArgs};
use report::{CacheStatus, ExperimentReport, Refusal, Timings};

#[derive(Debug)]
pub enum AppError {
    Validation(String),
    Budget { estimated: u128, ceiling: u128 },
    Internal(String),
}

impl From<apcount::Error> for AppError {
    fn from(e: apcount::Error) -> Self {
        match e {
            apcount::Error::BudgetExceeded { estimated, ceiling } => {
                AppError::Budget { estimated, ceiling }
            }
            other => AppError::Validation(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "apcount",
    version,
    about = "Count solutions of form systems and compare against sieve and circle-method predictions"
)]
struct Cli {
    #[command(subcommand)]
    command: CommandLine,
}

#[derive(Subcommand)]
enum CommandLine {
    /// Count solutions of F(dx+s) = v with x in {1..N}^n
    Count(RunArgs),
    /// Count solutions whose linear-form values are free of small prime factors
    AlmostPrime(RunArgs),
    /// Weighted solution sum with truncated divisor weights on the linear forms
    SieveSum(RunArgs),
    /// Exact local solution densities at prime powers
    Local(RunArgs),
    /// Truncated Euler-product sieve sum against its first-order prediction
    EulerSum(RunArgs),
    /// Singular series truncation, optionally with the singular integral
    Circle(RunArgs),
    /// Full main-term prediction for a count at a given box side
    Predict(RunArgs),
    /// Run the acceptance battery and report each criterion
    Verify(RunArgs),
}

impl CommandLine {
    fn into_parts(self) -> (&'static str, RunArgs) {
        match self {
            CommandLine::Count(a) => ("count", a),
            CommandLine::AlmostPrime(a) => ("almost-prime", a),
            CommandLine::SieveSum(a) => ("sieve-sum", a),
            CommandLine::Local(a) => ("local", a),
            CommandLine::EulerSum(a) => ("euler-sum", a),
            CommandLine::Circle(a) => ("circle", a),
            CommandLine::Predict(a) => ("predict", a),
            CommandLine::Verify(a) => ("verify", a),
        }
    }
}

fn main() -> ExitCode {
    let (command, args) = Cli::parse().command.into_parts();
    match run_command(command, &args) {
        Ok(code) => ExitCode::from(code),
        Err(AppError::Validation(message)) => {
            emit_error("validation", &message);
            ExitCode::from(2)
        }
        Err(AppError::Budget { .. }) => {
            // Budget refusals are reported inside run_command; reaching here
            // means one escaped before the report stage.
            emit_error("budget", "estimated cost exceeds the configured ceiling");
            ExitCode::from(3)
        }
        Err(AppError::Internal(message)) => {
            emit_error("internal", &message);
            ExitCode::from(4)
        }
    }
}

fn emit_error(kind: &str, message: &str) {
    println!(
        "{}",
        json!({ "error": { "kind": kind, "message": message } })
    );
}

fn run_command(command: &'static str, args: &RunArgs) -> Result<u8, AppError> {
    let start = Instant::now();
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    config.apply_flags(args);
    if let Some(selector) = &config.command {
        if selector != command {
            return Err(AppError::Validation(format!(
                "config selects command `{}` but `{}` was invoked",
                selector, command
            )));
        }
    }
    config.command = Some(command.to_string());

    let mut warnings = vec![];
    if let Some(workers) = config.workers {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
        if pool.is_err() {
            warnings.push("worker pool already initialized; `workers` ignored".into());
        }
    }

    // Verification runs are never cached: their purpose is to re-execute.
    let cache = if command == "verify" {
        None
    } else {
        cache::Cache::from_env(&mut warnings)
    };
    let key = cache
        .as_ref()
        .map(|_| cache::key_of(&config.cache_key_material()));

    let compute_start = Instant::now();
    let mut hit = false;
    let cached = match (&cache, &key) {
        (Some(cache), Some(key)) => cache.get(key, &mut warnings),
        _ => None,
    };
    let output = match cached {
        Some(values) => {
            hit = true;
            exec::ExecOutput {
                values,
                warnings: vec![],
                verify_failed: false,
            }
        }
        None => match exec::execute(command, &config) {
            Ok(output) => output,
            Err(AppError::Budget { estimated, ceiling }) => {
                let report = ExperimentReport {
                    version: version_stamp(),
                    command: command.to_string(),
                    config,
                    values: vec![],
                    warnings,
                    refusal: Some(Refusal {
                        kind: "budget",
                        estimated: estimated.to_string(),
                        ceiling: ceiling.to_string(),
                        message: format!(
                            "estimated cost {} elementary steps exceeds budget ceiling {}; raise `budget_ceiling` to proceed",
                            estimated, ceiling
                        ),
                    }),
                    cache: CacheStatus {
                        enabled: cache.is_some(),
                        hit: false,
                        key,
                    },
                    timings: Timings {
                        total_ms: start.elapsed().as_millis() as u64,
                        compute_ms: 0,
                    },
                };
                print_report(&report)?;
                return Ok(3);
            }
            Err(other) => return Err(other),
        },
    };
    let compute_ms = compute_start.elapsed().as_millis() as u64;

    if !hit {
        if let (Some(cache), Some(key)) = (&cache, &key) {
            cache.put(key, &output.values, &mut warnings);
        }
    }
    warnings.extend(output.warnings);

    let report = ExperimentReport {
        version: version_stamp(),
        command: command.to_string(),
        config,
        values: output.values,
        warnings,
        refusal: None,
        cache: CacheStatus {
            enabled: cache.is_some(),
            hit,
            key,
        },
        timings: Timings {
            total_ms: start.elapsed().as_millis() as u64,
            compute_ms,
        },
    };
    if let Some(csv_path) = report.config.csv.clone() {
        report::write_csv(&csv_path, &report.values)?;
    }
    print_report(&report)?;
    Ok(if output.verify_failed { 1 } else { 0 })
}

fn version_stamp() -> String {
    format!("apcount {}", env!("CARGO_PKG_VERSION"))
}

fn print_report(report: &ExperimentReport) -> Result<(), AppError> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| AppError::Internal(format!("report serialization failed: {}", e)))?;
    println!("{}", text);
    Ok(())
}
