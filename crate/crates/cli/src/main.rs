mod args;
mod commands;
mod support;

use std::process::ExitCode;

use clap::Parser;
use defectforge::augment::AugmentError;
use defectforge::datakit::DataError;
use defectforge::detectkit::DetectError;
use defectforge::evalkit::EvalError;
use defectforge::gpwgan::GanError;

use crate::args::Cli;
use crate::support::ConfigError;

/// 2 when any cause is a configuration problem, else 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|c| {
        c.is::<ConfigError>()
            || matches!(c.downcast_ref::<GanError>(), Some(GanError::ConfigInvalid(_)))
            || matches!(c.downcast_ref::<AugmentError>(), Some(AugmentError::InvalidPolicy(_)))
            || matches!(c.downcast_ref::<DetectError>(), Some(DetectError::InvalidThresholds { .. }))
            || matches!(c.downcast_ref::<EvalError>(), Some(EvalError::EmptyGrid | EvalError::NoFolds))
            || matches!(
                c.downcast_ref::<DataError>(),
                Some(DataError::InvalidFoldCount(_) | DataError::DropTooLarge { .. } | DataError::TooFewImages { .. })
            )
    });
    if config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DEFECTFORGE_LOG", "warn")).init();
    if let Some(jobs) = cli.global.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            let record = serde_json::json!({
                "error": {
                    "kind": if code == 2 { "config" } else { "runtime" },
                    "message": err.to_string(),
                    "causes": err.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
                },
                "exit_code": code,
            });
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}
