mod eval;
mod prototype;
mod synth;
mod train;

use std::fs;
use std::path::Path;

pub use eval::{eval, EvalSummary};
pub use prototype::{prototype, PrototypeSettings, PrototypeSummary};
pub use synth::synth;
pub use train::{fold_seed, train, FoldResult, TrainSummary};

use crate::args::{Cli, Command};
use crate::config::RunConfig;
use crate::error::{io_err, CliError};

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(args) => {
            let manifest = synth(&args)?;
            println!("{}", manifest.display());
        }
        Command::Prototype(args) => {
            let s = prototype(&RunConfig::resolve(&args)?)?;
            println!("{} slide representations, {} reports", s.slides, s.reports);
        }
        Command::Train(args) => {
            let s = train(&RunConfig::resolve(&args)?)?;
            println!("mean held-out C-index {:.4} ± {:.4}", s.mean_c_index, s.std_c_index);
        }
        Command::Eval(args) => {
            let s = eval(&args.common, args.attention)?;
            println!(
                "mean held-out C-index {:.4} ± {:.4}, log-rank p {:.4e}",
                s.mean_c_index, s.std_c_index, s.log_rank_p
            );
        }
    }
    Ok(())
}

/// Removes `dir` if present and creates it empty.
pub(crate) fn fresh_dir(dir: &Path) -> Result<(), CliError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}
