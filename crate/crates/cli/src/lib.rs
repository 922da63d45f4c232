//! Pipeline commands and the HTTP endpoint behind the `rrsearch` binary.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod server;

use clap::{CommandFactory, Parser};

pub use error::CliError;

/// Parses `argv`, runs the subcommand and returns the process exit code:
/// 0 on success, 1 on usage errors, 2 on data or model errors.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let parsed = match cli::Cli::try_parse_from(argv) {
        Ok(p) => p,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let name = parsed.command.name();
    let result = config::AppConfig::load_or_default(parsed.config.as_deref())
        .and_then(|cfg| commands::run(parsed.command, cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                let mut root = cli::Cli::command();
                root.build();
                if let Some(sub) = root.find_subcommand_mut(name) {
                    eprintln!("\n{}", sub.render_usage());
                }
            }
            e.exit_code()
        }
    }
}
