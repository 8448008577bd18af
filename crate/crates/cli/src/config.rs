//! Resolved run configs: every argument of a subcommand, defaults included,
//! written as a `key = value` manifest that `spe replay` turns back into a
//! command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgMatches, CommandFactory};
use spe_core::manifest::Manifest;

use crate::error::{CliError, CliResult};
use crate::Cli;

pub const CONFIG_FORMAT_VERSION: u32 = 1;
/// File name used when a command's outputs live in a directory.
pub const RUN_CONFIG_FILE: &str = "run.config";

const RESERVED: [&str; 3] = ["config_format_version", "command", "threads"];

/// Builds the resolved config of subcommand `name` from its parsed matches.
/// Keys are the long flag names.
pub fn resolved_config(name: &str, matches: &ArgMatches, threads: usize) -> CliResult<Manifest> {
    let root = Cli::command();
    let sub = root
        .find_subcommand(name)
        .ok_or_else(|| CliError::Config(format!("unknown command `{name}`")))?;
    let mut m = Manifest::new();
    m.set("config_format_version", CONFIG_FORMAT_VERSION)
        .set("command", name)
        .set("threads", threads);
    for arg in sub.get_arguments() {
        let Some(long) = arg.get_long() else { continue };
        if let Ok(Some(raw)) = matches.try_get_raw(arg.get_id().as_str()) {
            let values: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            m.set(long, values.join(","));
        }
    }
    Ok(m)
}

/// Where the config of a run whose single output is `file` is written.
pub fn config_path_for_file(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(OsString::from).unwrap_or_default();
    name.push(".config");
    file.with_file_name(name)
}

pub fn write_config(m: &Manifest, path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, m.to_text()).map_err(|e| CliError::io(path, e))
}

/// Reconstructs the command line that produced a resolved config.
pub fn replay_args(m: &Manifest) -> CliResult<Vec<OsString>> {
    let version: u32 = m.parse_value("config_format_version")?;
    if version != CONFIG_FORMAT_VERSION {
        return Err(CliError::Config(format!(
            "unsupported config format version {version}"
        )));
    }
    let command = m.require("command")?;
    if command == "replay" {
        return Err(CliError::Config(
            "a replay config cannot replay itself".into(),
        ));
    }
    let root = Cli::command();
    let sub = root
        .find_subcommand(command)
        .ok_or_else(|| CliError::Config(format!("unknown command `{command}`")))?;
    let mut argv: Vec<OsString> = vec![
        "spe".into(),
        "--threads".into(),
        m.require("threads")?.into(),
    ];
    argv.push(command.into());
    for (key, value) in m.entries() {
        if RESERVED.contains(&key) {
            continue;
        }
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key))
            .ok_or_else(|| CliError::Config(format!("`{command}` has no flag `--{key}`")))?;
        if arg.get_action().takes_values() {
            argv.push(format!("--{key}").into());
            argv.push(value.into());
        } else if value == "true" {
            argv.push(format!("--{key}").into());
        }
    }
    Ok(argv)
}
