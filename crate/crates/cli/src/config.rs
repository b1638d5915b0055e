//! `key = value` config files, folded into the clap command as defaults so
//! that explicit flags still win.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgMatches, Command};

#[derive(Debug, Default, Clone, PartialEq)]
pub struct ConfigFile {
    pub entries: Vec<(String, String)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("line {}: expected `key = value`, got `{raw}`", i + 1);
            };
            let key = k.trim().replace('_', "-");
            if key.is_empty() {
                bail!("line {}: empty key", i + 1);
            }
            entries.push((key, v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }
}

/// The `--config` value, found before clap runs.
pub fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

fn with_default(arg: Arg, value: &str) -> Arg {
    let arg = arg.required(false);
    if arg.get_value_delimiter().is_some() {
        let parts: Vec<String> = value.split(',').map(|p| p.trim().to_string()).collect();
        arg.default_values(parts)
    } else {
        arg.default_value(value.to_string())
    }
}

fn has_long(cmd: &Command, key: &str) -> bool {
    cmd.get_arguments().any(|a| a.get_long() == Some(key))
}

/// Installs every entry as a default: on the top-level command when it owns
/// the flag, otherwise on each subcommand that has it. Keys no command knows
/// are an error.
pub fn apply(mut cmd: Command, cfg: &ConfigFile) -> Result<Command> {
    for (key, value) in &cfg.entries {
        if key == "config" {
            bail!("`config` cannot be set from a config file");
        }
        if has_long(&cmd, key) {
            let id = arg_id(&cmd, key);
            cmd = cmd.mut_arg(id, |a| with_default(a, value));
            continue;
        }
        let owners: Vec<String> = cmd
            .get_subcommands()
            .filter(|s| has_long(s, key))
            .map(|s| s.get_name().to_string())
            .collect();
        if owners.is_empty() {
            bail!("unknown config key `{key}`");
        }
        for name in owners {
            cmd = cmd.mut_subcommand(name, |s| {
                let id = arg_id(&s, key);
                s.mut_arg(id, |a| with_default(a, value))
            });
        }
    }
    Ok(cmd)
}

fn arg_id(cmd: &Command, long: &str) -> String {
    cmd.get_arguments()
        .find(|a| a.get_long() == Some(long))
        .map(|a| a.get_id().to_string())
        .expect("checked by caller")
}

fn raw_value(m: &ArgMatches, id: &str) -> Option<String> {
    let vals = m.try_get_raw(id).ok()??;
    Some(
        vals.map(|v| v.to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join(","),
    )
}

/// Every resolved argument of the command line, in `key = value` form, so a
/// run can be replayed with `--config`. `cmd` must be the built command the
/// matches came from.
pub fn snapshot(cmd: &Command, top: &ArgMatches) -> String {
    let mut s = String::new();
    let mut push = |c: &Command, m: &ArgMatches, globals: bool| {
        for a in c.get_arguments() {
            let Some(long) = a.get_long() else {
                continue;
            };
            if long == "config" || a.is_global_set() != globals {
                continue;
            }
            if let Some(v) = raw_value(m, a.get_id().as_str()) {
                let _ = writeln!(s, "{long} = {v}");
            }
        }
    };
    push(cmd, top, true);
    if let Some((name, sub_m)) = top.subcommand() {
        if let Some(sub) = cmd.find_subcommand(name) {
            push(sub, sub_m, false);
        }
        s.insert_str(0, &format!("# command: {name}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_underscores() {
        let c = ConfigFile::parse("# hi\nbatch_size = 4\n\nlr=0.01\n").unwrap();
        assert_eq!(
            c.entries,
            [("batch-size".into(), "4".into()), ("lr".into(), "0.01".into())]
        );
        assert!(ConfigFile::parse("nonsense").is_err());
        assert!(ConfigFile::parse(" = 3").is_err());
    }

    #[test]
    fn finds_config_flag() {
        let args: Vec<OsString> = ["x", "train", "--config", "a.cfg"].map(Into::into).to_vec();
        assert_eq!(config_path(&args), Some(PathBuf::from("a.cfg")));
        let args: Vec<OsString> = ["x", "--config=b.cfg"].map(Into::into).to_vec();
        assert_eq!(config_path(&args), Some(PathBuf::from("b.cfg")));
    }
}
