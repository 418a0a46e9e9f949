use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

/// Resolves output paths and refuses to clobber existing files unless
/// `force` is set.
pub struct Outputs {
    pub dir: PathBuf,
    pub force: bool,
}

impl Outputs {
    /// `explicit` wins over `dir/default_name`.
    pub fn path(&self, explicit: Option<&Path>, default_name: &str) -> PathBuf {
        explicit.map_or_else(|| self.dir.join(default_name), Path::to_path_buf)
    }

    /// Fails before any work is done if a target already exists.
    pub fn check(&self, paths: &[&Path]) -> Result<()> {
        if self.force {
            return Ok(());
        }
        for p in paths {
            if p.exists() {
                bail!("{} exists; pass --force to overwrite", p.display());
            }
        }
        Ok(())
    }

    pub fn write_bytes(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let mut opts = OpenOptions::new();
        opts.write(true);
        if self.force {
            opts.create(true).truncate(true);
        } else {
            opts.create_new(true);
        }
        let mut f = opts
            .open(path)
            .with_context(|| format!("opening {} (use --force to overwrite)", path.display()))?;
        f.write_all(bytes)?;
        Ok(())
    }

    pub fn write_json<S: Serialize>(&self, path: &Path, value: &S) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(path, &bytes)
    }
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn quote(arg: &str) -> String {
    let plain = !arg.is_empty()
        && arg
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_./:=,+@%".contains(c));
    if plain {
        arg.to_string()
    } else {
        format!("'{}'", arg.replace('\'', r"'\''"))
    }
}

/// The command line with the resolved seed made explicit.
pub fn reproduction_line(args: &[String], seed_given: bool, seed: u64) -> String {
    let mut parts: Vec<String> = args.iter().map(|a| quote(a)).collect();
    if let Some(first) = parts.first_mut() {
        *first = "sdfl".into();
    }
    if !seed_given {
        parts.push("--seed".into());
        parts.push(seed.to_string());
    }
    format!("reproduce: {}", parts.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quoting() {
        assert_eq!(quote("a b"), "'a b'");
        assert_eq!(quote("csv:data.csv"), "csv:data.csv");
        assert_eq!(quote(""), "''");
    }

    #[test]
    fn seed_appended_when_missing() {
        let args = vec!["/x/sdfl".to_string(), "schedule".into(), "gen".into()];
        assert_eq!(reproduction_line(&args, false, 3), "reproduce: sdfl schedule gen --seed 3");
        assert_eq!(reproduction_line(&args, true, 3), "reproduce: sdfl schedule gen");
    }
}
