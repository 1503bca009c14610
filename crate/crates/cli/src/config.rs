//! Flat `key = value` config files and the resolved run config written next
//! to every output.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ArgMatches;

/// Parses `key = value` lines; `#` starts a comment. Keys are normalized to
/// flag spelling (`dim_k` and `dim-k` are the same key).
pub fn parse_config(text: &str, source: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{source}:{}: expected key = value", i + 1))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(format!("{source}:{}: empty key", i + 1));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

/// Inserts the config file's settings right after the subcommand, so that
/// flags given on the command line (parsed later) override them.
pub fn splice_config(args: Vec<String>) -> Result<Vec<String>, String> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    if args.len() < 2 || args[1].starts_with('-') {
        return Ok(args);
    }
    let text = fs::read_to_string(&path).map_err(|e| format!("--config {path}: {e}"))?;
    let mut spliced = args[..2].to_vec();
    for (k, v) in parse_config(&text, &path)? {
        if k == "config" {
            return Err(format!("{path}: nested config is not supported"));
        }
        match v.as_str() {
            "true" => spliced.push(format!("--{k}")),
            "false" => {}
            _ => {
                spliced.push(format!("--{k}"));
                spliced.push(v);
            }
        }
    }
    spliced.extend(args[2..].iter().cloned());
    Ok(spliced)
}

/// Every resolved argument of the subcommand as `key = value`, sorted.
pub fn render_run_config(command: &str, matches: &ArgMatches) -> String {
    let mut lines: Vec<String> = matches
        .ids()
        // argument groups from flattened structs carry the struct name
        .filter(|id| id.as_str() != "config" && !id.as_str().starts_with(char::is_uppercase))
        .filter_map(|id| {
            let values: Vec<String> = matches
                .get_raw(id.as_str())?
                .map(|v| v.to_string_lossy().into_owned())
                .collect();
            Some(format!("{} = {}", id.as_str().replace('_', "-"), values.join(",")))
        })
        .collect();
    lines.sort();
    format!("# mmcap {command}\n{}\n", lines.join("\n"))
}

pub fn run_config_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".runconfig");
    PathBuf::from(s)
}
