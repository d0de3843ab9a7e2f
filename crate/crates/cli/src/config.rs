//! Flat `key=value` config files and the resolved-config echo.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

pub const RESOLVED_CONFIG: &str = "resolved-config.txt";

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; repeated keys are an error.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value", n + 1))?;
        let k = k.trim().to_string();
        if k.is_empty() {
            return Err(format!("config line {}: empty key", n + 1));
        }
        if !seen.insert(k.clone()) {
            return Err(format!("config line {}: duplicate key `{k}`", n + 1));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

fn flag_given(args: &[String], key: &str) -> bool {
    let flag = format!("--{key}");
    let prefix = format!("--{key}=");
    args.iter().any(|a| *a == flag || a.starts_with(&prefix))
}

/// Splices the values of a `--config` file into `argv` right after the
/// subcommand, skipping keys also given as flags. A `command` key must
/// name the subcommand being run.
pub fn expand_argv(argv: Vec<String>) -> Result<Vec<String>, String> {
    if argv.len() < 2 || argv[1].starts_with('-') {
        return Ok(argv);
    }
    let rest = &argv[2..];
    let mut path = None;
    for (i, a) in rest.iter().enumerate() {
        if a == "--config" {
            path = Some(rest.get(i + 1).ok_or("--config needs a value")?.clone());
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let text =
        fs::read_to_string(&path).map_err(|e| format!("cannot read config `{path}`: {e}"))?;
    let mut injected = Vec::new();
    for (k, v) in parse(&text)? {
        match k.as_str() {
            "command" => {
                if v != argv[1] {
                    return Err(format!("config is for `{v}`, not `{}`", argv[1]));
                }
            }
            "config" => return Err("config files cannot include other config files".into()),
            _ if flag_given(rest, &k) => {}
            _ => {
                injected.push(format!("--{k}"));
                injected.push(v);
            }
        }
    }
    let mut out = argv[..2].to_vec();
    out.extend(injected);
    out.extend_from_slice(rest);
    Ok(out)
}

fn render(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        Value::Array(items) => Some(
            items
                .iter()
                .filter_map(render)
                .collect::<Vec<_>>()
                .join(","),
        ),
        other => Some(other.to_string()),
    }
}

/// `command=<name>` followed by every effective setting, keys sorted.
pub fn resolved(command: &str, args: &impl Serialize) -> Result<String, serde_json::Error> {
    let mut text = format!("command={command}\n");
    if let Value::Object(map) = serde_json::to_value(args)? {
        for (k, v) in &map {
            if let Some(v) = render(v) {
                text.push_str(&format!("{k}={v}\n"));
            }
        }
    }
    Ok(text)
}

pub fn write_resolved(dir: &Path, command: &str, args: &impl Serialize) -> std::io::Result<()> {
    let text = resolved(command, args).map_err(std::io::Error::other)?;
    fs::write(dir.join(RESOLVED_CONFIG), text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_and_rejects_duplicates() {
        let kv = parse("# c\n a = 1 \n\nb=x=y\n").unwrap();
        assert_eq!(
            kv,
            vec![("a".into(), "1".into()), ("b".into(), "x=y".into())]
        );
        assert!(parse("a=1\na=2").is_err());
        assert!(parse("novalue").is_err());
    }

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "command=train\nsteps=10\nlr=0.1\n").unwrap();
        let p = p.to_str().unwrap();
        let out = expand_argv(argv(&["elsa", "train", "--config", p, "--steps=3"])).unwrap();
        assert_eq!(
            out,
            argv(&["elsa", "train", "--lr", "0.1", "--config", p, "--steps=3"])
        );
        assert!(expand_argv(argv(&["elsa", "oracle", "--config", p])).is_err());
    }
}
