use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};

pub const MANIFEST_FILE: &str = "run_manifest.txt";

/// Everything needed to repeat a command: its arguments, the resolved
/// configuration and where it wrote.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the subcommand name, verbatim.
    pub args: Vec<String>,
    pub config_path: Option<String>,
    /// `key = value` lines.
    pub config: String,
    pub out_dir: String,
    pub threads: usize,
    pub started: u64,
    pub finished: u64,
    pub version: String,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, out_dir: &Path, threads: usize) -> Self {
        RunManifest {
            command: command.into(),
            args,
            config_path: None,
            config: String::new(),
            out_dir: out_dir.display().to_string(),
            threads,
            started: unix_now(),
            finished: 0,
            version: version(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "command = {}", self.command).unwrap();
        writeln!(s, "version = {}", self.version).unwrap();
        for a in &self.args {
            writeln!(s, "arg = {a}").unwrap();
        }
        if let Some(p) = &self.config_path {
            writeln!(s, "config_path = {p}").unwrap();
        }
        writeln!(s, "out_dir = {}", self.out_dir).unwrap();
        writeln!(s, "threads = {}", self.threads).unwrap();
        writeln!(s, "started_unix = {}", self.started).unwrap();
        writeln!(s, "finished_unix = {}", self.finished).unwrap();
        s.push_str("[config]\n");
        s.push_str(&self.config);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (head, config) = match text.split_once("[config]\n") {
            Some((h, c)) => (h, c.to_string()),
            None => (text, String::new()),
        };
        let mut m = RunManifest {
            command: String::new(),
            args: Vec::new(),
            config_path: None,
            config,
            out_dir: String::new(),
            threads: 1,
            started: 0,
            finished: 0,
            version: String::new(),
        };
        for line in head.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .or_else(|| line.strip_suffix(" =").map(|k| (k, "")))
                .with_context(|| format!("manifest line {line:?}"))?;
            match k {
                "command" => m.command = v.into(),
                "version" => m.version = v.into(),
                "arg" => m.args.push(v.into()),
                "config_path" => m.config_path = Some(v.into()),
                "out_dir" => m.out_dir = v.into(),
                "threads" => m.threads = v.parse()?,
                "started_unix" => m.started = v.parse()?,
                "finished_unix" => m.finished = v.parse()?,
                _ => bail!("unknown manifest key {k:?}"),
            }
        }
        if m.command.is_empty() {
            bail!("manifest has no command");
        }
        Ok(m)
    }

    /// Stamps the finish time and writes into the output directory.
    pub fn finish(&mut self) -> Result<()> {
        self.finished = unix_now();
        let path = Path::new(&self.out_dir).join(MANIFEST_FILE);
        std::fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut m = RunManifest::new("probe", vec!["--seeds".into(), "5".into(), "".into()], Path::new("/tmp/x"), 2);
        m.config_path = Some("a b.txt".into());
        m.config = "lr = 0.001\nseed = 3\n".into();
        m.finished = m.started + 7;
        assert_eq!(RunManifest::parse(&m.to_text()).unwrap(), m);
    }
}
