//! Run directories: a fresh folder per invocation with the effective config,
//! artifacts and a manifest of their hashes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const OUT_ENV: &str = "VOLDIFF_OUT";
pub const DEFAULT_ROOT: &str = "runs";
pub const MANIFEST: &str = "run.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const METRICS_LOG: &str = "metrics.jsonl";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    run_id: &'a str,
    command: &'a str,
    version: &'a str,
    seed: Option<i64>,
    config: &'a toml::Table,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics_log: Option<&'a str>,
    artifacts: Vec<Artifact>,
}

pub struct RunDir {
    pub dir: PathBuf,
    command: &'static str,
    run_id: String,
    snapshot: String,
    metrics: Option<fs::File>,
}

fn is_empty_dir(p: &Path) -> Result<bool> {
    Ok(fs::read_dir(p).with_context(|| format!("reading {}", p.display()))?.next().is_none())
}

impl RunDir {
    /// `out` if given (absent or empty), otherwise a new folder under
    /// `$VOLDIFF_OUT` (default `runs`) named after the command and config.
    pub fn create(command: &'static str, out: Option<&Path>, snapshot: String) -> Result<Self> {
        let run_id = format!("{command}-{}", &sha256_hex(snapshot.as_bytes())[..12]);
        let dir = match out {
            Some(p) => {
                if p.exists() && !(p.is_dir() && is_empty_dir(p)?) {
                    bail!("run directory {} already exists and is not empty", p.display());
                }
                p.to_path_buf()
            }
            None => {
                let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT));
                let mut dir = root.join(&run_id);
                let mut k = 2;
                while dir.exists() {
                    dir = root.join(format!("{run_id}-{k}"));
                    k += 1;
                }
                dir
            }
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join(CONFIG_SNAPSHOT), &snapshot).with_context(|| format!("writing {}", dir.display()))?;
        Ok(RunDir { dir, command, run_id, snapshot, metrics: None })
    }

    /// Path of `name` inside the run, with its parent folders created.
    pub fn path(&self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(p)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name)?;
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn write_json(&self, name: &str, v: &impl Serialize) -> Result<PathBuf> {
        self.write(name, serde_json::to_string_pretty(v)? + "\n")
    }

    /// Appends one JSON object to the metric log.
    pub fn log(&mut self, v: &impl Serialize) -> Result<()> {
        if self.metrics.is_none() {
            let p = self.path(METRICS_LOG)?;
            self.metrics = Some(fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?);
        }
        let f = self.metrics.as_mut().expect("opened above");
        writeln!(f, "{}", serde_json::to_string(v)?).context("writing metric log")?;
        Ok(())
    }

    /// Writes the manifest listing every file of the run with its hash.
    pub fn finish(mut self) -> Result<PathBuf> {
        if let Some(f) = self.metrics.take() {
            f.sync_all().context("flushing metric log")?;
        }
        let mut files = Vec::new();
        collect(&self.dir, &mut files)?;
        let mut files: Vec<(String, PathBuf)> = files
            .into_iter()
            .map(|f| (f.strip_prefix(&self.dir).expect("under the run dir").to_string_lossy().replace('\\', "/"), f))
            .filter(|(rel, _)| rel != MANIFEST)
            .collect();
        files.sort();
        let mut artifacts = Vec::with_capacity(files.len());
        for (rel, f) in files {
            let bytes = fs::read(&f).with_context(|| format!("reading {}", f.display()))?;
            artifacts.push(Artifact { path: rel, bytes: bytes.len() as u64, sha256: sha256_hex(&bytes) });
        }
        let config: toml::Table = self.snapshot.parse()?;
        let seed = config.get("seed").and_then(toml::Value::as_integer);
        let has_log = artifacts.iter().any(|a| a.path == METRICS_LOG);
        let manifest = Manifest {
            run_id: &self.run_id,
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config: &config,
            metrics_log: has_log.then_some(METRICS_LOG),
            artifacts,
        };
        self.write_json(MANIFEST, &manifest)?;
        eprintln!("run directory: {}", self.dir.display());
        Ok(self.dir)
    }
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = e?.path();
        if p.is_dir() {
            collect(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}
