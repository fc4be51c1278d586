//! Flat TOML run configs: defaults, then the `--config` file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat TOML config; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory to create (must not exist or be empty).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

fn to_table(v: &impl Serialize, what: &str) -> Result<Table> {
    // through JSON so that unset flags (null) can be dropped
    let json = serde_json::to_value(v).with_context(|| format!("serialising {what}"))?;
    let serde_json::Value::Object(map) = json else { bail!("{what} is not a key-value document") };
    let mut t = Table::new();
    for (k, v) in map {
        if v.is_null() {
            continue;
        }
        let v = Value::try_from(v).with_context(|| format!("{what}: converting `{k}`"))?;
        t.insert(k, v);
    }
    Ok(t)
}

fn read_file(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: Table = text.parse().with_context(|| format!("parsing config {}", path.display()))?;
    if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
        bail!("config {}: key `{k}` is a table; configs are flat", path.display());
    }
    Ok(table)
}

/// Effective config plus its TOML snapshot.
pub struct Resolved<C> {
    pub config: C,
    pub snapshot: String,
}

/// Merges defaults, the config file and flag overrides (`Some` fields of
/// `flags`), then deserialises once so errors name the offending key.
pub fn resolve<C>(common: &Common, flags: &impl Serialize) -> Result<Resolved<C>>
where
    C: Default + Serialize + DeserializeOwned,
{
    let mut merged = to_table(&C::default(), "defaults")?;
    let has_seed = merged.contains_key("seed");
    if let Some(path) = &common.config {
        merged.extend(read_file(path)?);
    }
    merged.extend(to_table(flags, "flags")?);
    if let Some(seed) = common.seed {
        if !has_seed {
            bail!("--seed is not used by this command");
        }
        let seed = i64::try_from(seed).context("--seed must fit in a signed 64-bit integer")?;
        merged.insert("seed".into(), Value::Integer(seed));
    }
    let text = toml::to_string(&merged)?;
    let config: C = toml::from_str(&text).map_err(|e| anyhow::anyhow!(describe(&e, &text)))?;
    let snapshot = toml::to_string(&config)?;
    Ok(Resolved { config, snapshot })
}

fn describe(e: &toml::de::Error, text: &str) -> String {
    match e.span() {
        Some(span) => {
            let line = text[..span.start].matches('\n').count();
            let key = text.lines().nth(line).and_then(|l| l.split('=').next()).map(str::trim).unwrap_or("");
            format!("invalid config key `{key}`: {}", e.message())
        }
        None => format!("invalid config: {}", e.message()),
    }
}

/// Value of a required path key.
pub fn required<'a>(v: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    v.as_deref().with_context(|| format!("missing required key `{key}` (set it in the config or with --{})", key.replace('_', "-")))
}
