// SPDX-License-Identifier: MIT OR Apache-2.0

//! Loading inputs and writing reports.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use lenskit::cache::SvdDiskCache;
use lenskit::jsonl::{read_jsonl, to_jsonl};
use lenskit::model::manifest::load_model;
use lenskit::model::Model;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Marks a failure that is not the caller's fault; maps to exit code 1.
#[derive(Debug)]
pub struct Internal(pub String);

impl fmt::Display for Internal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Internal {}

/// Loads a manifest and, when `LENSKIT_CACHE_DIR` is set, fills the head
/// SVDs from the on-disk cache.
pub fn model(path: &Path) -> anyhow::Result<Model> {
    let model = load_model(path).with_context(|| format!("loading model {}", path.display()))?;
    if let Some(cache) = SvdDiskCache::from_env() {
        cache.prime(&model).map_err(|e| Internal(format!("SVD cache {}: {e}", cache.dir().display())))?;
    }
    Ok(model)
}

/// Reads a JSON Lines file; an empty file is an input error.
pub fn records<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let records: Vec<T> = read_jsonl(path).with_context(|| format!("reading {}", path.display()))?;
    if records.is_empty() {
        bail!("{}: no records", path.display());
    }
    Ok(records)
}

pub fn json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Comma-separated list flag, e.g. `--top-p 5,10`.
pub fn list<T: std::str::FromStr>(raw: &str, flag: &str) -> anyhow::Result<Vec<T>> {
    let items: Vec<T> = raw
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| anyhow::anyhow!("--{flag}: cannot parse `{s}`")))
        .collect::<anyhow::Result<_>>()?;
    if items.is_empty() {
        bail!("--{flag} is empty");
    }
    Ok(items)
}

pub struct OutDir {
    path: PathBuf,
}

impl OutDir {
    pub fn create(path: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("creating output directory {}", path.display()))?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let target = self.path.join(name);
        fs::write(&target, bytes).map_err(|e| Internal(format!("writing {}: {e}", target.display())))?;
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Internal(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn jsonl<T: Serialize>(&self, name: &str, records: &[T]) -> anyhow::Result<()> {
        let text = to_jsonl(records).map_err(|e| Internal(e.to_string()))?;
        self.write(name, text.as_bytes())
    }

    pub fn csv<S: AsRef<str>>(&self, name: &str, header: &[&str], rows: &[Vec<S>]) -> anyhow::Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Internal(format!("{name}: {e}"));
        w.write_record(header).map_err(fail)?;
        for row in rows {
            w.write_record(row.iter().map(|c| c.as_ref())).map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| Internal(format!("{name}: {e}")))?;
        self.write(name, &bytes)
    }
}
