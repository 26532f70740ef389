// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod analysis;
pub mod eval;
pub mod probe_gen;
pub mod toy;
pub mod unlearn;

use std::path::{Path, PathBuf};

use anyhow::Context;

/// `NAME=PATH` flag values.
pub fn named_path(raw: &str) -> Result<(String, PathBuf), String> {
    match raw.split_once('=') {
        Some((name, path)) if !name.trim().is_empty() && !path.is_empty() => {
            Ok((name.trim().to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected NAME=PATH, got `{raw}`")),
    }
}

/// Checks every record, naming the first bad one by its 1-based position.
pub fn validate_all<T>(path: &Path, records: &[T], check: impl Fn(&T) -> lenskit::Result<()>) -> anyhow::Result<()> {
    for (i, r) in records.iter().enumerate() {
        check(r).with_context(|| format!("{}: record {}", path.display(), i + 1))?;
    }
    Ok(())
}
