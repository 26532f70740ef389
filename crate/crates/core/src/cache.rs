// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk cache of per-head SVD factorizations.
//!
//! Files live under `<dir>/svd/<sha256 of the head slice>.json` and store
//! every float as its IEEE-754 bit pattern, so a cached factorization is
//! bit-identical to a fresh one. Unreadable or mismatched files are ignored
//! and rewritten.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::model::Model;
use crate::numerics::{svd, SvdFactorization};
use crate::numerics::{Matrix, Vector};

pub const CACHE_DIR_ENV: &str = "LENSKIT_CACHE_DIR";

#[derive(Serialize, Deserialize)]
struct Stored {
    rows: usize,
    cols: usize,
    rank: usize,
    singular_values: Vec<u64>,
    u_vectors: Vec<Vec<u64>>,
    v_vectors: Vec<Vec<u64>>,
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn unbits(v: &[u64]) -> Vector {
    v.iter().map(|&b| f64::from_bits(b)).collect()
}

impl Stored {
    fn new(m: &Matrix, f: &SvdFactorization) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            rank: f.rank,
            singular_values: bits(&f.singular_values),
            u_vectors: f.u_vectors.iter().map(|u| bits(u)).collect(),
            v_vectors: f.v_vectors.iter().map(|v| bits(v)).collect(),
        }
    }

    fn restore(&self, m: &Matrix) -> Option<SvdFactorization> {
        let k = m.rows().min(m.cols());
        let fits = self.rows == m.rows()
            && self.cols == m.cols()
            && self.singular_values.len() == k
            && self.u_vectors.len() == k
            && self.v_vectors.len() == k
            && self.u_vectors.iter().all(|u| u.len() == m.rows())
            && self.v_vectors.iter().all(|v| v.len() == m.cols());
        fits.then(|| SvdFactorization {
            u_vectors: self.u_vectors.iter().map(|u| unbits(u)).collect(),
            singular_values: unbits(&self.singular_values).into_inner(),
            v_vectors: self.v_vectors.iter().map(|v| unbits(v)).collect(),
            rank: self.rank,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SvdDiskCache {
    dir: PathBuf,
}

impl SvdDiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// Cache rooted at `$LENSKIT_CACHE_DIR`, if set and non-empty.
    pub fn from_env() -> Option<Self> {
        env::var_os(CACHE_DIR_ENV).filter(|v| !v.is_empty()).map(Self::new)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, m: &Matrix) -> PathBuf {
        let mut h = Sha256::new();
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for x in m.data() {
            h.update(x.to_le_bytes());
        }
        let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        self.dir.join("svd").join(format!("{hex}.json"))
    }

    /// Cached factorization of `m`, computing and storing it on a miss.
    pub fn factorize(&self, m: &Matrix) -> Result<SvdFactorization> {
        let path = self.path_for(m);
        if let Ok(text) = fs::read_to_string(&path) {
            if let Some(f) = serde_json::from_str::<Stored>(&text).ok().and_then(|s| s.restore(m)) {
                return Ok(f);
            }
        }
        let f = svd(m)?;
        fs::create_dir_all(path.parent().expect("cache path has a parent"))?;
        // write-then-rename keeps concurrent readers from seeing partial files
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, serde_json::to_string(&Stored::new(m, &f))?)?;
        fs::rename(&tmp, &path)?;
        Ok(f)
    }

    /// Fills the model's in-memory SVD cache for every head.
    pub fn prime(&self, model: &Model) -> Result<()> {
        let c = model.config();
        for l in 0..c.n_layers {
            for h in 0..c.n_heads {
                let f = self.factorize(&model.head_output_matrix(l, h)?)?;
                model.prime_head_svd(l, h, f)?;
            }
        }
        Ok(())
    }
}
