// SPDX-License-Identifier: MIT OR Apache-2.0

//! Analysis of unlearned models that still leak the forgotten answer.

use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};
use crate::interventions::{identify_significant_vectors, run_with_plan, select_heads, AblationSpec, HeadId};
use crate::lens::{head_scan, HeadScan, ProbeCase};
use crate::metrics::continuation_matches;
use crate::model::{LanguageModel, Model};
use crate::par;
use crate::probes::build_probe_text;

pub const DEFAULT_REJECTION_MARKERS: [&str; 3] = ["I couldn't", "I do not have information", "I cannot"];
/// Heads whose mean LOPH is strictly above this are selected.
pub const UNLEARNING_THRESHOLD: f64 = 0.02;
pub const DEFAULT_P_PERCENTS: [f64; 2] = [5.0, 10.0];

/// One JSON Lines record: `target`, `query`, `attack_suffix`, `original`,
/// optional `case_id` and `rejection_markers`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlearnCase {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    pub target: String,
    pub query: String,
    #[serde(default)]
    pub attack_suffix: String,
    pub original: String,
    #[serde(default = "default_markers")]
    pub rejection_markers: Vec<String>,
}

fn default_markers() -> Vec<String> {
    DEFAULT_REJECTION_MARKERS.iter().map(|s| s.to_string()).collect()
}

impl UnlearnCase {
    pub fn validate(&self) -> Result<()> {
        if self.query.trim().is_empty() || self.original.trim().is_empty() {
            return Err(LensError::Domain("unlearning case needs a query and an answer".into()));
        }
        Ok(())
    }

    /// Query followed by the attack suffix (if any).
    pub fn probe(&self) -> String {
        if self.attack_suffix.trim().is_empty() {
            self.query.clone()
        } else {
            build_probe_text(&self.query, &self.attack_suffix)
        }
    }

    pub fn label(&self) -> String {
        self.case_id.clone().unwrap_or_else(|| format!("{}: {}", self.target, self.query))
    }

    pub fn probe_case(&self, model: &Model) -> Result<ProbeCase> {
        self.validate()?;
        ProbeCase::from_text(model, self.label(), &self.probe(), &self.original, None)
    }
}

/// True iff the trimmed continuation starts with a marker, ignoring case.
pub fn detect_rejection<S: AsRef<str>>(continuation: &str, markers: &[S]) -> bool {
    let text = continuation.trim().to_lowercase();
    markers.iter().any(|m| {
        let m = m.as_ref().trim().to_lowercase();
        !m.is_empty() && text.starts_with(&m)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlearnOutcome {
    pub case: String,
    pub probe: String,
    pub continuation: String,
    pub rejected: bool,
    pub leaks_original: bool,
}

/// Greedy continuation of every probe, classified as rejection or leak.
pub fn classify_responses<M: LanguageModel + ?Sized>(
    model: &M,
    cases: &[UnlearnCase],
    max_new_tokens: usize,
) -> Result<Vec<UnlearnOutcome>> {
    par::try_map(cases, |c| {
        c.validate()?;
        let probe = c.probe();
        let continuation = model.greedy_continuation(&probe, max_new_tokens)?;
        Ok(UnlearnOutcome {
            case: c.label(),
            rejected: detect_rejection(&continuation, &c.rejection_markers),
            leaks_original: continuation_matches(&continuation, &c.original),
            probe,
            continuation,
        })
    })
}

/// Mean LOPH grid and the heads above [`UNLEARNING_THRESHOLD`].
pub fn unlearning_head_scan(model: &Model, cases: &[ProbeCase]) -> Result<(HeadScan, Vec<HeadId>)> {
    let scan = head_scan(model, cases)?;
    let heads = select_heads(&scan, UNLEARNING_THRESHOLD);
    Ok((scan, heads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearningRow {
    pub p_percent: f64,
    pub probability: f64,
    pub ablation: AblationSpec,
}

/// Mean `P(o)` in percent without ablation and after removing the top-p%
/// singular vectors of every selected head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearningTable {
    pub heads: Vec<HeadId>,
    pub without: f64,
    pub rows: Vec<UnlearningRow>,
}

impl UnlearningTable {
    pub fn to_csv(&self) -> String {
        let mut header = vec!["w/o abl.".to_string()];
        let mut values = vec![format!("{:.2}", crate::metrics::round2(self.without))];
        for r in &self.rows {
            header.push(format!("-top {}%", r.p_percent));
            values.push(format!("{:.2}", crate::metrics::round2(r.probability)));
        }
        format!("{}\n{}\n", header.join(","), values.join(","))
    }
}

fn mean_original_probability(model: &Model, cases: &[ProbeCase], spec: &AblationSpec) -> Result<f64> {
    let plan = spec.resolve(model)?;
    let probs = par::try_map(cases, |c| {
        model.check_token(c.original)?;
        let trace = run_with_plan(model, &c.tokens, &plan)?;
        Ok(trace.next_token_distribution[c.original as usize])
    })?;
    Ok(100.0 * par::order_free_mean(&probs))
}

pub fn unlearning_ablation_table(
    model: &Model,
    cases: &[ProbeCase],
    heads: &[HeadId],
    p_percents: &[f64],
) -> Result<UnlearningTable> {
    if cases.is_empty() {
        return Err(LensError::Domain("unlearning table needs at least one case".into()));
    }
    let without = mean_original_probability(model, cases, &AblationSpec::default())?;
    let mut rows = Vec::with_capacity(p_percents.len());
    for &p in p_percents {
        let mut spec = AblationSpec::default();
        for &head in heads {
            let report = identify_significant_vectors(model, cases, head, p)?;
            spec.zeroed_singular_vectors.push(report.as_ablation());
        }
        rows.push(UnlearningRow {
            p_percent: p,
            probability: mean_original_probability(model, cases, &spec)?,
            ablation: spec,
        });
    }
    Ok(UnlearningTable { heads: heads.to_vec(), without, rows })
}
