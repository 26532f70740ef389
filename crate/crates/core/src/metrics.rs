// SPDX-License-Identifier: MIT OR Apache-2.0

//! Editing and analysis metrics.
//!
//! All answer probabilities use the first-token convention of
//! [`LanguageModel::answer_token`]. Aggregates never depend on case order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};
use crate::interventions::{run_with_plan, AblationSpec};
use crate::lens::{logit_lens, ProbeCase};
use crate::model::{forward, LanguageModel, Model, TokenId};
use crate::numerics::Vector;
use crate::par;
use crate::probes::{build_probe_text, AttackKind};

/// A neighborhood prompt and the answer it should keep producing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborPrompt {
    pub prompt: String,
    pub expected: String,
}

/// One knowledge item `(s, r, o) → (s, r, o*)` with its prompt sets.
///
/// JSON Lines field names: `case_id` (optional), `subject`, `relation`,
/// `original`, `new`, `edit_prompt`, `queries`, `paraphrases`,
/// `neighborhood` (`[{prompt, expected}]`) and `attack_prefixes`
/// (`{"wiki"|"rep"|"que": text}`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCase {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    pub subject: String,
    pub relation: String,
    pub original: String,
    pub new: String,
    pub edit_prompt: String,
    /// Queries derivable from `(s, r)`; empty means just the edit prompt.
    #[serde(default)]
    pub queries: Vec<String>,
    #[serde(default)]
    pub paraphrases: Vec<String>,
    #[serde(default)]
    pub neighborhood: Vec<NeighborPrompt>,
    #[serde(default)]
    pub attack_prefixes: BTreeMap<AttackKind, String>,
}

impl EditCase {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("subject", &self.subject),
            ("relation", &self.relation),
            ("original", &self.original),
            ("new", &self.new),
            ("edit_prompt", &self.edit_prompt),
        ];
        if let Some((field, _)) = named.iter().find(|(_, v)| v.trim().is_empty()) {
            return Err(LensError::Domain(format!("edit case has empty `{field}`")));
        }
        if normalize(&self.original) == normalize(&self.new) {
            return Err(LensError::Domain(format!("original and new answers coincide: `{}`", self.original)));
        }
        if !self.queries.is_empty() && !self.queries.contains(&self.edit_prompt) {
            return Err(LensError::Domain("query set must contain the edit prompt".into()));
        }
        let texts = self
            .queries
            .iter()
            .chain(&self.paraphrases)
            .chain(self.neighborhood.iter().map(|n| &n.prompt))
            .chain(self.attack_prefixes.values());
        if texts.into_iter().any(|t| t.trim().is_empty()) {
            return Err(LensError::Domain("edit case contains an empty prompt".into()));
        }
        Ok(())
    }

    /// The query set `I`, which always contains the edit prompt.
    pub fn query_set(&self) -> Vec<&str> {
        if self.queries.is_empty() {
            vec![self.edit_prompt.as_str()]
        } else {
            self.queries.iter().map(String::as_str).collect()
        }
    }

    /// Deduplication key `(s, r, o, o*)`.
    pub fn key(&self) -> (String, String, String, String) {
        (self.subject.clone(), self.relation.clone(), self.original.clone(), self.new.clone())
    }

    pub fn label(&self) -> String {
        self.case_id
            .clone()
            .unwrap_or_else(|| format!("{} / {} : {} -> {}", self.subject, self.relation, self.original, self.new))
    }
}

/// Lowercase and collapse whitespace.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Whether a greedy continuation starts with `target` after normalization.
pub fn continuation_matches(continuation: &str, target: &str) -> bool {
    let target = normalize(target);
    !target.is_empty() && normalize(continuation).starts_with(&target)
}

/// Which way the efficacy / generalization / locality comparisons point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricDirection {
    /// Edit and paraphrase prompts should prefer `o*`; neighborhood prompts `o`.
    #[default]
    Conventional,
    /// Reversed directions: `o` over `o*` for efficacy and
    /// generalization, `o*` over `o` for locality.
    StrictAppendixB,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub max_new_tokens: usize,
    pub direction: MetricDirection,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { max_new_tokens: 8, direction: MetricDirection::Conventional }
    }
}

/// Result of one prompt (direct query or attack probe).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    /// `None` for a direct query.
    pub attack: Option<AttackKind>,
    pub query: String,
    pub prompt: String,
    pub continuation: String,
    pub p_original: f64,
    pub p_new: f64,
    pub matches_original: bool,
    pub matches_new: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case: String,
    pub probes: Vec<ProbeOutcome>,
    pub efficacy: bool,
    pub generalization: Vec<bool>,
    pub locality: Vec<bool>,
}

impl CaseOutcome {
    pub fn direct(&self) -> impl Iterator<Item = &ProbeOutcome> {
        self.probes.iter().filter(|p| p.attack.is_none())
    }

    pub fn attacked(&self, kind: Option<AttackKind>) -> impl Iterator<Item = &ProbeOutcome> {
        self.probes.iter().filter(move |p| p.attack.is_some() && (kind.is_none() || p.attack == kind))
    }

    /// Every direct query yields `o*` and every attack probe yields `o`.
    pub fn is_superficial(&self) -> bool {
        self.attacked(None).next().is_some()
            && self.direct().all(|p| p.matches_new)
            && self.attacked(None).all(|p| p.matches_original)
    }
}

fn first_tokens<M: LanguageModel + ?Sized>(model: &M, case: &EditCase) -> Result<(TokenId, TokenId)> {
    let o = model.answer_token(&case.original)?;
    let n = model.answer_token(&case.new)?;
    if o == n {
        return Err(LensError::Ambiguous(format!("`{}` and `{}` share first token {o}", case.original, case.new)));
    }
    Ok((o, n))
}

fn answer_probs<M: LanguageModel + ?Sized>(model: &M, prompt: &str, o: TokenId, n: TokenId) -> Result<(f64, f64)> {
    let dist = model.next_token_distribution(prompt)?;
    let get = |t: TokenId| {
        dist.get(t as usize).copied().ok_or_else(|| LensError::Index(format!("token {t} outside distribution")))
    };
    Ok((get(o)?, get(n)?))
}

pub fn evaluate_case<M: LanguageModel + ?Sized>(
    model: &M,
    case: &EditCase,
    settings: &EvalSettings,
) -> Result<CaseOutcome> {
    case.validate()?;
    let (o, n) = first_tokens(model, case)?;
    let mut probes = Vec::new();
    let mut run = |attack: Option<AttackKind>, query: &str, prompt: String| -> Result<()> {
        let continuation = model.greedy_continuation(&prompt, settings.max_new_tokens)?;
        let (p_original, p_new) = answer_probs(model, &prompt, o, n)?;
        probes.push(ProbeOutcome {
            attack,
            query: query.to_string(),
            matches_original: continuation_matches(&continuation, &case.original),
            matches_new: continuation_matches(&continuation, &case.new),
            prompt,
            continuation,
            p_original,
            p_new,
        });
        Ok(())
    };
    for query in case.query_set() {
        run(None, query, query.to_string())?;
    }
    for (&kind, prefix) in &case.attack_prefixes {
        for query in case.query_set() {
            run(Some(kind), query, build_probe_text(prefix, query))?;
        }
    }

    let prefers_new = |prompt: &str| -> Result<bool> {
        let (po, pn) = answer_probs(model, prompt, o, n)?;
        Ok(pn > po)
    };
    let prefers_original = |prompt: &str| -> Result<bool> {
        let (po, pn) = answer_probs(model, prompt, o, n)?;
        Ok(po > pn)
    };
    type Side<'a> = &'a dyn Fn(&str) -> Result<bool>;
    let (edit_side, keep_side): (Side, Side) = match settings.direction {
        MetricDirection::Conventional => (&prefers_new, &prefers_original),
        MetricDirection::StrictAppendixB => (&prefers_original, &prefers_new),
    };
    Ok(CaseOutcome {
        case: case.label(),
        probes,
        efficacy: edit_side(&case.edit_prompt)?,
        generalization: case.paraphrases.iter().map(|p| edit_side(p)).collect::<Result<_>>()?,
        locality: case.neighborhood.iter().map(|nb| keep_side(&nb.prompt)).collect::<Result<_>>()?,
    })
}

fn percentage(hits: usize, total: usize) -> f64 {
    100.0 * hits as f64 / total as f64
}

fn rate<'a, I, F>(items: I, what: &str, pred: F) -> Result<f64>
where
    I: IntoIterator<Item = &'a ProbeOutcome>,
    F: Fn(&ProbeOutcome) -> bool,
{
    let (mut hits, mut total) = (0usize, 0usize);
    for p in items {
        total += 1;
        hits += usize::from(pred(p));
    }
    if total == 0 {
        return Err(LensError::Domain(format!("{what} over zero outcomes")));
    }
    Ok(percentage(hits, total))
}

/// Percentage of outcomes whose continuation matches the original answer.
pub fn om<'a>(outcomes: impl IntoIterator<Item = &'a ProbeOutcome>) -> Result<f64> {
    rate(outcomes, "OM", |p| p.matches_original)
}

/// Percentage of outcomes with `P(o) > P(o*)` (strict).
pub fn op_metric<'a>(outcomes: impl IntoIterator<Item = &'a ProbeOutcome>) -> Result<f64> {
    rate(outcomes, "OP", |p| p.p_original > p.p_new)
}

fn bool_rate<'a>(flags: impl IntoIterator<Item = &'a bool>, what: &str) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for &f in flags {
        total += 1;
        hits += usize::from(f);
    }
    if total == 0 {
        return Err(LensError::Domain(format!("{what} over an empty prompt set")));
    }
    Ok(percentage(hits, total))
}

fn case_flags<M, F>(model: &M, cases: &[EditCase], direction: MetricDirection, what: &str, extract: F) -> Result<f64>
where
    M: LanguageModel + ?Sized,
    F: Fn(&EditCase, TokenId, TokenId, MetricDirection, &M) -> Result<Vec<bool>> + Sync + Send,
{
    if cases.is_empty() {
        return Err(LensError::Domain(format!("{what} needs at least one case")));
    }
    let flags = par::try_map(cases, |case| {
        case.validate()?;
        let (o, n) = first_tokens(model, case)?;
        extract(case, o, n, direction, model)
    })?;
    bool_rate(flags.iter().flatten(), what)
}

fn compare<M: LanguageModel + ?Sized>(model: &M, prompt: &str, o: TokenId, n: TokenId, want_new: bool) -> Result<bool> {
    let (po, pn) = answer_probs(model, prompt, o, n)?;
    Ok(if want_new { pn > po } else { po > pn })
}

/// Share of cases whose edit prompt prefers `o*` (conventional direction).
pub fn efficacy<M: LanguageModel + ?Sized>(model: &M, cases: &[EditCase], direction: MetricDirection) -> Result<f64> {
    case_flags(model, cases, direction, "efficacy", |case, o, n, dir, m| {
        Ok(vec![compare(m, &case.edit_prompt, o, n, dir == MetricDirection::Conventional)?])
    })
}

/// Share of paraphrase prompts (pooled over cases) preferring `o*`.
pub fn generalization<M: LanguageModel + ?Sized>(
    model: &M,
    cases: &[EditCase],
    direction: MetricDirection,
) -> Result<f64> {
    case_flags(model, cases, direction, "generalization", |case, o, n, dir, m| {
        case.paraphrases.iter().map(|p| compare(m, p, o, n, dir == MetricDirection::Conventional)).collect()
    })
}

/// Share of neighborhood prompts (pooled over cases) preferring `o`.
pub fn locality<M: LanguageModel + ?Sized>(model: &M, cases: &[EditCase], direction: MetricDirection) -> Result<f64> {
    case_flags(model, cases, direction, "locality", |case, o, n, dir, m| {
        case.neighborhood
            .iter()
            .map(|nb| compare(m, &nb.prompt, o, n, dir == MetricDirection::StrictAppendixB))
            .collect()
    })
}

/// Two-decimal, half-up rounding used for every reported percentage.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Table-style scores for one attack type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScores {
    pub eff: Option<f64>,
    pub gen: Option<f64>,
    pub loc: Option<f64>,
    pub om: Option<f64>,
    pub op: Option<f64>,
    pub cases: usize,
    pub probes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub model: String,
    pub wiki: AttackScores,
    pub rep: AttackScores,
    pub que: AttackScores,
    /// OM / OP pooled over every attack probe.
    pub overall: AttackScores,
    pub superficial_cases: usize,
    pub total_cases: usize,
}

/// Column order of [`ScoreCard::to_csv`].
pub const SCORECARD_COLUMNS: [&str; 16] = [
    "model", "wiki_eff", "wiki_gen", "wiki_loc", "wiki_om", "wiki_op", "rep_eff", "rep_gen", "rep_loc", "rep_om",
    "rep_op", "que_eff", "que_gen", "que_loc", "que_om", "que_op",
];

fn scores_for(outcomes: &[CaseOutcome], kind: Option<AttackKind>) -> AttackScores {
    let subset: Vec<&CaseOutcome> = outcomes.iter().filter(|o| o.attacked(kind).next().is_some()).collect();
    let probes: Vec<&ProbeOutcome> = subset.iter().flat_map(|o| o.attacked(kind)).collect();
    let eff = bool_rate(subset.iter().map(|o| &o.efficacy), "eff").ok();
    let gen = bool_rate(subset.iter().flat_map(|o| &o.generalization), "gen").ok();
    let loc = bool_rate(subset.iter().flat_map(|o| &o.locality), "loc").ok();
    AttackScores {
        eff: eff.map(round2),
        gen: gen.map(round2),
        loc: loc.map(round2),
        om: om(probes.iter().copied()).ok().map(round2),
        op: op_metric(probes.iter().copied()).ok().map(round2),
        cases: subset.len(),
        probes: probes.len(),
    }
}

impl ScoreCard {
    pub fn from_outcomes(model: impl Into<String>, outcomes: &[CaseOutcome]) -> Self {
        Self {
            model: model.into(),
            wiki: scores_for(outcomes, Some(AttackKind::Wiki)),
            rep: scores_for(outcomes, Some(AttackKind::Rep)),
            que: scores_for(outcomes, Some(AttackKind::Que)),
            overall: scores_for(outcomes, None),
            superficial_cases: outcomes.iter().filter(|o| o.is_superficial()).count(),
            total_cases: outcomes.len(),
        }
    }

    pub fn csv_row(&self) -> Vec<String> {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
        let mut row = vec![self.model.clone()];
        for s in [&self.wiki, &self.rep, &self.que] {
            row.extend([cell(s.eff), cell(s.gen), cell(s.loc), cell(s.om), cell(s.op)]);
        }
        row
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", SCORECARD_COLUMNS.join(","), self.csv_row().join(","))
    }
}

/// Evaluates every case (in parallel) and builds the score card.
pub fn evaluate_dataset<M: LanguageModel + ?Sized>(
    model: &M,
    name: &str,
    cases: &[EditCase],
    settings: &EvalSettings,
) -> Result<(ScoreCard, Vec<CaseOutcome>)> {
    if cases.is_empty() {
        return Err(LensError::Domain("evaluation needs at least one case".into()));
    }
    let outcomes = par::try_map(cases, |c| evaluate_case(model, c, settings))?;
    Ok((ScoreCard::from_outcomes(name, &outcomes), outcomes))
}

/// Mean final answer probabilities (percent) with and without an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationDelta {
    pub original_without: f64,
    pub original_with: f64,
    /// `original_without − original_with` (a drop is positive).
    pub original_drop: f64,
    pub new_without: f64,
    pub new_with: f64,
    /// `new_with − new_without` (a rise is positive).
    pub new_rise: f64,
    pub cases: usize,
}

/// Per-case `(P(o), P(o*))` at the final position, without then with ablation.
pub fn paired_probabilities(model: &Model, cases: &[ProbeCase], spec: &AblationSpec) -> Result<Vec<[f64; 4]>> {
    let plan = spec.resolve(model)?;
    par::try_map(cases, |case| {
        let new = case.new.ok_or_else(|| LensError::Domain(format!("case {} lacks a new-answer token", case.id)))?;
        model.check_token(case.original)?;
        model.check_token(new)?;
        let plain = forward(model, &case.tokens, case.tokens.len().saturating_sub(1))?;
        let ablated = run_with_plan(model, &case.tokens, &plan)?;
        Ok([
            plain.next_token_distribution[case.original as usize],
            ablated.next_token_distribution[case.original as usize],
            plain.next_token_distribution[new as usize],
            ablated.next_token_distribution[new as usize],
        ])
    })
}

pub fn ablation_delta(model: &Model, cases: &[ProbeCase], spec: &AblationSpec) -> Result<AblationDelta> {
    if cases.is_empty() {
        return Err(LensError::Domain("ablation delta needs at least one case".into()));
    }
    let rows = paired_probabilities(model, cases, spec)?;
    let col = |k: usize| 100.0 * par::order_free_mean(&rows.iter().map(|r| r[k]).collect::<Vec<_>>());
    let (ow, oa, nw, na) = (col(0), col(1), col(2), col(3));
    Ok(AblationDelta {
        original_without: ow,
        original_with: oa,
        original_drop: ow - oa,
        new_without: nw,
        new_with: na,
        new_rise: na - nw,
        cases: cases.len(),
    })
}

/// Decoding success rate: share of `(vector, target)` pairs whose target is
/// among the top `k` logit-lens tokens of the vector (final norm off).
pub fn dsr(model: &Model, items: &[(Vector, TokenId)], k: usize) -> Result<f64> {
    let v = model.config().vocab_size;
    if k == 0 || k > v {
        return Err(LensError::Domain(format!("K = {k} outside 1..={v}")));
    }
    if items.is_empty() {
        return Err(LensError::Domain("DSR over zero cases".into()));
    }
    let hits = par::try_map(items, |(vector, target)| {
        model.check_token(*target)?;
        Ok(logit_lens(model, vector, false)?.rank(*target)? <= k)
    })?;
    Ok(percentage(hits.iter().filter(|&&h| h).count(), items.len()))
}
