// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attack prefixes and the filtered probe-dataset pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};
use crate::metrics::{continuation_matches, EditCase};
use crate::model::LanguageModel;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Wiki,
    Rep,
    Que,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] = [AttackKind::Wiki, AttackKind::Rep, AttackKind::Que];

    pub fn label(self) -> &'static str {
        match self {
            AttackKind::Wiki => "Wiki",
            AttackKind::Rep => "Rep",
            AttackKind::Que => "Que",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Corpus,
    Template,
    Repetition,
    /// Supplied with the raw case or from an external question file.
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackPrefix {
    pub kind: AttackKind,
    pub text: String,
    pub provenance: Provenance,
}

/// Default number of repetitions for [`rep_prefix`].
pub const DEFAULT_REP_M: usize = 3;
/// Sentence cap for [`wiki_prefix`].
pub const WIKI_SENTENCE_CAP: usize = 3;
pub const DEFAULT_QUE_TEMPLATE: &str = "Is {o} the {r} of {s}? ";

/// `o` repeated `m` times, space separated, then `". "`.
pub fn rep_prefix(o: &str, m: usize) -> Result<AttackPrefix> {
    let o = o.trim();
    if m == 0 || o.is_empty() {
        return Err(LensError::Domain(format!("rep prefix needs m >= 1 and a non-empty answer (m = {m})")));
    }
    Ok(AttackPrefix {
        kind: AttackKind::Rep,
        text: format!("{}. ", vec![o; m].join(" ")),
        provenance: Provenance::Repetition,
    })
}

/// Question templates with `{s}`, `{r}`, `{o}` placeholders.
///
/// Template file format: `{"default": "...", "relations": {"<relation>": "..."}}`.
/// A missing `default` key keeps the built-in one; `"default": null` disables it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueTemplates {
    #[serde(default = "default_template")]
    pub default: Option<String>,
    #[serde(default)]
    pub relations: BTreeMap<String, String>,
}

fn default_template() -> Option<String> {
    Some(DEFAULT_QUE_TEMPLATE.to_string())
}

impl Default for QueTemplates {
    fn default() -> Self {
        Self { default: default_template(), relations: BTreeMap::new() }
    }
}

impl QueTemplates {
    pub fn load(path: &Path) -> Result<Self> {
        let t: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        for template in t.default.iter().chain(t.relations.values()) {
            check_template(template)?;
        }
        Ok(t)
    }

    pub fn template_for(&self, relation: &str) -> Result<&str> {
        self.relations
            .get(relation)
            .or(self.default.as_ref())
            .map(String::as_str)
            .ok_or_else(|| LensError::Template(format!("no template for relation `{relation}`")))
    }
}

fn check_template(template: &str) -> Result<()> {
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| LensError::Template(format!("unclosed placeholder in `{template}`")))?;
        let name = &rest[open + 1..open + close];
        if !matches!(name, "s" | "r" | "o") {
            return Err(LensError::Template(format!("unknown placeholder `{{{name}}}` in `{template}`")));
        }
        rest = &rest[open + close + 1..];
    }
    if template.trim().is_empty() {
        return Err(LensError::Template("empty template".into()));
    }
    Ok(())
}

pub fn que_prefix_with(templates: &QueTemplates, s: &str, r: &str, o: &str) -> Result<AttackPrefix> {
    let (s, r, o) = (s.trim(), r.trim(), o.trim());
    if s.is_empty() || r.is_empty() || o.is_empty() {
        return Err(LensError::Domain("question prefix needs non-empty s, r and o".into()));
    }
    let template = templates.template_for(r)?;
    check_template(template)?;
    // Single pass so substituted text is never re-expanded.
    let mut text = String::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        text.push_str(&rest[..open]);
        let close = open + rest[open..].find('}').unwrap_or(0);
        text.push_str(match &rest[open + 1..close] {
            "s" => s,
            "r" => r,
            _ => o,
        });
        rest = &rest[close + 1..];
    }
    text.push_str(rest);
    Ok(AttackPrefix { kind: AttackKind::Que, text, provenance: Provenance::Template })
}

pub fn que_prefix(s: &str, r: &str, o: &str) -> Result<AttackPrefix> {
    que_prefix_with(&QueTemplates::default(), s, r, o)
}

/// Splits after `.`, `!` or `?` when followed by whitespace. Fragments are trimmed.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            if let Some(&(_, next)) = chars.peek() {
                if next.is_whitespace() {
                    let end = i + c.len_utf8();
                    let piece = text[start..end].trim();
                    if !piece.is_empty() {
                        out.push(piece);
                    }
                    start = end;
                }
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Something that can return a summary for an entity.
pub trait SummaryLookup: Sync {
    fn summary(&self, entity: &str) -> Result<String>;
}

/// Remote summary fetcher plugged behind [`CachedSummaries`].
pub trait SummarySource: Send + Sync {
    fn fetch(&self, entity: &str) -> Result<Option<String>>;
    fn descriptor(&self) -> String;
}

/// Local entity → summary map (JSON object file).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SummaryCorpus {
    pub entries: BTreeMap<String, String>,
}

impl SummaryCorpus {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn insert(&mut self, entity: impl Into<String>, summary: impl Into<String>) {
        self.entries.insert(entity.into(), summary.into());
    }
}

impl SummaryLookup for SummaryCorpus {
    fn summary(&self, entity: &str) -> Result<String> {
        self.entries
            .get(entity.trim())
            .cloned()
            .ok_or_else(|| LensError::Lookup(format!("no summary for `{}`", entity.trim())))
    }
}

/// Corpus backed by a remote source; every fetch is persisted to `cache_path`
/// before it is returned, so repeated lookups never hit the source again.
pub struct CachedSummaries<S: SummarySource> {
    source: S,
    cache_path: PathBuf,
    cache: Mutex<SummaryCorpus>,
}

impl<S: SummarySource> CachedSummaries<S> {
    pub fn open(source: S, cache_path: impl Into<PathBuf>) -> Result<Self> {
        let cache_path = cache_path.into();
        let cache = if cache_path.exists() { SummaryCorpus::load(&cache_path)? } else { SummaryCorpus::default() };
        Ok(Self { source, cache_path, cache: Mutex::new(cache) })
    }

    pub fn descriptor(&self) -> String {
        format!("{} (cache {})", self.source.descriptor(), self.cache_path.display())
    }
}

impl<S: SummarySource> SummaryLookup for CachedSummaries<S> {
    fn summary(&self, entity: &str) -> Result<String> {
        let entity = entity.trim();
        let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(s) = cache.entries.get(entity) {
            return Ok(s.clone());
        }
        let fetched =
            self.source.fetch(entity)?.ok_or_else(|| LensError::Lookup(format!("no summary for `{entity}`")))?;
        cache.insert(entity, fetched.clone());
        cache.save(&self.cache_path)?;
        Ok(fetched)
    }
}

/// First (at most three) sentences of the summary of `o`.
pub fn wiki_prefix(o: &str, corpus: &dyn SummaryLookup) -> Result<AttackPrefix> {
    let summary = corpus.summary(o)?;
    let sentences = split_sentences(&summary);
    if sentences.is_empty() {
        return Err(LensError::Lookup(format!("empty summary for `{}`", o.trim())));
    }
    let n = sentences.len().min(WIKI_SENTENCE_CAP);
    Ok(AttackPrefix {
        kind: AttackKind::Wiki,
        text: format!("{} ", sentences[..n].join(" ")),
        provenance: Provenance::Corpus,
    })
}

/// Prefix followed by the query with exactly one space at the seam.
pub fn build_probe_text(prefix: &str, query: &str) -> String {
    format!("{} {}", prefix.trim_end(), query.trim_start())
}

pub fn build_probe(prefix: &AttackPrefix, query: &str) -> String {
    build_probe_text(&prefix.text, query)
}

/// Externally generated questions, one JSON object per line:
/// `{"subject", "relation", "original", "question"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalQuestion {
    pub subject: String,
    pub relation: String,
    pub original: String,
    pub question: String,
}

/// Everything needed to attach prefixes to a raw case.
pub struct PrefixBuilder<'a> {
    pub rep_m: usize,
    pub templates: QueTemplates,
    pub corpus: &'a dyn SummaryLookup,
    pub questions: BTreeMap<(String, String, String), String>,
    /// Greedy continuation length used by the filters.
    pub max_new_tokens: usize,
}

impl<'a> PrefixBuilder<'a> {
    pub fn new(corpus: &'a dyn SummaryLookup) -> Self {
        Self {
            rep_m: DEFAULT_REP_M,
            templates: QueTemplates::default(),
            corpus,
            questions: BTreeMap::new(),
            max_new_tokens: 8,
        }
    }

    pub fn with_questions(mut self, questions: Vec<ExternalQuestion>) -> Self {
        for q in questions {
            self.questions.insert((q.subject, q.relation, q.original), q.question);
        }
        self
    }

    /// Prefixes for one case. Prefixes already on the case win; a missing
    /// summary leaves the Wiki slot empty.
    pub fn prefixes(&self, case: &EditCase) -> Result<BTreeMap<AttackKind, AttackPrefix>> {
        let mut out = BTreeMap::new();
        for kind in AttackKind::ALL {
            if let Some(text) = case.attack_prefixes.get(&kind) {
                out.insert(kind, AttackPrefix { kind, text: text.clone(), provenance: Provenance::External });
                continue;
            }
            let built = match kind {
                AttackKind::Wiki => match wiki_prefix(&case.original, self.corpus) {
                    Ok(p) => p,
                    Err(LensError::Lookup(_)) => continue,
                    Err(e) => return Err(e),
                },
                AttackKind::Rep => rep_prefix(&case.original, self.rep_m)?,
                AttackKind::Que => {
                    let key = (case.subject.clone(), case.relation.clone(), case.original.clone());
                    match self.questions.get(&key) {
                        Some(q) => {
                            AttackPrefix { kind, text: format!("{} ", q.trim()), provenance: Provenance::External }
                        }
                        None => que_prefix_with(&self.templates, &case.subject, &case.relation, &case.original)?,
                    }
                }
            };
            out.insert(kind, built);
        }
        Ok(out)
    }
}

/// Per-attack counts of retained (case, kind) pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub wiki: usize,
    pub rep: usize,
    pub que: usize,
}

impl KindCounts {
    fn bump(&mut self, kind: AttackKind) {
        match kind {
            AttackKind::Wiki => self.wiki += 1,
            AttackKind::Rep => self.rep += 1,
            AttackKind::Que => self.que += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.wiki + self.rep + self.que
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantLog {
    pub name: String,
    pub cases: usize,
    pub probes: KindCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructionLog {
    pub raw_cases: usize,
    pub step1_retained: usize,
    pub step1_eliminated: usize,
    /// Cases with no summary available for the Wiki prefix.
    pub wiki_unavailable: usize,
    pub step2: Vec<VariantLog>,
    pub step3_cases: usize,
    pub step3_probes: KindCounts,
}

impl ConstructionLog {
    /// e.g. `CF-a: Wiki 323, Rep 484, Que 204, Total 1011`.
    pub fn summary_row(&self, name: &str) -> String {
        let c = &self.step3_probes;
        format!("{name}: Wiki {}, Rep {}, Que {}, Total {}", c.wiki, c.rep, c.que, c.total())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeDataset {
    pub cases: Vec<EditCase>,
    pub log: ConstructionLog,
}

/// Runs the three filtering steps.
///
/// 1. keep cases whose edit prompt the base model greedily answers with `o`;
/// 2. for each edited variant and attack kind, keep the (case, kind) pair when
///    the variant answers the probe `prefix ⊕ edit_prompt` with `o`;
/// 3. union over variants, one entry per `(s, r, o, o*)`, in raw order, with
///    the prefixes of every kind that survived for any variant.
pub fn construct_dataset(
    base: &dyn LanguageModel,
    edited: &[(&str, &dyn LanguageModel)],
    raw_cases: &[EditCase],
    builder: &PrefixBuilder<'_>,
) -> Result<ProbeDataset> {
    if raw_cases.is_empty() {
        return Err(LensError::Domain("dataset construction needs at least one raw case".into()));
    }
    if edited.is_empty() {
        return Err(LensError::Domain("dataset construction needs at least one edited model".into()));
    }
    for case in raw_cases {
        case.validate()?;
    }
    let max_new = builder.max_new_tokens;

    let step1 = par::try_map(raw_cases, |case| {
        let cont = base.greedy_continuation(&case.edit_prompt, max_new)?;
        Ok(continuation_matches(&cont, &case.original))
    })?;
    let survivors: Vec<usize> = (0..raw_cases.len()).filter(|&i| step1[i]).collect();
    let prefixes = par::try_map(&survivors, |&i| builder.prefixes(&raw_cases[i]))?;
    let wiki_unavailable = prefixes.iter().filter(|p| !p.contains_key(&AttackKind::Wiki)).count();

    let mut retained: BTreeMap<usize, BTreeSet<AttackKind>> = BTreeMap::new();
    let mut step2 = Vec::with_capacity(edited.len());
    for (name, model) in edited {
        let hits = par::try_map_range(survivors.len(), |j| {
            let case = &raw_cases[survivors[j]];
            let mut kinds = Vec::new();
            for (kind, prefix) in &prefixes[j] {
                let probe = build_probe(prefix, &case.edit_prompt);
                if continuation_matches(&model.greedy_continuation(&probe, max_new)?, &case.original) {
                    kinds.push(*kind);
                }
            }
            Ok(kinds)
        })?;
        let mut log = VariantLog { name: name.to_string(), cases: 0, probes: KindCounts::default() };
        for (j, kinds) in hits.into_iter().enumerate() {
            if kinds.is_empty() {
                continue;
            }
            log.cases += 1;
            for k in kinds {
                log.probes.bump(k);
                retained.entry(j).or_default().insert(k);
            }
        }
        step2.push(log);
    }

    let mut seen = BTreeSet::new();
    let mut cases = Vec::new();
    let mut counts = KindCounts::default();
    for (j, kinds) in retained {
        let raw = &raw_cases[survivors[j]];
        if !seen.insert(raw.key()) {
            continue;
        }
        let mut case = raw.clone();
        case.attack_prefixes = kinds.iter().map(|k| (*k, prefixes[j][k].text.clone())).collect();
        kinds.iter().for_each(|&k| counts.bump(k));
        cases.push(case);
    }

    Ok(ProbeDataset {
        log: ConstructionLog {
            raw_cases: raw_cases.len(),
            step1_retained: survivors.len(),
            step1_eliminated: raw_cases.len() - survivors.len(),
            wiki_unavailable,
            step2,
            step3_cases: cases.len(),
            step3_probes: counts,
        },
        cases,
    })
}
