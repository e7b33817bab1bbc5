//! Situations, comments and rules-of-thumb: validation, judgment coding,
//! rule-of-thumb extension and split assignment.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bundled judgment-phrase table.
pub const SEED_JUDGMENT_PHRASES: &str = include_str!("../data/judgment_phrases.tsv");

/// Rules-of-thumb per situation after extension.
pub const DEFAULT_ROTS_PER_SITUATION: usize = 5;

/// Annotators kept, ranked by comment count in `D`.
pub const DEFAULT_ROSTER_SIZE: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    D,
    DPlus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JudgmentCode {
    #[serde(rename = "YTA")]
    Yta,
    #[serde(rename = "NTA")]
    Nta,
    #[serde(rename = "ESH")]
    Esh,
    #[serde(rename = "NAH")]
    Nah,
    #[serde(rename = "INFO")]
    Info,
}

impl JudgmentCode {
    pub const ALL: [JudgmentCode; 5] = [
        JudgmentCode::Yta,
        JudgmentCode::Nta,
        JudgmentCode::Esh,
        JudgmentCode::Nah,
        JudgmentCode::Info,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            JudgmentCode::Yta => "YTA",
            JudgmentCode::Nta => "NTA",
            JudgmentCode::Esh => "ESH",
            JudgmentCode::Nah => "NAH",
            JudgmentCode::Info => "INFO",
        }
    }
}

impl fmt::Display for JudgmentCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JudgmentCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        JudgmentCode::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown judgment code {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JudgmentLabel {
    Acceptable,
    Unacceptable,
}

impl JudgmentLabel {
    /// Class index used by the classifiers: Acceptable = 0.
    pub fn index(self) -> usize {
        match self {
            JudgmentLabel::Acceptable => 0,
            JudgmentLabel::Unacceptable => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            JudgmentLabel::Acceptable
        } else {
            JudgmentLabel::Unacceptable
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            JudgmentLabel::Acceptable => JudgmentLabel::Unacceptable,
            JudgmentLabel::Unacceptable => JudgmentLabel::Acceptable,
        }
    }
}

impl FromStr for JudgmentLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "acceptable" => Ok(JudgmentLabel::Acceptable),
            "unacceptable" => Ok(JudgmentLabel::Unacceptable),
            _ => Err(Error::Validation(format!("unknown polarity {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SituationRecord {
    pub id: String,
    pub text: String,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// A comment as it appears in the input files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawComment {
    pub id: String,
    pub annotator_id: String,
    pub situation_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRot {
    pub id: String,
    pub situation_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommentRecord {
    pub id: String,
    pub annotator_id: String,
    pub situation_id: String,
    pub text: String,
    pub code: Option<JudgmentCode>,
    pub label: Option<JudgmentLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Original,
    Flipped,
    Padded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleOfThumb {
    pub id: String,
    pub situation_id: String,
    pub text: String,
    /// `None` when the leading phrase is not in the judgment-phrase table.
    pub polarity: Option<JudgmentLabel>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorRoster {
    pub annotator_ids: Vec<String>,
    pub comment_counts: Vec<usize>,
}

impl AnnotatorRoster {
    /// Top `size` annotators by descending retained comment count in `D`, ties by id.
    pub fn select(comments: &[CommentRecord], situations: &HashMap<&str, &SituationRecord>, size: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for c in comments {
            let in_d = situations
                .get(c.situation_id.as_str())
                .is_some_and(|s| s.source == Source::D);
            if in_d && c.label.is_some() {
                *counts.entry(c.annotator_id.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(size);
        Self {
            annotator_ids: ranked.iter().map(|(a, _)| a.to_string()).collect(),
            comment_counts: ranked.iter().map(|(_, n)| *n).collect(),
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.annotator_ids.iter().any(|a| a == id)
    }
}

/// First judgment code in reading order, matched case-insensitively on word boundaries.
pub fn parse_judgment_code(text: &str) -> Option<JudgmentCode> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .find_map(|t| t.parse().ok())
}

/// NTA/NAH are acceptable, YTA/ESH unacceptable; INFO carries no judgment.
pub fn code_to_label(code: JudgmentCode) -> Option<JudgmentLabel> {
    match code {
        JudgmentCode::Nta | JudgmentCode::Nah => Some(JudgmentLabel::Acceptable),
        JudgmentCode::Yta | JudgmentCode::Esh => Some(JudgmentLabel::Unacceptable),
        JudgmentCode::Info => None,
    }
}

/// String form of [`code_to_label`] that rejects unknown codes.
pub fn code_str_to_label(code: &str) -> Result<Option<JudgmentLabel>> {
    Ok(code_to_label(code.parse()?))
}

/// Removes judgment code tokens so comment text cannot leak its own verdict.
pub fn strip_judgment_codes(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if word.parse::<JudgmentCode>().is_err() {
            out.push_str(word);
        }
        word.clear();
    };
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            out.push(c);
        }
    }
    flush(&mut word, &mut out);
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseEntry {
    pub phrase: String,
    pub flipped: String,
    pub polarity: JudgmentLabel,
}

/// Judgment-phrase table: each row yields a pair of opposite-polarity phrases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgmentPhrases {
    // both directions, longest phrase first
    entries: Vec<PhraseEntry>,
}

impl JudgmentPhrases {
    pub fn seed() -> Self {
        Self::parse(SEED_JUDGMENT_PHRASES, "<seed phrases>").expect("bundled phrase table is valid")
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses `phrase<TAB>flipped<TAB>polarity` rows.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            let [phrase, flipped, polarity] = cols[..] else {
                return Err(bad("expected `phrase<TAB>flipped<TAB>polarity`".into()));
            };
            if phrase.is_empty() || flipped.is_empty() {
                return Err(bad("empty phrase".into()));
            }
            let polarity: JudgmentLabel = polarity.parse().map_err(|e: Error| bad(e.to_string()))?;
            for (p, f, pol) in [(phrase, flipped, polarity), (flipped, phrase, polarity.flipped())] {
                if !seen.insert(p.to_lowercase()) {
                    return Err(bad(format!("duplicate phrase {p:?}")));
                }
                entries.push(PhraseEntry {
                    phrase: p.to_string(),
                    flipped: f.to_string(),
                    polarity: pol,
                });
            }
        }
        entries.sort_by(|a, b| b.phrase.len().cmp(&a.phrase.len()).then(a.phrase.cmp(&b.phrase)));
        Ok(Self { entries })
    }

    /// Longest table phrase that `text` starts with, on a word boundary.
    pub fn leading(&self, text: &str) -> Option<&PhraseEntry> {
        let t = text.trim_start();
        self.entries.iter().find(|e| {
            let n = e.phrase.len();
            t.len() >= n
                && t.is_char_boundary(n)
                && t[..n].eq_ignore_ascii_case(&e.phrase)
                && t[n..]
                    .chars()
                    .next()
                    .map_or(true, |c| !c.is_alphanumeric() && c != '\'')
        })
    }

    pub fn entries(&self) -> &[PhraseEntry] {
        &self.entries
    }
}

/// Polarity of the rule's leading judgment phrase.
pub fn rot_polarity(text: &str, phrases: &JudgmentPhrases) -> Result<JudgmentLabel> {
    phrases
        .leading(text)
        .map(|e| e.polarity)
        .ok_or_else(|| Error::UnclassifiableRot(text.to_string()))
}

/// The rule with its leading phrase swapped for the opposite one.
pub fn flip_rot_text(text: &str, phrases: &JudgmentPhrases) -> Option<(String, JudgmentLabel)> {
    let e = phrases.leading(text)?;
    let t = text.trim_start();
    Some((format!("{}{}", e.flipped, &t[e.phrase.len()..]), e.polarity.flipped()))
}

/// Extends a situation's rules to exactly `k`: originals, then polarity
/// flips, then duplicates of the lowest-id rule's flip.
pub fn extend_rots(rots: &[RuleOfThumb], k: usize, phrases: &JudgmentPhrases) -> Result<Vec<RuleOfThumb>> {
    let mut originals: Vec<RuleOfThumb> = rots
        .iter()
        .filter(|r| r.provenance == Provenance::Original)
        .cloned()
        .collect();
    if originals.is_empty() {
        return Err(Error::Validation("extend_rots needs at least one original rule".into()));
    }
    for r in &mut originals {
        r.polarity = phrases.leading(&r.text).map(|e| e.polarity);
    }
    let classifiable = originals.iter().any(|r| r.polarity.is_some());
    let both = |rs: &[RuleOfThumb]| {
        let pols: HashSet<_> = rs.iter().filter_map(|r| r.polarity).collect();
        pols.len() == 2
    };
    if rots.len() == k && (both(rots) || !classifiable) {
        return Ok(rots.to_vec());
    }
    originals.sort_by(|a, b| a.id.cmp(&b.id));

    let flips: Vec<RuleOfThumb> = originals
        .iter()
        .filter_map(|r| {
            flip_rot_text(&r.text, phrases).map(|(text, pol)| RuleOfThumb {
                id: format!("{}#flip", r.id),
                situation_id: r.situation_id.clone(),
                text,
                polarity: Some(pol),
                provenance: Provenance::Flipped,
            })
        })
        .collect();

    let mut out: Vec<RuleOfThumb> = originals.iter().chain(&flips).cloned().collect();
    if out.len() > k {
        let mut head: Vec<RuleOfThumb> = out[..k].to_vec();
        for want in [JudgmentLabel::Acceptable, JudgmentLabel::Unacceptable] {
            if !classifiable || head.iter().any(|r| r.polarity == Some(want)) {
                continue;
            }
            let Some(missing) = out[k..].iter().find(|r| r.polarity == Some(want)) else {
                continue;
            };
            // replace the last slot whose polarity is unclassified or duplicated
            let redundant = (0..k).rev().find(|&i| match head[i].polarity {
                None => true,
                Some(p) => head.iter().filter(|r| r.polarity == Some(p)).count() > 1,
            });
            if let Some(i) = redundant {
                head[i] = missing.clone();
            }
        }
        out = head;
    }
    let template = flips.first().unwrap_or(&originals[0]).clone();
    let mut n = 0;
    while out.len() < k {
        n += 1;
        out.push(RuleOfThumb {
            id: format!("{}#pad{n}", template.id),
            provenance: Provenance::Padded,
            ..template.clone()
        });
    }
    Ok(out)
}

/// Split assignment outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub d_counts: [usize; 3],
    pub dplus_counts: [usize; 3],
    /// DPlus situations dropped because they duplicate a D valid/test situation.
    pub dplus_excluded: Vec<String>,
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn split_index(s: Split) -> usize {
    match s {
        Split::Train => 0,
        Split::Valid => 1,
        Split::Test => 2,
    }
}

/// Keeps D's provided splits and assigns DPlus 80/10/10 by a seeded shuffle.
///
/// DPlus situations whose id or text matches a D valid/test situation are
/// removed from `situations` before splitting.
pub fn make_splits(situations: &mut Vec<SituationRecord>, seed: u64) -> Result<SplitSummary> {
    let mut d_counts = [0; 3];
    let mut held_out = HashSet::new();
    for s in situations.iter().filter(|s| s.source == Source::D) {
        let split = s
            .split
            .ok_or_else(|| Error::Validation(format!("D situation {} has no split label", s.id)))?;
        d_counts[split_index(split)] += 1;
        if split != Split::Train {
            held_out.insert(s.id.clone());
            held_out.insert(normalize(&s.text));
        }
    }

    let mut excluded = Vec::new();
    situations.retain(|s| {
        let drop = s.source == Source::DPlus && (held_out.contains(&s.id) || held_out.contains(&normalize(&s.text)));
        if drop {
            excluded.push(s.id.clone());
        }
        !drop
    });
    excluded.sort();

    let mut ids: Vec<String> = situations
        .iter()
        .filter(|s| s.source == Source::DPlus)
        .map(|s| s.id.clone())
        .collect();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_valid = (n as f64 * 0.1).round() as usize;
    let n_test = (n as f64 * 0.1).round() as usize;
    let n_train = n.saturating_sub(n_valid + n_test);
    if n > 0 && (n_train == 0 || n_valid == 0 || n_test == 0) {
        return Err(Error::Validation(format!(
            "DPlus split left an empty partition ({n_train}/{n_valid}/{n_test} of {n})"
        )));
    }
    let mut assign: HashMap<String, Split> = HashMap::new();
    for (i, id) in ids.into_iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
        assign.insert(id, split);
    }
    for s in situations.iter_mut().filter(|s| s.source == Source::DPlus) {
        s.split = assign.get(&s.id).copied();
    }
    Ok(SplitSummary {
        d_counts,
        dplus_counts: [n_train, n_valid, n_test],
        dplus_excluded: excluded,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub instances: usize,
    pub situations: usize,
    pub max_per_annotator: usize,
    pub min_per_annotator: usize,
    pub acceptable: usize,
    pub unacceptable: usize,
}

/// Counts over labelled (non-INFO) comments.
pub fn corpus_stats<'a>(comments: impl IntoIterator<Item = &'a CommentRecord>) -> CorpusStats {
    let mut stats = CorpusStats::default();
    let mut situations = HashSet::new();
    let mut per_annotator: HashMap<&str, usize> = HashMap::new();
    for c in comments {
        let Some(label) = c.label else { continue };
        stats.instances += 1;
        situations.insert(c.situation_id.as_str());
        *per_annotator.entry(c.annotator_id.as_str()).or_default() += 1;
        match label {
            JudgmentLabel::Acceptable => stats.acceptable += 1,
            JudgmentLabel::Unacceptable => stats.unacceptable += 1,
        }
    }
    stats.situations = situations.len();
    stats.max_per_annotator = per_annotator.values().copied().max().unwrap_or(0);
    stats.min_per_annotator = per_annotator.values().copied().min().unwrap_or(0);
    stats
}

/// Raw input files as parsed JSON lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawCorpus {
    pub situations: Vec<SituationRecord>,
    pub comments: Vec<RawComment>,
    pub rots: Vec<RawRot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub roster_size: usize,
    pub rots_per_situation: usize,
    pub split_seed: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            roster_size: DEFAULT_ROSTER_SIZE,
            rots_per_situation: DEFAULT_ROTS_PER_SITUATION,
            split_seed: 0,
        }
    }
}

/// Validated, coded corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub situations: Vec<SituationRecord>,
    /// Labelled comments by roster annotators, sorted by id.
    pub comments: Vec<CommentRecord>,
    /// Extended rules per D situation.
    pub rots: BTreeMap<String, Vec<RuleOfThumb>>,
    pub roster: AnnotatorRoster,
    pub splits: SplitSummary,
    pub discarded_info: usize,
    pub discarded_uncoded: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub d: CorpusStats,
    pub dplus: CorpusStats,
    pub discarded_info: usize,
    pub discarded_uncoded: usize,
    pub unclassifiable_rots: usize,
    pub splits: SplitSummary,
    pub roster: AnnotatorRoster,
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>, what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Validation(format!("duplicate {what} id {id:?}")));
        }
    }
    Ok(())
}

impl Corpus {
    pub fn ingest(raw: RawCorpus, phrases: &JudgmentPhrases, cfg: &IngestConfig) -> Result<Self> {
        let RawCorpus {
            mut situations,
            comments,
            rots,
        } = raw;
        check_unique(situations.iter().map(|s| s.id.as_str()), "situation")?;
        check_unique(comments.iter().map(|c| c.id.as_str()), "comment")?;
        check_unique(rots.iter().map(|r| r.id.as_str()), "rule-of-thumb")?;
        for s in &situations {
            if s.text.trim().is_empty() {
                return Err(Error::Validation(format!("situation {} has empty text", s.id)));
            }
        }
        situations.sort_by(|a, b| a.id.cmp(&b.id));

        let (kept_rots, discarded_info, discarded_uncoded, mut coded) = {
            let by_id: HashMap<&str, &SituationRecord> = situations.iter().map(|s| (s.id.as_str(), s)).collect();
            let mut coded = Vec::with_capacity(comments.len());
            let (mut info, mut uncoded) = (0, 0);
            for c in comments {
                if !by_id.contains_key(c.situation_id.as_str()) {
                    return Err(Error::Validation(format!(
                        "comment {} references unknown situation {}",
                        c.id, c.situation_id
                    )));
                }
                let code = parse_judgment_code(&c.text);
                let label = code.and_then(code_to_label);
                match (code, label) {
                    (None, _) => uncoded += 1,
                    (Some(_), None) => info += 1,
                    _ => {}
                }
                if label.is_some() {
                    coded.push(CommentRecord {
                        id: c.id,
                        annotator_id: c.annotator_id,
                        situation_id: c.situation_id,
                        text: c.text,
                        code,
                        label,
                    });
                }
            }
            let mut grouped: BTreeMap<String, Vec<RuleOfThumb>> = BTreeMap::new();
            for r in rots {
                match by_id.get(r.situation_id.as_str()) {
                    Some(s) if s.source == Source::D => {}
                    Some(_) => {
                        return Err(Error::Validation(format!(
                            "rule-of-thumb {} attached to non-D situation {}",
                            r.id, r.situation_id
                        )))
                    }
                    None => {
                        return Err(Error::Validation(format!(
                            "rule-of-thumb {} references unknown situation {}",
                            r.id, r.situation_id
                        )))
                    }
                }
                grouped.entry(r.situation_id.clone()).or_default().push(RuleOfThumb {
                    id: r.id,
                    situation_id: r.situation_id,
                    text: r.text,
                    polarity: None,
                    provenance: Provenance::Original,
                });
            }
            (grouped, info, uncoded, coded)
        };

        let mut extended = BTreeMap::new();
        for s in situations.iter().filter(|s| s.source == Source::D) {
            let originals = kept_rots.get(&s.id).map(Vec::as_slice).unwrap_or(&[]);
            if originals.is_empty() {
                return Err(Error::Validation(format!("D situation {} has no rules-of-thumb", s.id)));
            }
            extended.insert(s.id.clone(), extend_rots(originals, cfg.rots_per_situation, phrases)?);
        }

        let splits = make_splits(&mut situations, cfg.split_seed)?;
        let (roster, comments) = {
            let by_id: HashMap<&str, &SituationRecord> = situations.iter().map(|s| (s.id.as_str(), s)).collect();
            coded.retain(|c| by_id.contains_key(c.situation_id.as_str()));
            let roster = AnnotatorRoster::select(&coded, &by_id, cfg.roster_size);
            let keep: HashSet<&str> = roster.annotator_ids.iter().map(String::as_str).collect();
            coded.retain(|c| keep.contains(c.annotator_id.as_str()));
            coded.sort_by(|a, b| a.id.cmp(&b.id));
            (roster, coded)
        };

        Ok(Self {
            situations,
            comments,
            rots: extended,
            roster,
            splits,
            discarded_info,
            discarded_uncoded,
        })
    }

    pub fn situation_map(&self) -> HashMap<&str, &SituationRecord> {
        self.situations.iter().map(|s| (s.id.as_str(), s)).collect()
    }

    /// Comments on situations of the given source and split.
    pub fn instances(&self, source: Source, split: Split) -> Vec<&CommentRecord> {
        let by_id = self.situation_map();
        self.comments
            .iter()
            .filter(|c| {
                by_id
                    .get(c.situation_id.as_str())
                    .is_some_and(|s| s.source == source && s.split == Some(split))
            })
            .collect()
    }

    pub fn stats(&self, source: Source) -> CorpusStats {
        let by_id = self.situation_map();
        corpus_stats(
            self.comments
                .iter()
                .filter(|c| by_id.get(c.situation_id.as_str()).is_some_and(|s| s.source == source)),
        )
    }

    pub fn report(&self) -> IngestReport {
        IngestReport {
            d: self.stats(Source::D),
            dplus: self.stats(Source::DPlus),
            discarded_info: self.discarded_info,
            discarded_uncoded: self.discarded_uncoded,
            unclassifiable_rots: self.rots.values().flatten().filter(|r| r.polarity.is_none()).count(),
            splits: self.splits.clone(),
            roster: self.roster.clone(),
        }
    }
}
