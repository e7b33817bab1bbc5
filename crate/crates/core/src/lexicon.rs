//! Moral-foundations word lists and match-count scoring.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trailing marker turning a pattern into a prefix (stem) match.
pub const WILDCARD: char = '*';

/// The bundled seed lexicon.
pub const SEED_LEXICON: &str = include_str!("../data/moral_seed.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Foundation {
    Care,
    Harm,
    Fairness,
    Cheating,
    Loyalty,
    Betrayal,
    Authority,
    Subversion,
    Purity,
    Degradation,
}

impl Foundation {
    pub const ALL: [Foundation; 10] = [
        Foundation::Care,
        Foundation::Harm,
        Foundation::Fairness,
        Foundation::Cheating,
        Foundation::Loyalty,
        Foundation::Betrayal,
        Foundation::Authority,
        Foundation::Subversion,
        Foundation::Purity,
        Foundation::Degradation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Foundation::Care => "care",
            Foundation::Harm => "harm",
            Foundation::Fairness => "fairness",
            Foundation::Cheating => "cheating",
            Foundation::Loyalty => "loyalty",
            Foundation::Betrayal => "betrayal",
            Foundation::Authority => "authority",
            Foundation::Subversion => "subversion",
            Foundation::Purity => "purity",
            Foundation::Degradation => "degradation",
        }
    }
}

impl fmt::Display for Foundation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Foundation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Foundation::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown foundation tag {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub pattern: String,
    pub foundation: Foundation,
}

impl LexiconEntry {
    pub fn is_prefix(&self) -> bool {
        self.pattern.ends_with(WILDCARD)
    }

    pub fn stem(&self) -> &str {
        self.pattern.trim_end_matches(WILDCARD)
    }
}

/// A loaded moral-foundations dictionary.
#[derive(Debug, Clone, Default)]
pub struct MoralLexicon {
    entries: Vec<LexiconEntry>,
    exact: HashMap<String, Foundation>,
    prefixes: HashMap<String, Foundation>,
    max_stem_len: usize,
}

/// Per-text match counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MfMatches {
    pub total: usize,
    pub by_foundation: Vec<(Foundation, usize)>,
}

/// Lowercased alphanumeric runs.
pub fn word_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

impl MoralLexicon {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn seed() -> Self {
        Self::parse(SEED_LEXICON, "<seed lexicon>").expect("bundled lexicon is valid")
    }

    /// Parses `pattern<TAB>tag` lines. Blank lines are skipped.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lex = MoralLexicon::default();
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
            let mut cols = line.split('\t');
            let (Some(pattern), Some(tag), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(bad("expected `pattern<TAB>tag`".into()));
            };
            let pattern = pattern.trim();
            let stem = pattern.trim_end_matches(WILDCARD);
            if stem.is_empty()
                || pattern != pattern.to_lowercase()
                || !stem.chars().all(char::is_alphanumeric)
                || pattern.len() - stem.len() > 1
            {
                return Err(bad(format!("malformed pattern {pattern:?}")));
            }
            let foundation: Foundation = tag.trim().parse().map_err(|e: Error| bad(e.to_string()))?;
            lex.push(LexiconEntry {
                pattern: pattern.to_string(),
                foundation,
            })
            .map_err(|e| bad(e.to_string()))?;
        }
        Ok(lex)
    }

    fn push(&mut self, entry: LexiconEntry) -> Result<()> {
        let map = if entry.is_prefix() {
            &mut self.prefixes
        } else {
            &mut self.exact
        };
        let key = entry.stem().to_string();
        if map.contains_key(&key) {
            return Err(Error::Validation(format!("duplicate pattern {:?}", entry.pattern)));
        }
        self.max_stem_len = self.max_stem_len.max(key.chars().count());
        map.insert(key, entry.foundation);
        self.entries.push(entry);
        Ok(())
    }

    pub fn from_entries(entries: impl IntoIterator<Item = LexiconEntry>) -> Result<Self> {
        let mut lex = MoralLexicon::default();
        for e in entries {
            lex.push(e)?;
        }
        Ok(lex)
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Lexicon without the given pattern.
    pub fn without(&self, pattern: &str) -> Self {
        Self::from_entries(self.entries.iter().filter(|e| e.pattern != pattern).cloned())
            .expect("subset of a valid lexicon")
    }

    /// Foundation of the best match for one lowercased token: exact first,
    /// then the longest matching stem.
    pub fn match_token(&self, token: &str) -> Option<Foundation> {
        if let Some(&f) = self.exact.get(token) {
            return Some(f);
        }
        let chars: Vec<(usize, char)> = token.char_indices().collect();
        for n in (1..=chars.len().min(self.max_stem_len)).rev() {
            let end = chars.get(n).map_or(token.len(), |&(b, _)| b);
            if let Some(&f) = self.prefixes.get(&token[..end]) {
                return Some(f);
            }
        }
        None
    }

    /// Number of tokens in `text` that match at least one entry.
    pub fn mf_score(&self, text: &str) -> usize {
        word_tokens(text).filter(|t| self.match_token(t).is_some()).count()
    }

    pub fn mf_matches(&self, text: &str) -> MfMatches {
        let mut counts: HashMap<Foundation, usize> = HashMap::new();
        let mut total = 0;
        for t in word_tokens(text) {
            if let Some(f) = self.match_token(&t) {
                total += 1;
                *counts.entry(f).or_default() += 1;
            }
        }
        let mut by_foundation: Vec<_> = counts.into_iter().collect();
        by_foundation.sort();
        MfMatches { total, by_foundation }
    }

    /// Entries tagged with `f`, in file order.
    pub fn words_for(&self, f: Foundation) -> impl Iterator<Item = &LexiconEntry> {
        self.entries.iter().filter(move |e| e.foundation == f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MoralLexicon {
        MoralLexicon::parse("harm*\tharm\nunfair\tcheating\n", "t").unwrap()
    }

    #[test]
    fn single_prefix_line() {
        let lex = MoralLexicon::parse("harm*\tharm\n", "t").unwrap();
        assert_eq!(lex.len(), 1);
        assert!(lex.entries()[0].is_prefix());
    }

    #[test]
    fn duplicate_pattern_rejected() {
        let err = MoralLexicon::parse("kind\tcare\nkind\tcare\n", "t").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn unknown_tag_and_malformed_lines() {
        assert!(MoralLexicon::parse("kind\tniceness\n", "t").is_err());
        assert!(MoralLexicon::parse("kind\n", "t").is_err());
        assert!(MoralLexicon::parse("Kind\tcare\n", "t").is_err());
        assert!(MoralLexicon::parse("a\tcare\textra\n", "t").is_err());
    }

    #[test]
    fn seed_entry_count_equals_line_count() {
        let lines = SEED_LEXICON.lines().filter(|l| !l.trim().is_empty()).count();
        assert_eq!(MoralLexicon::seed().len(), lines);
        assert_eq!(lines, SEED_LEXICON.lines().count());
    }

    #[test]
    fn scoring_examples() {
        let lex = tiny();
        assert_eq!(lex.mf_score(""), 0);
        assert_eq!(lex.mf_score("harming animals is unfair"), 2);
        let t = "harming animals is unfair";
        assert_eq!(lex.mf_score(&format!("{t} {t}")), 4);
        // "harm" exact stem also matches the prefix entry
        assert_eq!(lex.mf_score("HARM, harm!"), 2);
    }

    #[test]
    fn token_counted_once_under_multiple_patterns() {
        let lex = MoralLexicon::parse("hurt*\tharm\nhurtful\tharm\nhu*\tcare\n", "t").unwrap();
        assert_eq!(lex.mf_score("hurtful"), 1);
        assert_eq!(lex.match_token("hurtful"), Some(Foundation::Harm));
        assert_eq!(lex.match_token("hug"), Some(Foundation::Care));
    }

    #[test]
    fn matches_report_foundations() {
        let m = tiny().mf_matches("harm harms unfair");
        assert_eq!(m.total, 3);
        assert_eq!(m.by_foundation, vec![(Foundation::Harm, 2), (Foundation::Cheating, 1)]);
    }
}
