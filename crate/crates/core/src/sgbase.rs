//! Per-annotator subjective-ground bases: the top comments by moral-lexicon
//! score in each topic cluster, flattened into a fixed number of slots.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{CommentRecord, Corpus, Source, Split};
use crate::error::{Error, Result};
use crate::lexicon::MoralLexicon;

pub const DEFAULT_PER_CLUSTER: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SgSlot {
    pub cluster: usize,
    pub rank: usize,
    pub comment_id: Option<String>,
    /// Empty for padded slots.
    pub text: String,
    pub score: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectiveGroundBase {
    pub annotator_id: String,
    pub clusters: usize,
    pub per_cluster: usize,
    /// Length `clusters × per_cluster`; slot = cluster × per_cluster + rank.
    pub slots: Vec<SgSlot>,
}

impl SubjectiveGroundBase {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.slots.iter().map(|s| s.comment_id.is_some()).collect()
    }

    pub fn slot_index(&self, cluster: usize, rank: usize) -> usize {
        cluster * self.per_cluster + rank
    }

    pub fn texts(&self) -> Vec<&str> {
        self.slots.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn comment_ids(&self) -> Vec<Option<&str>> {
        self.slots.iter().map(|s| s.comment_id.as_deref()).collect()
    }
}

/// Builds one annotator's base from already-eligible comments.
///
/// Within a cluster, comments are ranked by descending moral score, then
/// descending text length, then ascending id; the first `per_cluster` are
/// kept and the remainder of the cluster's slots are padded.
pub fn build_sg<'a>(
    annotator_id: &str,
    comments: impl IntoIterator<Item = &'a CommentRecord>,
    cluster_of: impl Fn(&str) -> Option<usize>,
    clusters: usize,
    lexicon: &MoralLexicon,
    per_cluster: usize,
) -> Result<SubjectiveGroundBase> {
    let mut buckets: Vec<Vec<(usize, &CommentRecord)>> = vec![Vec::new(); clusters];
    let mut eligible = 0;
    for c in comments {
        if c.annotator_id != annotator_id {
            continue;
        }
        let cl = cluster_of(&c.situation_id).ok_or_else(|| {
            Error::Validation(format!(
                "situation {} of comment {} is not clustered",
                c.situation_id, c.id
            ))
        })?;
        if cl >= clusters {
            return Err(Error::Validation(format!("cluster {cl} out of range for k={clusters}")));
        }
        buckets[cl].push((lexicon.mf_score(&c.text), c));
        eligible += 1;
    }
    if eligible == 0 {
        return Err(Error::EmptyInput(format!(
            "annotator {annotator_id} has no eligible subjective-ground comments"
        )));
    }
    let mut slots = Vec::with_capacity(clusters * per_cluster);
    for (cl, bucket) in buckets.iter_mut().enumerate() {
        bucket.sort_by(|(sa, a), (sb, b)| {
            sb.cmp(sa)
                .then(b.text.chars().count().cmp(&a.text.chars().count()))
                .then(a.id.cmp(&b.id))
        });
        for rank in 0..per_cluster {
            slots.push(match bucket.get(rank) {
                Some((score, c)) => SgSlot {
                    cluster: cl,
                    rank,
                    comment_id: Some(c.id.clone()),
                    text: c.text.clone(),
                    score: *score,
                },
                None => SgSlot {
                    cluster: cl,
                    rank,
                    comment_id: None,
                    text: String::new(),
                    score: 0,
                },
            });
        }
    }
    Ok(SubjectiveGroundBase {
        annotator_id: annotator_id.to_string(),
        clusters,
        per_cluster,
        slots,
    })
}

/// Bases for every roster annotator from DPlus-train comments only.
pub fn build_all(
    corpus: &Corpus,
    cluster_of: impl Fn(&str) -> Option<usize>,
    clusters: usize,
    lexicon: &MoralLexicon,
    per_cluster: usize,
) -> Result<BTreeMap<String, SubjectiveGroundBase>> {
    let eligible = corpus.instances(Source::DPlus, Split::Train);
    let mut out = BTreeMap::new();
    for a in &corpus.roster.annotator_ids {
        let mine = eligible.iter().copied().filter(|c| &c.annotator_id == a);
        out.insert(
            a.clone(),
            build_sg(a, mine, &cluster_of, clusters, lexicon, per_cluster)?,
        );
    }
    Ok(out)
}

/// One persisted slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SgLine {
    pub annotator_id: String,
    pub slot: usize,
    pub cluster: usize,
    pub rank: usize,
    pub comment_id: Option<String>,
    pub score: usize,
}

pub fn to_lines(bases: &BTreeMap<String, SubjectiveGroundBase>) -> Vec<SgLine> {
    bases
        .values()
        .flat_map(|b| {
            b.slots.iter().enumerate().map(move |(i, s)| SgLine {
                annotator_id: b.annotator_id.clone(),
                slot: i,
                cluster: s.cluster,
                rank: s.rank,
                comment_id: s.comment_id.clone(),
                score: s.score,
            })
        })
        .collect()
}

/// Rebuilds bases from persisted lines, resolving comment text from `comments`.
pub fn from_lines(
    lines: &[SgLine],
    comments: &[CommentRecord],
    per_cluster: usize,
) -> Result<BTreeMap<String, SubjectiveGroundBase>> {
    let by_id: HashMap<&str, &CommentRecord> = comments.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut grouped: BTreeMap<String, Vec<&SgLine>> = BTreeMap::new();
    for l in lines {
        grouped.entry(l.annotator_id.clone()).or_default().push(l);
    }
    let mut out = BTreeMap::new();
    for (a, mut ls) in grouped {
        ls.sort_by_key(|l| l.slot);
        let slots = ls
            .iter()
            .enumerate()
            .map(|(i, l)| {
                if l.slot != i || l.slot != l.cluster * per_cluster + l.rank {
                    return Err(Error::Validation(format!(
                        "annotator {a}: slot {} out of order",
                        l.slot
                    )));
                }
                let text = match &l.comment_id {
                    Some(id) => by_id
                        .get(id.as_str())
                        .ok_or_else(|| Error::Validation(format!("unknown comment {id} in base of {a}")))?
                        .text
                        .clone(),
                    None => String::new(),
                };
                Ok(SgSlot {
                    cluster: l.cluster,
                    rank: l.rank,
                    comment_id: l.comment_id.clone(),
                    text,
                    score: l.score,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if slots.len() % per_cluster != 0 {
            return Err(Error::Validation(format!("annotator {a}: {} slots", slots.len())));
        }
        out.insert(
            a.clone(),
            SubjectiveGroundBase {
                annotator_id: a,
                clusters: slots.len() / per_cluster,
                per_cluster,
                slots,
            },
        );
    }
    Ok(out)
}

/// Human-readable listing of a base, one line per real slot.
pub fn dump(base: &SubjectiveGroundBase) -> String {
    let mut s = format!("annotator {}\n", base.annotator_id);
    for (i, slot) in base.slots.iter().enumerate() {
        if let Some(id) = &slot.comment_id {
            s.push_str(&format!(
                "  [{i:>3}] cluster {:>2} rank {} score {:>2} {id}: {}\n",
                slot.cluster, slot.rank, slot.score, slot.text
            ));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::JudgmentLabel;

    fn comment(id: &str, sit: &str, text: &str) -> CommentRecord {
        CommentRecord {
            id: id.into(),
            annotator_id: "u".into(),
            situation_id: sit.into(),
            text: text.into(),
            code: None,
            label: Some(JudgmentLabel::Acceptable),
        }
    }

    fn lex() -> MoralLexicon {
        MoralLexicon::parse("m*\tcare\n", "t").unwrap()
    }

    #[test]
    fn ordering_rule() {
        // scores 5,5,3,3,2,1,1,0 by number of m-words
        let texts = [
            ("c1", "m m m m m"),
            ("c2", "m m m m m longer"),
            ("c3", "m m m"),
            ("c4", "m m m"),
            ("c5", "m m"),
            ("c6", "m"),
            ("c7", "m"),
            ("c8", "x"),
        ];
        let cs: Vec<_> = texts.iter().map(|(i, t)| comment(i, "s", t)).collect();
        let b = build_sg("u", &cs, |_| Some(0), 1, &lex(), 6).unwrap();
        let ids: Vec<_> = b.slots.iter().map(|s| s.comment_id.clone().unwrap()).collect();
        assert_eq!(ids, ["c2", "c1", "c3", "c4", "c5", "c6"]);
    }

    #[test]
    fn sparse_cluster_is_padded() {
        let cs = vec![comment("a", "s", "m"), comment("b", "s", "x")];
        let b = build_sg("u", &cs, |_| Some(0), 1, &lex(), 6).unwrap();
        assert_eq!(b.mask(), [true, true, false, false, false, false]);
        assert!(b.slots[2..].iter().all(|s| s.text.is_empty()));
    }

    #[test]
    fn full_base_has_120_real_slots() {
        let cs: Vec<_> = (0..20 * 7)
            .map(|i| comment(&format!("c{i:03}"), &format!("s{}", i % 20), "m"))
            .collect();
        let cluster = |s: &str| s[1..].parse().ok();
        let b = build_sg("u", &cs, cluster, 20, &lex(), 6).unwrap();
        assert_eq!(b.len(), 120);
        assert!(b.mask().iter().all(|&m| m));
        for (i, s) in b.slots.iter().enumerate() {
            assert_eq!(b.slot_index(s.cluster, s.rank), i);
        }
    }

    #[test]
    fn no_eligible_comments_names_annotator() {
        let err = build_sg("ghost", &[], |_| Some(0), 1, &lex(), 6).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn persisted_lines_roundtrip() {
        let cs = vec![comment("a", "s", "m m"), comment("b", "s", "m")];
        let b = build_sg("u", &cs, |_| Some(0), 1, &lex(), 6).unwrap();
        let mut map = BTreeMap::new();
        map.insert("u".to_string(), b);
        let back = from_lines(&to_lines(&map), &cs, 6).unwrap();
        assert_eq!(back, map);
    }
}
