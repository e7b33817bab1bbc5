//! Synthetic corpora with known annotator value profiles.
//!
//! Each persona holds a weight in `[-1, 1]` for every (topic, foundation
//! axis) pair. A situation belongs to one topic and carries one signed cue
//! on one axis; its oracle label is the sign of the dot product of the
//! persona's topic row with the cue vector. Persona comments repeat
//! foundation words in proportion to their weights, so the moral-lexicon
//! score and the topic clusters expose the profile to the model.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{JudgmentLabel, RawComment, RawCorpus, RawRot, SituationRecord, Source, Split};
use crate::encoder::named_seed;
use crate::error::{Error, Result};
use crate::eval::{PerturbationKind, PerturbationRecord};
use crate::io::{write_json, write_jsonl};
use crate::lexicon::{word_tokens, Foundation, MoralLexicon};

/// Virtue and vice banks of one foundation axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisBank {
    pub virtue: Foundation,
    pub vice: Foundation,
    pub virtue_words: Vec<String>,
    pub vice_words: Vec<String>,
}

impl AxisBank {
    fn words(&self, sign: f64) -> &[String] {
        if sign >= 0.0 {
            &self.virtue_words
        } else {
            &self.vice_words
        }
    }
}

fn strings(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

fn default_topic_banks() -> Vec<Vec<String>> {
    [
        ["wedding", "bridesmaid", "reception", "bouquet"],
        ["rent", "landlord", "lease", "deposit"],
        ["dog", "puppy", "leash", "kennel"],
        ["dishes", "laundry", "vacuum", "chores"],
        ["birthday", "cake", "candles", "balloons"],
        ["car", "driveway", "parking", "mechanic"],
        ["vacation", "beach", "hotel", "suitcase"],
        ["homework", "teacher", "exam", "tuition"],
        ["loan", "paycheck", "savings", "budget"],
        ["guitar", "concert", "playlist", "drums"],
        ["dinner", "recipe", "leftovers", "casserole"],
        ["phone", "texts", "voicemail", "charger"],
        ["office", "meeting", "deadline", "promotion"],
        ["videogame", "console", "controller", "tournament"],
        ["garden", "tomatoes", "fence", "lawn"],
        ["baby", "stroller", "diapers", "nursery"],
        ["thanksgiving", "turkey", "ornaments", "gifts"],
        ["gym", "treadmill", "marathon", "smoothie"],
        ["bedroom", "closet", "mattress", "curtains"],
        ["party", "invitation", "gossip", "groupchat"],
    ]
    .iter()
    .map(|b| strings(b))
    .collect()
}

fn default_axis_banks() -> Vec<AxisBank> {
    vec![
        AxisBank {
            virtue: Foundation::Care,
            vice: Foundation::Harm,
            virtue_words: strings(&[
                "compassion",
                "kindness",
                "caring",
                "comforting",
                "empathy",
                "gentleness",
            ]),
            vice_words: strings(&["cruelty", "harming", "hurtful", "brutal", "violence", "tormenting"]),
        },
        AxisBank {
            virtue: Foundation::Fairness,
            vice: Foundation::Cheating,
            virtue_words: strings(&["fairness", "justice", "equality", "honesty", "integrity", "reciprocity"]),
            vice_words: strings(&["cheating", "fraud", "dishonesty", "stealing", "deceiving", "scamming"]),
        },
        AxisBank {
            virtue: Foundation::Loyalty,
            vice: Foundation::Betrayal,
            virtue_words: strings(&["loyalty", "solidarity", "devotion", "commitment", "unity", "teamwork"]),
            vice_words: strings(&[
                "betrayal",
                "treachery",
                "disloyalty",
                "backstabbing",
                "abandoning",
                "forsaking",
            ]),
        },
        AxisBank {
            virtue: Foundation::Authority,
            vice: Foundation::Subversion,
            virtue_words: strings(&["authority", "obedience", "respect", "duty", "tradition", "discipline"]),
            vice_words: strings(&[
                "defiance",
                "rebellion",
                "disrespect",
                "disobeying",
                "insolence",
                "lawless",
            ]),
        },
        AxisBank {
            virtue: Foundation::Purity,
            vice: Foundation::Degradation,
            virtue_words: strings(&["purity", "sanctity", "wholesome", "innocence", "modesty", "pristine"]),
            vice_words: strings(&["disgusting", "filthy", "vulgar", "obscene", "depraved", "rotten"]),
        },
    ]
}

/// Gendered relation pairs; the gender perturbation swaps within a pair.
const RELATIONS: [(&str, &str); 8] = [
    ("brother", "sister"),
    ("father", "mother"),
    ("husband", "wife"),
    ("son", "daughter"),
    ("uncle", "aunt"),
    ("boyfriend", "girlfriend"),
    ("nephew", "niece"),
    ("grandpa", "grandma"),
];

/// Verb and synonym; the rephrase perturbation swaps within a pair.
const VERBS: [(&str, &str); 10] = [
    ("told", "informed"),
    ("asked", "requested"),
    ("confronted", "challenged"),
    ("ignored", "disregarded"),
    ("texted", "messaged"),
    ("called", "phoned"),
    ("warned", "cautioned"),
    ("reminded", "prompted"),
    ("emailed", "wrote"),
    ("visited", "met"),
];

const OPENERS: [&str; 6] = ["seriously", "frankly", "look", "well", "imo", "tbh"];
const CHATTER: [&str; 4] = [
    "not sure what to say about the",
    "this reminds me of my own",
    "i had the same thing with a",
    "cannot believe this happened over a",
];
const ACCEPT_CODES: [&str; 2] = ["NTA", "NAH"];
const REJECT_CODES: [&str; 2] = ["YTA", "ESH"];
const UNCLASSIFIABLE_ROTS: [&str; 3] = [
    "People should talk things through.",
    "Families sometimes disagree.",
    "Everyone wants to be heard.",
];

/// Words the templates contribute besides the banks.
const TEMPLATE_WORDS: &str = "i my about the and with obvious matters more than s \
    you it is okay not good bad to your over this really here of own had same thing a \
    what say cannot believe happened sure reminds people should talk things through \
    families sometimes disagree everyone wants be heard shouldn t fine wrong kind unkind \
    expected rude polite understandable";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub topics: usize,
    pub personas: usize,
    /// Foundation axes used by profiles and cues.
    pub axes: usize,
    pub d_situations: usize,
    pub dplus_situations: usize,
    pub d_comments_per_situation: usize,
    pub dplus_comments_per_situation: usize,
    pub noise: f64,
    /// Share of DPlus situations that copy the text of a held-out D situation.
    pub duplicate_rate: f64,
    /// Share of comments without foundation words.
    pub chatter_rate: f64,
    /// Share of extra INFO or uncoded comments.
    pub junk_rate: f64,
    pub unclassifiable_rot_rate: f64,
    pub global_weight: f64,
    /// Probability that a persona's global stance on an axis agrees with
    /// the conventional reading of its cue words.
    pub consensus: f64,
    pub topic_weight: f64,
    /// D-test instances that receive perturbation variants.
    pub perturbation_originals: usize,
    pub topic_banks: Vec<Vec<String>>,
    pub axis_banks: Vec<AxisBank>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            topics: 20,
            personas: 30,
            axes: 2,
            d_situations: 2000,
            dplus_situations: 1500,
            d_comments_per_situation: 1,
            dplus_comments_per_situation: 2,
            noise: 0.1,
            duplicate_rate: 0.01,
            chatter_rate: 0.15,
            junk_rate: 0.02,
            unclassifiable_rot_rate: 0.02,
            global_weight: 0.6,
            consensus: 0.7,
            topic_weight: 0.4,
            perturbation_originals: 40,
            topic_banks: default_topic_banks(),
            axis_banks: default_axis_banks(),
        }
    }
}

impl SynthConfig {
    /// Checks counts and that every bank word is distinct and lexicon-consistent.
    pub fn validate(&self, lexicon: &MoralLexicon) -> Result<()> {
        let positive = [
            ("topics", self.topics),
            ("personas", self.personas),
            ("axes", self.axes),
            ("d_situations", self.d_situations),
            ("dplus_situations", self.dplus_situations),
            ("d_comments_per_situation", self.d_comments_per_situation),
            ("dplus_comments_per_situation", self.dplus_comments_per_situation),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("synth.{name} must be positive")));
            }
        }
        if self.topics > self.topic_banks.len() {
            return Err(Error::Config(format!(
                "{} topics requested but only {} topic banks",
                self.topics,
                self.topic_banks.len()
            )));
        }
        if self.axes > self.axis_banks.len() {
            return Err(Error::Config(format!(
                "{} axes requested but only {} axis banks",
                self.axes,
                self.axis_banks.len()
            )));
        }
        if self.d_comments_per_situation > self.personas || self.dplus_comments_per_situation > self.personas {
            return Err(Error::Config("more commenters per situation than personas".into()));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Config("synth.noise must lie in [0, 0.5)".into()));
        }
        for (name, r) in [
            ("duplicate_rate", self.duplicate_rate),
            ("chatter_rate", self.chatter_rate),
            ("junk_rate", self.junk_rate),
            ("unclassifiable_rot_rate", self.unclassifiable_rot_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("synth.{name} must lie in [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.consensus) {
            return Err(Error::Config("synth.consensus must lie in [0, 1]".into()));
        }
        if self.global_weight + self.topic_weight <= 0.0 {
            return Err(Error::Config("profile weights are identically zero".into()));
        }
        if self.d_situations < 10 {
            return Err(Error::Config("need at least 10 D situations for the splits".into()));
        }

        let mut seen: HashSet<String> = HashSet::new();
        let mut claim = |w: &str, what: &str| -> Result<()> {
            if !seen.insert(w.to_string()) {
                return Err(Error::Validation(format!("bank collision: {w:?} ({what})")));
            }
            Ok(())
        };
        let neutral: Vec<&str> = self.topic_banks[..self.topics]
            .iter()
            .flatten()
            .map(String::as_str)
            .chain(RELATIONS.iter().flat_map(|(a, b)| [*a, *b]))
            .chain(VERBS.iter().flat_map(|(a, b)| [*a, *b]))
            .collect();
        for (t, bank) in self.topic_banks[..self.topics].iter().enumerate() {
            if bank.len() < 3 {
                return Err(Error::Config(format!("topic bank {t} needs at least 3 words")));
            }
            for w in bank {
                claim(w, "topic")?;
            }
        }
        for (a, b) in RELATIONS.iter().chain(VERBS.iter()) {
            claim(a, "template")?;
            claim(b, "template")?;
        }
        for w in &neutral {
            if let Some(f) = lexicon.match_token(w) {
                return Err(Error::Validation(format!(
                    "neutral word {w:?} matches the lexicon ({})",
                    f.as_str()
                )));
            }
        }
        for axis in &self.axis_banks[..self.axes] {
            for (words, f) in [(&axis.virtue_words, axis.virtue), (&axis.vice_words, axis.vice)] {
                if words.is_empty() {
                    return Err(Error::Config(format!("empty {} bank", f.as_str())));
                }
                for w in words {
                    claim(w, f.as_str())?;
                    if lexicon.match_token(w) != Some(f) {
                        return Err(Error::Validation(format!("{w:?} does not score as {}", f.as_str())));
                    }
                }
            }
        }
        for w in filler_words() {
            if seen.contains(w) {
                return Err(Error::Validation(format!("bank collision: {w:?} is a template word")));
            }
        }
        Ok(())
    }
}

/// Template words outside the banks.
pub fn filler_words() -> impl Iterator<Item = &'static str> {
    TEMPLATE_WORDS
        .split_whitespace()
        .chain(OPENERS)
        .chain(CHATTER.iter().flat_map(|c| c.split_whitespace()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaProfile {
    pub annotator_id: String,
    /// `weights[t][f]`
    pub weights: Vec<Vec<f64>>,
    pub noise: f64,
}

impl PersonaProfile {
    /// Deterministic from `(seed, index)`.
    pub fn generate(cfg: &SynthConfig, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(named_seed(&format!("persona/{}/{index}", cfg.seed)));
        let global: Vec<f64> = (0..cfg.axes)
            .map(|_| {
                let sign = if rng.gen_bool(cfg.consensus) { 1.0 } else { -1.0 };
                sign * cfg.global_weight * rng.gen_range(0.5..=1.0)
            })
            .collect();
        let mut weights: Vec<Vec<f64>> = (0..cfg.topics)
            .map(|_| {
                global
                    .iter()
                    .map(|g| (g + cfg.topic_weight * rng.gen_range(-1.0..=1.0)).clamp(-1.0, 1.0))
                    .collect()
            })
            .collect();
        if weights.iter().flatten().all(|&w| w == 0.0) {
            weights[0][0] = 1.0;
        }
        Self {
            annotator_id: persona_id(index),
            weights,
            noise: cfg.noise,
        }
    }
}

pub fn persona_id(index: usize) -> String {
    format!("p{index:02}")
}

/// Hidden features of a generated situation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SituationFacts {
    pub id: String,
    pub topic: usize,
    /// Signed cue over the foundation axes.
    pub cue: Vec<f64>,
    pub relation: usize,
    pub gender: usize,
    pub verb: usize,
    pub topic_words: Vec<usize>,
    pub cue_word: usize,
}

/// Sign of `profile[topic] · cue`; a zero product is acceptable.
pub fn oracle_label(profile: &PersonaProfile, topic: usize, cue: &[f64]) -> Result<JudgmentLabel> {
    let row = profile
        .weights
        .get(topic)
        .ok_or_else(|| Error::Validation(format!("unknown topic {topic}")))?;
    if row.len() != cue.len() {
        return Err(Error::DimensionMismatch {
            expected: row.len(),
            got: cue.len(),
        });
    }
    let dot: f64 = row.iter().zip(cue).map(|(w, c)| w * c).sum();
    Ok(if dot >= 0.0 {
        JudgmentLabel::Acceptable
    } else {
        JudgmentLabel::Unacceptable
    })
}

/// Realized text of a situation, optionally perturbed.
fn situation_text(cfg: &SynthConfig, f: &SituationFacts, perturb: Option<PerturbationKind>) -> String {
    let (axis, sign) = cue_axis(&f.cue);
    let cue = &cfg.axis_banks[axis].words(sign)[f.cue_word];
    let pair = RELATIONS[f.relation];
    let gender = match perturb {
        Some(PerturbationKind::Gender) => 1 - f.gender,
        _ => f.gender,
    };
    let relation = if gender == 0 { pair.0 } else { pair.1 };
    let verb = match perturb {
        Some(PerturbationKind::Rephrase) => VERBS[f.verb].1,
        _ => VERBS[f.verb].0,
    };
    let bank = &cfg.topic_banks[f.topic];
    let tw: Vec<&str> = f.topic_words.iter().map(|&i| bank[i].as_str()).collect();
    match perturb {
        Some(PerturbationKind::Abstract) => format!("{cue} matters more than my {relation}'s {}", tw[0]),
        _ => format!(
            "I {verb} my {relation} about the {} and the {} {} with obvious {cue}",
            tw[0], tw[1], tw[2]
        ),
    }
}

fn cue_axis(cue: &[f64]) -> (usize, f64) {
    let (i, v) = cue
        .iter()
        .enumerate()
        .find(|(_, v)| **v != 0.0)
        .expect("cue has one non-zero axis");
    (i, *v)
}

fn comment_text(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    profile: &PersonaProfile,
    facts: &SituationFacts,
    label: JudgmentLabel,
) -> String {
    let code = match label {
        JudgmentLabel::Acceptable => ACCEPT_CODES[rng.gen_range(0..2)],
        JudgmentLabel::Unacceptable => REJECT_CODES[rng.gen_range(0..2)],
    };
    let bank = &cfg.topic_banks[facts.topic];
    let t0 = &bank[facts.topic_words[0]];
    let t1 = &bank[facts.topic_words[1]];
    if rng.gen_bool(cfg.chatter_rate) {
        let c = CHATTER[rng.gen_range(0..CHATTER.len())];
        return format!("{code} {c} {t0}");
    }
    let opener = OPENERS[rng.gen_range(0..OPENERS.len())];
    let intensity = rng.gen_range(1..=3) as f64;
    let mut words = Vec::new();
    for (f, &w) in profile.weights[facts.topic].iter().enumerate() {
        let n = (w.abs() * intensity).ceil() as usize;
        let pole = cfg.axis_banks[f].words(w);
        for _ in 0..n {
            words.push(pole[rng.gen_range(0..pole.len())].as_str());
        }
    }
    if words.is_empty() {
        return format!("{code} {opener} it is about the {t0} really");
    }
    words.shuffle(rng);
    format!("{code} {opener} {} over the {t0} and the {t1}", words.join(" "))
}

/// Original rules for a D situation: a conventional reading of the cue,
/// plus one or two rules on the topic with random polarity.
fn rot_texts(cfg: &SynthConfig, rng: &mut ChaCha8Rng, facts: &SituationFacts) -> Vec<String> {
    let (axis, sign) = cue_axis(&facts.cue);
    let cue = &cfg.axis_banks[axis].words(sign)[facts.cue_word];
    let bank = &cfg.topic_banks[facts.topic];
    let relation = if facts.gender == 0 {
        RELATIONS[facts.relation].0
    } else {
        RELATIONS[facts.relation].1
    };
    let mut out = vec![if sign > 0.0 {
        format!("It is good to act with {cue}.")
    } else {
        format!("It is bad to act with {cue}.")
    }];
    let extra = rng.gen_range(0..=2);
    for _ in 0..extra {
        let topic_word = &bank[facts.topic_words[rng.gen_range(0..facts.topic_words.len())]];
        let text = match rng.gen_range(0..4) {
            0 => format!("It is okay to talk to your {relation} about the {topic_word}."),
            1 => format!("It is not okay to fight over the {topic_word}."),
            2 => format!("You should be honest with your {relation}."),
            _ => format!("You shouldn't make a scene over the {topic_word}."),
        };
        if !out.contains(&text) {
            out.push(text);
        }
    }
    if rng.gen_bool(cfg.unclassifiable_rot_rate) {
        out.push(UNCLASSIFIABLE_ROTS[rng.gen_range(0..UNCLASSIFIABLE_ROTS.len())].to_string());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub raw: RawCorpus,
    pub perturbations: Vec<PerturbationRecord>,
    pub profiles: Vec<PersonaProfile>,
    pub facts: Vec<SituationFacts>,
}

fn draw_facts(cfg: &SynthConfig, rng: &mut ChaCha8Rng, id: String) -> SituationFacts {
    let topic = rng.gen_range(0..cfg.topics);
    let axis = rng.gen_range(0..cfg.axes);
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let mut cue = vec![0.0; cfg.axes];
    cue[axis] = sign;
    let bank_len = cfg.topic_banks[topic].len();
    let mut idx: Vec<usize> = (0..bank_len).collect();
    idx.shuffle(rng);
    idx.truncate(3);
    let pole_len = cfg.axis_banks[axis].words(sign).len();
    SituationFacts {
        id,
        topic,
        cue,
        relation: rng.gen_range(0..RELATIONS.len()),
        gender: rng.gen_range(0..2),
        verb: rng.gen_range(0..VERBS.len()),
        topic_words: idx,
        cue_word: rng.gen_range(0..pole_len),
    }
}

/// Generates the full synthetic corpus.
pub fn generate(cfg: &SynthConfig, lexicon: &MoralLexicon) -> Result<SynthOutput> {
    cfg.validate(lexicon)?;
    let profiles: Vec<PersonaProfile> = (0..cfg.personas).map(|i| PersonaProfile::generate(cfg, i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(named_seed(&format!("synth/{}", cfg.seed)));

    let mut situations = Vec::new();
    let mut facts = Vec::new();
    let mut comments = Vec::new();
    let mut rots = Vec::new();
    let mut comment_no = 0usize;
    let mut next_comment_id = || {
        comment_no += 1;
        format!("c{comment_no:06}")
    };

    // D situations with fixed splits
    let mut order: Vec<usize> = (0..cfg.d_situations).collect();
    order.shuffle(&mut rng);
    let n_valid = (cfg.d_situations as f64 * 0.1).round() as usize;
    let mut d_split = vec![Split::Train; cfg.d_situations];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_valid {
            d_split[i] = Split::Valid;
        } else if rank < 2 * n_valid {
            d_split[i] = Split::Test;
        }
    }

    let mut d_test_instances: Vec<(usize, String, usize, JudgmentLabel)> = Vec::new();
    let mut held_out_texts = Vec::new();
    let mut emit_comments = |rng: &mut ChaCha8Rng,
                             f: &SituationFacts,
                             k: usize,
                             comments: &mut Vec<RawComment>|
     -> Result<Vec<(String, usize, JudgmentLabel)>> {
        let mut ps: Vec<usize> = (0..cfg.personas).collect();
        ps.shuffle(rng);
        let mut out = Vec::new();
        for &p in &ps[..k] {
            let prof = &profiles[p];
            let mut label = oracle_label(prof, f.topic, &f.cue)?;
            if rng.gen_bool(prof.noise) {
                label = label.flipped();
            }
            let id = next_comment_id();
            let text = comment_text(cfg, rng, prof, f, label);
            comments.push(RawComment {
                id: id.clone(),
                annotator_id: prof.annotator_id.clone(),
                situation_id: f.id.clone(),
                text,
            });
            out.push((id, p, label));
            if rng.gen_bool(cfg.junk_rate) {
                let t0 = &cfg.topic_banks[f.topic][f.topic_words[0]];
                let text = if rng.gen_bool(0.5) {
                    format!("INFO what happened with the {t0}")
                } else {
                    format!("this reminds me of my own {t0}")
                };
                comments.push(RawComment {
                    id: next_comment_id(),
                    annotator_id: prof.annotator_id.clone(),
                    situation_id: f.id.clone(),
                    text,
                });
            }
        }
        Ok(out)
    };

    for i in 0..cfg.d_situations {
        let f = draw_facts(cfg, &mut rng, format!("d{i:05}"));
        let text = situation_text(cfg, &f, None);
        let split = d_split[i];
        for (j, t) in rot_texts(cfg, &mut rng, &f).into_iter().enumerate() {
            rots.push(RawRot {
                id: format!("{}-r{j}", f.id),
                situation_id: f.id.clone(),
                text: t,
            });
        }
        let made = emit_comments(&mut rng, &f, cfg.d_comments_per_situation, &mut comments)?;
        if split == Split::Test {
            for (cid, p, label) in made {
                d_test_instances.push((facts.len(), cid, p, label));
            }
        }
        if split != Split::Train {
            held_out_texts.push(text.clone());
        }
        situations.push(SituationRecord {
            id: f.id.clone(),
            text,
            source: Source::D,
            split: Some(split),
        });
        facts.push(f);
    }

    for i in 0..cfg.dplus_situations {
        let f = draw_facts(cfg, &mut rng, format!("dp{i:05}"));
        let mut text = situation_text(cfg, &f, None);
        if !held_out_texts.is_empty() && rng.gen_bool(cfg.duplicate_rate) {
            text = held_out_texts[rng.gen_range(0..held_out_texts.len())].clone();
        }
        emit_comments(&mut rng, &f, cfg.dplus_comments_per_situation, &mut comments)?;
        situations.push(SituationRecord {
            id: f.id.clone(),
            text,
            source: Source::DPlus,
            split: None,
        });
        facts.push(f);
    }

    // perturbations of sampled D-test instances; gold is the instance label
    d_test_instances.shuffle(&mut rng);
    d_test_instances.truncate(cfg.perturbation_originals);
    d_test_instances.sort_by(|a, b| a.1.cmp(&b.1));
    let mut perturbations = Vec::new();
    for (fi, cid, _, label) in &d_test_instances {
        for kind in PerturbationKind::ALL {
            perturbations.push(PerturbationRecord {
                original_id: cid.clone(),
                kind,
                text: situation_text(cfg, &facts[*fi], Some(kind)),
                gold: *label,
            });
        }
    }

    Ok(SynthOutput {
        raw: RawCorpus {
            situations,
            comments,
            rots,
        },
        perturbations,
        profiles,
        facts,
    })
}

pub const SITUATIONS_FILE: &str = "situations.jsonl";
pub const COMMENTS_FILE: &str = "comments.jsonl";
pub const ROTS_FILE: &str = "rots.jsonl";
pub const PERTURBATIONS_FILE: &str = "perturbations.jsonl";
pub const PROFILES_FILE: &str = "profiles.json";
pub const FACTS_FILE: &str = "situation_facts.jsonl";

#[derive(Serialize)]
struct OracleManifest<'a> {
    seed: u64,
    config: &'a SynthConfig,
    profiles: &'a [PersonaProfile],
}

impl SynthOutput {
    /// Corpus files go to `corpus_dir`; hidden profiles to `oracle_dir`.
    pub fn write(&self, cfg: &SynthConfig, corpus_dir: &Path, oracle_dir: &Path) -> Result<()> {
        write_jsonl(corpus_dir.join(SITUATIONS_FILE), &self.raw.situations)?;
        write_jsonl(corpus_dir.join(COMMENTS_FILE), &self.raw.comments)?;
        write_jsonl(corpus_dir.join(ROTS_FILE), &self.raw.rots)?;
        write_jsonl(corpus_dir.join(PERTURBATIONS_FILE), &self.perturbations)?;
        write_json(
            oracle_dir.join(PROFILES_FILE),
            &OracleManifest {
                seed: cfg.seed,
                config: cfg,
                profiles: &self.profiles,
            },
        )?;
        write_jsonl(oracle_dir.join(FACTS_FILE), &self.facts)
    }

    /// Topic of every situation id, for cluster-purity audits.
    pub fn topics(&self) -> BTreeMap<String, usize> {
        self.facts.iter().map(|f| (f.id.clone(), f.topic)).collect()
    }
}

/// Tokens a text contributes that are neither template nor bank words.
pub fn unknown_words(cfg: &SynthConfig, text: &str) -> Vec<String> {
    let mut known: HashSet<String> = filler_words().map(str::to_string).collect();
    known.extend(cfg.topic_banks.iter().flatten().cloned());
    for a in &cfg.axis_banks {
        known.extend(a.virtue_words.iter().chain(&a.vice_words).cloned());
    }
    for (a, b) in RELATIONS.iter().chain(VERBS.iter()) {
        known.insert(a.to_string());
        known.insert(b.to_string());
    }
    for c in ACCEPT_CODES.iter().chain(&REJECT_CODES).chain(&["INFO"]) {
        known.insert(c.to_lowercase());
    }
    known.extend(
        [
            "act", "talk", "fight", "make", "scene", "be", "honest", "what", "happened", "t",
        ]
        .map(String::from),
    );
    word_tokens(text).filter(|w| !known.contains(w)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_judgment_code, Corpus, IngestConfig, JudgmentPhrases};

    fn small() -> SynthConfig {
        SynthConfig {
            d_situations: 200,
            dplus_situations: 150,
            personas: 6,
            topics: 5,
            perturbation_originals: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_banks_valid() {
        SynthConfig::default().validate(&MoralLexicon::seed()).unwrap();
    }

    #[test]
    fn filler_words_do_not_score() {
        let lex = MoralLexicon::seed();
        for w in filler_words() {
            assert_eq!(lex.match_token(w), None, "{w}");
        }
    }

    #[test]
    fn collision_detected() {
        let mut cfg = small();
        cfg.topic_banks[1][0] = cfg.topic_banks[0][0].clone();
        assert!(cfg.validate(&MoralLexicon::seed()).is_err());
        let mut cfg = small();
        cfg.axis_banks[0].virtue_words.push("cruelty".into());
        assert!(cfg.validate(&MoralLexicon::seed()).is_err());
    }

    #[test]
    fn oracle_examples() {
        let p = PersonaProfile {
            annotator_id: "p".into(),
            weights: vec![vec![0.5, -0.25], vec![0.0, 0.0]],
            noise: 0.0,
        };
        // 0.5·1 + (−0.25)·3 = −0.25
        assert_eq!(oracle_label(&p, 0, &[1.0, 3.0]).unwrap(), JudgmentLabel::Unacceptable);
        assert_eq!(oracle_label(&p, 0, &[-1.0, -3.0]).unwrap(), JudgmentLabel::Acceptable);
        assert_eq!(oracle_label(&p, 1, &[1.0, 0.0]).unwrap(), JudgmentLabel::Acceptable);
        assert!(oracle_label(&p, 2, &[1.0, 0.0]).is_err());
        let q = PersonaProfile {
            weights: vec![vec![-0.5, 0.25], vec![0.0, 0.0]],
            ..p.clone()
        };
        for cue in [[1.0, 0.0], [0.0, -1.0], [-1.0, 0.0]] {
            assert_ne!(oracle_label(&p, 0, &cue).unwrap(), oracle_label(&q, 0, &cue).unwrap());
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let lex = MoralLexicon::seed();
        let a = generate(&small(), &lex).unwrap();
        let b = generate(&small(), &lex).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 1, ..small() }, &lex).unwrap();
        assert_ne!(a.raw.comments, c.raw.comments);
    }

    #[test]
    fn passes_ingest_and_codes_match_oracle() {
        let lex = MoralLexicon::seed();
        let cfg = SynthConfig { noise: 0.0, ..small() };
        let out = generate(&cfg, &lex).unwrap();
        let facts: BTreeMap<&str, &SituationFacts> = out.facts.iter().map(|f| (f.id.as_str(), f)).collect();
        let profiles: BTreeMap<&str, &PersonaProfile> =
            out.profiles.iter().map(|p| (p.annotator_id.as_str(), p)).collect();
        for c in &out.raw.comments {
            let Some(code) = parse_judgment_code(&c.text) else {
                continue;
            };
            let Some(label) = crate::corpus::code_to_label(code) else {
                continue;
            };
            let f = facts[c.situation_id.as_str()];
            assert_eq!(
                label,
                oracle_label(profiles[c.annotator_id.as_str()], f.topic, &f.cue).unwrap()
            );
        }
        let corpus = Corpus::ingest(
            out.raw.clone(),
            &JudgmentPhrases::seed(),
            &IngestConfig {
                roster_size: cfg.personas,
                ..IngestConfig::default()
            },
        )
        .unwrap();
        assert_eq!(corpus.roster.annotator_ids.len(), cfg.personas);
        assert!(corpus.rots.values().all(|r| r.len() == 5));
        for s in &out.raw.situations {
            assert!(unknown_words(&cfg, &s.text).is_empty(), "{}", s.text);
        }
        for p in &out.perturbations {
            assert!(unknown_words(&cfg, &p.text).is_empty(), "{}", p.text);
        }
    }

    #[test]
    fn perturbations_keep_gold_and_kinds() {
        let out = generate(&small(), &MoralLexicon::seed()).unwrap();
        assert_eq!(out.perturbations.len(), 15);
        let ids: HashSet<&str> = out.raw.comments.iter().map(|c| c.id.as_str()).collect();
        for chunk in out.perturbations.chunks(3) {
            assert!(ids.contains(chunk[0].original_id.as_str()));
            let kinds: Vec<_> = chunk.iter().map(|p| p.kind).collect();
            assert_eq!(kinds, PerturbationKind::ALL);
            assert!(chunk.iter().all(|p| p.gold == chunk[0].gold));
        }
    }
}
