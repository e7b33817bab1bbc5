//! Metrics and explanation-consistency tests.
//!
//! Labels are class indices (`0` acceptable, `1` unacceptable). All
//! percentages are on a 0–100 scale.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::JudgmentLabel;
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 2;
pub const DEFAULT_TOP_M: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub macro_f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassScores>,
    /// Classes absent from both predictions and golds; they count as F1 0.
    pub empty_classes: Vec<usize>,
}

fn check_lengths(preds: &[usize], golds: &[usize]) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::DimensionMismatch {
            expected: golds.len(),
            got: preds.len(),
        });
    }
    if golds.is_empty() {
        return Err(Error::EmptyInput("no instances to score".into()));
    }
    if preds.iter().chain(golds).any(|&c| c >= NUM_CLASSES) {
        return Err(Error::Validation("class index out of range".into()));
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn classification_report(preds: &[usize], golds: &[usize]) -> Result<F1Report> {
    check_lengths(preds, golds)?;
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    let mut empty = Vec::new();
    for c in 0..NUM_CLASSES {
        let tp = preds.iter().zip(golds).filter(|&(&p, &g)| p == c && g == c).count();
        let predicted = preds.iter().filter(|&&p| p == c).count();
        let support = golds.iter().filter(|&&g| g == c).count();
        if predicted == 0 && support == 0 {
            empty.push(c);
        }
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = ratio(2 * tp, predicted + support);
        per_class.push(ClassScores {
            precision,
            recall,
            f1,
            support,
            predicted,
        });
    }
    let correct = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(F1Report {
        macro_f1: 100.0 * per_class.iter().map(|c| c.f1).sum::<f64>() / NUM_CLASSES as f64,
        accuracy: 100.0 * ratio(correct, golds.len()),
        per_class,
        empty_classes: empty,
    })
}

pub fn macro_f1(preds: &[usize], golds: &[usize]) -> Result<f64> {
    Ok(classification_report(preds, golds)?.macro_f1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub stdev: f64,
    pub n: usize,
}

pub fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len();
    if n == 0 {
        return MeanStd {
            mean: f64::NAN,
            stdev: f64::NAN,
            n,
        };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let stdev = if n < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    MeanStd { mean, stdev, n }
}

/// Macro F1 of a fair coin per instance, over `runs` seeded repetitions.
pub fn random_baseline(golds: &[usize], seed: u64, runs: usize) -> Result<MeanStd> {
    if runs == 0 {
        return Err(Error::Validation("random baseline needs at least one run".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..runs)
        .map(|_| {
            let preds: Vec<usize> = golds.iter().map(|_| rng.gen_range(0..NUM_CLASSES)).collect();
            macro_f1(&preds, golds)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_std(&scores))
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::Validation("correlation needs at least two pairs".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterScore {
    pub cluster: usize,
    pub instances: usize,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub silhouette: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCorrelation {
    pub clusters: Vec<ClusterScore>,
    pub pearson_r: Option<f64>,
    pub null_reason: Option<String>,
}

/// Per-cluster macro F1 and its correlation with cluster silhouettes.
pub fn cluster_accuracy(
    preds: &[usize],
    golds: &[usize],
    clusters: &[usize],
    silhouettes: &BTreeMap<usize, f64>,
) -> Result<ClusterCorrelation> {
    check_lengths(preds, golds)?;
    if clusters.len() != golds.len() {
        return Err(Error::DimensionMismatch {
            expected: golds.len(),
            got: clusters.len(),
        });
    }
    let mut groups: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for ((&p, &g), &c) in preds.iter().zip(golds).zip(clusters) {
        let e = groups.entry(c).or_default();
        e.0.push(p);
        e.1.push(g);
    }
    let mut scores = Vec::with_capacity(groups.len());
    for (c, (p, g)) in &groups {
        let silhouette = *silhouettes
            .get(c)
            .ok_or_else(|| Error::Validation(format!("no silhouette for cluster {c}")))?;
        let r = classification_report(p, g)?;
        scores.push(ClusterScore {
            cluster: *c,
            instances: g.len(),
            macro_f1: r.macro_f1,
            accuracy: r.accuracy,
            silhouette,
        });
    }
    let (pearson_r, null_reason) = if scores.len() < 2 {
        (
            None,
            Some(format!("{} cluster(s) with instances; need at least 2", scores.len())),
        )
    } else {
        let xs: Vec<f64> = scores.iter().map(|s| s.silhouette).collect();
        let ys: Vec<f64> = scores.iter().map(|s| s.macro_f1).collect();
        match pearson(&xs, &ys)? {
            Some(r) => (Some(r), None),
            None => (None, Some("zero variance in silhouette or per-cluster F1".into())),
        }
    };
    Ok(ClusterCorrelation {
        clusters: scores,
        pearson_r,
        null_reason,
    })
}

/// Welch's two-sample t-test: `(t, degrees of freedom, two-sided p)`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Option<(f64, f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (ma, mb) = (mean_std(a), mean_std(b));
    let (va, vb) = (ma.stdev.powi(2) / a.len() as f64, mb.stdev.powi(2) / b.len() as f64);
    let se = (va + vb).sqrt();
    if se == 0.0 {
        return None;
    }
    let t = (ma.mean - mb.mean) / se;
    let df = (va + vb).powi(2) / (va.powi(2) / (a.len() - 1) as f64 + vb.powi(2) / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    Some((t, df, 2.0 * (1.0 - dist.cdf(t.abs()))))
}

/// Index of the largest weight; the lowest index wins ties.
pub fn argmax_lowest(w: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in w.iter().enumerate() {
        match best {
            Some(b) if w[b] >= x => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Polarity of the top-weighted rule, or `None` when the trace has no
/// value weights or any rule is unclassifiable.
pub fn rot_rule_prediction(value_weights: &[f64], polarities: &[Option<JudgmentLabel>]) -> Option<JudgmentLabel> {
    if value_weights.len() != polarities.len() || polarities.iter().any(Option::is_none) {
        return None;
    }
    polarities[argmax_lowest(value_weights)?]
}

/// One prediction's value-attention evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueItem {
    pub value_weights: Vec<f64>,
    pub polarities: Vec<Option<JudgmentLabel>>,
    pub prediction: JudgmentLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueConsistency {
    /// `None` when no instance was eligible.
    pub percentage: Option<f64>,
    pub matched: usize,
    pub evaluated: usize,
    /// Instances with an unclassifiable rule.
    pub excluded_unclassifiable: usize,
    /// Instances whose trace has no value weights.
    pub excluded_no_trace: usize,
}

/// Share of instances whose top-weighted rule has the predicted polarity.
pub fn value_consistency(items: &[ValueItem]) -> Result<ValueConsistency> {
    let mut out = ValueConsistency {
        percentage: None,
        matched: 0,
        evaluated: 0,
        excluded_unclassifiable: 0,
        excluded_no_trace: 0,
    };
    for it in items {
        if it.value_weights.is_empty() {
            out.excluded_no_trace += 1;
            continue;
        }
        if it.value_weights.len() != it.polarities.len() {
            return Err(Error::DimensionMismatch {
                expected: it.value_weights.len(),
                got: it.polarities.len(),
            });
        }
        if it.polarities.iter().any(Option::is_none) {
            out.excluded_unclassifiable += 1;
            continue;
        }
        let top = argmax_lowest(&it.value_weights).expect("non-empty");
        out.evaluated += 1;
        if it.polarities[top] == Some(it.prediction) {
            out.matched += 1;
        }
    }
    if out.evaluated > 0 {
        out.percentage = Some(100.0 * out.matched as f64 / out.evaluated as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PerturbationKind {
    Gender,
    Rephrase,
    Abstract,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 3] = [
        PerturbationKind::Gender,
        PerturbationKind::Rephrase,
        PerturbationKind::Abstract,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationKind::Gender => "gender",
            PerturbationKind::Rephrase => "rephrase",
            PerturbationKind::Abstract => "abstract",
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbationKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown perturbation kind {s:?}")))
    }
}

/// One line of a perturbation-set file. `original_id` names the D instance
/// (comment id) whose situation is perturbed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub original_id: String,
    pub kind: PerturbationKind,
    pub text: String,
    pub gold: JudgmentLabel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbationSet {
    pub original_id: String,
    pub variants: Vec<PerturbationRecord>,
}

/// Groups records by original id, preserving first-appearance order.
pub fn group_perturbations(records: &[PerturbationRecord]) -> Result<Vec<PerturbationSet>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<PerturbationRecord>> = BTreeMap::new();
    for r in records {
        if r.text.trim().is_empty() {
            return Err(Error::Validation(format!(
                "empty perturbation text for {}",
                r.original_id
            )));
        }
        let e = groups.entry(r.original_id.clone()).or_default();
        if e.is_empty() {
            order.push(r.original_id.clone());
        }
        e.push(r.clone());
    }
    Ok(order
        .into_iter()
        .map(|id| PerturbationSet {
            variants: groups.remove(&id).expect("grouped"),
            original_id: id,
        })
        .collect())
}

/// Unmasked slot indices by descending weight, ties by slot index.
pub fn rank_order(weights: &[f64], mask: &[bool]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len())
        .filter(|&i| mask.get(i).copied().unwrap_or(true))
        .collect();
    idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    idx
}

/// Model outputs for one original and its perturbed variants.
#[derive(Debug, Clone, PartialEq)]
pub struct SgCase {
    pub mask: Vec<bool>,
    pub original_weights: Vec<f64>,
    pub original_prediction: usize,
    pub original_gold: usize,
    pub variants: Vec<SgVariantOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgVariantOutcome {
    pub kind: PerturbationKind,
    pub weights: Vec<f64>,
    pub prediction: usize,
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindConsistency {
    pub variants: usize,
    pub consistent_full: usize,
    pub consistent_top_m: usize,
    pub full_percentage: f64,
    pub top_m_percentage: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgConsistency {
    pub top_m: usize,
    pub full_percentage: f64,
    pub top_m_percentage: f64,
    pub variants: usize,
    pub original_accuracy: f64,
    pub per_kind: BTreeMap<PerturbationKind, KindConsistency>,
}

fn pct(n: usize, d: usize) -> f64 {
    100.0 * ratio(n, d)
}

/// Share of perturbed inputs whose attention order matches the original's.
pub fn sg_consistency(cases: &[SgCase], top_m: usize) -> Result<SgConsistency> {
    if cases.is_empty() || cases.iter().all(|c| c.variants.is_empty()) {
        return Err(Error::EmptyInput("no perturbation variants".into()));
    }
    let mut kinds: BTreeMap<PerturbationKind, (usize, usize, usize, usize)> = BTreeMap::new();
    let (mut total, mut full, mut top) = (0, 0, 0);
    let mut orig_correct = 0;
    for c in cases {
        let base = rank_order(&c.original_weights, &c.mask);
        let base_top: Vec<usize> = base.iter().copied().take(top_m).collect();
        orig_correct += usize::from(c.original_prediction == c.original_gold);
        for v in &c.variants {
            if v.weights.len() != c.original_weights.len() {
                return Err(Error::DimensionMismatch {
                    expected: c.original_weights.len(),
                    got: v.weights.len(),
                });
            }
            let order = rank_order(&v.weights, &c.mask);
            let same_full = order == base;
            let same_top = order.iter().copied().take(top_m).eq(base_top.iter().copied());
            let e = kinds.entry(v.kind).or_default();
            e.0 += 1;
            e.1 += usize::from(same_full);
            e.2 += usize::from(same_top);
            e.3 += usize::from(v.prediction == v.gold);
            total += 1;
            full += usize::from(same_full);
            top += usize::from(same_top);
        }
    }
    Ok(SgConsistency {
        top_m,
        full_percentage: pct(full, total),
        top_m_percentage: pct(top, total),
        variants: total,
        original_accuracy: pct(orig_correct, cases.len()),
        per_kind: kinds
            .into_iter()
            .map(|(k, (n, f, t, a))| {
                (
                    k,
                    KindConsistency {
                        variants: n,
                        consistent_full: f,
                        consistent_top_m: t,
                        full_percentage: pct(f, n),
                        top_m_percentage: pct(t, n),
                        accuracy: pct(a, n),
                    },
                )
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub split: String,
    pub instances: usize,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassScores>,
    pub empty_classes: Vec<usize>,
    pub random_baseline: MeanStd,
    pub clusters: ClusterCorrelation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub variant: String,
    pub value: ValueConsistency,
    pub sg: Option<SgConsistency>,
    /// Why the subjective-ground test was skipped, when it was.
    pub sg_skipped: Option<String>,
}
