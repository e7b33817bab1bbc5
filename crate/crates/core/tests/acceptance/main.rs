//! Acceptance criteria. Runs with a custom harness and prints one
//! PASS/FAIL line per criterion; exits non-zero when any fails.

mod fixture;
mod scalar;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use subjground::autograd::{masked_softmax, Graph};
use subjground::cluster::{kmeans_fit_restarts, silhouette, KMeansConfig};
use subjground::config::PipelineConfig;
use subjground::corpus::{JudgmentLabel, Split};
use subjground::eval::{
    macro_f1, pearson, sg_consistency, value_consistency, PerturbationKind, SgCase, SgVariantOutcome, ValueItem,
};
use subjground::model::{ForwardInput, ModelConfig, ModelParams, ModelVariant, SgInput, Stage};
use subjground::pipeline::{self, Layout};

use fixture::{tiny_config, TinyBatch};

// Tolerances and budgets.
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_SAMPLE_SHARE: f64 = 0.10;
const GRAD_BUDGET_S: f64 = 60.0;
const SIMPLEX_TOL: f64 = 1e-6;
const SHIFT_TOL: f64 = 1e-9;
const RANDOM_FORWARDS: usize = 1000;
const SCALAR_TOL: f64 = 1e-9;
const INERTIA_TOL: f64 = 1e-9;
const SILHOUETTE_TOL: f64 = 1e-12;
const KMEANS_RESTARTS: usize = 10;
const PEARSON_TOL: f64 = 1e-12;
const SEPARATION_POINTS: f64 = 10.0;
const SEPARATION_SEEDS: usize = 3;
const SEPARATION_BUDGET_S: f64 = 600.0;

const SYNTHETIC_CONFIG: &str = include_str!("../../../../configs/synthetic.toml");

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1. analytic gradients against central differences

fn batch_loss(params: &ModelParams, stage: Stage, batch: &[ForwardInput], labels: &[usize]) -> f64 {
    let model = params.model().expect("bind");
    let mut g = Graph::new(&params.store);
    let out = model.forward_batch(&mut g, stage, batch).expect("forward");
    let loss = g.cross_entropy(out.logits, labels);
    g.value(loss).get(0, 0)
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = tiny_config();
    let data = TinyBatch::new(&cfg);
    let inputs = data.inputs();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (mut checked, mut total, mut worst) = (0usize, 0usize, 0.0f64);
    let mut failures = Vec::new();
    for (vi, &variant) in ModelVariant::ALL.iter().enumerate() {
        let stages: Vec<Stage> = if variant.has_stage1() {
            vec![Stage::SubjectiveGround, Stage::Value]
        } else {
            vec![Stage::Value]
        };
        for stage in stages {
            let params = ModelParams::init(cfg, variant, 100 + vi as u64).map_err(fail)?;
            let model = params.model().map_err(fail)?;
            let grads = {
                let mut g = Graph::new(&params.store);
                let out = model.forward_batch(&mut g, stage, &inputs).map_err(fail)?;
                let loss = g.cross_entropy(out.logits, &data.labels);
                g.backward(loss).map_err(fail)?
            };
            let ids: Vec<_> = params.store.iter().map(|(id, _, _)| id).collect();
            for id in ids {
                let n = params.store.get(id).len();
                total += n;
                let want = ((n as f64 * 2.0 * GRAD_SAMPLE_SHARE).ceil() as usize).clamp(1, n);
                let mut picks: Vec<usize> = (0..n).collect();
                for i in 0..want {
                    let j = rng.gen_range(i..n);
                    picks.swap(i, j);
                }
                for &j in &picks[..want] {
                    let eps = 1e-6;
                    let mut p = params.clone();
                    p.store.get_mut(id).data_mut()[j] += eps;
                    let up = batch_loss(&p, stage, &inputs, &data.labels);
                    p.store.get_mut(id).data_mut()[j] -= 2.0 * eps;
                    let down = batch_loss(&p, stage, &inputs, &data.labels);
                    let numeric = (up - down) / (2.0 * eps);
                    let analytic = grads.get(id).data()[j];
                    let scale = analytic.abs().max(numeric.abs());
                    let err = if scale < 1e-8 {
                        (analytic - numeric).abs()
                    } else {
                        (analytic - numeric).abs() / scale
                    };
                    checked += 1;
                    worst = worst.max(err);
                    if err > GRAD_REL_TOL {
                        failures.push(format!(
                            "{variant}/{stage:?} {}[{j}]: analytic {analytic:.3e} numeric {numeric:.3e}",
                            params.store.name(id)
                        ));
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let share = checked as f64 / total as f64;
    let detail = format!(
        "{checked} entries ({:.0}% of parameters), worst relative error {worst:.2e}, {secs:.1} s{}",
        100.0 * share,
        failures
            .first()
            .map_or(String::new(), |f| format!("; first failure {f}"))
    );
    check(
        failures.is_empty() && share >= GRAD_SAMPLE_SHARE && secs < GRAD_BUDGET_S,
        detail,
    )
}

// 2. attention contracts over randomized forwards

const WORDS: [&str; 16] = [
    "wedding", "rent", "dog", "honesty", "cheating", "kindness", "sister", "car", "loan", "party", "fair", "lie",
    "friend", "roommate", "gift", "noise",
];

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..8);
    (0..n)
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn check_simplex(w: &[f64], mask: Option<&[bool]>, what: &str) -> Result<(), String> {
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(format!("{what} sums to {sum}"));
    }
    if let Some(x) = w.iter().find(|x| **x < 0.0) {
        return Err(format!("{what} has negative weight {x}"));
    }
    if let Some(mask) = mask {
        if let Some((i, x)) = w
            .iter()
            .zip(mask)
            .enumerate()
            .find(|(_, (x, m))| !**m && **x != 0.0)
            .map(|(i, (x, _))| (i, x))
        {
            return Err(format!("{what} gives masked slot {i} weight {x}"));
        }
    }
    Ok(())
}

fn shift_invariance(w: &[f64], mask: &[bool], c: f64) -> Result<f64, String> {
    let scores: Vec<f64> = w
        .iter()
        .zip(mask)
        .map(|(x, &m)| if m { x.ln() * 3.0 } else { 0.0 })
        .collect();
    let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
    let a = masked_softmax(&scores, mask).ok_or("empty mask")?;
    let b = masked_softmax(&shifted, mask).ok_or("empty mask")?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

fn attention_contracts() -> Outcome {
    let variants = [
        ModelVariant::SGAttention,
        ModelVariant::SGAttentionNoRoT,
        ModelVariant::LatentSG,
        ModelVariant::StaticSG,
        ModelVariant::RoTSelfAttention,
    ];
    let tiny = tiny_config();
    let mut paper_shape = PipelineConfig::default().model_config();
    paper_shape.encoder.hidden = 24;
    paper_shape.encoder.blocks = 1;
    paper_shape.classifier_hidden = 24;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut traces, mut worst_sum, mut worst_shift) = (0usize, 0.0f64, 0.0f64);
    let mut params_cache: BTreeMap<(usize, usize), ModelParams> = BTreeMap::new();
    for i in 0..RANDOM_FORWARDS {
        let vi = i % variants.len();
        let variant = variants[vi];
        let shape = usize::from(i % 10 == 9);
        let cfg: ModelConfig = if shape == 1 { paper_shape } else { tiny };
        let generation = i / 100;
        let params = params_cache
            .entry((vi * 2 + shape, generation))
            .or_insert_with(|| ModelParams::init(cfg, variant, (i as u64) * 31 + 5).expect("init"));
        let tk = cfg.encoder.tokenizer();
        let g_slots = cfg.sg_slots();
        let mut mask: Vec<bool> = (0..g_slots).map(|_| rng.gen_bool(0.7)).collect();
        if !mask.iter().any(|&m| m) {
            mask[rng.gen_range(0..g_slots)] = true;
        }
        let slots: Vec<Vec<usize>> = mask
            .iter()
            .map(|&m| {
                if m {
                    tk.tokenize(&random_text(&mut rng))
                } else {
                    Vec::new()
                }
            })
            .collect();
        let sg = SgInput {
            slots,
            mask: mask.clone(),
        };
        let k = rng.gen_range(1..=cfg.rots_per_situation);
        let rots: Vec<Vec<usize>> = (0..k).map(|_| tk.tokenize(&random_text(&mut rng))).collect();
        let situation = tk.tokenize(&random_text(&mut rng));
        let stage = if variant.has_stage1() && rng.gen_bool(0.3) {
            Stage::SubjectiveGround
        } else {
            Stage::Value
        };
        let x = ForwardInput {
            situation: &situation,
            sg: Some(&sg),
            rots: &rots,
        };
        let model = params.model().map_err(fail)?;
        let (_, trace) = model.forward(&params.store, stage, x).map_err(fail)?;
        let c = rng.gen_range(-100.0..100.0);
        let sg_mask = if variant.uses_sg_base() {
            Some(mask.as_slice())
        } else {
            None
        };
        let mut lists: Vec<(Vec<f64>, Option<Vec<bool>>, &str)> = Vec::new();
        if !trace.sg_weights.is_empty() {
            lists.push((trace.sg_weights.clone(), sg_mask.map(<[bool]>::to_vec), "sg weights"));
        }
        if !trace.value_weights.is_empty() {
            lists.push((trace.value_weights.clone(), None, "value weights"));
        }
        for heads in [&trace.sg_head_weights, &trace.value_head_weights]
            .into_iter()
            .flatten()
        {
            for h in 0..heads.cols() {
                let col: Vec<f64> = (0..heads.rows()).map(|r| heads.get(r, h)).collect();
                let m = if heads.rows() == g_slots {
                    sg_mask.map(<[bool]>::to_vec)
                } else {
                    None
                };
                lists.push((col, m, "head weights"));
            }
        }
        if lists.is_empty() {
            return Err(format!("{variant} produced no attention weights"));
        }
        for (w, m, what) in &lists {
            check_simplex(w, m.as_deref(), what).map_err(|e| format!("forward {i} ({variant}): {e}"))?;
            worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
            let full = m.clone().unwrap_or_else(|| vec![true; w.len()]);
            let live: Vec<bool> = full.iter().zip(w).map(|(&on, &x)| on && x > 0.0).collect();
            if live.iter().any(|&b| b) {
                worst_shift = worst_shift.max(shift_invariance(w, &live, c)?);
            }
            traces += 1;
        }
    }
    check(
        worst_shift <= SHIFT_TOL,
        format!(
            "{RANDOM_FORWARDS} forwards, {traces} weight vectors; worst |sum-1| {worst_sum:.1e}, worst shift change {worst_shift:.1e}"
        ),
    )
}

// 3. graph forward against the scalar oracle

fn scalar_equivalence() -> Outcome {
    let cfg = tiny_config();
    let data = TinyBatch::new(&cfg);
    let params = ModelParams::init(cfg, ModelVariant::SGAttention, 2024).map_err(fail)?;
    let model = params.model().map_err(fail)?;
    let mut worst = 0.0f64;
    for (i, x) in data.inputs().into_iter().enumerate() {
        let oracle = scalar::sg_attention(
            &params.store,
            &cfg,
            x.situation,
            &data.sg[i].slots,
            &data.sg[i].mask,
            x.rots,
        );
        let (final_logits, trace) = model.forward(&params.store, Stage::Value, x).map_err(fail)?;
        let (stage1_logits, _) = model.forward(&params.store, Stage::SubjectiveGround, x).map_err(fail)?;
        for (a, b) in final_logits
            .iter()
            .zip(&oracle.logits)
            .chain(stage1_logits.iter().zip(&oracle.stage1_logits))
        {
            worst = worst.max((a - b).abs());
        }
        let heads = trace.sg_head_weights.as_ref().ok_or("missing sg head weights")?;
        for (g, row) in oracle.sg_weights.iter().enumerate() {
            for (h, w) in row.iter().enumerate() {
                worst = worst.max((heads.get(g, h) - w).abs());
            }
        }
        let vheads = trace.value_head_weights.as_ref().ok_or("missing value head weights")?;
        for (r, row) in oracle.value_weights.iter().enumerate() {
            for (h, w) in row.iter().enumerate() {
                worst = worst.max((vheads.get(r, h) - w).abs());
            }
        }
    }
    check(
        worst <= SCALAR_TOL,
        format!("max |graph - scalar| over logits and weights {worst:.2e}"),
    )
}

// 4. k-means and silhouette oracles

fn exhaustive_inertia(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let d = points[0].len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            sizes[l] += 1;
        }
        if sizes.iter().all(|&s| s > 0) {
            let mut means = vec![vec![0.0; d]; k];
            for (p, &l) in points.iter().zip(&labels) {
                for j in 0..d {
                    means[l][j] += p[j] / sizes[l] as f64;
                }
            }
            let inertia: f64 = points
                .iter()
                .zip(&labels)
                .map(|(p, &l)| (0..d).map(|j| (p[j] - means[l][j]).powi(2)).sum::<f64>())
                .sum();
            best = best.min(inertia);
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

fn direct_silhouette(points: &[Vec<f64>], labels: &[usize]) -> Vec<f64> {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let clusters: Vec<usize> = {
        let mut c = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    (0..points.len())
        .map(|i| {
            let mates: Vec<usize> = (0..points.len())
                .filter(|&j| j != i && labels[j] == labels[i])
                .collect();
            if mates.is_empty() {
                return 0.0;
            }
            let a = mates.iter().map(|&j| dist(&points[i], &points[j])).sum::<f64>() / mates.len() as f64;
            let b = clusters
                .iter()
                .filter(|&&c| c != labels[i])
                .map(|&c| {
                    let members: Vec<usize> = (0..points.len()).filter(|&j| labels[j] == c).collect();
                    members.iter().map(|&j| dist(&points[i], &points[j])).sum::<f64>() / members.len() as f64
                })
                .fold(f64::INFINITY, f64::min);
            if a.max(b) == 0.0 {
                0.0
            } else {
                (b - a) / a.max(b)
            }
        })
        .collect()
}

fn clustering_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut cases, mut worst_inertia) = (0usize, 0.0f64);
    for n in 1..=10usize {
        for k in 1..=3usize.min(n) {
            for rep in 0..6 {
                let d = rng.gen_range(1..=3);
                let points: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect())
                    .collect();
                let cfg = KMeansConfig {
                    k,
                    max_iter: 300,
                    tol: 1e-12,
                    seed: (n * 100 + k * 10 + rep) as u64,
                    restarts: KMEANS_RESTARTS,
                };
                let fit = kmeans_fit_restarts(&points, &cfg).map_err(fail)?;
                let opt = exhaustive_inertia(&points, k);
                let gap = (fit.inertia - opt).abs();
                worst_inertia = worst_inertia.max(gap);
                if gap > INERTIA_TOL {
                    return Err(format!(
                        "n={n} k={k} rep={rep}: fitted {} vs optimum {opt}",
                        fit.inertia
                    ));
                }
                cases += 1;
            }
        }
    }
    let mut worst_sil = 0.0f64;
    let mut sil_cases = 0;
    for _ in 0..200 {
        let points: Vec<Vec<f64>> = (0..4)
            .map(|_| vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)])
            .collect();
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        let distinct = {
            let mut l = labels.clone();
            l.sort_unstable();
            l.dedup();
            l.len()
        };
        if distinct < 2 {
            continue;
        }
        let got = silhouette(&points, &labels).map_err(fail)?;
        let want = direct_silhouette(&points, &labels);
        for (a, b) in got.per_point.iter().zip(&want) {
            worst_sil = worst_sil.max((a - b).abs());
        }
        let mean = want.iter().sum::<f64>() / 4.0;
        worst_sil = worst_sil.max((got.mean - mean).abs());
        sil_cases += 1;
    }
    check(
        worst_sil <= SILHOUETTE_TOL,
        format!(
            "{cases} k-means cases, worst inertia gap {worst_inertia:.1e}; {sil_cases} silhouette cases, worst gap {worst_sil:.1e}"
        ),
    )
}

// 5. metric oracles

fn metric_oracles() -> Outcome {
    let (a, u) = (JudgmentLabel::Acceptable.index(), JudgmentLabel::Unacceptable.index());
    let f1 = macro_f1(&[a, u, u, u], &[a, a, u, u]).map_err(fail)?;
    // class A: P 1, R 1/2, F1 2/3; class U: P 2/3, R 1, F1 4/5
    let hand = 100.0 * (2.0 / 3.0 + 4.0 / 5.0) / 2.0;
    if f1 != hand || format!("{f1:.2}") != "73.33" {
        return Err(format!("macro F1 {f1} vs hand value {hand}"));
    }

    let xs = [0.12, 0.31, 0.05, 0.44, 0.27];
    let ys = [61.0, 70.5, 58.25, 77.0, 64.0];
    let n = xs.len() as f64;
    let (sx, sy) = (xs.iter().sum::<f64>(), ys.iter().sum::<f64>());
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    let closed = (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
    let r = pearson(&xs, &ys).map_err(fail)?.ok_or("pearson undefined")?;
    if (r - closed).abs() > PEARSON_TOL {
        return Err(format!("pearson {r} vs closed form {closed}"));
    }

    let acc = Some(JudgmentLabel::Acceptable);
    let unacc = Some(JudgmentLabel::Unacceptable);
    let item = |w: [f64; 3], pred: JudgmentLabel| ValueItem {
        value_weights: w.to_vec(),
        polarities: vec![acc, unacc, acc],
        prediction: pred,
    };
    let match_top = item([0.6, 0.3, 0.1], JudgmentLabel::Acceptable);
    let miss_top = item([0.2, 0.7, 0.1], JudgmentLabel::Acceptable);
    let vc = |items: &[ValueItem]| value_consistency(items).map(|v| v.percentage);
    let values = (
        vc(&[match_top.clone(), miss_top.clone()]).map_err(fail)?,
        vc(&[match_top.clone(), match_top.clone()]).map_err(fail)?,
        vc(&[miss_top.clone()]).map_err(fail)?,
    );
    if values != (Some(50.0), Some(100.0), Some(0.0)) {
        return Err(format!("value consistency cases gave {values:?}"));
    }

    let mask = vec![true, true];
    let case = |variant_weights: [f64; 2]| SgCase {
        mask: mask.clone(),
        original_weights: vec![0.7, 0.3],
        original_prediction: 0,
        original_gold: 0,
        variants: vec![SgVariantOutcome {
            kind: PerturbationKind::Rephrase,
            weights: variant_weights.to_vec(),
            prediction: 0,
            gold: 0,
        }],
    };
    let same = case([0.7, 0.3]);
    let flipped = case([0.4, 0.6]);
    let sg = |cases: &[SgCase]| sg_consistency(cases, 1).map(|s| s.full_percentage);
    let sgs = (
        sg(&[same.clone(), flipped.clone()]).map_err(fail)?,
        sg(&[same.clone()]).map_err(fail)?,
        sg(&[flipped.clone()]).map_err(fail)?,
    );
    check(
        sgs == (50.0, 100.0, 0.0),
        format!(
            "macro F1 {f1:.2}, pearson gap {:.1e}, value {values:?}, sg {sgs:?}",
            (r - closed).abs()
        ),
    )
}

// 6-8. synthetic pipeline

fn synthetic_config() -> PipelineConfig {
    PipelineConfig::from_toml(SYNTHETIC_CONFIG).expect("shipped synthetic config parses")
}

fn prepare_corpus(cfg: &PipelineConfig, layout: &Layout) -> Result<pipeline::Prepared, String> {
    pipeline::run_synth(cfg, layout).map_err(fail)?;
    pipeline::run_ingest(cfg, layout, None).map_err(fail)?;
    pipeline::run_cluster(cfg, layout).map_err(fail)?;
    pipeline::run_build_sg(cfg, layout).map_err(fail)?;
    pipeline::prepare(cfg, layout).map_err(fail)
}

fn synthetic_separation(root: &Path) -> Outcome {
    let start = Instant::now();
    let cfg = synthetic_config();
    if cfg.train.seeds.len() != SEPARATION_SEEDS {
        return Err(format!("synthetic config lists {} seeds", cfg.train.seeds.len()));
    }
    let layout = Layout::new(root);
    let prepared = prepare_corpus(&cfg, &layout)?;
    let (report, _) = pipeline::run_sweep(&cfg, &layout, &prepared).map_err(fail)?;
    let secs = start.elapsed().as_secs_f64();
    let mean = |v: ModelVariant| report.row(v).map(|r| r.summary.mean).ok_or(format!("no row for {v}"));
    let (sga, base) = (mean(ModelVariant::SGAttention)?, mean(ModelVariant::Baseline)?);
    let (stat, lat) = (mean(ModelVariant::StaticSG)?, mean(ModelVariant::LatentSG)?);
    check(
        sga >= base + SEPARATION_POINTS && stat >= lat && secs < SEPARATION_BUDGET_S,
        format!(
            "SGAttention {sga:.2} vs Baseline {base:.2} (+{:.2}); StaticSG {stat:.2} vs LatentSG {lat:.2}; {secs:.0} s",
            sga - base
        ),
    )
}

fn consistency_ceiling(root: &Path) -> Outcome {
    let mut cfg = synthetic_config();
    cfg.eval.rot_rule_harness = true;
    let layout = Layout::new(root);
    let prepared = pipeline::prepare(&cfg, &layout).map_err(fail)?;
    let mut details = Vec::new();
    for v in [
        ModelVariant::SGAttention,
        ModelVariant::StaticSG,
        ModelVariant::LatentSG,
    ] {
        let (report, _) = pipeline::run_consistency(&cfg, &layout, &prepared, v, cfg.train.seeds[0]).map_err(fail)?;
        let vc = report.value;
        if vc.evaluated == 0 || vc.percentage != Some(100.0) {
            return Err(format!("{v}: {vc:?}"));
        }
        details.push(format!("{v} 100% of {}", vc.evaluated));
    }
    Ok(details.join(", "))
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).expect("readable dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let mut cfg = synthetic_config();
    cfg.apply_seed(5);
    cfg.train.epochs = 1;
    cfg.train.stage1_epochs = Some(1);
    cfg.sweep_variants = ModelVariant::ALL.to_vec();
    for root in [a, b] {
        let layout = Layout::new(root);
        let prepared = prepare_corpus(&cfg, &layout)?;
        pipeline::run_sweep(&cfg, &layout, &prepared).map_err(fail)?;
        for v in [ModelVariant::SGAttention, ModelVariant::RoTSelfAttention] {
            pipeline::run_consistency(&cfg, &layout, &prepared, v, 5).map_err(fail)?;
            pipeline::run_predict(&cfg, &layout, &prepared, v, 5, Split::Valid).map_err(fail)?;
        }
    }
    let (fa, fb) = (files_under(a), files_under(b));
    if fa != fb {
        return Err(format!("file sets differ: {} vs {} files", fa.len(), fb.len()));
    }
    let mut kinds = BTreeMap::new();
    for rel in &fa {
        let (x, y) = (
            std::fs::read(a.join(rel)).map_err(fail)?,
            std::fs::read(b.join(rel)).map_err(fail)?,
        );
        if x != y {
            return Err(format!("{} differs", rel.display()));
        }
        let ext = rel
            .extension()
            .map_or("-".to_string(), |e| e.to_string_lossy().to_string());
        *kinds.entry(ext).or_insert(0usize) += 1;
    }
    let ckpts = kinds.get("ckpt").copied().unwrap_or(0);
    let traces = fa.iter().filter(|p| p.to_string_lossy().contains("traces-")).count();
    check(
        ckpts > 0 && traces > 0,
        format!(
            "{} files identical ({ckpts} checkpoints, {traces} trace files)",
            fa.len()
        ),
    )
}

// 9. configuration audit

fn config_audit() -> Outcome {
    let mut lines = Vec::new();
    for (name, cfg) in [
        ("defaults", PipelineConfig::default()),
        ("synthetic", synthetic_config()),
    ] {
        for l in cfg.audit() {
            if !l.ok {
                return Err(format!("{name}: {} = {} (expected {})", l.key, l.actual, l.expected));
            }
        }
        lines.push(name);
    }
    let m = PipelineConfig::default().model_config();
    check(
        m.rots_per_situation == 5
            && m.clusters == 20
            && m.per_cluster == 6
            && m.sg_slots() == 120
            && m.attention_heads == 12,
        format!(
            "K=5, clusters=20, per_cluster=6, G=120, heads=12, norm One ({})",
            lines.join(", ")
        ),
    )
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let synth_root = work.path().join("synthetic");
    let (run_a, run_b) = (work.path().join("det-a"), work.path().join("det-b"));
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient check", Box::new(gradient_check)),
        ("attention contracts", Box::new(attention_contracts)),
        ("scalar equivalence", Box::new(scalar_equivalence)),
        ("clustering oracle", Box::new(clustering_oracle)),
        ("metric oracles", Box::new(metric_oracles)),
        ("synthetic separation", Box::new(|| synthetic_separation(&synth_root))),
        (
            "value consistency ceiling",
            Box::new(|| consistency_ceiling(&synth_root)),
        ),
        ("determinism", Box::new(|| determinism(&run_a, &run_b))),
        ("config audit", Box::new(config_audit)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("PASS  {}. {name}: {d} [{secs:.1} s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL  {}. {name}: {d} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
