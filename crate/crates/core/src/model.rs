//! Attention models over subjective ground and rules-of-thumb.
//!
//! Every variant shares one encoder. The single-key attention used by the
//! subjective-ground and value stages projects the candidate rows with
//! `W^Q`/`W^V`, the key with `W^K`, and normalizes over the candidate rows:
//! the resulting distribution is the explanation reported in
//! [`AttentionTrace`].

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::cluster::DEFAULT_CLUSTERS;
use crate::corpus::DEFAULT_ROTS_PER_SITUATION;
use crate::encoder::{xavier, EncoderConfig, TrainableEncoder};
use crate::error::{Error, Result};
use crate::sgbase::DEFAULT_PER_CLUSTER;
use crate::tensor::Tensor;

pub const DEFAULT_ATTENTION_HEADS: usize = 12;

/// Score normalization inside attention layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    /// Divide scores by the square root of the model dimension.
    SqrtDk,
    /// No division.
    One,
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one" | "One" | "1" => Ok(NormMode::One),
            "sqrt_dk" | "SqrtDk" | "sqrt" => Ok(NormMode::SqrtDk),
            _ => Err(Error::Config(format!("unknown norm mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelVariant {
    Baseline,
    BaselineFinetuned,
    RoTSelfAttention,
    LatentSG,
    StaticSG,
    SGAttentionNoRoT,
    SGAttention,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 7] = [
        ModelVariant::Baseline,
        ModelVariant::BaselineFinetuned,
        ModelVariant::RoTSelfAttention,
        ModelVariant::LatentSG,
        ModelVariant::StaticSG,
        ModelVariant::SGAttentionNoRoT,
        ModelVariant::SGAttention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Baseline => "baseline",
            ModelVariant::BaselineFinetuned => "baseline-finetuned",
            ModelVariant::RoTSelfAttention => "rot-self-attention",
            ModelVariant::LatentSG => "latent-sg",
            ModelVariant::StaticSG => "static-sg",
            ModelVariant::SGAttentionNoRoT => "sg-attention-no-rot",
            ModelVariant::SGAttention => "sg-attention",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ModelVariant::Baseline => "Baseline",
            ModelVariant::BaselineFinetuned => "Baseline, fine-tuned encoder",
            ModelVariant::RoTSelfAttention => "Rules-of-Thumb Self Attention",
            ModelVariant::LatentSG => "Latent Subjective Ground",
            ModelVariant::StaticSG => "Static Subjective Ground",
            ModelVariant::SGAttentionNoRoT => "Subjective Ground Attention w/o RoT",
            ModelVariant::SGAttention => "Subjective Ground Attention",
        }
    }

    /// Whether the annotator's comment base is read.
    pub fn uses_sg_base(self) -> bool {
        matches!(
            self,
            ModelVariant::StaticSG | ModelVariant::SGAttentionNoRoT | ModelVariant::SGAttention
        )
    }

    pub fn uses_rots(self) -> bool {
        matches!(
            self,
            ModelVariant::RoTSelfAttention
                | ModelVariant::LatentSG
                | ModelVariant::StaticSG
                | ModelVariant::SGAttention
        )
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, ModelVariant::Baseline | ModelVariant::BaselineFinetuned)
    }

    /// Variants trained on DPlus before D.
    pub fn has_stage1(self) -> bool {
        !matches!(self, ModelVariant::Baseline | ModelVariant::RoTSelfAttention)
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s || format!("{v:?}") == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Which training stage a forward belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// DPlus: situation plus subjective ground, no rules-of-thumb.
    SubjectiveGround,
    /// D: the variant's full path.
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub attention_heads: usize,
    pub norm: NormMode,
    pub clusters: usize,
    pub per_cluster: usize,
    pub rots_per_situation: usize,
    pub classifier_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            attention_heads: DEFAULT_ATTENTION_HEADS,
            norm: NormMode::One,
            clusters: DEFAULT_CLUSTERS,
            per_cluster: DEFAULT_PER_CLUSTER,
            rots_per_situation: DEFAULT_ROTS_PER_SITUATION,
            classifier_hidden: 48,
        }
    }
}

impl ModelConfig {
    /// Subjective-ground slots per annotator.
    pub fn sg_slots(&self) -> usize {
        self.clusters * self.per_cluster
    }

    pub fn hidden(&self) -> usize {
        self.encoder.hidden
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.attention_heads == 0 || self.hidden() % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "attention heads {} must divide hidden {}",
                self.attention_heads,
                self.hidden()
            )));
        }
        if self.sg_slots() == 0 || self.rots_per_situation == 0 || self.classifier_hidden == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        Ok(())
    }
}

/// `W^Q, W^K, W^V` (per-head column blocks of `h×h`) and a shared `W^O`.
#[derive(Debug, Clone, Copy)]
pub struct MultiheadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub norm: NormMode,
    pub hidden: usize,
}

impl MultiheadParams {
    pub fn init(
        prefix: &str,
        hidden: usize,
        heads: usize,
        norm: NormMode,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        for n in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("{prefix}{n}"), xavier(rng, hidden, hidden));
        }
        Self::bind(prefix, hidden, heads, norm, store)
    }

    pub fn bind(prefix: &str, hidden: usize, heads: usize, norm: NormMode, store: &ParamStore) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::Config(format!("heads {heads} must divide hidden {hidden}")));
        }
        let r = |n: &str| store.require(&format!("{prefix}{n}"));
        let out = Self {
            wq: r("wq")?,
            wk: r("wk")?,
            wv: r("wv")?,
            wo: r("wo")?,
            heads,
            norm,
            hidden,
        };
        for id in [out.wq, out.wk, out.wv, out.wo] {
            if store.get(id).shape() != (hidden, hidden) {
                return Err(Error::Checkpoint(format!("{} has the wrong shape", store.name(id))));
            }
        }
        Ok(out)
    }

    pub fn scale(&self) -> f64 {
        match self.norm {
            NormMode::One => 1.0,
            NormMode::SqrtDk => 1.0 / (self.hidden as f64).sqrt(),
        }
    }
}

/// Candidate rows projected once for several keys.
#[derive(Debug, Clone, Copy)]
pub struct Projected {
    pub qp: Var,
    pub vp: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Attended {
    /// `1×h` context after `W^O`.
    pub context: Var,
    /// `n×heads` attention distributions.
    pub weights: Var,
}

pub fn project(g: &mut Graph, mh: &MultiheadParams, queries: Var, values: Var) -> Projected {
    let (wq, wv) = (g.param(mh.wq), g.param(mh.wv));
    Projected {
        qp: g.matmul(queries, wq),
        vp: g.matmul(values, wv),
    }
}

pub fn attend_projected(
    g: &mut Graph,
    mh: &MultiheadParams,
    rows: Projected,
    key: Var,
    mask: &[bool],
) -> Result<Attended> {
    let wk = g.param(mh.wk);
    let kp = g.matmul(key, wk);
    let weights = g.head_scores(rows.qp, kp, mask, mh.heads, mh.scale())?;
    let mixed = g.head_mix(weights, rows.vp);
    let wo = g.param(mh.wo);
    Ok(Attended {
        context: g.matmul(mixed, wo),
        weights,
    })
}

/// Multi-head attention of one key over `n` candidate rows.
pub fn attend(
    g: &mut Graph,
    mh: &MultiheadParams,
    queries: Var,
    key: Var,
    values: Var,
    mask: &[bool],
) -> Result<Attended> {
    let rows = project(g, mh, queries, values);
    attend_projected(g, mh, rows, key, mask)
}

/// Per-row mean over heads of an `n×heads` weight matrix.
pub fn mean_over_heads(w: &Tensor) -> Vec<f64> {
    let heads = w.cols() as f64;
    (0..w.rows()).map(|r| w.row(r).iter().sum::<f64>() / heads).collect()
}

/// Two affine layers with a rectifier between them.
#[derive(Debug, Clone, Copy)]
pub struct Classifier {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Classifier {
    fn init(prefix: &str, input: usize, hidden: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        store.insert(format!("{prefix}w1"), xavier(rng, input, hidden));
        store.insert(format!("{prefix}b1"), Tensor::zeros(1, hidden));
        store.insert(format!("{prefix}w2"), xavier(rng, hidden, 2));
        store.insert(format!("{prefix}b2"), Tensor::zeros(1, 2));
        Self::bind(prefix, store)
    }

    fn bind(prefix: &str, store: &ParamStore) -> Result<Self> {
        let r = |n: &str| store.require(&format!("{prefix}{n}"));
        Ok(Self {
            w1: r("w1")?,
            b1: r("b1")?,
            w2: r("w2")?,
            b2: r("b2")?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.relu(h);
        let o = g.matmul(h, w2);
        g.add_row(o, b2)
    }
}

/// Parameter-name prefixes of each component.
pub mod prefix {
    pub const ENCODER: &str = "enc.";
    pub const SG_ATTENTION: &str = "sg_attn.";
    pub const VALUE_ATTENTION: &str = "val_attn.";
    pub const BASELINE_CLASSIFIER: &str = "clf_base.";
    pub const STAGE1_CLASSIFIER: &str = "clf1.";
    pub const FINAL_CLASSIFIER: &str = "clf_final.";
    pub const LATENT_SG: &str = "latent_sg";
}

/// Complete trainable state of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub variant: ModelVariant,
    pub store: ParamStore,
}

impl ModelParams {
    pub fn init(config: ModelConfig, variant: ModelVariant, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.hidden();
        TrainableEncoder::init(config.encoder, &mut store, &mut rng)?;
        MultiheadParams::init(
            prefix::SG_ATTENTION,
            h,
            config.attention_heads,
            config.norm,
            &mut store,
            &mut rng,
        )?;
        MultiheadParams::init(
            prefix::VALUE_ATTENTION,
            h,
            config.attention_heads,
            config.norm,
            &mut store,
            &mut rng,
        )?;
        let c = config.classifier_hidden;
        Classifier::init(prefix::BASELINE_CLASSIFIER, h, c, &mut store, &mut rng)?;
        Classifier::init(prefix::STAGE1_CLASSIFIER, 2 * h, c, &mut store, &mut rng)?;
        Classifier::init(prefix::FINAL_CLASSIFIER, 2 * h, c, &mut store, &mut rng)?;
        if variant == ModelVariant::LatentSG {
            let g = config.sg_slots();
            store.insert(prefix::LATENT_SG, xavier(&mut rng, g, h));
        }
        Ok(Self { config, variant, store })
    }

    pub fn model(&self) -> Result<Model> {
        Model::bind(self.config, self.variant, &self.store)
    }

    /// Ids of tensors whose names start with any of `prefixes`.
    pub fn ids_with_prefixes(&self, prefixes: &[&str]) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = prefixes
            .iter()
            .flat_map(|p| self.store.ids_with_prefix(p).collect::<Vec<_>>())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

/// Resolved parameter ids for one variant.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub variant: ModelVariant,
    pub encoder: TrainableEncoder,
    pub sg_attention: MultiheadParams,
    pub value_attention: MultiheadParams,
    pub baseline_classifier: Classifier,
    pub stage1_classifier: Classifier,
    pub final_classifier: Classifier,
    pub latent_sg: Option<ParamId>,
}

/// Token ids of one annotator's subjective ground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SgInput {
    pub slots: Vec<Vec<usize>>,
    pub mask: Vec<bool>,
}

/// One prediction request.
#[derive(Debug, Clone, Copy)]
pub struct ForwardInput<'a> {
    pub situation: &'a [usize],
    pub sg: Option<&'a SgInput>,
    pub rots: &'a [Vec<usize>],
}

/// Explanation weights of one prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    /// Mean over heads, length G; empty when the variant has no SG stage.
    pub sg_weights: Vec<f64>,
    /// Mean over heads, length K; empty when no value stage ran.
    pub value_weights: Vec<f64>,
    #[serde(skip)]
    pub sg_head_weights: Option<Tensor>,
    #[serde(skip)]
    pub value_head_weights: Option<Tensor>,
}

impl AttentionTrace {
    fn empty() -> Self {
        Self {
            sg_weights: Vec::new(),
            value_weights: Vec::new(),
            sg_head_weights: None,
            value_head_weights: None,
        }
    }

    /// Simplex and mask contract: non-negative, sums to one, masked slots zero.
    pub fn check(&self, sg_mask: Option<&[bool]>) -> Result<()> {
        let simplex = |w: &[f64], what: &str| -> Result<()> {
            if w.is_empty() {
                return Ok(());
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-6 || w.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::Validation(format!(
                    "{what} weights are not a distribution (sum {s})"
                )));
            }
            Ok(())
        };
        simplex(&self.sg_weights, "subjective-ground")?;
        simplex(&self.value_weights, "value")?;
        if let Some(mask) = sg_mask {
            if !self.sg_weights.is_empty() {
                if mask.len() != self.sg_weights.len() {
                    return Err(Error::DimensionMismatch {
                        expected: mask.len(),
                        got: self.sg_weights.len(),
                    });
                }
                if self.sg_weights.iter().zip(mask).any(|(&w, &m)| !m && w != 0.0) {
                    return Err(Error::Validation("masked slot received attention".into()));
                }
            }
        }
        Ok(())
    }
}

/// Graph handles of a batch forward.
pub struct BatchOutput {
    /// `B×2`
    pub logits: Var,
    pub traces: Vec<AttentionTrace>,
}

impl Model {
    pub fn bind(config: ModelConfig, variant: ModelVariant, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let h = config.hidden();
        let latent_sg = store.id(prefix::LATENT_SG);
        if variant == ModelVariant::LatentSG {
            let id = latent_sg.ok_or_else(|| Error::Checkpoint("latent-sg variant without latent_sg tensor".into()))?;
            if store.get(id).shape() != (config.sg_slots(), h) {
                return Err(Error::Checkpoint("latent_sg has the wrong shape".into()));
            }
        }
        Ok(Self {
            config,
            variant,
            encoder: TrainableEncoder::bind(config.encoder, store)?,
            sg_attention: MultiheadParams::bind(prefix::SG_ATTENTION, h, config.attention_heads, config.norm, store)?,
            value_attention: MultiheadParams::bind(
                prefix::VALUE_ATTENTION,
                h,
                config.attention_heads,
                config.norm,
                store,
            )?,
            baseline_classifier: Classifier::bind(prefix::BASELINE_CLASSIFIER, store)?,
            stage1_classifier: Classifier::bind(prefix::STAGE1_CLASSIFIER, store)?,
            final_classifier: Classifier::bind(prefix::FINAL_CLASSIFIER, store)?,
            latent_sg: if variant == ModelVariant::LatentSG {
                latent_sg
            } else {
                None
            },
        })
    }

    fn check_inputs(&self, stage: Stage, x: &ForwardInput) -> Result<()> {
        let v = self.variant;
        if v.uses_sg_base() {
            let sg =
                x.sg.ok_or_else(|| Error::Validation(format!("variant {v} needs a subjective-ground base")))?;
            if sg.slots.len() != self.config.sg_slots() || sg.mask.len() != sg.slots.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.config.sg_slots(),
                    got: sg.slots.len(),
                });
            }
            if !sg.mask.iter().any(|&m| m) {
                return Err(Error::Validation("subjective-ground base has no real slot".into()));
            }
        }
        let needs_rots = stage == Stage::Value && v.uses_rots();
        if needs_rots && x.rots.is_empty() {
            return Err(Error::Validation(format!("variant {v} needs rules-of-thumb")));
        }
        if stage == Stage::SubjectiveGround && v == ModelVariant::RoTSelfAttention {
            return Err(Error::Validation(
                "rot-self-attention has no subjective-ground stage".into(),
            ));
        }
        Ok(())
    }

    /// Records the forward pass of a batch and returns `B×2` logits.
    pub fn forward_batch(&self, g: &mut Graph, stage: Stage, batch: &[ForwardInput]) -> Result<BatchOutput> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("forward on an empty batch".into()));
        }
        for x in batch {
            self.check_inputs(stage, x)?;
        }
        let v = self.variant;
        let read_sg = v.uses_sg_base();
        let read_rots = stage == Stage::Value && v.uses_rots();

        // pack every text once
        let mut texts: Vec<&[usize]> = Vec::new();
        let mut sit_row = Vec::with_capacity(batch.len());
        let mut sg_rows: HashMap<*const SgInput, (usize, usize)> = HashMap::new();
        let mut rot_rows = Vec::with_capacity(batch.len());
        let mut sg_order: Vec<*const SgInput> = Vec::new();
        for x in batch {
            sit_row.push(texts.len());
            texts.push(x.situation);
            if read_sg {
                let sg = x.sg.expect("checked");
                let key = sg as *const SgInput;
                if let std::collections::hash_map::Entry::Vacant(e) = sg_rows.entry(key) {
                    e.insert((texts.len(), sg.slots.len()));
                    sg_order.push(key);
                    texts.extend(sg.slots.iter().map(Vec::as_slice));
                }
            }
            if read_rots {
                rot_rows.push((texts.len(), x.rots.len()));
                texts.extend(x.rots.iter().map(Vec::as_slice));
            }
        }
        let encoded = self.encoder.encode_ids(g, &texts)?;

        // per-annotator projections for the SG stage
        let mut sg_nodes: HashMap<*const SgInput, (Var, Option<Projected>)> = HashMap::new();
        for key in sg_order {
            let (start, len) = sg_rows[&key];
            let idx: Vec<usize> = (start..start + len).collect();
            let rows = g.rows(encoded, &idx);
            let proj = (v != ModelVariant::StaticSG).then(|| project(g, &self.sg_attention, rows, rows));
            sg_nodes.insert(key, (rows, proj));
        }
        let latent = match self.latent_sg {
            Some(id) => {
                let rows = g.param(id);
                Some((rows, project(g, &self.sg_attention, rows, rows)))
            }
            None => None,
        };
        let latent_mask = vec![true; self.config.sg_slots()];

        let mut features = Vec::with_capacity(batch.len());
        let mut traces = Vec::with_capacity(batch.len());
        for (i, x) in batch.iter().enumerate() {
            let z = g.rows(encoded, &[sit_row[i]]);
            let mut trace = AttentionTrace::empty();

            if v.is_baseline() {
                features.push(z);
                traces.push(trace);
                continue;
            }

            // subjective-ground context
            let sg_context = match v {
                ModelVariant::RoTSelfAttention => None,
                ModelVariant::LatentSG => {
                    let (_, proj) = latent.expect("latent variant");
                    let att = attend_projected(g, &self.sg_attention, proj, z, &latent_mask)?;
                    let w = g.value(att.weights).clone();
                    trace.sg_weights = mean_over_heads(&w);
                    trace.sg_head_weights = Some(w);
                    Some(att.context)
                }
                ModelVariant::StaticSG => {
                    let sg = x.sg.expect("checked");
                    let (rows, _) = sg_nodes[&(sg as *const SgInput)];
                    let n = sg.mask.iter().filter(|&&m| m).count() as f64;
                    trace.sg_weights = sg.mask.iter().map(|&m| if m { 1.0 / n } else { 0.0 }).collect();
                    Some(g.masked_mean(rows, &sg.mask)?)
                }
                _ => {
                    let sg = x.sg.expect("checked");
                    let (_, proj) = sg_nodes[&(sg as *const SgInput)];
                    let att = attend_projected(g, &self.sg_attention, proj.expect("projected"), z, &sg.mask)?;
                    let w = g.value(att.weights).clone();
                    trace.sg_weights = mean_over_heads(&w);
                    trace.sg_head_weights = Some(w);
                    Some(att.context)
                }
            };

            let stage1_path = stage == Stage::SubjectiveGround || v == ModelVariant::SGAttentionNoRoT;
            let feature = if stage1_path {
                let ctx = sg_context.expect("sg variants only");
                g.concat(ctx, z)
            } else {
                let (start, k) = rot_rows[i];
                let idx: Vec<usize> = (start..start + k).collect();
                let val = g.rows(encoded, &idx);
                let all = vec![true; k];
                let proj = project(g, &self.value_attention, val, val);
                let ctx = match sg_context {
                    Some(key) => {
                        let att = attend_projected(g, &self.value_attention, proj, key, &all)?;
                        let w = g.value(att.weights).clone();
                        trace.value_weights = mean_over_heads(&w);
                        trace.value_head_weights = Some(w);
                        att.context
                    }
                    None => {
                        // self-attention: every rule attends over all rules
                        let mut ctxs = Vec::with_capacity(k);
                        let mut acc = Tensor::zeros(k, self.value_attention.heads);
                        for r in 0..k {
                            let key = g.rows(val, &[r]);
                            let att = attend_projected(g, &self.value_attention, proj, key, &all)?;
                            acc.add_assign(g.value(att.weights));
                            ctxs.push(att.context);
                        }
                        acc.scale_assign(1.0 / k as f64);
                        trace.value_weights = mean_over_heads(&acc);
                        trace.value_head_weights = Some(acc);
                        let stacked = g.stack(&ctxs);
                        g.col_mean(stacked)
                    }
                };
                g.concat(ctx, z)
            };
            features.push(feature);
            traces.push(trace);
        }

        let stacked = g.stack(&features);
        let clf = if v.is_baseline() {
            &self.baseline_classifier
        } else if stage == Stage::SubjectiveGround || v == ModelVariant::SGAttentionNoRoT {
            &self.stage1_classifier
        } else {
            &self.final_classifier
        };
        let logits = clf.apply(g, stacked);

        if cfg!(debug_assertions) {
            for (t, x) in traces.iter().zip(batch) {
                let mask = x.sg.filter(|_| read_sg).map(|s| s.mask.as_slice());
                t.check(mask)?;
            }
        }
        Ok(BatchOutput { logits, traces })
    }

    /// Single-instance forward returning plain logits and the trace.
    pub fn forward(&self, store: &ParamStore, stage: Stage, x: ForwardInput) -> Result<([f64; 2], AttentionTrace)> {
        let mut g = Graph::new(store);
        let out = self.forward_batch(&mut g, stage, &[x])?;
        let l = g.value(out.logits);
        Ok((
            [l.get(0, 0), l.get(0, 1)],
            out.traces.into_iter().next().expect("one trace"),
        ))
    }
}

/// Softmax cross-entropy of two logits.
pub fn loss(logits: [f64; 2], label: usize) -> f64 {
    crate::autograd::cross_entropy_row(&logits, label)
}

/// Predicted class of a logit row (class 0 on ties).
pub fn argmax2(row: &[f64]) -> usize {
    usize::from(row[1] > row[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size: 64,
                hidden: 8,
                blocks: 1,
                heads: 2,
                max_len: 16,
                ffn_mult: 2,
            },
            attention_heads: 2,
            norm: NormMode::One,
            clusters: 2,
            per_cluster: 2,
            rots_per_situation: 3,
            classifier_hidden: 6,
        }
    }

    fn identity_mh(store: &mut ParamStore, h: usize) -> MultiheadParams {
        let mut eye = Tensor::zeros(h, h);
        for i in 0..h {
            eye.set(i, i, 1.0);
        }
        for n in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("t.{n}"), eye.clone());
        }
        MultiheadParams::bind("t.", h, 1, NormMode::One, store).unwrap()
    }

    #[test]
    fn hand_computed_softmax() {
        let mut store = ParamStore::new();
        let mh = identity_mh(&mut store, 2);
        let mut g = Graph::new(&store);
        let rows = g.input(Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let key = g.input(Tensor::row_vector(vec![1.0, 0.0]));
        let att = attend(&mut g, &mh, rows, key, rows, &[true, true]).unwrap();
        let e = std::f64::consts::E;
        let w = g.value(att.weights);
        assert!((w.get(0, 0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((w.get(1, 0) - 1.0 / (e + 1.0)).abs() < 1e-12);
        let c = g.value(att.context);
        assert!((c.get(0, 0) - 0.7310585786300049).abs() < 1e-12);
        assert!((c.get(0, 1) - 0.2689414213699951).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_give_uniform_weights() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mh = MultiheadParams::init("m.", 4, 2, NormMode::One, &mut store, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let rows = g.input(Tensor::from_vec(3, 4, [0.3, -1.0, 2.0, 0.5].repeat(3)).unwrap());
        let key = g.input(Tensor::row_vector(vec![1.0, 2.0, 3.0, 4.0]));
        let att = attend(&mut g, &mh, rows, key, rows, &[true, false, true]).unwrap();
        let w = mean_over_heads(g.value(att.weights));
        assert_eq!(w[1], 0.0);
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn masked_slot_ignores_content() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mh = MultiheadParams::init("m.", 4, 2, NormMode::One, &mut store, &mut rng).unwrap();
        let run = |masked_row: [f64; 4]| {
            let mut g = Graph::new(&store);
            let mut data = vec![0.1, 0.2, 0.3, 0.4];
            data.extend(masked_row);
            data.extend([-0.5, 0.0, 0.5, 1.0]);
            let rows = g.input(Tensor::from_vec(3, 4, data).unwrap());
            let key = g.input(Tensor::row_vector(vec![1.0, -1.0, 0.5, 2.0]));
            let att = attend(&mut g, &mh, rows, key, rows, &[true, false, true]).unwrap();
            (g.value(att.weights).clone(), g.value(att.context).clone())
        };
        let (w1, c1) = run([0.0; 4]);
        let (w2, c2) = run([100.0, -50.0, 7.0, 3.0]);
        assert_eq!(w1, w2);
        assert_eq!(c1, c2);
        assert_eq!(w1.get(1, 0), 0.0);
    }

    #[test]
    fn all_masked_is_an_error() {
        let mut store = ParamStore::new();
        let mh = identity_mh(&mut store, 2);
        let mut g = Graph::new(&store);
        let rows = g.input(Tensor::zeros(2, 2));
        let key = g.input(Tensor::zeros(1, 2));
        assert!(attend(&mut g, &mh, rows, key, rows, &[false, false]).is_err());
    }

    fn toy_inputs() -> (Vec<usize>, SgInput, Vec<Vec<usize>>) {
        (
            vec![1, 2, 3],
            SgInput {
                slots: vec![vec![4, 5], vec![6], vec![7, 8, 9], vec![]],
                mask: vec![true, true, true, false],
            },
            vec![vec![10, 11], vec![12], vec![13, 14]],
        )
    }

    #[test]
    fn static_sg_trace_is_uniform() {
        let p = ModelParams::init(tiny_config(), ModelVariant::StaticSG, 0).unwrap();
        let m = p.model().unwrap();
        let (s, sg, rots) = toy_inputs();
        let x = ForwardInput {
            situation: &s,
            sg: Some(&sg),
            rots: &rots,
        };
        let (_, t) = m.forward(&p.store, Stage::Value, x).unwrap();
        assert_eq!(t.sg_weights, vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]);
        assert_eq!(t.value_weights.len(), 3);
    }

    #[test]
    fn single_real_slot_gets_all_weight() {
        let p = ModelParams::init(tiny_config(), ModelVariant::SGAttention, 0).unwrap();
        let m = p.model().unwrap();
        let (s, mut sg, rots) = toy_inputs();
        sg.mask = vec![false, false, true, false];
        let x = ForwardInput {
            situation: &s,
            sg: Some(&sg),
            rots: &rots,
        };
        let (_, t) = m.forward(&p.store, Stage::Value, x).unwrap();
        assert_eq!(t.sg_weights, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn missing_rots_rejected() {
        let p = ModelParams::init(tiny_config(), ModelVariant::SGAttention, 0).unwrap();
        let m = p.model().unwrap();
        let (s, sg, _) = toy_inputs();
        let x = ForwardInput {
            situation: &s,
            sg: Some(&sg),
            rots: &[],
        };
        assert!(m.forward(&p.store, Stage::Value, x).is_err());
        // the subjective-ground stage does not read rules
        assert!(m.forward(&p.store, Stage::SubjectiveGround, x).is_ok());
    }

    #[test]
    fn permuting_slots_permutes_weights() {
        let p = ModelParams::init(tiny_config(), ModelVariant::SGAttention, 4).unwrap();
        let m = p.model().unwrap();
        let (s, sg, rots) = toy_inputs();
        let perm = [2, 0, 1, 3];
        let sg2 = SgInput {
            slots: perm.iter().map(|&i| sg.slots[i].clone()).collect(),
            mask: perm.iter().map(|&i| sg.mask[i]).collect(),
        };
        let run = |sg: &SgInput| {
            m.forward(
                &p.store,
                Stage::Value,
                ForwardInput {
                    situation: &s,
                    sg: Some(sg),
                    rots: &rots,
                },
            )
            .unwrap()
        };
        let (l1, t1) = run(&sg);
        let (l2, t2) = run(&sg2);
        for (j, &i) in perm.iter().enumerate() {
            assert!((t2.sg_weights[j] - t1.sg_weights[i]).abs() < 1e-12);
        }
        assert!((l1[0] - l2[0]).abs() < 1e-10 && (l1[1] - l2[1]).abs() < 1e-10);
    }

    #[test]
    fn loss_examples() {
        assert!((loss([0.0, 0.0], 0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((loss([0.0, 0.0], 1) - std::f64::consts::LN_2).abs() < 1e-15);
        let v = loss([10.0, -10.0], 0);
        assert!((v - 2.061153620314381e-9).abs() < 1e-20, "{v}");
        assert!(loss([-3.0, 8.0], 0) >= 0.0);
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in ModelVariant::ALL {
            assert_eq!(v.as_str().parse::<ModelVariant>().unwrap(), v);
        }
    }

    #[test]
    fn norm_modes_share_argmax_with_one_head() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = MultiheadParams::init("a.", 4, 1, NormMode::One, &mut store, &mut rng).unwrap();
        let b = MultiheadParams {
            norm: NormMode::SqrtDk,
            ..a
        };
        let data: Vec<f64> = (0..20).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let weights = |mh: &MultiheadParams| {
            let mut g = Graph::new(&store);
            let rows = g.input(Tensor::from_vec(5, 4, data.clone()).unwrap());
            let key = g.input(Tensor::row_vector(vec![0.5, -1.0, 2.0, 1.0]));
            let att = attend(&mut g, mh, rows, key, rows, &[true; 5]).unwrap();
            mean_over_heads(g.value(att.weights))
        };
        let am = |w: Vec<f64>| {
            w.iter()
                .enumerate()
                .fold((0, f64::MIN), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
                .0
        };
        assert_eq!(am(weights(&a)), am(weights(&b)));
    }
}
