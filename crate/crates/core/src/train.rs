//! Optimizer, learning-rate schedule and the staged training loops.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Graph, ParamId, ParamStore};
use crate::encoder::{named_seed, Tokenizer};
use crate::error::{Error, Result};
use crate::eval::{classification_report, mean_std, MeanStd};
use crate::model::{
    argmax2, prefix, AttentionTrace, ForwardInput, Model, ModelConfig, ModelParams, ModelVariant, SgInput, Stage,
};

pub const LR_MIN: f64 = 1e-6;
pub const LR_MAX: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// 0 disables warmup and decay (constant rate).
    pub warmup_steps: usize,
    pub log_decay: bool,
    /// Defaults to `warmup_steps`.
    pub decay_scale: Option<usize>,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` for the DPlus stage.
    pub stage1_epochs: Option<usize>,
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub variant: ModelVariant,
    pub freeze_shared: bool,
    /// Baselines only: one model per annotator.
    pub per_annotator: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            warmup_steps: 100,
            log_decay: true,
            decay_scale: None,
            batch_size: 16,
            eval_batch_size: 64,
            epochs: 30,
            stage1_epochs: None,
            patience: 5,
            seeds: vec![0, 1, 2, 3, 4],
            variant: ModelVariant::SGAttention,
            freeze_shared: false,
            per_annotator: false,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(LR_MIN..=LR_MAX).contains(&self.learning_rate) {
            return Err(Error::Config(format!(
                "learning rate {} outside [{LR_MIN}, {LR_MAX}]",
                self.learning_rate
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch sizes and epochs must be positive".into()));
        }
        if self.stage1_epochs == Some(0) || self.decay_scale == Some(0) {
            return Err(Error::Config("stage1_epochs and decay_scale must be positive".into()));
        }
        if self.per_annotator && !self.variant.is_baseline() {
            return Err(Error::Config(
                "per-annotator mode applies to baseline variants only".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        lr_at(step, self)
    }
}

/// Linear warmup to the base rate, then logarithmic decay.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let lr = cfg.learning_rate;
    let w = cfg.warmup_steps;
    if w == 0 {
        return lr;
    }
    if step < w {
        return lr * step as f64 / w as f64;
    }
    if !cfg.log_decay {
        return lr;
    }
    let scale = cfg.decay_scale.unwrap_or(w) as f64;
    lr / (1.0 + (1.0 + (step - w) as f64 / scale).ln())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Grads,
    pub v: Grads,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            m: Grads::zeros_like(params),
            v: Grads::zeros_like(params),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of the tensors in `ids`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Grads,
    state: &mut AdamState,
    lr: f64,
    ids: &[ParamId],
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: grads.len(),
        });
    }
    for &id in ids {
        if grads.get(id).shape() != params.get(id).shape() {
            return Err(Error::Validation(format!(
                "gradient shape mismatch for {}",
                params.name(id)
            )));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for &id in ids {
        let g = grads.get(id).data();
        let m = state.m.get_mut(id).data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
        }
        let v = state.v.get_mut(id).data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
        }
        let (m, v) = (state.m.get(id).data(), state.v.get(id).data());
        let p = params.get_mut(id).data_mut();
        for ((pi, mi), vi) in p.iter_mut().zip(m).zip(v) {
            *pi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// One labelled prediction target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub annotator_id: String,
    /// Key into [`Inputs::situations`].
    pub situation_key: String,
    /// Key into [`Inputs::rots`].
    pub rot_key: String,
    pub label: usize,
}

/// Tokenized model inputs shared by many examples.
#[derive(Debug, Clone, Default)]
pub struct Inputs {
    pub situations: HashMap<String, Vec<usize>>,
    pub sg: HashMap<String, SgInput>,
    pub rots: HashMap<String, Vec<Vec<usize>>>,
}

impl Inputs {
    pub fn add_situation(&mut self, tk: &Tokenizer, key: &str, text: &str) {
        self.situations.insert(key.to_string(), tk.tokenize(text));
    }

    pub fn add_sg(&mut self, tk: &Tokenizer, annotator: &str, slots: &[&str], mask: Vec<bool>) {
        self.sg.insert(
            annotator.to_string(),
            SgInput {
                slots: slots.iter().map(|t| tk.tokenize(t)).collect(),
                mask,
            },
        );
    }

    pub fn add_rots(&mut self, tk: &Tokenizer, key: &str, texts: &[&str]) {
        self.rots
            .insert(key.to_string(), texts.iter().map(|t| tk.tokenize(t)).collect());
    }

    /// Resolves the model inputs of `examples` for `stage`.
    pub fn forward_inputs<'a>(
        &'a self,
        variant: ModelVariant,
        stage: Stage,
        examples: &[&Example],
    ) -> Result<Vec<ForwardInput<'a>>> {
        let read_rots = stage == Stage::Value && variant.uses_rots();
        examples
            .iter()
            .map(|e| {
                let situation = self
                    .situations
                    .get(&e.situation_key)
                    .ok_or_else(|| Error::Validation(format!("no situation text for {}", e.situation_key)))?;
                let sg = if variant.uses_sg_base() {
                    Some(self.sg.get(&e.annotator_id).ok_or_else(|| {
                        Error::Validation(format!("no subjective-ground base for annotator {}", e.annotator_id))
                    })?)
                } else {
                    None
                };
                let rots: &[Vec<usize>] = if read_rots {
                    self.rots
                        .get(&e.rot_key)
                        .ok_or_else(|| Error::Validation(format!("missing rules-of-thumb for {}", e.rot_key)))?
                } else {
                    &[]
                };
                Ok(ForwardInput { situation, sg, rots })
            })
            .collect()
    }
}

/// Groups examples by annotator, in order, and chunks each group.
fn grouped_batches<'a>(examples: &[&'a Example], size: usize) -> Vec<Vec<&'a Example>> {
    let mut groups: BTreeMap<&str, Vec<&Example>> = BTreeMap::new();
    let mut order = Vec::new();
    for e in examples {
        let g = groups.entry(e.annotator_id.as_str()).or_default();
        if g.is_empty() {
            order.push(e.annotator_id.as_str());
        }
        g.push(e);
    }
    order
        .into_iter()
        .flat_map(|a| groups[a].chunks(size).map(<[&Example]>::to_vec).collect::<Vec<_>>())
        .collect()
}

/// Per-epoch shuffled batches; each batch holds one annotator's examples.
pub fn training_batches<'a>(examples: &'a [Example], size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<&'a Example>> {
    let mut refs: Vec<&Example> = examples.iter().collect();
    refs.shuffle(rng);
    let mut batches = grouped_batches(&refs, size);
    batches.shuffle(rng);
    batches
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub example_id: String,
    pub logits: [f64; 2],
    pub label: usize,
    pub trace: AttentionTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub macro_f1: f64,
    /// In the order of the input examples.
    pub predictions: Vec<Prediction>,
}

/// Deterministic inference over `examples` (batched by annotator).
pub fn predict(
    params: &ModelParams,
    inputs: &Inputs,
    stage: Stage,
    examples: &[Example],
    batch_size: usize,
) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("no examples to evaluate".into()));
    }
    let model = params.model()?;
    let refs: Vec<&Example> = examples.iter().collect();
    let position: HashMap<*const Example, usize> = refs.iter().enumerate().map(|(i, e)| (*e as *const _, i)).collect();
    let mut slots: Vec<Option<Prediction>> = vec![None; examples.len()];
    let mut loss = 0.0;
    for batch in grouped_batches(&refs, batch_size) {
        let xs = inputs.forward_inputs(params.variant, stage, &batch)?;
        let mut g = Graph::new(&params.store);
        let out = model.forward_batch(&mut g, stage, &xs)?;
        let logits = g.value(out.logits);
        for (r, (e, trace)) in batch.iter().zip(out.traces).enumerate() {
            let row = [logits.get(r, 0), logits.get(r, 1)];
            loss += crate::model::loss(row, e.label);
            slots[position[&(*e as *const _)]] = Some(Prediction {
                example_id: e.id.clone(),
                logits: row,
                label: argmax2(&row),
                trace,
            });
        }
    }
    let predictions: Vec<Prediction> = slots.into_iter().map(|p| p.expect("every example predicted")).collect();
    let preds: Vec<usize> = predictions.iter().map(|p| p.label).collect();
    let golds: Vec<usize> = examples.iter().map(|e| e.label).collect();
    Ok(Evaluation {
        loss: loss / examples.len() as f64,
        macro_f1: classification_report(&preds, &golds)?.macro_f1,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: String,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub best_epoch: usize,
    pub best_valid_f1: f64,
    pub epochs_run: usize,
    pub steps: usize,
}

/// One optimization stage.
pub struct StagePlan<'a> {
    pub name: &'a str,
    pub stage: Stage,
    pub train: &'a [Example],
    pub valid: &'a [Example],
    pub trainable: Vec<ParamId>,
    pub epochs: usize,
}

/// Trains `params` in place and restores the best-valid state.
pub fn run_stage(
    params: &mut ModelParams,
    inputs: &Inputs,
    plan: &StagePlan,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut Vec<EpochMetrics>,
) -> Result<StageSummary> {
    if plan.train.is_empty() {
        return Err(Error::EmptyInput(format!("{}: empty training split", plan.name)));
    }
    if plan.valid.is_empty() {
        return Err(Error::EmptyInput(format!("{}: empty validation split", plan.name)));
    }
    let model: Model = params.model()?;
    let mut state = AdamState::new(&params.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ named_seed(plan.name));
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut step = 0;
    let mut epochs_run = 0;

    for epoch in 1..=plan.epochs {
        epochs_run = epoch;
        let mut total_loss = 0.0;
        let mut preds = Vec::with_capacity(plan.train.len());
        let mut golds = Vec::with_capacity(plan.train.len());
        for batch in training_batches(plan.train, cfg.batch_size, &mut rng) {
            let xs = inputs.forward_inputs(params.variant, plan.stage, &batch)?;
            let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
            let grads = {
                let mut g = Graph::new(&params.store);
                let out = model.forward_batch(&mut g, plan.stage, &xs)?;
                let lv = g.value(out.logits);
                for r in 0..labels.len() {
                    preds.push(argmax2(lv.row(r)));
                }
                let loss = g.cross_entropy(out.logits, &labels);
                total_loss += g.value(loss).get(0, 0) * labels.len() as f64;
                g.backward(loss)?
            };
            golds.extend(labels);
            adam_step(&mut params.store, &grads, &mut state, lr_at(step, cfg), &plan.trainable)?;
            step += 1;
        }
        if !params.store.iter().all(|(_, _, t)| t.is_finite()) {
            return Err(Error::Graph(format!(
                "{}: parameters diverged at epoch {epoch}",
                plan.name
            )));
        }
        log.push(EpochMetrics {
            stage: plan.name.to_string(),
            epoch,
            split: "train".into(),
            loss: total_loss / plan.train.len() as f64,
            macro_f1: classification_report(&preds, &golds)?.macro_f1,
        });
        let valid = predict(params, inputs, plan.stage, plan.valid, cfg.eval_batch_size)?;
        log.push(EpochMetrics {
            stage: plan.name.to_string(),
            epoch,
            split: "valid".into(),
            loss: valid.loss,
            macro_f1: valid.macro_f1,
        });
        if best.as_ref().map_or(true, |(f, _, _)| valid.macro_f1 > *f) {
            best = Some((valid.macro_f1, epoch, params.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_valid_f1, best_epoch, store) = best.expect("at least one epoch");
    params.store = store;
    Ok(StageSummary {
        stage: plan.name.to_string(),
        best_epoch,
        best_valid_f1,
        epochs_run,
        steps: step,
    })
}

/// Splits used by a run.
pub struct TrainData<'a> {
    pub inputs: &'a Inputs,
    pub dplus_train: &'a [Example],
    pub dplus_valid: &'a [Example],
    pub d_train: &'a [Example],
    pub d_valid: &'a [Example],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub stages: Vec<StageSummary>,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainOutcome {
    /// Validation F1 of the final stage's selected epoch.
    pub fn valid_f1(&self) -> f64 {
        self.stages.last().map_or(f64::NAN, |s| s.best_valid_f1)
    }
}

fn shared_prefixes(variant: ModelVariant) -> Vec<&'static str> {
    match variant {
        ModelVariant::Baseline | ModelVariant::BaselineFinetuned | ModelVariant::RoTSelfAttention => {
            vec![prefix::ENCODER]
        }
        ModelVariant::StaticSG => vec![prefix::ENCODER],
        ModelVariant::LatentSG => vec![prefix::ENCODER, prefix::SG_ATTENTION, prefix::LATENT_SG],
        ModelVariant::SGAttention | ModelVariant::SGAttentionNoRoT => {
            vec![prefix::ENCODER, prefix::SG_ATTENTION]
        }
    }
}

/// Tensors updated in each stage of `variant`.
pub fn trainable_prefixes(variant: ModelVariant, stage: Stage, freeze_shared: bool) -> Vec<&'static str> {
    let shared = shared_prefixes(variant);
    let mut out = Vec::new();
    match (variant, stage) {
        (ModelVariant::Baseline | ModelVariant::BaselineFinetuned, Stage::SubjectiveGround) => {
            out.extend(shared);
            out.push(prefix::BASELINE_CLASSIFIER);
        }
        (ModelVariant::Baseline | ModelVariant::BaselineFinetuned, Stage::Value) => {
            if !(freeze_shared && variant == ModelVariant::BaselineFinetuned) {
                out.extend(shared);
            }
            out.push(prefix::BASELINE_CLASSIFIER);
        }
        (ModelVariant::RoTSelfAttention, _) => {
            out.extend(shared);
            out.extend([prefix::VALUE_ATTENTION, prefix::FINAL_CLASSIFIER]);
        }
        (_, Stage::SubjectiveGround) => {
            out.extend(shared);
            out.push(prefix::STAGE1_CLASSIFIER);
        }
        (ModelVariant::SGAttentionNoRoT, Stage::Value) => {
            if !freeze_shared {
                out.extend(shared);
            }
            out.push(prefix::STAGE1_CLASSIFIER);
        }
        (_, Stage::Value) => {
            if !freeze_shared {
                out.extend(shared);
            }
            out.extend([prefix::VALUE_ATTENTION, prefix::FINAL_CLASSIFIER]);
        }
    }
    out
}

pub fn stage1_epochs(cfg: &TrainConfig) -> usize {
    cfg.stage1_epochs.unwrap_or(cfg.epochs)
}

/// Parameter-initialization seed of a run.
pub fn init_seed(seed: u64, variant: ModelVariant) -> u64 {
    named_seed(&format!("init/{variant}/{seed}"))
}

/// Full training of one variant with one seed.
pub fn train_variant(model_cfg: ModelConfig, cfg: &TrainConfig, seed: u64, data: &TrainData) -> Result<TrainOutcome> {
    cfg.validate()?;
    let variant = cfg.variant;
    let mut params = ModelParams::init(model_cfg, variant, init_seed(seed, variant))?;
    let mut stages = Vec::new();
    let mut metrics = Vec::new();
    if variant.has_stage1() {
        let s1 = train_stage1(&mut params, cfg, seed, data, &mut metrics)?;
        stages.push(s1);
        if variant == ModelVariant::BaselineFinetuned {
            // only the encoder carries over from the DPlus baseline
            let fresh = ModelParams::init(model_cfg, variant, init_seed(seed, variant) ^ 1)?;
            for id in fresh.store.ids_with_prefix(prefix::BASELINE_CLASSIFIER) {
                let name = fresh.store.name(id);
                let dst = params.store.require(name)?;
                *params.store.get_mut(dst) = fresh.store.get(id).clone();
            }
        }
    }
    stages.push(train_stage2(&mut params, cfg, seed, data, &mut metrics)?);
    Ok(TrainOutcome {
        params,
        stages,
        metrics,
    })
}

/// DPlus stage: encoder, subjective-ground attention and stage-1 classifier.
pub fn train_stage1(
    params: &mut ModelParams,
    cfg: &TrainConfig,
    seed: u64,
    data: &TrainData,
    log: &mut Vec<EpochMetrics>,
) -> Result<StageSummary> {
    let v = params.variant;
    if !v.has_stage1() {
        return Err(Error::Config(format!("variant {v} has no DPlus stage")));
    }
    let plan = StagePlan {
        name: "stage1",
        stage: Stage::SubjectiveGround,
        train: data.dplus_train,
        valid: data.dplus_valid,
        trainable: params.ids_with_prefixes(&trainable_prefixes(v, Stage::SubjectiveGround, cfg.freeze_shared)),
        epochs: stage1_epochs(cfg),
    };
    run_stage(params, data.inputs, &plan, cfg, seed, log)
}

/// D stage: value attention and final classifier, shared tensors per flag.
pub fn train_stage2(
    params: &mut ModelParams,
    cfg: &TrainConfig,
    seed: u64,
    data: &TrainData,
    log: &mut Vec<EpochMetrics>,
) -> Result<StageSummary> {
    let v = params.variant;
    let plan = StagePlan {
        name: "stage2",
        stage: Stage::Value,
        train: data.d_train,
        valid: data.d_valid,
        trainable: params.ids_with_prefixes(&trainable_prefixes(v, Stage::Value, cfg.freeze_shared)),
        epochs: cfg.epochs,
    };
    run_stage(params, data.inputs, &plan, cfg, seed, log)
}

/// Per-variant aggregate over seeds of a metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub variant: ModelVariant,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub summary: MeanStd,
}

/// Mean and sample standard deviation of per-seed scores for each variant.
pub fn run_matrix(results: &[(ModelVariant, u64, f64)]) -> Vec<MatrixRow> {
    let mut rows: BTreeMap<ModelVariant, (Vec<u64>, Vec<f64>)> = BTreeMap::new();
    for &(v, s, f) in results {
        let e = rows.entry(v).or_default();
        e.0.push(s);
        e.1.push(f);
    }
    rows.into_iter()
        .map(|(variant, (seeds, values))| MatrixRow {
            variant,
            summary: mean_std(&values),
            seeds,
            values,
        })
        .collect()
}
