//! End-to-end stages over a working directory.
//!
//! Every stage reads its upstream artifacts from a fixed [`Layout`] and
//! reports the files it read and wrote, so callers can record manifests.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{model_checkpoint, model_from_checkpoint, Checkpoint};
use crate::cluster::{silhouette, ClusterModel, ClusterReportLine};
use crate::config::PipelineConfig;
use crate::corpus::{strip_judgment_codes, Corpus, JudgmentLabel, JudgmentPhrases, RawCorpus, Source, Split};
use crate::encoder::{StaticEmbedder, Tokenizer, STATIC_EMBEDDER_SEED};
use crate::error::{Error, Result};
use crate::eval::{
    argmax_lowest, classification_report, cluster_accuracy, group_perturbations, random_baseline, rot_rule_prediction,
    sg_consistency, value_consistency, welch_t_test, ConsistencyReport, EvalReport, MeanStd, PerturbationRecord,
    SgCase, SgVariantOutcome, ValueItem,
};
use crate::io::{read_json, read_jsonl, write_json, write_jsonl, write_text};
use crate::lexicon::MoralLexicon;
use crate::model::{ModelParams, ModelVariant, Stage};
use crate::sgbase::{self, SubjectiveGroundBase};
use crate::synth::{self, SynthOutput};
use crate::train::{self, predict, Evaluation, Example, Inputs, Prediction, TrainData, TrainOutcome};

/// Files of one working directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn raw_dir(&self) -> PathBuf {
        self.root.join("raw")
    }
    pub fn oracle_dir(&self) -> PathBuf {
        self.root.join("oracle")
    }
    pub fn corpus_file(&self) -> PathBuf {
        self.root.join("corpus/corpus.json")
    }
    pub fn ingest_report(&self) -> PathBuf {
        self.root.join("corpus/ingest_report.json")
    }
    pub fn perturbations_file(&self) -> PathBuf {
        self.root.join("corpus/perturbations.jsonl")
    }
    pub fn cluster_checkpoint(&self) -> PathBuf {
        self.root.join("cluster/model.ckpt")
    }
    pub fn cluster_report(&self) -> PathBuf {
        self.root.join("cluster/report.jsonl")
    }
    pub fn sg_file(&self) -> PathBuf {
        self.root.join("sg/bases.jsonl")
    }
    pub fn sg_dump(&self) -> PathBuf {
        self.root.join("sg/bases.txt")
    }
    pub fn run_dir(&self, variant: ModelVariant, seed: u64) -> PathBuf {
        self.root.join(format!("runs/{variant}-s{seed}"))
    }
    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }
}

/// Files read and written by one stage.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Artifacts {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Artifacts {
    fn merge(&mut self, other: Artifacts) {
        for p in other.inputs {
            if !self.inputs.contains(&p) && !self.outputs.contains(&p) {
                self.inputs.push(p);
            }
        }
        for p in other.outputs {
            if !self.outputs.contains(&p) {
                self.outputs.push(p);
            }
        }
    }
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: format!("run `{producer}` first"),
        })
    }
}

pub fn lexicon(cfg: &PipelineConfig) -> Result<MoralLexicon> {
    match &cfg.lexicon {
        Some(p) => MoralLexicon::load(p),
        None => Ok(MoralLexicon::seed()),
    }
}

pub fn judgment_phrases(cfg: &PipelineConfig) -> Result<JudgmentPhrases> {
    match &cfg.judgment_phrases {
        Some(p) => JudgmentPhrases::load(p),
        None => Ok(JudgmentPhrases::seed()),
    }
}

pub fn run_synth(cfg: &PipelineConfig, layout: &Layout) -> Result<(SynthOutput, Artifacts)> {
    let out = synth::generate(&cfg.synth, &lexicon(cfg)?)?;
    out.write(&cfg.synth, &layout.raw_dir(), &layout.oracle_dir())?;
    let raw = layout.raw_dir();
    let oracle = layout.oracle_dir();
    let outputs = vec![
        raw.join(synth::SITUATIONS_FILE),
        raw.join(synth::COMMENTS_FILE),
        raw.join(synth::ROTS_FILE),
        raw.join(synth::PERTURBATIONS_FILE),
        oracle.join(synth::PROFILES_FILE),
        oracle.join(synth::FACTS_FILE),
    ];
    Ok((
        out,
        Artifacts {
            inputs: vec![],
            outputs,
        },
    ))
}

/// Validates and codes the corpus files under `input_dir` (default `raw/`).
pub fn run_ingest(cfg: &PipelineConfig, layout: &Layout, input_dir: Option<&Path>) -> Result<(Corpus, Artifacts)> {
    let dir = input_dir.map(Path::to_path_buf).unwrap_or_else(|| layout.raw_dir());
    let files = [
        dir.join(synth::SITUATIONS_FILE),
        dir.join(synth::COMMENTS_FILE),
        dir.join(synth::ROTS_FILE),
    ];
    for f in &files {
        require(f, "synth (or place corpus files in the input directory)")?;
    }
    let raw = RawCorpus {
        situations: read_jsonl(&files[0])?,
        comments: read_jsonl(&files[1])?,
        rots: read_jsonl(&files[2])?,
    };
    let corpus = Corpus::ingest(raw, &judgment_phrases(cfg)?, &cfg.ingest)?;
    write_json(layout.corpus_file(), &corpus)?;
    write_json(layout.ingest_report(), &corpus.report())?;
    let mut art = Artifacts {
        inputs: files.to_vec(),
        outputs: vec![layout.corpus_file(), layout.ingest_report()],
    };
    let pert = dir.join(synth::PERTURBATIONS_FILE);
    if pert.exists() {
        let records: Vec<PerturbationRecord> = read_jsonl(&pert)?;
        let known: HashMap<&str, Option<Split>> = {
            let sits = corpus.situation_map();
            corpus
                .comments
                .iter()
                .filter(|c| sits.get(c.situation_id.as_str()).is_some_and(|s| s.source == Source::D))
                .map(|c| (c.id.as_str(), sits[c.situation_id.as_str()].split))
                .collect()
        };
        for r in &records {
            if !known.contains_key(r.original_id.as_str()) {
                return Err(Error::Validation(format!(
                    "perturbation references unknown D instance {}",
                    r.original_id
                )));
            }
        }
        group_perturbations(&records)?;
        write_jsonl(layout.perturbations_file(), &records)?;
        art.inputs.push(pert);
        art.outputs.push(layout.perturbations_file());
    }
    Ok((corpus, art))
}

pub fn load_corpus(layout: &Layout) -> Result<Corpus> {
    require(&layout.corpus_file(), "ingest")?;
    read_json(layout.corpus_file())
}

pub fn static_embedder(cfg: &PipelineConfig) -> StaticEmbedder {
    StaticEmbedder::new(
        Tokenizer {
            vocab_size: cfg.model.vocab_size,
            max_len: cfg.model.max_len,
            lowercase: true,
        },
        cfg.cluster.embed_dim,
        STATIC_EMBEDDER_SEED,
    )
}

pub const CLUSTER_KIND: &str = "cluster";

/// Cluster model plus the per-cluster silhouettes of its fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterArtifact {
    pub model: ClusterModel,
    pub silhouettes: BTreeMap<usize, f64>,
    pub mean_silhouette: f64,
}

impl ClusterArtifact {
    fn to_checkpoint(&self, cfg: &PipelineConfig) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(
            CLUSTER_KIND,
            serde_json::json!({ "cluster": cfg.cluster, "seed": cfg.seed }),
        );
        let dim = self.model.centroids.first().map_or(0, Vec::len);
        let flat: Vec<f64> = self.model.centroids.iter().flatten().copied().collect();
        ck.tensors
            .push(("centroids".into(), crate::Tensor::from_vec(self.model.k, dim, flat)?));
        ck.meta
            .insert("assignments".into(), serde_json::to_value(&self.model.assignments)?);
        ck.meta.insert("sizes".into(), serde_json::to_value(&self.model.sizes)?);
        ck.meta
            .insert("inertia".into(), serde_json::to_value(self.model.inertia)?);
        ck.meta
            .insert("silhouettes".into(), serde_json::to_value(&self.silhouettes)?);
        ck.meta
            .insert("mean_silhouette".into(), serde_json::to_value(self.mean_silhouette)?);
        Ok(ck)
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CLUSTER_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a cluster checkpoint, found {:?}",
                ck.kind
            )));
        }
        let c = ck.tensor("centroids")?;
        let centroids: Vec<Vec<f64>> = (0..c.rows()).map(|r| c.row(r).to_vec()).collect();
        Ok(Self {
            model: ClusterModel {
                k: centroids.len(),
                centroids,
                assignments: ck.meta_as("assignments")?,
                sizes: ck.meta_as("sizes")?,
                inertia: ck.meta_as("inertia")?,
            },
            silhouettes: ck.meta_as("silhouettes")?,
            mean_silhouette: ck.meta_as("mean_silhouette")?,
        })
    }

    /// Cluster of a situation: its fitted assignment, else the nearest centroid.
    pub fn cluster_of_text(&self, embedder: &StaticEmbedder, id: &str, text: &str) -> Result<usize> {
        match self.model.cluster_of(id) {
            Some(c) => Ok(c),
            None => self.model.assign(&embedder.embed(text)),
        }
    }
}

/// Fits topic clusters on DPlus situation texts.
pub fn run_cluster(cfg: &PipelineConfig, layout: &Layout) -> Result<(ClusterArtifact, Artifacts)> {
    let corpus = load_corpus(layout)?;
    let embedder = static_embedder(cfg);
    let (ids, points): (Vec<String>, Vec<Vec<f64>>) = corpus
        .situations
        .iter()
        .filter(|s| s.source == Source::DPlus)
        .map(|s| (s.id.clone(), embedder.embed(&s.text)))
        .unzip();
    if ids.len() < cfg.cluster.clusters {
        return Err(Error::Validation(format!(
            "{} DPlus situations cannot fill {} clusters",
            ids.len(),
            cfg.cluster.clusters
        )));
    }
    let model = ClusterModel::fit(&ids, &points, &cfg.kmeans())?;
    let labels: Vec<usize> = ids.iter().map(|id| model.assignments[id]).collect();
    let sil = silhouette(&points, &labels)?;
    let artifact = ClusterArtifact {
        silhouettes: sil.per_cluster.clone(),
        mean_silhouette: sil.mean,
        model,
    };
    let report: Vec<ClusterReportLine> = artifact.model.report(&ids, &points, cfg.cluster.report_top)?;
    artifact.to_checkpoint(cfg)?.save(layout.cluster_checkpoint())?;
    write_jsonl(layout.cluster_report(), &report)?;
    Ok((
        artifact,
        Artifacts {
            inputs: vec![layout.corpus_file()],
            outputs: vec![layout.cluster_checkpoint(), layout.cluster_report()],
        },
    ))
}

pub fn load_clusters(layout: &Layout) -> Result<ClusterArtifact> {
    require(&layout.cluster_checkpoint(), "cluster")?;
    ClusterArtifact::from_checkpoint(&Checkpoint::load(layout.cluster_checkpoint())?)
}

pub fn run_build_sg(
    cfg: &PipelineConfig,
    layout: &Layout,
) -> Result<(BTreeMap<String, SubjectiveGroundBase>, Artifacts)> {
    let corpus = load_corpus(layout)?;
    let clusters = load_clusters(layout)?;
    if clusters.model.k != cfg.cluster.clusters {
        return Err(Error::Config(format!(
            "cluster model has k={} but config asks for {}",
            clusters.model.k, cfg.cluster.clusters
        )));
    }
    let bases = sgbase::build_all(
        &corpus,
        |sid| clusters.model.cluster_of(sid),
        clusters.model.k,
        &lexicon(cfg)?,
        cfg.sg.per_cluster,
    )?;
    write_jsonl(layout.sg_file(), &sgbase::to_lines(&bases))?;
    let dump: String = bases.values().map(sgbase::dump).collect();
    write_text(layout.sg_dump(), &dump)?;
    Ok((
        bases,
        Artifacts {
            inputs: vec![layout.corpus_file(), layout.cluster_checkpoint()],
            outputs: vec![layout.sg_file(), layout.sg_dump()],
        },
    ))
}

pub fn load_bases(
    layout: &Layout,
    corpus: &Corpus,
    per_cluster: usize,
) -> Result<BTreeMap<String, SubjectiveGroundBase>> {
    require(&layout.sg_file(), "build-sg")?;
    sgbase::from_lines(&read_jsonl(layout.sg_file())?, &corpus.comments, per_cluster)
}

/// Tokenized inputs and labelled splits ready for training.
pub struct Prepared {
    pub corpus: Corpus,
    pub bases: BTreeMap<String, SubjectiveGroundBase>,
    pub inputs: Inputs,
    pub splits: BTreeMap<(Source, Split), Vec<Example>>,
}

impl Prepared {
    pub fn examples(&self, source: Source, split: Split) -> &[Example] {
        self.splits.get(&(source, split)).map_or(&[], Vec::as_slice)
    }

    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            inputs: &self.inputs,
            dplus_train: self.examples(Source::DPlus, Split::Train),
            dplus_valid: self.examples(Source::DPlus, Split::Valid),
            d_train: self.examples(Source::D, Split::Train),
            d_valid: self.examples(Source::D, Split::Valid),
        }
    }
}

pub fn prepare(cfg: &PipelineConfig, layout: &Layout) -> Result<Prepared> {
    let corpus = load_corpus(layout)?;
    let bases = load_bases(layout, &corpus, cfg.sg.per_cluster)?;
    let m = cfg.model_config();
    if let Some(b) = bases.values().next() {
        if b.len() != m.sg_slots() {
            return Err(Error::Config(format!(
                "bases have {} slots but the model expects {}",
                b.len(),
                m.sg_slots()
            )));
        }
    }
    let tk = m.encoder.tokenizer();
    let mut inputs = Inputs::default();
    for s in &corpus.situations {
        inputs.add_situation(&tk, &s.id, &s.text);
    }
    for (a, b) in &bases {
        let texts: Vec<String> = b.slots.iter().map(|s| strip_judgment_codes(&s.text)).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        inputs.add_sg(&tk, a, &refs, b.mask());
    }
    for (sid, rots) in &corpus.rots {
        let texts: Vec<&str> = rots.iter().map(|r| r.text.as_str()).collect();
        inputs.add_rots(&tk, sid, &texts);
    }
    let sits = corpus.situation_map();
    let mut splits: BTreeMap<(Source, Split), Vec<Example>> = BTreeMap::new();
    for c in &corpus.comments {
        let s = sits[c.situation_id.as_str()];
        let (Some(split), Some(label)) = (s.split, c.label) else {
            continue;
        };
        splits.entry((s.source, split)).or_default().push(Example {
            id: c.id.clone(),
            annotator_id: c.annotator_id.clone(),
            situation_key: c.situation_id.clone(),
            rot_key: c.situation_id.clone(),
            label: label.index(),
        });
    }
    drop(sits);
    Ok(Prepared {
        corpus,
        bases,
        inputs,
        splits,
    })
}

/// Trained parameters: one shared model, or one per annotator.
#[derive(Debug, Clone, PartialEq)]
pub enum RunModel {
    Shared(ModelParams),
    PerAnnotator(BTreeMap<String, ModelParams>),
}

impl RunModel {
    pub fn variant(&self) -> ModelVariant {
        match self {
            RunModel::Shared(p) => p.variant,
            RunModel::PerAnnotator(m) => m.values().next().expect("non-empty").variant,
        }
    }

    pub fn predict(&self, inputs: &Inputs, examples: &[Example], batch: usize) -> Result<Evaluation> {
        match self {
            RunModel::Shared(p) => predict(p, inputs, Stage::Value, examples, batch),
            RunModel::PerAnnotator(models) => {
                let mut by_annotator: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
                for (i, e) in examples.iter().enumerate() {
                    by_annotator.entry(e.annotator_id.as_str()).or_default().push(i);
                }
                let mut slots: Vec<Option<Prediction>> = vec![None; examples.len()];
                let mut loss = 0.0;
                for (a, idx) in by_annotator {
                    let p = models
                        .get(a)
                        .ok_or_else(|| Error::Validation(format!("no per-annotator model for {a}")))?;
                    let subset: Vec<Example> = idx.iter().map(|&i| examples[i].clone()).collect();
                    let ev = predict(p, inputs, Stage::Value, &subset, batch)?;
                    loss += ev.loss * subset.len() as f64;
                    for (i, pred) in idx.into_iter().zip(ev.predictions) {
                        slots[i] = Some(pred);
                    }
                }
                let predictions: Vec<Prediction> = slots.into_iter().map(|p| p.expect("predicted")).collect();
                let preds: Vec<usize> = predictions.iter().map(|p| p.label).collect();
                let golds: Vec<usize> = examples.iter().map(|e| e.label).collect();
                Ok(Evaluation {
                    loss: loss / examples.len() as f64,
                    macro_f1: classification_report(&preds, &golds)?.macro_f1,
                    predictions,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: ModelVariant,
    pub seed: u64,
    pub per_annotator: bool,
    pub stages: Vec<train::StageSummary>,
    pub valid_f1: f64,
}

fn param_file(run: &Path) -> PathBuf {
    run.join("checkpoint.ckpt")
}

fn annotator_param_file(run: &Path, annotator: &str) -> PathBuf {
    run.join(format!("checkpoints/{annotator}.ckpt"))
}

fn save_params(path: &Path, p: &ModelParams, outcome: &TrainOutcome) -> Result<()> {
    let mut ck = model_checkpoint(p)?;
    ck.meta
        .insert("valid_f1".into(), serde_json::to_value(outcome.valid_f1())?);
    ck.meta.insert("stages".into(), serde_json::to_value(&outcome.stages)?);
    ck.save(path)
}

/// Trains one variant and seed and writes its run directory.
pub fn run_train(
    cfg: &PipelineConfig,
    layout: &Layout,
    prepared: &Prepared,
    variant: ModelVariant,
    seed: u64,
) -> Result<(RunModel, RunSummary, Artifacts)> {
    let mut tcfg = cfg.train.clone();
    tcfg.variant = variant;
    tcfg.validate()?;
    let model_cfg = cfg.model_config();
    let run = layout.run_dir(variant, seed);
    let mut echo = cfg.clone();
    echo.train = tcfg.clone();
    echo.train.seeds = vec![seed];
    write_text(run.join("config.toml"), &echo.to_toml()?)?;
    let mut outputs = vec![run.join("config.toml")];

    let data = prepared.train_data();
    let (model, summary, metrics) = if tcfg.per_annotator {
        let mut models = BTreeMap::new();
        let mut all_metrics = Vec::new();
        let mut stages = Vec::new();
        let mut valid = Vec::new();
        for a in &prepared.corpus.roster.annotator_ids {
            let pick =
                |xs: &[Example]| -> Vec<Example> { xs.iter().filter(|e| &e.annotator_id == a).cloned().collect() };
            let (dpt, dpv, dt, dv) = (
                pick(data.dplus_train),
                pick(data.dplus_valid),
                pick(data.d_train),
                pick(data.d_valid),
            );
            let sub = TrainData {
                inputs: data.inputs,
                dplus_train: &dpt,
                dplus_valid: &dpv,
                d_train: &dt,
                d_valid: &dv,
            };
            let outcome = train::train_variant(model_cfg, &tcfg, seed, &sub)
                .map_err(|e| Error::Validation(format!("annotator {a}: {e}")))?;
            let path = annotator_param_file(&run, a);
            save_params(&path, &outcome.params, &outcome)?;
            outputs.push(path);
            valid.push(outcome.valid_f1());
            for mut m in outcome.metrics {
                m.stage = format!("{a}/{}", m.stage);
                all_metrics.push(m);
            }
            for mut s in outcome.stages {
                s.stage = format!("{a}/{}", s.stage);
                stages.push(s);
            }
            models.insert(a.clone(), outcome.params);
        }
        let summary = RunSummary {
            variant,
            seed,
            per_annotator: true,
            stages,
            valid_f1: crate::eval::mean_std(&valid).mean,
        };
        (RunModel::PerAnnotator(models), summary, all_metrics)
    } else {
        let outcome = train::train_variant(model_cfg, &tcfg, seed, &data)?;
        save_params(&param_file(&run), &outcome.params, &outcome)?;
        outputs.push(param_file(&run));
        let summary = RunSummary {
            variant,
            seed,
            per_annotator: false,
            stages: outcome.stages.clone(),
            valid_f1: outcome.valid_f1(),
        };
        (RunModel::Shared(outcome.params), summary, outcome.metrics)
    };
    write_jsonl(run.join("metrics.jsonl"), &metrics)?;
    write_json(run.join("summary.json"), &summary)?;
    outputs.push(run.join("metrics.jsonl"));
    outputs.push(run.join("summary.json"));
    Ok((
        model,
        summary,
        Artifacts {
            inputs: vec![layout.corpus_file(), layout.sg_file()],
            outputs,
        },
    ))
}

pub fn load_run(layout: &Layout, variant: ModelVariant, seed: u64) -> Result<(RunModel, PathBuf)> {
    let run = layout.run_dir(variant, seed);
    let shared = param_file(&run);
    if shared.exists() {
        let p = model_from_checkpoint(&Checkpoint::load(&shared)?)?;
        if p.variant != variant {
            return Err(Error::Checkpoint(format!(
                "{} holds variant {}",
                shared.display(),
                p.variant
            )));
        }
        return Ok((RunModel::Shared(p), shared));
    }
    let dir = run.join("checkpoints");
    if dir.is_dir() {
        let mut models = BTreeMap::new();
        let mut names: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect();
        names.sort();
        for p in names {
            let a = p.file_stem().expect("file name").to_string_lossy().to_string();
            models.insert(a, model_from_checkpoint(&Checkpoint::load(&p)?)?);
        }
        if !models.is_empty() {
            return Ok((RunModel::PerAnnotator(models), dir));
        }
    }
    Err(Error::MissingArtifact {
        path: shared,
        hint: format!("run `train --variant {variant} --seed {seed}` first"),
    })
}

/// One exported prediction with its explanation weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub instance_id: String,
    pub annotator_id: String,
    pub situation_id: String,
    pub variant: ModelVariant,
    pub sg_weights: Vec<f64>,
    pub value_weights: Vec<f64>,
    pub logits: [f64; 2],
    pub prediction: JudgmentLabel,
    pub gold: JudgmentLabel,
}

fn trace_records(variant: ModelVariant, examples: &[Example], ev: &Evaluation) -> Vec<TraceRecord> {
    examples
        .iter()
        .zip(&ev.predictions)
        .map(|(e, p)| TraceRecord {
            instance_id: e.id.clone(),
            annotator_id: e.annotator_id.clone(),
            situation_id: e.situation_key.clone(),
            variant,
            sg_weights: p.trace.sg_weights.clone(),
            value_weights: p.trace.value_weights.clone(),
            logits: p.logits,
            prediction: JudgmentLabel::from_index(p.label),
            gold: JudgmentLabel::from_index(e.label),
        })
        .collect()
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    }
}

/// Predicts a D split and writes labels and traces.
pub fn run_predict(
    cfg: &PipelineConfig,
    layout: &Layout,
    prepared: &Prepared,
    variant: ModelVariant,
    seed: u64,
    split: Split,
) -> Result<(Vec<TraceRecord>, Artifacts)> {
    let (model, ckpt) = load_run(layout, variant, seed)?;
    predict_with(cfg, layout, prepared, &model, seed, split, ckpt)
}

fn predict_with(
    cfg: &PipelineConfig,
    layout: &Layout,
    prepared: &Prepared,
    model: &RunModel,
    seed: u64,
    split: Split,
    ckpt: PathBuf,
) -> Result<(Vec<TraceRecord>, Artifacts)> {
    let variant = model.variant();
    let examples = prepared.examples(Source::D, split);
    let ev = model.predict(&prepared.inputs, examples, cfg.eval.batch_size)?;
    let traces = trace_records(variant, examples, &ev);
    let run = layout.run_dir(variant, seed);
    let name = split_name(split);
    #[derive(Serialize)]
    struct Label<'a> {
        instance_id: &'a str,
        prediction: JudgmentLabel,
    }
    let labels: Vec<Label> = traces
        .iter()
        .map(|t| Label {
            instance_id: &t.instance_id,
            prediction: t.prediction,
        })
        .collect();
    let pred_file = run.join(format!("predictions-{name}.jsonl"));
    let trace_file = run.join(format!("traces-{name}.jsonl"));
    write_jsonl(&pred_file, &labels)?;
    write_jsonl(&trace_file, &traces)?;
    Ok((
        traces,
        Artifacts {
            inputs: vec![layout.corpus_file(), layout.sg_file(), ckpt],
            outputs: vec![pred_file, trace_file],
        },
    ))
}

/// Human-readable view of one trace: top subjective-ground comments and rules.
pub fn render_trace(prepared: &Prepared, t: &TraceRecord, top: usize) -> String {
    let mut s = String::new();
    let text = prepared
        .corpus
        .situations
        .iter()
        .find(|x| x.id == t.situation_id)
        .map_or("", |x| x.text.as_str());
    let _ = writeln!(
        s,
        "instance {} annotator {} ({})\n  situation: {text}\n  prediction: {:?} (gold {:?}), logits [{:.4}, {:.4}]",
        t.instance_id, t.annotator_id, t.variant, t.prediction, t.gold, t.logits[0], t.logits[1]
    );
    if !t.sg_weights.is_empty() {
        if let Some(base) = prepared.bases.get(&t.annotator_id) {
            let order = crate::eval::rank_order(&t.sg_weights, &base.mask());
            let _ = writeln!(s, "  subjective ground:");
            for &i in order.iter().take(top) {
                let slot = &base.slots[i];
                let _ = writeln!(
                    s,
                    "    {:.4}  slot {i} (cluster {}) {}: {}",
                    t.sg_weights[i],
                    slot.cluster,
                    slot.comment_id.as_deref().unwrap_or("-"),
                    slot.text
                );
            }
        }
    }
    if !t.value_weights.is_empty() {
        if let Some(rots) = prepared.corpus.rots.get(&t.situation_id) {
            let top_rot = argmax_lowest(&t.value_weights);
            let _ = writeln!(s, "  rules-of-thumb:");
            let order = crate::eval::rank_order(&t.value_weights, &vec![true; t.value_weights.len()]);
            for i in order {
                let r = &rots[i];
                let polarity = r.polarity.map_or("unclassifiable".to_string(), |p| format!("{p:?}"));
                let mark = if Some(i) == top_rot { "*" } else { " " };
                let _ = writeln!(s, "   {mark}{:.4}  [{polarity}] {}", t.value_weights[i], r.text);
            }
        }
    }
    s
}

/// Renders traces of a D split (or a single instance) as text.
pub fn run_explain(
    cfg: &PipelineConfig,
    layout: &Layout,
    prepared: &Prepared,
    variant: ModelVariant,
    seed: u64,
    instance: Option<&str>,
    limit: usize,
) -> Result<(String, Artifacts)> {
    let (model, ckpt) = load_run(layout, variant, seed)?;
    let examples: Vec<Example> = match instance {
        Some(id) => {
            let found = prepared
                .splits
                .iter()
                .filter(|((src, _), _)| *src == Source::D)
                .flat_map(|(_, v)| v)
                .find(|e| e.id == id)
                .cloned()
                .ok_or_else(|| Error::Validation(format!("no labelled D instance {id}")))?;
            vec![found]
        }
        None => prepared
            .examples(Source::D, Split::Test)
            .iter()
            .take(limit)
            .cloned()
            .collect(),
    };
    if examples.is_empty() {
        return Err(Error::EmptyInput("no instances to explain".into()));
    }
    let ev = model.predict(&prepared.inputs, &examples, cfg.eval.batch_size)?;
    let traces = trace_records(variant, &examples, &ev);
    let text: String = traces
        .iter()
        .map(|t| render_trace(prepared, t, cfg.eval.top_m))
        .collect::<Vec<_>>()
        .join("\n");
    let run = layout.run_dir(variant, seed);
    let out = match instance {
        Some(id) => run.join(format!("explain-{id}.txt")),
        None => run.join("explain.txt"),
    };
    write_text(&out, &text)?;
    Ok((
        text,
        Artifacts {
            inputs: vec![layout.corpus_file(), layout.sg_file(), ckpt],
            outputs: vec![out],
        },
    ))
}

fn instance_clusters(
    cfg: &PipelineConfig,
    prepared: &Prepared,
    clusters: &ClusterArtifact,
    traces: &[TraceRecord],
) -> Result<Vec<usize>> {
    let embedder = static_embedder(cfg);
    let sits = prepared.corpus.situation_map();
    traces
        .iter()
        .map(|t| {
            let s = sits
                .get(t.situation_id.as_str())
                .ok_or_else(|| Error::Validation(format!("unknown situation {}", t.situation_id)))?;
            clusters.cluster_of_text(&embedder, &s.id, &s.text)
        })
        .collect()
}

/// Macro F1, random baseline and per-cluster scores on D-test.
pub fn run_eval(
    cfg: &PipelineConfig,
    layout: &Layout,
    prepared: &Prepared,
    variant: ModelVariant,
    seed: u64,
) -> Result<(EvalReport, Artifacts)> {
    let (model, ckpt) = load_run(layout, variant, seed)?;
    eval_with(cfg, layout, prepared, &model, seed, ckpt)
}

fn eval_with(
    cfg: &PipelineConfig,
    layout: &Layout,
    prepared: &Prepared,
    model: &RunModel,
    seed: u64,
    ckpt: PathBuf,
) -> Result<(EvalReport, Artifacts)> {
    let variant = model.variant();
    let clusters = load_clusters(layout)?;
    let (traces, mut art) = predict_with(cfg, layout, prepared, model, seed, Split::Test, ckpt)?;
    let preds: Vec<usize> = traces.iter().map(|t| t.prediction.index()).collect();
    let golds: Vec<usize> = traces.iter().map(|t| t.gold.index()).collect();
    let f1 = classification_report(&preds, &golds)?;
    let cl = instance_clusters(cfg, prepared, &clusters, &traces)?;
    let report = EvalReport {
        variant: variant.to_string(),
        split: "test".into(),
        instances: traces.len(),
        macro_f1: f1.macro_f1,
        accuracy: f1.accuracy,
        per_class: f1.per_class,
        empty_classes: f1.empty_classes,
        random_baseline: random_baseline(&golds, seed, cfg.eval.random_runs)?,
        clusters: cluster_accuracy(&preds, &golds, &cl, &clusters.silhouettes)?,
    };
    let run = layout.run_dir(variant, seed);
    write_json(run.join("eval.json"), &report)?;
    write_text(run.join("eval.txt"), &render_eval(&report))?;
    art.inputs.push(layout.cluster_checkpoint());
    art.outputs.push(run.join("eval.json"));
    art.outputs.push(run.join("eval.txt"));
    Ok((report, art))
}

pub fn render_eval(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "variant {}  split {}  instances {}", r.variant, r.split, r.instances);
    let _ = writeln!(s, "macro F1 {:.2}  accuracy {:.2}", r.macro_f1, r.accuracy);
    let _ = writeln!(
        s,
        "random baseline {:.2} ({:.2}) over {} runs",
        r.random_baseline.mean, r.random_baseline.stdev, r.random_baseline.n
    );
    for (c, name) in r.per_class.iter().zip(["acceptable", "unacceptable"]) {
        let _ = writeln!(
            s,
            "  {name:<13} P {:.4}  R {:.4}  F1 {:.4}  support {}",
            c.precision, c.recall, c.f1, c.support
        );
    }
    let _ = writeln!(s, "cluster  n     F1      silhouette");
    for c in &r.clusters.clusters {
        let _ = writeln!(
            s,
            "  {:>3}  {:>4}  {:>6.2}  {:>8.4}",
            c.cluster, c.instances, c.macro_f1, c.silhouette
        );
    }
    match (r.clusters.pearson_r, &r.clusters.null_reason) {
        (Some(v), _) => {
            let _ = writeln!(s, "pearson r (silhouette, F1) = {v:.4}");
        }
        (None, Some(why)) => {
            let _ = writeln!(s, "pearson r undefined: {why}");
        }
        (None, None) => {}
    }
    s
}

/// Value consistency on D-test and subjective-ground consistency on perturbations.
pub fn run_consistency(
    cfg: &PipelineConfig,
    layout: &Layout,
    prepared: &Prepared,
    variant: ModelVariant,
    seed: u64,
) -> Result<(ConsistencyReport, Artifacts)> {
    let (model, ckpt) = load_run(layout, variant, seed)?;
    let examples = prepared.examples(Source::D, Split::Test);
    let ev = model.predict(&prepared.inputs, examples, cfg.eval.batch_size)?;
    let items: Vec<ValueItem> = examples
        .iter()
        .zip(&ev.predictions)
        .map(|(e, p)| {
            let polarities: Vec<Option<JudgmentLabel>> = prepared
                .corpus
                .rots
                .get(&e.rot_key)
                .map(|r| r.iter().map(|x| x.polarity).collect())
                .unwrap_or_default();
            let model_says = JudgmentLabel::from_index(p.label);
            let prediction = if cfg.eval.rot_rule_harness {
                rot_rule_prediction(&p.trace.value_weights, &polarities).unwrap_or(model_says)
            } else {
                model_says
            };
            ValueItem {
                value_weights: p.trace.value_weights.clone(),
                polarities,
                prediction,
            }
        })
        .collect();
    let value = value_consistency(&items)?;
    let mut inputs = vec![layout.corpus_file(), layout.sg_file(), ckpt];

    let (sg, sg_skipped) = if !variant.uses_sg_base() && variant != ModelVariant::LatentSG {
        (
            None,
            Some(format!("variant {variant} has no subjective-ground attention")),
        )
    } else if !layout.perturbations_file().exists() {
        (None, Some("no perturbation file was ingested".to_string()))
    } else {
        inputs.push(layout.perturbations_file());
        let sets = group_perturbations(&read_jsonl(layout.perturbations_file())?)?;
        let all: HashMap<&str, &Example> = prepared
            .splits
            .iter()
            .filter(|((src, _), _)| *src == Source::D)
            .flat_map(|(_, v)| v)
            .map(|e| (e.id.as_str(), e))
            .collect();
        let mut pinputs = prepared.inputs.clone();
        let tk = cfg.model_config().encoder.tokenizer();
        let mut batch: Vec<Example> = Vec::new();
        let mut shape: Vec<(usize, Vec<(usize, crate::eval::PerturbationKind)>)> = Vec::new();
        for set in &sets {
            let orig = *all
                .get(set.original_id.as_str())
                .ok_or_else(|| Error::Validation(format!("unknown perturbation original {}", set.original_id)))?;
            let oi = batch.len();
            batch.push(orig.clone());
            let mut vs = Vec::new();
            for (j, v) in set.variants.iter().enumerate() {
                let key = format!("{}#{}{j}", orig.id, v.kind);
                pinputs.add_situation(&tk, &key, &v.text);
                vs.push((batch.len(), v.kind));
                batch.push(Example {
                    id: key.clone(),
                    situation_key: key,
                    label: v.gold.index(),
                    ..orig.clone()
                });
            }
            shape.push((oi, vs));
        }
        let pev = model.predict(&pinputs, &batch, cfg.eval.batch_size)?;
        let cases: Vec<SgCase> = shape
            .into_iter()
            .map(|(oi, vs)| {
                let o = &pev.predictions[oi];
                let mask = prepared
                    .bases
                    .get(&batch[oi].annotator_id)
                    .map(SubjectiveGroundBase::mask)
                    .unwrap_or_else(|| vec![true; o.trace.sg_weights.len()]);
                SgCase {
                    mask,
                    original_weights: o.trace.sg_weights.clone(),
                    original_prediction: o.label,
                    original_gold: batch[oi].label,
                    variants: vs
                        .into_iter()
                        .map(|(i, kind)| SgVariantOutcome {
                            kind,
                            weights: pev.predictions[i].trace.sg_weights.clone(),
                            prediction: pev.predictions[i].label,
                            gold: batch[i].label,
                        })
                        .collect(),
                }
            })
            .collect();
        (Some(sg_consistency(&cases, cfg.eval.top_m)?), None)
    };
    let report = ConsistencyReport {
        variant: variant.to_string(),
        value,
        sg,
        sg_skipped,
    };
    let run = layout.run_dir(variant, seed);
    write_json(run.join("consistency.json"), &report)?;
    write_text(run.join("consistency.txt"), &render_consistency(&report))?;
    Ok((
        report,
        Artifacts {
            inputs,
            outputs: vec![run.join("consistency.json"), run.join("consistency.txt")],
        },
    ))
}

pub fn render_consistency(r: &ConsistencyReport) -> String {
    let mut s = String::new();
    let v = &r.value;
    let _ = writeln!(
        s,
        "variant {}\nvalue consistency {}  ({} of {} evaluated; {} unclassifiable, {} without value weights)",
        r.variant,
        v.percentage.map_or("n/a".to_string(), |p| format!("{p:.2}")),
        v.matched,
        v.evaluated,
        v.excluded_unclassifiable,
        v.excluded_no_trace
    );
    match (&r.sg, &r.sg_skipped) {
        (Some(sg), _) => {
            let _ = writeln!(
                s,
                "sg consistency {:.2} (full order)  {:.2} (top-{})  over {} variants; original accuracy {:.2}",
                sg.full_percentage, sg.top_m_percentage, sg.top_m, sg.variants, sg.original_accuracy
            );
            for (k, c) in &sg.per_kind {
                let _ = writeln!(
                    s,
                    "  {k:<9} full {:>6.2}  top-m {:>6.2}  accuracy {:>6.2}  n {}",
                    c.full_percentage, c.top_m_percentage, c.accuracy, c.variants
                );
            }
        }
        (None, Some(why)) => {
            let _ = writeln!(s, "sg consistency skipped: {why}");
        }
        (None, None) => {}
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub test_f1: Vec<f64>,
    pub summary: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub random: MeanStd,
    /// Welch test of the full model against the baseline: (t, df, p).
    pub sg_vs_baseline: Option<(f64, f64, f64)>,
}

impl SweepReport {
    pub fn row(&self, v: ModelVariant) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.variant == v.as_str())
    }
}

/// Trains and evaluates every configured variant for every seed.
pub fn run_sweep(cfg: &PipelineConfig, layout: &Layout, prepared: &Prepared) -> Result<(SweepReport, Artifacts)> {
    cfg.train.validate()?;
    let mut art = Artifacts::default();
    let mut results = Vec::new();
    let mut random = Vec::new();
    for &v in &cfg.sweep_variants {
        for &seed in &cfg.train.seeds {
            let (model, _, a) = run_train(cfg, layout, prepared, v, seed)?;
            art.merge(a);
            let ckpt = layout.run_dir(v, seed);
            let (report, a) = eval_with(cfg, layout, prepared, &model, seed, ckpt)?;
            art.merge(a);
            if random.len() < cfg.train.seeds.len() {
                random.push(report.random_baseline.mean);
            }
            results.push((v, seed, report.macro_f1));
        }
    }
    let rows: Vec<SweepRow> = train::run_matrix(&results)
        .into_iter()
        .map(|r| SweepRow {
            variant: r.variant.to_string(),
            seeds: r.seeds,
            test_f1: r.values,
            summary: r.summary,
        })
        .collect();
    let f1_of = |v: ModelVariant| rows.iter().find(|r| r.variant == v.as_str()).map(|r| r.test_f1.clone());
    let sg_vs_baseline = match (f1_of(ModelVariant::SGAttention), f1_of(ModelVariant::Baseline)) {
        (Some(a), Some(b)) => welch_t_test(&a, &b),
        _ => None,
    };
    let report = SweepReport {
        rows,
        random: crate::eval::mean_std(&random),
        sg_vs_baseline,
    };
    let dir = layout.sweep_dir();
    write_jsonl(dir.join("table.jsonl"), &report.rows)?;
    write_json(dir.join("sweep.json"), &report)?;
    write_text(dir.join("table.txt"), &render_sweep(&report))?;
    art.outputs
        .extend([dir.join("table.jsonl"), dir.join("sweep.json"), dir.join("table.txt")]);
    Ok((report, art))
}

pub fn render_sweep(r: &SweepReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<28} {:>14}", "model", "F1 (stdev)");
    let _ = writeln!(
        s,
        "{:<28} {:>8.2} ({:.2})",
        "Random Prediction", r.random.mean, r.random.stdev
    );
    for row in &r.rows {
        let name = row
            .variant
            .parse::<ModelVariant>()
            .map_or(row.variant.clone(), |v| v.display_name().to_string());
        let _ = writeln!(s, "{:<28} {:>8.2} ({:.2})", name, row.summary.mean, row.summary.stdev);
    }
    if let Some((t, df, p)) = r.sg_vs_baseline {
        let _ = writeln!(s, "sg-attention vs baseline: t = {t:.3}, df = {df:.2}, p = {p:.4}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_upstream_is_actionable() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let cfg = PipelineConfig::default();
        let err = run_cluster(&cfg, &layout).unwrap_err();
        assert_eq!(err.code(), "E_MISSING_ARTIFACT");
        assert!(err.to_string().contains("ingest"), "{err}");
        assert!(run_ingest(&cfg, &layout, None).is_err());
        assert!(load_run(&layout, ModelVariant::SGAttention, 0).is_err());
    }
}
