//! Pipeline configuration: a TOML key-value file plus dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{KMeansConfig, DEFAULT_CLUSTERS};
use crate::corpus::IngestConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_TOP_M;
use crate::model::{ModelConfig, ModelVariant, NormMode, DEFAULT_ATTENTION_HEADS};
use crate::sgbase::DEFAULT_PER_CLUSTER;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub clusters: usize,
    pub embed_dim: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Representatives listed per cluster in the report.
    pub report_top: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let k = KMeansConfig::default();
        Self {
            clusters: DEFAULT_CLUSTERS,
            embed_dim: 64,
            restarts: k.restarts,
            max_iter: k.max_iter,
            tol: k.tol,
            report_top: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgSection {
    pub per_cluster: usize,
}

impl Default for SgSection {
    fn default() -> Self {
        Self {
            per_cluster: DEFAULT_PER_CLUSTER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub encoder_blocks: usize,
    pub encoder_heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
    pub attention_heads: usize,
    pub norm: NormMode,
    pub classifier_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            hidden: e.hidden,
            encoder_blocks: e.blocks,
            encoder_heads: e.heads,
            vocab_size: e.vocab_size,
            max_len: e.max_len,
            ffn_mult: e.ffn_mult,
            attention_heads: DEFAULT_ATTENTION_HEADS,
            norm: NormMode::One,
            classifier_hidden: e.hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub top_m: usize,
    pub random_runs: usize,
    pub batch_size: usize,
    /// Replace the classifier's decision with the polarity of the
    /// top-weighted rule when measuring value consistency.
    pub rot_rule_harness: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            top_m: DEFAULT_TOP_M,
            random_runs: 100,
            batch_size: 64,
            rot_rule_harness: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Lexicon file; the built-in seed lexicon when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    /// Judgment phrase table; the built-in table when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judgment_phrases: Option<PathBuf>,
    pub synth: SynthConfig,
    pub ingest: IngestConfig,
    pub cluster: ClusterSection,
    pub sg: SgSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    /// Variants run by the sweep command.
    pub sweep_variants: Vec<ModelVariant>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lexicon: None,
            judgment_phrases: None,
            synth: SynthConfig::default(),
            ingest: IngestConfig::default(),
            cluster: ClusterSection::default(),
            sg: SgSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            sweep_variants: ModelVariant::ALL.to_vec(),
        }
    }
}

/// One checked default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditLine {
    pub key: String,
    pub expected: String,
    pub actual: String,
    pub ok: bool,
}

fn parse_toml(text: &str, origin: &str) -> Result<PipelineConfig> {
    toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        parse_toml(text, "config")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `section.key=value`; the value is read as a TOML literal, or
    /// as a bare string when it does not parse as one.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.trim().to_string()),
        };
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, p) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {p} is not a section")))?;
            if i + 1 == parts.len() {
                table.insert(p.to_string(), value.clone());
                break;
            }
            node = table
                .get_mut(*p)
                .ok_or_else(|| Error::Config(format!("unknown config section {p:?} in {key}")))?;
        }
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Sets every seed derived from the global one.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.ingest.split_seed = seed;
        self.train.seeds = vec![seed];
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size: self.model.vocab_size,
                hidden: self.model.hidden,
                blocks: self.model.encoder_blocks,
                heads: self.model.encoder_heads,
                max_len: self.model.max_len,
                ffn_mult: self.model.ffn_mult,
            },
            attention_heads: self.model.attention_heads,
            norm: self.model.norm,
            clusters: self.cluster.clusters,
            per_cluster: self.sg.per_cluster,
            rots_per_situation: self.ingest.rots_per_situation,
            classifier_hidden: self.model.classifier_hidden,
        }
    }

    pub fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.cluster.clusters,
            max_iter: self.cluster.max_iter,
            tol: self.cluster.tol,
            seed: self.seed,
            restarts: self.cluster.restarts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()?;
        if self.cluster.clusters < 2 || self.cluster.embed_dim == 0 || self.cluster.restarts == 0 {
            return Err(Error::Config(
                "cluster section needs k ≥ 2, embed_dim > 0, restarts > 0".into(),
            ));
        }
        if self.sg.per_cluster == 0 || self.ingest.rots_per_situation == 0 {
            return Err(Error::Config(
                "per_cluster and rots_per_situation must be positive".into(),
            ));
        }
        if self.eval.top_m == 0 || self.eval.random_runs == 0 || self.eval.batch_size == 0 {
            return Err(Error::Config("eval section values must be positive".into()));
        }
        Ok(())
    }

    /// Compares the shape-defining defaults against their reference values.
    pub fn audit(&self) -> Vec<AuditLine> {
        let line = |key: &str, expected: String, actual: String| AuditLine {
            ok: expected == actual,
            key: key.to_string(),
            expected,
            actual,
        };
        let m = self.model_config();
        vec![
            line(
                "ingest.rots_per_situation",
                "5".into(),
                m.rots_per_situation.to_string(),
            ),
            line("cluster.clusters", "20".into(), m.clusters.to_string()),
            line("sg.per_cluster", "6".into(), m.per_cluster.to_string()),
            line("sg.slots", "120".into(), m.sg_slots().to_string()),
            line("model.attention_heads", "12".into(), m.attention_heads.to_string()),
            line("model.norm", format!("{:?}", NormMode::One), format!("{:?}", m.norm)),
        ]
    }
}
