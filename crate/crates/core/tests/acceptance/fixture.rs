//! Tiny model shape and hand-written inputs shared by several criteria.

use subjground::encoder::EncoderConfig;
use subjground::model::{ForwardInput, ModelConfig, NormMode, SgInput};

pub const SITUATIONS: [&str; 2] = [
    "I borrowed my sister's car and forgot to refill the tank",
    "We skipped the wedding because the invitation came late",
];

pub const ROTS: [[&str; 3]; 2] = [
    [
        "It is good to return what you borrow.",
        "It is bad to waste other people's fuel.",
        "You should be honest with your sister.",
    ],
    [
        "It is okay to decline a late invitation.",
        "It is rude to skip a wedding.",
        "You should tell the couple why.",
    ],
];

/// Two annotators with four slots each; the second has one masked slot.
pub const SG_TEXTS: [[&str; 4]; 2] = [
    [
        "cheating and lying over the car",
        "kindness matters over the fuel",
        "fairness over the wedding gift",
        "loyalty over the invitation",
    ],
    [
        "honesty over the tank",
        "betrayal over the cake",
        "",
        "sharing is caring",
    ],
];
pub const SG_MASKS: [[bool; 4]; 2] = [[true; 4], [true, true, false, true]];

/// h=8, one encoder block, G=2x2=4, K=3, two heads everywhere.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            vocab_size: 32,
            hidden: 8,
            blocks: 1,
            heads: 2,
            max_len: 12,
            ffn_mult: 2,
        },
        attention_heads: 2,
        norm: NormMode::One,
        clusters: 2,
        per_cluster: 2,
        rots_per_situation: 3,
        classifier_hidden: 8,
    }
}

pub struct TinyBatch {
    pub situations: Vec<Vec<usize>>,
    pub sg: Vec<SgInput>,
    pub rots: Vec<Vec<Vec<usize>>>,
    pub labels: Vec<usize>,
}

impl TinyBatch {
    pub fn new(cfg: &ModelConfig) -> Self {
        let tk = cfg.encoder.tokenizer();
        Self {
            situations: SITUATIONS.iter().map(|t| tk.tokenize(t)).collect(),
            sg: SG_TEXTS
                .iter()
                .zip(SG_MASKS)
                .map(|(texts, mask)| SgInput {
                    slots: texts.iter().map(|t| tk.tokenize(t)).collect(),
                    mask: mask.to_vec(),
                })
                .collect(),
            rots: ROTS
                .iter()
                .map(|rs| rs.iter().map(|t| tk.tokenize(t)).collect())
                .collect(),
            labels: vec![0, 1],
        }
    }

    pub fn inputs(&self) -> Vec<ForwardInput<'_>> {
        (0..self.situations.len())
            .map(|i| ForwardInput {
                situation: &self.situations[i],
                sg: Some(&self.sg[i]),
                rots: &self.rots[i],
            })
            .collect()
    }
}
