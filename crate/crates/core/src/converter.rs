//! Task features to model features for encoder-decoder and decoder-only
//! architectures.
//!
//! Every output sequence has exactly its declared length, padded with 0.
//! Decoder inputs are the targets shifted right by one with a leading 0
//! (BOS shares the pad id). Over-long sequences are cut from the right, so
//! a trailing EOS may be lost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ids_of, FeatureValue, Features};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    EncDec,
    DecoderOnly,
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "enc_dec" => Ok(Architecture::EncDec),
            "decoder_only" => Ok(Architecture::DecoderOnly),
            _ => Err(format!("unknown architecture `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConverterSpec {
    pub architecture: Architecture,
    pub inputs_length: usize,
    pub targets_length: usize,
    /// decoder-only: also train on the input segment.
    pub loss_on_inputs: bool,
}

impl ConverterSpec {
    pub fn enc_dec(inputs_length: usize, targets_length: usize) -> Self {
        Self { architecture: Architecture::EncDec, inputs_length, targets_length, loss_on_inputs: false }
    }

    pub fn decoder_only(inputs_length: usize, targets_length: usize) -> Self {
        Self { architecture: Architecture::DecoderOnly, inputs_length, targets_length, loss_on_inputs: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs_length == 0 || self.targets_length == 0 {
            return Err(Error::InvalidReaderOptions("converter lengths must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelFeatures {
    EncDec {
        encoder_input_tokens: Vec<i32>,
        decoder_input_tokens: Vec<i32>,
        decoder_target_tokens: Vec<i32>,
        decoder_loss_weights: Vec<i32>,
    },
    DecoderOnly {
        decoder_input_tokens: Vec<i32>,
        decoder_target_tokens: Vec<i32>,
        decoder_loss_weights: Vec<i32>,
    },
}

impl ModelFeatures {
    pub fn decoder_target_tokens(&self) -> &[i32] {
        match self {
            ModelFeatures::EncDec { decoder_target_tokens, .. }
            | ModelFeatures::DecoderOnly { decoder_target_tokens, .. } => decoder_target_tokens,
        }
    }

    pub fn decoder_input_tokens(&self) -> &[i32] {
        match self {
            ModelFeatures::EncDec { decoder_input_tokens, .. }
            | ModelFeatures::DecoderOnly { decoder_input_tokens, .. } => decoder_input_tokens,
        }
    }

    pub fn decoder_loss_weights(&self) -> &[i32] {
        match self {
            ModelFeatures::EncDec { decoder_loss_weights, .. }
            | ModelFeatures::DecoderOnly { decoder_loss_weights, .. } => decoder_loss_weights,
        }
    }

    /// As a named int32 feature map.
    pub fn into_features(self) -> Features {
        let pairs: Vec<(&str, Vec<i32>)> = match self {
            ModelFeatures::EncDec {
                encoder_input_tokens,
                decoder_input_tokens,
                decoder_target_tokens,
                decoder_loss_weights,
            } => vec![
                ("encoder_input_tokens", encoder_input_tokens),
                ("decoder_input_tokens", decoder_input_tokens),
                ("decoder_target_tokens", decoder_target_tokens),
                ("decoder_loss_weights", decoder_loss_weights),
            ],
            ModelFeatures::DecoderOnly { decoder_input_tokens, decoder_target_tokens, decoder_loss_weights } => vec![
                ("decoder_input_tokens", decoder_input_tokens),
                ("decoder_target_tokens", decoder_target_tokens),
                ("decoder_loss_weights", decoder_loss_weights),
            ],
        };
        pairs.into_iter().map(|(k, v)| (k.to_string(), FeatureValue::Int32(v))).collect()
    }
}

/// `[0, seq[0], ..., seq[n-2]]`
pub fn shift_right(seq: &[i32]) -> Vec<i32> {
    if seq.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(seq.len());
    out.push(0);
    out.extend_from_slice(&seq[..seq.len() - 1]);
    out
}

fn token_ids(features: &Features, name: &str) -> Result<Vec<i32>> {
    ids_of(features, name)?
        .into_iter()
        .map(|id| {
            if id < 0 {
                Err(Error::NegativeId { feature: name.to_string(), id })
            } else {
                i32::try_from(id).map_err(|_| Error::NegativeId { feature: name.to_string(), id })
            }
        })
        .collect()
}

fn pad_to(mut v: Vec<i32>, len: usize) -> Vec<i32> {
    v.resize(len, 0);
    v
}

pub fn convert(features: &Features, spec: &ConverterSpec) -> Result<ModelFeatures> {
    spec.validate()?;
    let mut targets = token_ids(features, "targets")?;
    targets.truncate(spec.targets_length);
    match spec.architecture {
        Architecture::EncDec => {
            let mut inputs = token_ids(features, "inputs")?;
            inputs.truncate(spec.inputs_length);
            let decoder_target_tokens = pad_to(targets, spec.targets_length);
            let decoder_loss_weights = decoder_target_tokens.iter().map(|&t| (t != 0) as i32).collect();
            Ok(ModelFeatures::EncDec {
                encoder_input_tokens: pad_to(inputs, spec.inputs_length),
                decoder_input_tokens: shift_right(&decoder_target_tokens),
                decoder_target_tokens,
                decoder_loss_weights,
            })
        }
        Architecture::DecoderOnly => {
            // Language-model tasks may have no inputs at all.
            let mut inputs = match features.get("inputs") {
                Some(_) => token_ids(features, "inputs")?,
                None => Vec::new(),
            };
            inputs.truncate(spec.inputs_length);
            let total = spec.inputs_length + spec.targets_length;
            let n_in = inputs.len();
            let mut seq = inputs;
            seq.extend_from_slice(&targets);
            let decoder_target_tokens = pad_to(seq, total);
            let decoder_loss_weights = decoder_target_tokens
                .iter()
                .enumerate()
                .map(|(t, &tok)| (tok != 0 && (spec.loss_on_inputs || t >= n_in)) as i32)
                .collect();
            Ok(ModelFeatures::DecoderOnly {
                decoder_input_tokens: shift_right(&decoder_target_tokens),
                decoder_target_tokens,
                decoder_loss_weights,
            })
        }
    }
}
