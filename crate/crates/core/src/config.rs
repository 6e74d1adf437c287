//! Run configuration: every knob of a run in one serializable document.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{generate_corpus, split, Synth, SynthSpec, Utterance};
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{AblationPlan, EvalSpec};
use crate::steering::SteeringConfig;
use crate::training::{OptimSpec, PretrainSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub num_utterances: usize,
    /// Train, dev and test fractions.
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
    /// Held-out text-only transcripts for decoder perplexity.
    pub text_validation_size: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            num_utterances: 2500,
            split_ratios: [0.8, 0.1, 0.1],
            split_seed: 0,
            text_validation_size: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub data: DataSpec,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub steering: SteeringConfig,
    pub pretrain: PretrainSpec,
    pub optim: OptimSpec,
    pub eval: EvalSpec,
    pub ablation: AblationPlan,
    /// Seed of the bridge initialization.
    pub bridge_seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.steering.validate()?;
        self.optim.validate()?;
        self.pretrain.validate()?;
        let vocab = self.synth.vocabulary()?.len();
        if self.decoder.vocab_size != vocab {
            return Err(Error::Config(format!(
                "decoder.vocab_size is {} but the vocabulary has {vocab} entries",
                self.decoder.vocab_size
            )));
        }
        if self.encoder.input_feature_dim != self.synth.feature_dim {
            return Err(Error::Config(format!(
                "encoder.input_feature_dim ({}) must equal synth.feature_dim ({})",
                self.encoder.input_feature_dim, self.synth.feature_dim
            )));
        }
        let r = self.data.split_ratios;
        if r.iter().any(|v| !(*v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "data.split_ratios must be non-negative and sum to 1, got {r:?}"
            )));
        }
        if self.data.text_validation_size == 0 {
            return Err(Error::Config("data.text_validation_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Applies `key=value` overrides, where `key` is a dotted path such as
    /// `optim.max_steps` and `value` is JSON (bare words are taken as strings).
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown configuration key {key:?}")))?;
            }
            *slot = value;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
    }
}

/// The three utterance splits of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpora {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

pub fn build_corpora(cfg: &RunConfig) -> Result<Corpora> {
    let all = generate_corpus(&cfg.synth, cfg.data.num_utterances)?;
    let (train, dev, test) = split(&all, cfg.data.split_ratios, cfg.data.split_seed)?;
    Ok(Corpora { train, dev, test })
}

/// Text-only transcripts for decoder pretraining and its validation, drawn
/// from a stream disjoint from every utterance.
pub fn text_corpora(cfg: &RunConfig) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    let synth = Synth::new(&cfg.synth)?;
    let n = cfg.pretrain.text_corpus_size as u64;
    let train = (0..n).map(|i| synth.text_transcript(i)).collect();
    let val = (n..n + cfg.data.text_validation_size as u64)
        .map(|i| synth.text_transcript(i))
        .collect();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"optim": {"lr": 1.0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let partial = RunConfig::from_json(r#"{"optim": {"max_steps": 7}}"#).unwrap();
        assert_eq!(partial.optim.max_steps, 7);
        assert_eq!(partial.optim.lr_router, 1e-3);
    }

    #[test]
    fn overrides_follow_dotted_paths() {
        let cfg = RunConfig::default()
            .with_overrides(&["optim.max_steps=12".into(), "steering.num_experts=2".into()])
            .unwrap();
        assert_eq!(cfg.optim.max_steps, 12);
        assert_eq!(cfg.steering.num_experts, 2);
        let err = RunConfig::default()
            .with_overrides(&["optim.nope=1".into()])
            .unwrap_err();
        assert!(err.to_string().contains("optim.nope"));
        assert!(RunConfig::default().with_overrides(&["noequals".into()]).is_err());
    }

    #[test]
    fn bad_split_ratios_name_the_field() {
        let cfg = RunConfig::default()
            .with_overrides(&["data.split_ratios=[0.5,0.1,0.1]".into()])
            .unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("data.split_ratios"));
    }

    #[test]
    fn default_split_sizes() {
        let mut cfg = RunConfig::default();
        cfg.data.num_utterances = 50;
        let c = build_corpora(&cfg).unwrap();
        assert_eq!((c.train.len(), c.dev.len(), c.test.len()), (40, 5, 5));
    }
}
