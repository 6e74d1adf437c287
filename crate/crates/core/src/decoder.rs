//! Frozen causal transformer language model that accepts a continuous prefix.
//!
//! The input sequence is `[P_audio ; E_text]`. Positions are counted over the
//! concatenated sequence, so prompt rows sit at positions `0..S` and behave
//! like soft prefix tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{gaussian, Block, Linear, Norm};
use crate::numerics::{sinusoidal_positions, LrGroup, ParamSet, Parameter, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            model_dim: 64,
            num_heads: 4,
            ff_dim: 128,
            vocab_size: 30,
            max_positions: 512,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("decoder.{m}")));
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.num_heads == 0 || self.model_dim == 0 || self.model_dim % self.num_heads != 0 {
            return fail(format!(
                "num_heads ({}) must divide model_dim ({})",
                self.num_heads, self.model_dim
            ));
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2".into());
        }
        if self.ff_dim == 0 || self.max_positions == 0 {
            return fail("ff_dim and max_positions must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights {
    pub config: DecoderConfig,
    /// `V × D_llm`, not tied to the output projection.
    pub embedding: Parameter,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
    pub output: Linear,
    /// Validation perplexity recorded by pretraining.
    pub perplexity: Option<f64>,
}

impl DecoderWeights {
    pub fn init(config: &DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let embedding = Parameter::new(
            "decoder.embedding",
            gaussian(&[config.vocab_size, d], 1.0, &mut rng),
            LrGroup::Base,
        );
        let blocks = (0..config.num_layers)
            .map(|l| Block::new(&format!("decoder.block.{l}"), d, config.ff_dim, &mut rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            embedding,
            blocks,
            final_norm: Norm::new("decoder.final_norm", d),
            output: Linear::new("decoder.output", d, config.vocab_size, &mut rng),
            perplexity: None,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| !p.trainable())
    }
}

impl ParamSet for DecoderWeights {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.embedding];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend(self.final_norm.params());
        out.extend(self.output.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.embedding];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(self.final_norm.params_mut());
        out.extend(self.output.params_mut());
        out
    }
}

fn positions(tape: &mut Tape, offset: usize, rows: usize, dim: usize) -> Result<Var> {
    let pe = Tensor::new(vec![rows, dim], sinusoidal_positions(offset, rows, dim))?;
    Ok(tape.constant(pe))
}

/// Token embeddings plus the position code of each token's place in the
/// concatenated sequence, which starts at `offset`.
pub fn embed_text(tape: &mut Tape, tokens: &[usize], weights: &DecoderWeights, offset: usize) -> Result<Var> {
    let table = tape.param(&weights.embedding);
    let rows = tape.gather_rows(table, tokens)?;
    let pos = positions(tape, offset, tokens.len(), weights.config.model_dim)?;
    tape.add(rows, pos)
}

/// Next-token logits (`(S+T) × V`) for `[prompt ; tokens]`.
pub fn forward_with_prompt(
    tape: &mut Tape,
    prompt: Option<Var>,
    tokens: &[usize],
    weights: &DecoderWeights,
) -> Result<Var> {
    let cfg = &weights.config;
    let s = match prompt {
        Some(p) => {
            let (rows, cols) = tape.value(p).dims2("forward_with_prompt")?;
            if cols != cfg.model_dim {
                return Err(Error::Shape {
                    op: "forward_with_prompt",
                    lhs: vec![rows, cols],
                    rhs: vec![rows, cfg.model_dim],
                });
            }
            rows
        }
        None => 0,
    };
    let total = s + tokens.len();
    if total == 0 {
        return Err(Error::EmptyInput("decoder"));
    }
    if total > cfg.max_positions {
        return Err(Error::Length {
            what: "decoder positions",
            len: total,
            max: cfg.max_positions,
        });
    }
    let text = embed_text(tape, tokens, weights, s)?;
    let mut x = match prompt {
        Some(p) if s > 0 => {
            let pos = positions(tape, 0, s, cfg.model_dim)?;
            let audio = tape.add(p, pos)?;
            tape.concat_rows(audio, text)?
        }
        _ => text,
    };
    for block in &weights.blocks {
        x = block.forward(tape, x, cfg.num_heads, true)?;
    }
    let x = weights.final_norm.forward(tape, x)?;
    weights.output.forward(tape, x)
}

/// Native text-only forward.
pub fn forward_text(tape: &mut Tape, tokens: &[usize], weights: &DecoderWeights) -> Result<Var> {
    forward_with_prompt(tape, None, tokens, weights)
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Appends argmax tokens after `instruction` until `eos` or `max_new` tokens.
/// The returned transcript excludes the instruction and the `eos`.
pub fn greedy_decode(
    prompt: Option<&Tensor>,
    instruction: &[usize],
    weights: &DecoderWeights,
    max_new: usize,
    eos: usize,
) -> Result<Vec<usize>> {
    let s = prompt.map_or(0, |p| p.shape()[0]);
    let needed = s + instruction.len() + max_new;
    if needed > weights.config.max_positions {
        return Err(Error::Length {
            what: "decoder positions",
            len: needed,
            max: weights.config.max_positions,
        });
    }
    let mut tokens = instruction.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new {
        let mut tape = Tape::new();
        let p = prompt.map(|p| tape.constant(p.clone()));
        let logits = forward_with_prompt(&mut tape, p, &tokens, weights)?;
        let value = tape.value(logits);
        let last = value.shape()[0] - 1;
        let next = argmax(value.row(last));
        if next == eos {
            break;
        }
        tokens.push(next);
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DecoderConfig {
        DecoderConfig {
            num_layers: 2,
            model_dim: 8,
            num_heads: 2,
            ff_dim: 16,
            vocab_size: 7,
            max_positions: 24,
        }
    }

    #[test]
    fn empty_tokens_embed_to_empty_matrix() {
        let w = DecoderWeights::init(&small(), 1).unwrap();
        let mut tape = Tape::new();
        let e = embed_text(&mut tape, &[], &w, 3).unwrap();
        assert_eq!(tape.shape(e), &[0, 8]);
    }

    #[test]
    fn repeated_token_differs_only_by_position() {
        let w = DecoderWeights::init(&small(), 1).unwrap();
        let mut tape = Tape::new();
        let e = embed_text(&mut tape, &[0, 0], &w, 2).unwrap();
        let v = tape.value(e);
        let pe = sinusoidal_positions(2, 2, 8);
        for c in 0..8 {
            let a = v.row(0)[c] - pe[c];
            let b = v.row(1)[c] - pe[8 + c];
            assert!((a - w.embedding.data()[c]).abs() < 1e-15);
            assert!((b - w.embedding.data()[c]).abs() < 1e-15);
        }
        assert_ne!(v.row(0), v.row(1));
    }

    #[test]
    fn out_of_vocabulary_token() {
        let w = DecoderWeights::init(&small(), 1).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            forward_text(&mut tape, &[1, 7], &w),
            Err(Error::Vocabulary { id: 7, vocab: 7 })
        ));
    }

    #[test]
    fn empty_prompt_equals_text_forward() {
        let w = DecoderWeights::init(&small(), 1).unwrap();
        let mut tape = Tape::new();
        let a = forward_text(&mut tape, &[1, 2, 3], &w).unwrap();
        let b = forward_with_prompt(&mut tape, None, &[1, 2, 3], &w).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn prompt_changes_only_later_positions() {
        let w = DecoderWeights::init(&small(), 1).unwrap();
        let prompt = Tensor::from_fn(&[3, 8], |i| (i as f64 * 0.7).cos());
        let mut changed = prompt.clone();
        changed.data_mut()[8..16].iter_mut().for_each(|v| *v += 1.0); // row 1
        let mut tape = Tape::new();
        let p = tape.constant(prompt);
        let q = tape.constant(changed);
        let a = forward_with_prompt(&mut tape, Some(p), &[4, 5], &w).unwrap();
        let b = forward_with_prompt(&mut tape, Some(q), &[4, 5], &w).unwrap();
        let (va, vb) = (tape.value(a), tape.value(b));
        assert_eq!(va.row(0), vb.row(0));
        for r in 1..5 {
            assert_ne!(va.row(r), vb.row(r));
        }
    }

    #[test]
    fn overlength_is_rejected() {
        let w = DecoderWeights::init(&small(), 1).unwrap();
        let mut tape = Tape::new();
        let tokens = vec![1; 25];
        assert!(matches!(
            forward_text(&mut tape, &tokens, &w),
            Err(Error::Length { .. })
        ));
        assert!(greedy_decode(None, &[1; 20], &w, 5, 2).is_err());
    }

    #[test]
    fn greedy_decode_limits() {
        let mut w = DecoderWeights::init(&small(), 1).unwrap();
        assert!(greedy_decode(None, &[3], &w, 0, 2).unwrap().is_empty());
        let a = greedy_decode(None, &[3], &w, 6, 2).unwrap();
        let b = greedy_decode(None, &[3], &w, 6, 2).unwrap();
        assert_eq!(a, b);
        w.output.bias.data_mut()[2] = 1e6;
        assert!(greedy_decode(None, &[3], &w, 6, 2).unwrap().is_empty());
    }

    #[test]
    fn argmax_prefers_smallest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}
