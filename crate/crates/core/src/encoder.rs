//! Frozen bidirectional transformer encoder over continuous feature frames.
//!
//! [`encode_layers`] exposes the output of every block and lets a hook
//! rewrite it before the next block consumes it. The hook sees the full block
//! output (after both residual adds); there is no final layer norm.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Block, Linear};
use crate::numerics::{sinusoidal_positions, ParamSet, Parameter, Tape, Tensor, Var};

/// Where the steering hook is applied inside each encoder layer.
pub const HOOK_POINT: &str = "after_full_block_output";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub input_feature_dim: usize,
    pub max_frames: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            model_dim: 64,
            num_heads: 4,
            ff_dim: 128,
            input_feature_dim: 16,
            max_frames: 256,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("encoder.{m}")));
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.model_dim < 2 {
            return fail("model_dim must be at least 2".into());
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return fail(format!(
                "num_heads ({}) must divide model_dim ({})",
                self.num_heads, self.model_dim
            ));
        }
        if self.ff_dim < self.model_dim {
            return fail("ff_dim must be at least model_dim".into());
        }
        if self.input_feature_dim == 0 {
            return fail("input_feature_dim must be at least 1".into());
        }
        if self.max_frames == 0 {
            return fail("max_frames must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub input: Linear,
    pub blocks: Vec<Block>,
    /// Validation frame accuracy recorded by pretraining.
    pub frame_accuracy: Option<f64>,
}

impl EncoderWeights {
    /// Random initialization; every parameter starts trainable.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let input = Linear::new("encoder.input", config.input_feature_dim, d, &mut rng);
        let blocks = (0..config.num_layers)
            .map(|l| Block::new(&format!("encoder.block.{l}"), d, config.ff_dim, &mut rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            input,
            blocks,
            frame_accuracy: None,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| !p.trainable())
    }
}

impl ParamSet for EncoderWeights {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.input.params();
        for b in &self.blocks {
            out.extend(b.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.input.params_mut();
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out
    }
}

pub struct EncoderOutput {
    /// Output of the last layer after its hook.
    pub last: Var,
    /// Hooked output of every layer, in order.
    pub per_layer: Vec<Var>,
}

fn embed_frames(tape: &mut Tape, features: Var, weights: &EncoderWeights) -> Result<Var> {
    let cfg = &weights.config;
    let (t, f) = tape.value(features).dims2("encoder")?;
    if f != cfg.input_feature_dim {
        return Err(Error::Shape {
            op: "encoder input",
            lhs: vec![t, f],
            rhs: vec![t, cfg.input_feature_dim],
        });
    }
    if t == 0 {
        return Err(Error::EmptyInput("encoder"));
    }
    if t > cfg.max_frames {
        return Err(Error::Length {
            what: "encoder frames",
            len: t,
            max: cfg.max_frames,
        });
    }
    let x = weights.input.forward(tape, features)?;
    let pos = tape.constant(Tensor::new(
        vec![t, cfg.model_dim],
        sinusoidal_positions(0, t, cfg.model_dim),
    )?);
    tape.add(x, pos)
}

/// Runs every encoder layer, passing each block output through `hook`
/// (called with the 0-based layer index) before the next block.
pub fn encode_layers<H>(tape: &mut Tape, features: Var, weights: &EncoderWeights, mut hook: H) -> Result<EncoderOutput>
where
    H: FnMut(&mut Tape, usize, Var) -> Result<Var>,
{
    let mut x = embed_frames(tape, features, weights)?;
    let mut per_layer = Vec::with_capacity(weights.blocks.len());
    for (l, block) in weights.blocks.iter().enumerate() {
        x = block.forward(tape, x, weights.config.num_heads, false)?;
        x = hook(tape, l, x)?;
        per_layer.push(x);
    }
    Ok(EncoderOutput { last: x, per_layer })
}

/// Plain forward without any hook.
pub fn encode(tape: &mut Tape, features: Var, weights: &EncoderWeights) -> Result<Var> {
    let mut x = embed_frames(tape, features, weights)?;
    for block in &weights.blocks {
        x = block.forward(tape, x, weights.config.num_heads, false)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            model_dim: 8,
            num_heads: 2,
            ff_dim: 16,
            input_feature_dim: 3,
            max_frames: 12,
        }
    }

    fn frames(t: usize, f: usize) -> Tensor {
        Tensor::from_fn(&[t, f], |i| ((i * 7 + 3) as f64 * 0.21).sin())
    }

    #[test]
    fn identity_hook_matches_plain_forward() {
        let w = EncoderWeights::init(&small(), 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(frames(5, 3));
        let plain = encode(&mut tape, x, &w).unwrap();
        let hooked = encode_layers(&mut tape, x, &w, |_, _, h| Ok(h)).unwrap();
        assert_eq!(hooked.per_layer.len(), 2);
        assert_eq!(tape.value(plain), tape.value(hooked.last));
    }

    #[test]
    fn hooked_output_feeds_next_layer() {
        let w = EncoderWeights::init(&small(), 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(frames(5, 3));
        let plain = encode(&mut tape, x, &w).unwrap();
        let shifted = encode_layers(&mut tape, x, &w, |tape, l, h| {
            if l == 0 {
                let one = tape.constant(Tensor::scalar(2.0));
                tape.scale(h, one)
            } else {
                Ok(h)
            }
        })
        .unwrap();
        assert_ne!(tape.value(plain), tape.value(shifted.last));
    }

    #[test]
    fn too_many_frames_is_a_length_error() {
        let w = EncoderWeights::init(&small(), 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(frames(13, 3));
        assert!(matches!(
            encode(&mut tape, x, &w),
            Err(Error::Length { len: 13, max: 12, .. })
        ));
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = EncoderConfig {
            num_heads: 3,
            ..small()
        };
        assert!(cfg.validate().is_err());
    }

    /// One layer, one head, D=2: compare with a scalar re-derivation of the block.
    #[test]
    fn single_head_block_matches_scalar_oracle() {
        let cfg = EncoderConfig {
            num_layers: 1,
            model_dim: 2,
            num_heads: 1,
            ff_dim: 2,
            input_feature_dim: 2,
            max_frames: 4,
        };
        let mut w = EncoderWeights::init(&cfg, 11).unwrap();
        // Hand-set every weight.
        let set = |p: &mut Parameter, vals: &[f64]| p.data_mut().copy_from_slice(vals);
        set(&mut w.input.weight, &[1.0, 0.5, -0.5, 1.0]);
        set(&mut w.input.bias, &[0.1, -0.1]);
        let b = &mut w.blocks[0];
        set(&mut b.query.weight, &[0.3, -0.2, 0.1, 0.4]);
        set(&mut b.key.weight, &[-0.1, 0.2, 0.5, 0.3]);
        set(&mut b.value.weight, &[0.7, 0.1, -0.3, 0.2]);
        set(&mut b.out.weight, &[1.0, 0.0, 0.2, 0.9]);
        set(&mut b.ff_in.weight, &[0.5, -0.4, 0.3, 0.8]);
        set(&mut b.ff_out.weight, &[-0.6, 0.2, 0.1, 0.5]);
        for p in [
            &mut b.query.bias,
            &mut b.key.bias,
            &mut b.value.bias,
            &mut b.out.bias,
            &mut b.ff_in.bias,
            &mut b.ff_out.bias,
        ] {
            set(p, &[0.05, -0.05]);
        }
        let input = [[0.2, -1.0], [1.5, 0.3], [-0.4, 0.9]];

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&input[0], &input[1], &input[2]]));
        let out = encode(&mut tape, x, &w).unwrap();
        let got = tape.value(out).clone();

        let oracle = scalar_encoder(&w, &input);
        for (g, e) in got.data().iter().zip(oracle.iter().flatten()) {
            assert!((g - e).abs() < 1e-10, "{g} vs {e}");
        }
    }

    fn lin(p: &Linear, x: [f64; 2]) -> [f64; 2] {
        let w = p.weight.data();
        let b = p.bias.data();
        [x[0] * w[0] + x[1] * w[2] + b[0], x[0] * w[1] + x[1] * w[3] + b[1]]
    }

    fn ln2(x: [f64; 2]) -> [f64; 2] {
        let m = (x[0] + x[1]) / 2.0;
        let v = ((x[0] - m).powi(2) + (x[1] - m).powi(2)) / 2.0;
        let s = (v + 1e-5).sqrt();
        [(x[0] - m) / s, (x[1] - m) / s]
    }

    fn gelu(x: f64) -> f64 {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn scalar_encoder(w: &EncoderWeights, input: &[[f64; 2]]) -> Vec<[f64; 2]> {
        let t = input.len();
        let mut x: Vec<[f64; 2]> = input
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let h = lin(&w.input, f);
                let p = i as f64;
                [h[0] + p.sin(), h[1] + p.cos()]
            })
            .collect();
        let b = &w.blocks[0];
        let h: Vec<[f64; 2]> = x.iter().map(|&r| ln2(r)).collect();
        let q: Vec<_> = h.iter().map(|&r| lin(&b.query, r)).collect();
        let k: Vec<_> = h.iter().map(|&r| lin(&b.key, r)).collect();
        let v: Vec<_> = h.iter().map(|&r| lin(&b.value, r)).collect();
        let scale = 1.0 / 2f64.sqrt();
        for i in 0..t {
            let s: Vec<f64> = (0..t)
                .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) * scale)
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut a = [0.0; 2];
            for j in 0..t {
                a[0] += e[j] / z * v[j][0];
                a[1] += e[j] / z * v[j][1];
            }
            let o = lin(&b.out, a);
            x[i] = [x[i][0] + o[0], x[i][1] + o[1]];
        }
        for r in x.iter_mut() {
            let f = lin(&b.ff_in, ln2(*r));
            let f = lin(&b.ff_out, [gelu(f[0]), gelu(f[1])]);
            *r = [r[0] + f[0], r[1] + f[1]];
        }
        x
    }
}
