//! Transformer building blocks shared by the encoder and the decoder.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numerics::{LrGroup, ParamSet, Parameter, Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn gaussian(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// `x · W + b`
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: Parameter::new(
                format!("{name}.weight"),
                gaussian(&[inputs, outputs], std, rng),
                LrGroup::Base,
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[outputs]), LrGroup::Base),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: Parameter,
    pub bias: Parameter,
}

impl Norm {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gain: Parameter::new(format!("{name}.gain"), Tensor::filled(&[dim], 1.0), LrGroup::Base),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[dim]), LrGroup::Base),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Pre-norm block: `x + Attn(LN(x))`, then `x + FF(LN(x))` with a GELU feed-forward.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm_attn: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm_ff: Norm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl Block {
    pub fn new(name: &str, dim: usize, ff_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm_attn: Norm::new(&format!("{name}.norm_attn"), dim),
            query: Linear::new(&format!("{name}.attn.query"), dim, dim, rng),
            key: Linear::new(&format!("{name}.attn.key"), dim, dim, rng),
            value: Linear::new(&format!("{name}.attn.value"), dim, dim, rng),
            out: Linear::new(&format!("{name}.attn.out"), dim, dim, rng),
            norm_ff: Norm::new(&format!("{name}.norm_ff"), dim),
            ff_in: Linear::new(&format!("{name}.ff.in"), dim, ff_dim, rng),
            ff_out: Linear::new(&format!("{name}.ff.out"), ff_dim, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, heads: usize, causal: bool) -> Result<Var> {
        let h = self.norm_attn.forward(tape, x)?;
        let q = self.query.forward(tape, h)?;
        let k = self.key.forward(tape, h)?;
        let v = self.value.forward(tape, h)?;
        let a = tape.attention(q, k, v, heads, causal)?;
        let o = self.out.forward(tape, a)?;
        let x = tape.add(x, o)?;
        let h = self.norm_ff.forward(tape, x)?;
        let f = self.ff_in.forward(tape, h)?;
        let f = tape.gelu(f);
        let f = self.ff_out.forward(tape, f)?;
        tape.add(x, f)
    }
}

impl ParamSet for Linear {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl ParamSet for Norm {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.gain, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gain, &mut self.bias]
    }
}

impl ParamSet for Block {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.norm_attn.params();
        for l in [&self.query, &self.key, &self.value, &self.out] {
            out.extend(l.params());
        }
        out.extend(self.norm_ff.params());
        out.extend(self.ff_in.params());
        out.extend(self.ff_out.params());
        out
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.norm_attn.params_mut();
        for l in [&mut self.query, &mut self.key, &mut self.value, &mut self.out] {
            out.extend(l.params_mut());
        }
        out.extend(self.norm_ff.params_mut());
        out.extend(self.ff_in.params_mut());
        out.extend(self.ff_out.params_mut());
        out
    }
}
