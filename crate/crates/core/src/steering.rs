//! Layer-wise mixture-of-experts steering.
//!
//! Each encoder layer `l` owns `N` expert vectors. One router matrix of shape
//! `D × (L·N)` scores every expert of every layer; layer `l` reads only its
//! column block `[l·N, (l+1)·N)` (0-based), softmaxes it per frame, and mixes
//! its experts with those gates. The mixture is scaled by a per-layer `α_l`
//! and added back to the layer output:
//!
//! ```text
//! g_l  = softmax(H_l · W_router[:, l·N..(l+1)·N])
//! H'_l = H_l + α_l · (g_l · E_l)
//! ```
//!
//! The last steered layer is average-pooled over time with a window of four
//! frames and projected into the decoder's embedding space without a bias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::encoder::{encode, encode_layers, EncoderWeights};
use crate::error::{Error, Result};
use crate::layers::gaussian;
use crate::numerics::{LrGroup, ParamSet, Parameter, Tape, Tensor, Var};

/// Temporal pooling window applied after the last steered layer.
pub const POOL_KERNEL: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteeringConfig {
    pub num_experts: usize,
    pub alpha_init: f64,
    pub expert_init_std: f64,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            num_experts: 8,
            alpha_init: 0.1,
            expert_init_std: 0.02,
        }
    }
}

impl SteeringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::Config("steering.num_experts must be at least 1".into()));
        }
        if !self.alpha_init.is_finite() {
            return Err(Error::Config("steering.alpha_init must be finite".into()));
        }
        if !(self.expert_init_std >= 0.0 && self.expert_init_std.is_finite()) {
            return Err(Error::Config(
                "steering.expert_init_std must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// All trainable parameters of the MoE bridge.
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringState {
    pub config: SteeringConfig,
    /// `L × N × D`
    pub experts: Parameter,
    /// `D × (L·N)`
    pub router: Parameter,
    /// `L`
    pub alphas: Parameter,
    /// `D × D_llm`
    pub projection: Parameter,
}

impl SteeringState {
    /// Experts ~ N(0, std²), router zero (uniform gates), every α at
    /// `alpha_init`, projection ~ N(0, 1/D).
    pub fn init(
        config: &SteeringConfig,
        layers: usize,
        model_dim: usize,
        decoder_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if layers == 0 || model_dim == 0 || decoder_dim == 0 {
            return Err(Error::Config(
                "steering needs at least one layer and positive dims".into(),
            ));
        }
        let n = config.num_experts;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let experts = gaussian(&[layers, n, model_dim], config.expert_init_std, &mut rng);
        let projection = gaussian(&[model_dim, decoder_dim], 1.0 / (model_dim as f64).sqrt(), &mut rng);
        Ok(Self {
            config: config.clone(),
            experts: Parameter::new("steering.experts", experts, LrGroup::SteeringVectors),
            router: Parameter::new(
                "steering.router",
                Tensor::zeros(&[model_dim, layers * n]),
                LrGroup::Router,
            ),
            alphas: Parameter::new(
                "steering.alphas",
                Tensor::filled(&[layers], config.alpha_init),
                LrGroup::Base,
            )
            .without_decay(),
            projection: Parameter::new("steering.projection", projection, LrGroup::Base),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.experts.shape()[0]
    }

    pub fn num_experts(&self) -> usize {
        self.experts.shape()[1]
    }

    pub fn model_dim(&self) -> usize {
        self.experts.shape()[2]
    }

    pub fn decoder_dim(&self) -> usize {
        self.projection.shape()[1]
    }

    /// `L·N·D + D·L·N + L + D·D_llm`
    pub fn census(layers: usize, experts: usize, model_dim: usize, decoder_dim: usize) -> usize {
        layers * experts * model_dim + model_dim * layers * experts + layers + model_dim * decoder_dim
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.num_layers() {
            return Err(Error::Index {
                what: "steering layer",
                index: layer,
                len: self.num_layers(),
            });
        }
        Ok(())
    }
}

impl ParamSet for SteeringState {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.experts, &self.router, &self.alphas, &self.projection]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.experts,
            &mut self.router,
            &mut self.alphas,
            &mut self.projection,
        ]
    }
}

/// Gating scores `g_l` (`T×N`) for layer `layer` (0-based).
pub fn route(tape: &mut Tape, hidden: Var, state: &SteeringState, layer: usize) -> Result<Var> {
    state.check_layer(layer)?;
    let router = tape.param(&state.router);
    route_with(tape, hidden, router, state.num_experts(), layer)
}

fn route_with(tape: &mut Tape, hidden: Var, router: Var, n: usize, layer: usize) -> Result<Var> {
    let logits = tape.matmul(hidden, router)?;
    let block = tape.slice_cols(logits, layer * n..(layer + 1) * n)?;
    tape.softmax(block)
}

/// Tape handles of the steering parameters, registered once per forward.
#[derive(Clone, Copy)]
struct SteeringVars {
    experts: Var,
    router: Var,
    alphas: Var,
}

impl SteeringVars {
    fn register(tape: &mut Tape, state: &SteeringState) -> Self {
        Self {
            experts: tape.param(&state.experts),
            router: tape.param(&state.router),
            alphas: tape.param(&state.alphas),
        }
    }
}

fn steer_with(tape: &mut Tape, hidden: Var, vars: SteeringVars, n: usize, layer: usize) -> Result<(Var, Var)> {
    let gates = route_with(tape, hidden, vars.router, n, layer)?;
    let experts = tape.slab(vars.experts, layer)?;
    let delta = tape.matmul(gates, experts)?;
    let alpha = tape.slab(vars.alphas, layer)?;
    let scaled = tape.scale(delta, alpha)?;
    Ok((tape.add(hidden, scaled)?, gates))
}

/// `H'_l = H_l + α_l · (g_l · E_l)`
pub fn steer_layer(tape: &mut Tape, hidden: Var, state: &SteeringState, layer: usize) -> Result<Var> {
    state.check_layer(layer)?;
    let vars = SteeringVars::register(tape, state);
    Ok(steer_with(tape, hidden, vars, state.num_experts(), layer)?.0)
}

fn check_encoder(encoder: &EncoderWeights, state: &SteeringState) -> Result<()> {
    let cfg = &encoder.config;
    if cfg.num_layers != state.num_layers() || cfg.model_dim != state.model_dim() {
        return Err(Error::Shape {
            op: "steered_encode",
            lhs: vec![cfg.num_layers, cfg.model_dim],
            rhs: vec![state.num_layers(), state.model_dim()],
        });
    }
    Ok(())
}

/// Steered encoder pass: every layer output is steered before the next
/// layer reads it, and the last one is pooled over time.
pub fn steered_encode(tape: &mut Tape, features: Var, encoder: &EncoderWeights, state: &SteeringState) -> Result<Var> {
    Ok(steered_encode_with_gates(tape, features, encoder, state)?.0)
}

fn steered_encode_with_gates(
    tape: &mut Tape,
    features: Var,
    encoder: &EncoderWeights,
    state: &SteeringState,
) -> Result<(Var, Vec<Var>)> {
    check_encoder(encoder, state)?;
    let vars = SteeringVars::register(tape, state);
    let n = state.num_experts();
    let mut gates = Vec::with_capacity(state.num_layers());
    let out = encode_layers(tape, features, encoder, |tape, l, h| {
        let (steered, g) = steer_with(tape, h, vars, n, l)?;
        gates.push(g);
        Ok(steered)
    })?;
    let pooled = tape.avg_pool_time(out.last, POOL_KERNEL)?;
    Ok((pooled, gates))
}

/// `P_audio = H'_audio · W_proj`
pub fn project(tape: &mut Tape, pooled: Var, projection: &Parameter) -> Result<Var> {
    let w = tape.param(projection);
    tape.matmul(pooled, w)
}

/// A linear projection of the pooled, unsteered encoder output. The
/// ablation baseline with no layer-wise intervention.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticAdapter {
    pub projection: Parameter,
}

impl StaticAdapter {
    pub fn init(model_dim: usize, decoder_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = gaussian(&[model_dim, decoder_dim], 1.0 / (model_dim as f64).sqrt(), &mut rng);
        Self {
            projection: Parameter::new("steering.projection", projection, LrGroup::Base),
        }
    }
}

impl ParamSet for StaticAdapter {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.projection]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.projection]
    }
}

/// Whatever sits between the frozen encoder and the frozen decoder.
#[derive(Clone, Debug, PartialEq)]
pub enum Bridge {
    Moe(SteeringState),
    Static(StaticAdapter),
}

impl Bridge {
    pub fn label(&self) -> String {
        match self {
            Bridge::Moe(s) => format!("moe-{}", s.num_experts()),
            Bridge::Static(_) => "static".to_string(),
        }
    }

    pub fn projection(&self) -> &Parameter {
        match self {
            Bridge::Moe(s) => &s.projection,
            Bridge::Static(a) => &a.projection,
        }
    }

    pub fn decoder_dim(&self) -> usize {
        self.projection().shape()[1]
    }

    /// Continuous prompt `P_audio` (`ceil(T/4) × D_llm`) for one utterance.
    pub fn audio_prompt(&self, tape: &mut Tape, features: Var, encoder: &EncoderWeights) -> Result<Var> {
        match self {
            Bridge::Moe(state) => {
                let pooled = steered_encode(tape, features, encoder, state)?;
                project(tape, pooled, &state.projection)
            }
            Bridge::Static(adapter) => {
                let h = encode(tape, features, encoder)?;
                let pooled = tape.avg_pool_time(h, POOL_KERNEL)?;
                project(tape, pooled, &adapter.projection)
            }
        }
    }
}

impl ParamSet for Bridge {
    fn params(&self) -> Vec<&Parameter> {
        match self {
            Bridge::Moe(s) => s.params(),
            Bridge::Static(a) => a.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Bridge::Moe(s) => s.params_mut(),
            Bridge::Static(a) => a.params_mut(),
        }
    }
}

/// Per-layer expert usage and gate entropy over a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterStats {
    /// `usage[l][n]`: mean gate of expert `n` at layer `l` over all frames.
    pub usage: Vec<Vec<f64>>,
    /// Mean per-frame gate entropy of each layer, in nats.
    pub entropy: Vec<f64>,
    pub frames: usize,
}

pub fn router_stats(state: &SteeringState, encoder: &EncoderWeights, corpus: &[Utterance]) -> Result<RouterStats> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (layers, n) = (state.num_layers(), state.num_experts());
    let mut usage = vec![vec![0.0; n]; layers];
    let mut entropy = vec![0.0; layers];
    let mut frames = 0usize;
    for utt in corpus {
        let mut tape = Tape::new();
        let x = tape.constant(utt.features.clone());
        let (_, gates) = steered_encode_with_gates(&mut tape, x, encoder, state)?;
        for (l, g) in gates.iter().enumerate() {
            for row in tape.value(*g).data().chunks_exact(n) {
                for (u, &p) in usage[l].iter_mut().zip(row) {
                    *u += p;
                }
                entropy[l] -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
            }
        }
        frames += utt.features.shape()[0];
    }
    let total = frames as f64;
    for l in 0..layers {
        usage[l].iter_mut().for_each(|u| *u /= total);
        entropy[l] /= total;
    }
    Ok(RouterStats { usage, entropy, frames })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(layers: usize, n: usize, d: usize, dl: usize) -> SteeringState {
        let cfg = SteeringConfig {
            num_experts: n,
            ..Default::default()
        };
        SteeringState::init(&cfg, layers, d, dl, 5).unwrap()
    }

    #[test]
    fn zero_router_gives_uniform_gates() {
        let s = state(3, 4, 6, 5);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_fn(&[7, 6], |i| (i as f64).sin()));
        let g = route(&mut tape, h, &s, 2).unwrap();
        assert_eq!(tape.shape(g), &[7, 4]);
        assert!(tape.value(g).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn two_expert_gate_value() {
        let mut s = state(2, 2, 2, 2);
        // Block for layer 0 is columns 0..2: [[2,0],[0,0]].
        s.router
            .data_mut()
            .copy_from_slice(&[2.0, 0.0, 9.0, -3.0, 0.0, 0.0, 1.0, 4.0]);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&[&[1.0, 0.0]]));
        let g = route(&mut tape, h, &s, 0).unwrap();
        let v = tape.value(g).data();
        assert!((v[0] - 0.880797).abs() < 1e-6);
        assert!((v[1] - 0.119203).abs() < 1e-6);
    }

    #[test]
    fn layer_index_out_of_range() {
        let s = state(2, 2, 2, 2);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            route(&mut tape, h, &s, 2),
            Err(Error::Index { index: 2, len: 2, .. })
        ));
        assert!(steer_layer(&mut tape, h, &s, 5).is_err());
    }

    #[test]
    fn zero_alpha_is_exact_identity() {
        let mut s = state(2, 3, 4, 4);
        s.alphas.data_mut().fill(0.0);
        s.router
            .data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64).cos());
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_fn(&[5, 4], |i| (i as f64 * 0.3).sin() + 0.1));
        let out = steer_layer(&mut tape, h, &s, 1).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
    }

    #[test]
    fn single_expert_broadcasts() {
        let mut s = state(1, 1, 3, 3);
        s.experts.data_mut().copy_from_slice(&[1.0, -2.0, 0.5]);
        s.alphas.data_mut()[0] = 0.5;
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[2, 3]));
        let out = steer_layer(&mut tape, h, &s, 0).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, -1.0, 0.25, 0.5, -1.0, 0.25]);
    }

    #[test]
    fn half_half_mixture() {
        let mut s = state(1, 2, 2, 2);
        s.experts.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[1, 2]));
        let out = steer_layer(&mut tape, h, &s, 0).unwrap();
        let v = tape.value(out).data();
        assert!((v[0] - 0.05).abs() < 1e-15 && (v[1] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn census_formula() {
        let s = state(4, 8, 64, 64);
        assert_eq!(s.trainable_count(), SteeringState::census(4, 8, 64, 64));
        assert_eq!(SteeringState::census(4, 8, 64, 64), 4 * 8 * 64 * 2 + 4 + 64 * 64);
        let a = StaticAdapter::init(64, 32, 1);
        assert_eq!(a.trainable_count(), 64 * 32);
    }

    #[test]
    fn projection_identity_and_zero() {
        let mut s = state(1, 2, 3, 3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64 - 1.5));
        s.projection
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let p = project(&mut tape, x, &s.projection).unwrap();
        assert_eq!(tape.value(p), tape.value(x));
        s.projection.data_mut().fill(0.0);
        let p = project(&mut tape, x, &s.projection).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn router_stats_requires_corpus() {
        let s = state(1, 2, 4, 4);
        let enc = EncoderWeights::init(
            &crate::encoder::EncoderConfig {
                num_layers: 1,
                model_dim: 4,
                num_heads: 1,
                ff_dim: 4,
                input_feature_dim: 2,
                max_frames: 8,
            },
            0,
        )
        .unwrap();
        assert!(matches!(router_stats(&s, &enc, &[]), Err(Error::EmptyCorpus)));
    }
}
