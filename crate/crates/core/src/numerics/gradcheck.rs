//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Coordinates sampled per parameter.
    pub max_coords: usize,
    pub seed: u64,
    /// Smallest denominator of the relative error. Central differences carry
    /// rounding noise of roughly `ε·|loss| / h`, so coordinates whose
    /// gradient is far below this are compared on absolute error instead.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords: 200,
            seed: 0,
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

fn evaluate<M, F>(model: &M, forward: &F) -> Result<f64>
where
    F: Fn(&M, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = forward(model, &mut tape)?;
    Ok(tape.scalar(loss))
}

/// Compares tape gradients of every trainable parameter in `model` with
/// central differences, returning the largest
/// `|analytic − fd| / max(|analytic| + |fd|, floor)` over the sampled coordinates.
pub fn check_gradients<M, F>(model: &mut M, forward: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    M: ParamSet,
    F: Fn(&M, &mut Tape) -> Result<Var>,
{
    let first = evaluate(model, &forward)?;
    let second = evaluate(model, &forward)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism(format!(
            "two identical evaluations gave {first:e} and {second:e}"
        )));
    }

    let mut tape = Tape::new();
    let loss = forward(model, &mut tape)?;
    let analytic = tape.backward(loss)?.by_param();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let targets: Vec<(String, usize)> = model
        .params()
        .iter()
        .filter(|p| p.trainable())
        .map(|p| (p.name().to_string(), p.numel()))
        .collect();

    for (p_idx, (name, numel)) in targets.iter().enumerate() {
        let grad = analytic.get(name).cloned().unwrap_or_else(|| vec![0.0; *numel]);
        let picks = sample(&mut rng, *numel, (*numel).min(opts.max_coords));
        for coord in picks.iter() {
            let original = model.params()[index_of(model, p_idx)].data()[coord];
            set_coord(model, p_idx, coord, original + opts.h);
            let plus = evaluate(model, &forward);
            set_coord(model, p_idx, coord, original - opts.h);
            let minus = evaluate(model, &forward);
            set_coord(model, p_idx, coord, original);
            let fd = (plus? - minus?) / (2.0 * opts.h);
            let a = grad[coord];
            let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), coord));
            }
        }
    }
    Ok(report)
}

/// Position of the `n`-th trainable parameter in `model.params()`.
fn index_of<M: ParamSet>(model: &M, n: usize) -> usize {
    model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable())
        .nth(n)
        .map(|(i, _)| i)
        .expect("trainable parameter index")
}

fn set_coord<M: ParamSet>(model: &mut M, n: usize, coord: usize, value: f64) {
    let idx = index_of(model, n);
    model.params_mut()[idx].data_mut()[coord] = value;
}
