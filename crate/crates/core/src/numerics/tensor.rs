use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::Dimension {
                op: "tensor",
                reason: format!("shape {shape:?} has a zero extent but {} values", data.len()),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                reason: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Build a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(&[1], value)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn grad_mut(&mut self) -> &mut Vec<f64> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub(crate) fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Dimension {
                op,
                reason: format!("expected a matrix, got shape {:?}", self.shape),
            }),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Little-endian IEEE-754 bytes of the data buffer.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        if bytes.len() % 8 != 0 {
            return Err(Error::Format(format!(
                "buffer of {} bytes is not a whole number of f64 values",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::new(shape, data)
    }
}

/// Which learning rate a trainable parameter is optimized with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrGroup {
    Base,
    SteeringVectors,
    Router,
}

/// A named tensor with a frozen/trainable flag.
///
/// Frozen parameters never allocate a gradient buffer; [`Parameter::accumulate_grad`]
/// rejects them, so their data cannot drift through the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
    trainable: bool,
    lr_group: LrGroup,
    decay: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor, lr_group: LrGroup) -> Self {
        Self {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
            trainable: true,
            lr_group,
            decay: true,
        }
    }

    pub fn frozen(name: impl Into<String>, tensor: Tensor) -> Self {
        let mut p = Self::new(name, tensor, LrGroup::Base);
        p.freeze();
        p
    }

    /// Exempt this parameter from decoupled weight decay.
    pub fn without_decay(mut self) -> Self {
        self.decay = false;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    /// Mutable access to the values. Intended for initialization and tests;
    /// training goes through the optimizer.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.tensor.data_mut()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn lr_group(&self) -> LrGroup {
        self.lr_group
    }

    pub fn decays(&self) -> bool {
        self.decay
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.tensor.grad()
    }

    pub fn freeze(&mut self) {
        self.trainable = false;
        self.tensor.requires_grad = false;
        self.tensor.grad = None;
    }

    pub fn accumulate_grad(&mut self, grad: &[f64]) -> Result<()> {
        if !self.trainable {
            return Err(Error::Contract(format!(
                "gradient delivered to frozen parameter {}",
                self.name
            )));
        }
        if grad.len() != self.tensor.numel() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: self.tensor.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        for (acc, g) in self.tensor.grad_mut().iter_mut().zip(grad) {
            *acc += g;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensor.grad = None;
    }

    pub(crate) fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.tensor.take_grad()
    }
}

/// Anything that owns a set of parameters.
pub trait ParamSet {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn trainable_count(&self) -> usize {
        self.params().iter().filter(|p| p.trainable()).map(|p| p.numel()).sum()
    }

    fn total_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn freeze_all(&mut self) {
        for p in self.params_mut() {
            p.freeze();
        }
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// A plain list of parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamList(pub Vec<Parameter>);

impl ParamSet for ParamList {
    fn params(&self) -> Vec<&Parameter> {
        self.0.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.0.iter_mut().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn frozen_parameter_rejects_gradients() {
        let mut p = Parameter::frozen("w", Tensor::zeros(&[2]));
        assert!(p.accumulate_grad(&[1.0, 1.0]).is_err());
        assert!(p.grad().is_none());
    }

    #[test]
    fn gradients_accumulate() {
        let mut p = Parameter::new("w", Tensor::zeros(&[2]), LrGroup::Base);
        p.accumulate_grad(&[1.0, 2.0]).unwrap();
        p.accumulate_grad(&[0.5, 0.5]).unwrap();
        assert_eq!(p.grad().unwrap(), &[1.5, 2.5]);
    }

    #[test]
    fn byte_round_trip() {
        let t = Tensor::from_rows(&[&[1.0, -0.0], &[f64::MIN_POSITIVE, 3.25]]);
        let back = Tensor::from_le_bytes(vec![2, 2], &t.to_le_bytes()).unwrap();
        assert_eq!(
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
