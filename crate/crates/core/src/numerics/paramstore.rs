use super::graph::Graph;
use super::rng::Rng;
use super::tensor::{numel, ParamTensor};
use crate::error::{Error, Result};

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<usize> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.tensors.push(ParamTensor::new(shape, values, true)?);
        self.names.push(name.to_string());
        Ok(self.tensors.len() - 1)
    }

    /// Uniform Glorot-style initialisation in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_glorot(&mut self, name: &str, shape: Vec<usize>, rng: &mut Rng) -> usize {
        let (fan_in, fan_out) = match shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (*n, *n),
            _ => (1, 1),
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..numel(&shape))
            .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
            .collect();
        self.add(name, shape, values).expect("fresh parameter")
    }

    pub fn add_normal(&mut self, name: &str, shape: Vec<usize>, std: f64, rng: &mut Rng) -> usize {
        let values = (0..numel(&shape)).map(|_| rng.normal() * std).collect();
        self.add(name, shape, values).expect("fresh parameter")
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> usize {
        let n = numel(&shape);
        self.add(name, shape, vec![0.0; n]).expect("fresh parameter")
    }

    pub fn get(&self, id: usize) -> &ParamTensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut ParamTensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamTensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    /// Adds the parameter gradients of a differentiated graph into the
    /// stored `grad` slots.
    pub fn accumulate(&mut self, graph: &Graph) {
        for (id, g) in graph.param_grads() {
            let t = &mut self.tensors[id];
            if t.requires_grad {
                t.grad.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(ParamTensor::zero_grad);
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(ParamTensor::len).sum()
    }
}
