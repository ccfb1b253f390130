use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter initialization rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    Xavier,
    Zeros,
    Ones,
    Constant(f64),
}

/// Named trainable tensors, in declaration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, mut tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        tensor.set_requires_grad(true);
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Declares a parameter initialized from a stream keyed by `(seed, name)`.
    /// Values are rounded to single precision, the storage precision of
    /// checkpoints.
    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Constant(c) => vec![c; numel],
            Init::Xavier => {
                let (fan_in, fan_out) = match shape {
                    [n] => (*n, 1),
                    [r, c] => (*r, *c),
                    _ => {
                        let last = *shape.last().unwrap_or(&1);
                        (numel / last, last)
                    }
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut stream = rng::stream(seed, name, &[]);
                (0..numel)
                    .map(|_| stream.gen_range(-bound..bound))
                    .collect()
            }
        };
        let mut tensor = Tensor::new(shape, data)?;
        round_to_f32(tensor.data_mut());
        self.insert(name, tensor)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn by_id(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn by_id_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn sorted_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.names.iter().map(String::as_str).collect();
        names.sort_unstable();
        names
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        self.tensors[id.0].accumulate_grad(grad);
    }

    /// Rounds every parameter to the nearest f32.
    pub fn round_to_storage(&mut self) {
        for t in &mut self.tensors {
            round_to_f32(t.data_mut());
        }
    }
}

fn round_to_f32(values: &mut [f64]) {
    for v in values {
        *v = f64::from(*v as f32);
    }
}
