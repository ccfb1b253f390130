use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};

/// A tape bound to a parameter store for one forward pass.
///
/// In training mode dropout draws from a stream seeded by the caller, so a
/// given step always sees the same dropout masks.
pub struct Graph<'p> {
    tape: Tape,
    params: &'p ParamStore,
    dropout_rng: Option<SplitMix64>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params,
            dropout_rng: None,
        }
    }

    pub fn training(params: &'p ParamStore, step_seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            params,
            dropout_rng: Some(SplitMix64::seed_from_u64(step_seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.tape.param(self.params, name)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Usage(format!("dropout rate {p} not in [0, 1)")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.tape.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let shape = self.tape.shape(x).to_vec();
        let m = self.tape.constant_from(&shape, mask)?;
        self.tape.mul(x, m)
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
