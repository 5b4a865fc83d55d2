//! Named parameter storage shared by every model component.

use std::collections::BTreeMap;

use crate::backend::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// All trainable tensors and buffers of a model, keyed by dotted name.
/// Names containing `.running_` are buffers: stored and checkpointed, but
/// never handed to the optimizer.
pub type ParamMap = BTreeMap<String, Tensor>;

pub fn is_buffer(name: &str) -> bool {
    name.contains(".running_")
}

pub fn get<'a>(params: &'a ParamMap, name: &str) -> Result<&'a Tensor> {
    params.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
}

pub fn count_trainable(params: &ParamMap) -> usize {
    params.iter().filter(|(k, _)| !is_buffer(k)).map(|(_, t)| t.numel()).sum()
}

/// Parameters registered as leaves on one tape.
pub struct Bound<'t> {
    pub tape: &'t Tape,
    vars: BTreeMap<String, Var>,
}

impl<'t> Bound<'t> {
    /// Leaves for every trainable entry of `params`.
    pub fn new(tape: &'t Tape, params: &ParamMap) -> Self {
        let vars = params
            .iter()
            .filter(|(k, _)| !is_buffer(k))
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone())))
            .collect();
        Bound { tape, vars }
    }

    /// Binds already-created leaves under the given names.
    pub fn from_vars(tape: &'t Tape, vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            tape,
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// `x·W + b` for `x[rows, in]`, `W[in, out]`.
    pub fn linear(&self, x: Var, prefix: &str) -> Result<Var> {
        let y = self.tape.matmul(x, self.var(&format!("{prefix}.w"))?)?;
        match self.vars.get(&format!("{prefix}.b")) {
            Some(&b) => self.tape.add_row(y, b),
            None => Ok(y),
        }
    }
}

pub(crate) fn insert_linear<R: rand::Rng + ?Sized>(
    params: &mut ParamMap,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    rng: &mut R,
) {
    let std = (1.0 / fan_in as f64).sqrt();
    params.insert(format!("{prefix}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
    if bias {
        params.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }
}

pub(crate) fn insert_norm(params: &mut ParamMap, prefix: &str, width: usize) {
    params.insert(format!("{prefix}.g"), Tensor::full(&[width], 1.0));
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[width]));
}
