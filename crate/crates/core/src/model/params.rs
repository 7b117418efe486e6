use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{BatchMoments, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NormId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// False until the first train-mode batch has been folded in.
    pub initialized: bool,
}

/// Named trainable tensors plus batch-norm buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    norms: Vec<RunningStats>,
}

impl ParamStore {
    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn norms(&self) -> &[RunningStats] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [RunningStats] {
        &mut self.norms
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn norm(&self, id: NormId) -> &RunningStats {
        &self.norms[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub(crate) fn add(&mut self, name: String, tensor: Tensor) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            tensor: tensor.with_requires_grad(true),
        });
        ParamId(self.params.len() - 1)
    }

    pub(crate) fn add_norm(&mut self, name: String, channels: usize) -> NormId {
        self.norms.push(RunningStats {
            name,
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        });
        NormId(self.norms.len() - 1)
    }

    /// Folds observed batch moments into the running statistics with an
    /// exponential moving average. The first update copies the moments.
    pub fn update_running(&mut self, id: NormId, moments: &BatchMoments, momentum: f64) {
        let s = &mut self.norms[id.0];
        if !s.initialized {
            s.mean.clone_from(&moments.mean);
            s.var.clone_from(&moments.var);
            s.initialized = true;
            return;
        }
        for (r, m) in s.mean.iter_mut().zip(&moments.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in s.var.iter_mut().zip(&moments.var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }

    /// Sets running stats directly (used to freeze statistics for tests).
    pub fn set_running(&mut self, id: NormId, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        let s = &mut self.norms[id.0];
        if mean.len() != s.mean.len() || var.len() != s.var.len() {
            return Err(Error::Dimension(format!(
                "running stats for {} expect {} channels",
                s.name,
                s.mean.len()
            )));
        }
        s.mean = mean;
        s.var = var;
        s.initialized = true;
        Ok(())
    }
}

/// Allocates parameters under a dotted name prefix with deterministic init.
pub(crate) struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    /// Weight with `Uniform(±1/√fan_in)` entries.
    pub fn weight(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::full(shape, 1.0))
    }
}
