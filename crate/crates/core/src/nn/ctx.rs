use super::params::{ParamId, ParamStore};
use crate::error::Result;
use crate::fusion::FusionTrace;
use crate::tensor::{Grads, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BatchNorm, running statistics updated.
    Train,
    /// Running statistics; parameters and buffers untouched.
    Eval,
}

/// One forward pass: the tape, the parameters it reads, and the fusion
/// traces it emits. Parameters enter the tape as leaves on first use.
pub struct Ctx<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a mut ParamStore<T>,
    mode: Mode,
    track_params: bool,
    leaves: Vec<Option<Var>>,
    traces: Vec<FusionTrace>,
    site: usize,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        let n = store.len();
        Ctx { tape: Tape::new(), store, mode, track_params: true, leaves: vec![None; n], traces: Vec::new(), site: 0 }
    }

    /// Parameters enter as constants: no gradient bookkeeping.
    pub fn inference(store: &'a mut ParamStore<T>) -> Self {
        let mut c = Self::new(store, Mode::Eval);
        c.track_params = false;
        c
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.track_params);
        self.leaves[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    /// Index of the next fusion site, in forward order.
    pub(crate) fn next_site(&mut self) -> usize {
        self.site += 1;
        self.site
    }

    pub(crate) fn record(&mut self, trace: FusionTrace) {
        self.traces.push(trace);
    }

    pub fn traces(&self) -> &[FusionTrace] {
        &self.traces
    }

    pub fn take_traces(&mut self) -> Vec<FusionTrace> {
        std::mem::take(&mut self.traces)
    }

    /// Leaf variable of a parameter used in this pass, if any.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.leaves[id.0]
    }

    /// Gradient per parameter id; `None` for parameters the loss never read.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        let mut grads: Grads<T> = self.tape.backward(loss)?;
        Ok(self.leaves.iter().map(|l| l.and_then(|v| grads.take(v))).collect())
    }
}
