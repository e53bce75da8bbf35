use super::ctx::Ctx;
use super::layers::Linear;
use super::params::{ParamId, ParamStore};
use crate::error::{config_err, Result};
use crate::tensor::{Scalar, Var};

/// `Linear(D → hidden) → GeLU → Linear(hidden → D)`; the caller adds the residual.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        if hidden == 0 || dim == 0 {
            return Err(config_err!("mlp dims must be positive (dim {dim}, hidden {hidden})"));
        }
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true),
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.gelu(h)?;
        self.fc2.forward(ctx, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }

    pub fn macs(&self, rows: usize) -> u64 {
        self.fc1.macs(rows) + self.fc2.macs(rows)
    }
}
