use super::ctx::{Ctx, Mode};
use super::params::{Init, ParamId, ParamStore};
use crate::error::{shape_err, Result};
use crate::tensor::{Conv2dParams, NormStats, Scalar, Var};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Affine map over the last axis, weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self::with_init(store, name, d_in, d_out, bias, Init::TruncNormal(0.02))
    }

    pub fn with_init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let weight = store.register(format!("{name}.weight"), &[d_in, d_out], init);
        let bias = bias.then(|| store.register(format!("{name}.bias"), &[d_out], Init::Zeros));
        Linear { weight, bias, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let last = *ctx.tape.shape(x).last().unwrap_or(&0);
        if last != self.d_in {
            return Err(shape_err!("linear expects {} input features, got {:?}", self.d_in, ctx.tape.shape(x)));
        }
        let w = ctx.param(self.weight);
        let y = ctx.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.tape.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.d_in * self.d_out) as u64
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.register(format!("{name}.weight"), &[dim], Init::Ones),
            beta: store.register(format!("{name}.bias"), &[dim], Init::Zeros),
            dim,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        ctx.tape.layernorm(x, g, b, LN_EPS)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Normalization over axis 1 of `[B, C, ..]` with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.register(format!("{name}.weight"), &[channels], Init::Ones),
            beta: store.register(format!("{name}.bias"), &[channels], Init::Zeros),
            running_mean: store.buffer(format!("{name}.running_mean"), &[channels], Init::Zeros),
            running_var: store.buffer(format!("{name}.running_var"), &[channels], Init::Ones),
            channels,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        let mode = ctx.mode();
        let (rm, rv) = (self.running_mean, self.running_var);
        match mode {
            Mode::Train => {
                // running stats live outside the tape
                let mut mean = ctx.store().get(rm).clone();
                let mut var = ctx.store().get(rv).clone();
                let y = ctx.tape.batchnorm(
                    x,
                    g,
                    b,
                    NormStats::Train {
                        running_mean: mean.data_mut(),
                        running_var: var.data_mut(),
                        momentum: BN_MOMENTUM,
                    },
                    BN_EPS,
                )?;
                *ctx.store_mut().get_mut(rm) = mean;
                *ctx.store_mut().get_mut(rv) = var;
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.store().get(rm).clone();
                let var = ctx.store().get(rv).clone();
                ctx.tape.batchnorm(
                    x,
                    g,
                    b,
                    NormStats::Eval { running_mean: mean.data(), running_var: var.data() },
                    BN_EPS,
                )
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// 2-D convolution, weight `[C_out, C_in / groups, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let fan_out = kernel * kernel * c_out / groups;
        let weight = store.register(
            format!("{name}.weight"),
            &[c_out, c_in / groups, kernel, kernel],
            Init::KaimingFanOut(fan_out),
        );
        let bias = bias.then(|| store.register(format!("{name}.bias"), &[c_out], Init::Zeros));
        Conv2d { weight, bias, c_in, c_out, kernel, padding: kernel / 2, groups }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, Conv2dParams { stride: 1, padding: self.padding, groups: self.groups })
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    /// Stride-1, same-padding cost on an `h × w` map.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (self.c_out * h * w * (self.c_in / self.groups) * self.kernel * self.kernel) as u64
    }
}
