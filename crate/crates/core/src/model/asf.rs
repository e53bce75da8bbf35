use crate::error::{shape_err, Result};
use crate::fusion::FusionTrace;
use crate::nn::{patch_embed, soft_split, ClassAndPosition, Ctx, LayerNorm, Linear, Mode, ParamStore, TokenTensor};
use crate::tensor::{Scalar, Tensor, Var};

use super::config::ModelConfig;
use super::encoder::{ComputationEncoder, Part, ReductionEncoder};

/// Layer graph of a full model. Holds parameter handles only; values live in
/// a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Asf {
    pub cfg: ModelConfig,
    pub reduction: Vec<ReductionEncoder>,
    pub project: Linear,
    pub class_pos: ClassAndPosition,
    pub computation: Vec<ComputationEncoder>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl Asf {
    pub fn build<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let trace = cfg.token_trace()?;
        let mut reduction = Vec::with_capacity(cfg.l1);
        for i in 0..cfg.l1 {
            let input = &trace[2 * i];
            reduction.push(ReductionEncoder::new(store, &format!("reduction.{i}"), cfg, input.dim, input.grid)?);
        }
        let last = &trace[2 * cfg.l1];
        let project = Linear::new(store, "project", last.dim, cfg.dim, true);
        let class_pos = ClassAndPosition::new(store, "embed", cfg.dim, cfg.has_class_token());
        let computation = (0..cfg.l2)
            .map(|j| ComputationEncoder::new(store, &format!("computation.{j}"), cfg, last.grid))
            .collect::<Result<Vec<_>>>()?;
        Ok(Asf {
            cfg: cfg.clone(),
            reduction,
            project,
            class_pos,
            computation,
            norm: LayerNorm::new(store, "norm", cfg.dim),
            head: Linear::new(store, "head", cfg.dim, cfg.num_classes, true),
        })
    }

    /// `[B, C, H, W]` images → `[B, classes]` logits.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<Var> {
        let shape = ctx.tape.shape(images).to_vec();
        let s = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != self.cfg.in_chans || shape[2] != s || shape[3] != s {
            return Err(shape_err!("expected images [B, {}, {s}, {s}], got {:?}", self.cfg.in_chans, shape));
        }
        let mut t = patch_embed(&mut ctx.tape, images, self.cfg.patch[0])?;
        for (i, enc) in self.reduction.iter().enumerate() {
            t = enc.forward(ctx, t)?;
            t = soft_split(&mut ctx.tape, t, self.cfg.patch[i + 1])?;
        }
        let data = self.project.forward(ctx, t.data)?;
        let mut t = self.class_pos.forward(ctx, TokenTensor { data, ..t })?;
        for enc in &self.computation {
            t = enc.forward(ctx, t)?;
        }
        let y = self.norm.forward(ctx, t.data)?;
        let feat = if t.has_class {
            let c = ctx.tape.narrow(y, 1, 0, 1)?;
            ctx.tape.reshape(c, &[shape[0], self.cfg.dim])?
        } else {
            ctx.tape.mean(y, 1)?
        };
        self.head.forward(ctx, feat)
    }

    /// Every parameter-owning or compute-carrying piece, in forward order.
    pub fn parts(&self) -> Vec<Part> {
        let trace = self.cfg.token_trace().expect("validated at build");
        let tokens = trace.last().map_or(0, |s| s.tokens);
        let mut out = Vec::new();
        for (i, enc) in self.reduction.iter().enumerate() {
            out.extend(enc.parts(&format!("reduction.{i}")));
        }
        out.push(Part::new("project", self.project.params(), self.project.macs(tokens)));
        out.push(Part::new("embed", self.class_pos.params(), 0));
        for (j, enc) in self.computation.iter().enumerate() {
            out.extend(enc.parts(&format!("computation.{j}")));
        }
        out.push(Part::new("norm", self.norm.params(), 0));
        out.push(Part::new("head", self.head.params(), self.head.macs(1)));
        out
    }
}

/// Architecture plus parameter values.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub arch: Asf,
    pub params: ParamStore<T>,
}

/// Logits and the fusion weights of one forward pass.
#[derive(Clone, Debug)]
pub struct Output<T> {
    pub logits: Tensor<T>,
    pub traces: Vec<FusionTrace>,
}

impl<T: Scalar> Model<T> {
    /// Structure only; parameter values are not allocated.
    pub fn describe_only(cfg: &ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let arch = Asf::build(cfg, &mut params)?;
        Ok(Model { arch, params })
    }

    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::describe_only(cfg)?;
        m.params.materialize(seed);
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.cfg
    }

    /// Forward without gradient bookkeeping. `Mode::Train` still updates
    /// BatchNorm running statistics.
    pub fn run(&mut self, images: &Tensor<T>, mode: Mode) -> Result<Output<T>> {
        let mut ctx = match mode {
            Mode::Eval => Ctx::inference(&mut self.params),
            Mode::Train => Ctx::new(&mut self.params, Mode::Train),
        };
        let x = ctx.input(images.clone());
        let y = self.arch.forward(&mut ctx, x)?;
        let logits = ctx.tape.value(y).clone();
        Ok(Output { logits, traces: ctx.take_traces() })
    }

    pub fn predict(&mut self, images: &Tensor<T>) -> Result<Output<T>> {
        self.run(images, Mode::Eval)
    }
}
