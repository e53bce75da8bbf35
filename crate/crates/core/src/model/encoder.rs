//! Reduction (ASF-R) and computation (ASF-C) encoders.

use crate::branches::{ConvBranch, ConvBranchConfig};
use crate::error::{shape_err, Result};
use crate::fusion::{Fusion, FusionConfig};
use crate::nn::{img2seq, seq2img, Attention, AttentionConfig, Ctx, LayerNorm, Linear, Mlp, ParamId, ParamStore, TokenTensor};
use crate::tensor::{Scalar, Var};

use super::config::ModelConfig;

/// One named piece of an encoder for the complexity report: the parameters it
/// owns and its per-sample multiply-accumulates.
#[derive(Clone, Debug)]
pub struct Part {
    pub name: String,
    pub params: Vec<ParamId>,
    pub macs: u64,
}

impl Part {
    pub fn new(name: impl Into<String>, params: Vec<ParamId>, macs: u64) -> Self {
        Part { name: name.into(), params, macs }
    }
}

/// The token mixer between the first norm and the residual/MLP tail.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
pub enum Mixer {
    /// Channels `[0, conv_width)` go to the conv branch, the rest to attention.
    Split { conv_width: usize, attn_width: usize, attn: Attention, conv: ConvBranch, fusion: Fusion },
    AttentionOnly(Attention),
    ConvOnly(ConvBranch),
}

impl Mixer {
    fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        d_in: usize,
        d_out: usize,
        attn_cfg: impl Fn(usize) -> AttentionConfig,
    ) -> Result<Self> {
        let conv_cfg = |c_in: usize| ConvBranchConfig {
            kind: cfg.branch.conv_kind().expect("conv path present"),
            c_in,
            c_out: d_out,
            expansion: cfg.bottleneck_ratio,
        };
        if cfg.branch.is_split() {
            let conv_width = d_in / 2;
            let attn_width = d_in - conv_width;
            let mut fcfg = FusionConfig::new(cfg.fusion, d_out);
            fcfg.with_shortcut = cfg.shortcut;
            Ok(Mixer::Split {
                conv_width,
                attn_width,
                attn: Attention::new(store, &format!("{name}.attn"), attn_cfg(attn_width))?,
                conv: ConvBranch::new(store, &format!("{name}.conv"), conv_cfg(conv_width))?,
                fusion: Fusion::new(store, &format!("{name}.fusion"), fcfg)?,
            })
        } else if cfg.branch.has_attention() {
            Ok(Mixer::AttentionOnly(Attention::new(store, &format!("{name}.attn"), attn_cfg(d_in))?))
        } else {
            Ok(Mixer::ConvOnly(ConvBranch::new(store, &format!("{name}.conv"), conv_cfg(d_in))?))
        }
    }

    fn parts(&self, prefix: &str, rows: usize, grid: (usize, usize)) -> Vec<Part> {
        let (h, w) = grid;
        match self {
            Mixer::Split { attn, conv, fusion, .. } => vec![
                Part::new(format!("{prefix}.attn"), attn.params(), attn.macs(rows)),
                Part::new(format!("{prefix}.conv"), conv.params(), conv.macs(h, w)),
                Part::new(format!("{prefix}.fusion"), fusion.params(), fusion.macs()),
            ],
            Mixer::AttentionOnly(attn) => vec![Part::new(format!("{prefix}.attn"), attn.params(), attn.macs(rows))],
            Mixer::ConvOnly(conv) => vec![Part::new(format!("{prefix}.conv"), conv.params(), conv.macs(h, w))],
        }
    }

    pub fn fusion(&self) -> Option<&Fusion> {
        match self {
            Mixer::Split { fusion, .. } => Some(fusion),
            _ => None,
        }
    }
}

fn conv_tokens<T: Scalar>(ctx: &mut Ctx<'_, T>, conv: &ConvBranch, rows: Var, grid: (usize, usize)) -> Result<Var> {
    let img = seq2img(&mut ctx.tape, TokenTensor::patches(rows, grid))?;
    let y = conv.forward(ctx, img)?;
    Ok(img2seq(&mut ctx.tape, y)?.data)
}

/// `T̂ = mixer(LN(T))`, output `T̂ + MLP(LN(T̂))`. Width changes from `d_in` to
/// the reduction width, so the mixer has no residual.
#[derive(Clone, Debug)]
pub struct ReductionEncoder {
    pub norm1: LayerNorm,
    pub mixer: Mixer,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub d_in: usize,
    pub d_out: usize,
    pub grid: (usize, usize),
}

impl ReductionEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        d_in: usize,
        grid: (usize, usize),
    ) -> Result<Self> {
        let d_out = cfg.dim_prime;
        Ok(ReductionEncoder {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_in),
            mixer: Mixer::build(store, name, cfg, d_in, d_out, AttentionConfig::t2t)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_out),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d_out, cfg.mlp_dim_r)?,
            d_in,
            d_out,
            grid,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, t: TokenTensor) -> Result<TokenTensor> {
        if t.has_class || t.spatial != Some(self.grid) {
            return Err(shape_err!("reduction encoder expects a {:?} patch grid without class token", self.grid));
        }
        let x = self.norm1.forward(ctx, t.data)?;
        let mixed = match &self.mixer {
            Mixer::Split { conv_width, attn_width, attn, conv, fusion } => {
                let parts = ctx.tape.split(x, 2, &[*conv_width, *attn_width])?;
                let b = attn.forward(ctx, parts[1])?;
                let a = conv_tokens(ctx, conv, parts[0], self.grid)?;
                fusion.forward(ctx, a, b)?.out
            }
            Mixer::AttentionOnly(attn) => attn.forward(ctx, x)?,
            Mixer::ConvOnly(conv) => conv_tokens(ctx, conv, x, self.grid)?,
        };
        let out = mlp_residual(ctx, &self.norm2, &self.mlp, mixed)?;
        Ok(TokenTensor::patches(out, self.grid))
    }

    pub fn parts(&self, prefix: &str) -> Vec<Part> {
        let n = self.grid.0 * self.grid.1;
        let mut p = vec![Part::new(format!("{prefix}.norm1"), self.norm1.params(), 0)];
        p.extend(self.mixer.parts(prefix, n, self.grid));
        p.push(Part::new(format!("{prefix}.norm2"), self.norm2.params(), 0));
        p.push(Part::new(format!("{prefix}.mlp"), self.mlp.params(), self.mlp.macs(n)));
        p
    }
}

fn mlp_residual<T: Scalar>(ctx: &mut Ctx<'_, T>, norm: &LayerNorm, mlp: &Mlp, x: Var) -> Result<Var> {
    let y = norm.forward(ctx, x)?;
    let y = mlp.forward(ctx, y)?;
    ctx.tape.add(x, y)
}

/// `X̂ = mixer(LN(X))`, `X̊ = Conv1×1(X̂) + X`, output `X̊ + MLP(LN(X̊))`. The
/// class row (when present) only passes through attention.
#[derive(Clone, Debug)]
pub struct ComputationEncoder {
    pub norm1: LayerNorm,
    pub mixer: Mixer,
    /// Pointwise map from the fused half width back to `dim`; split builds only.
    pub expand: Option<Linear>,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub dim: usize,
    pub grid: (usize, usize),
    pub has_class: bool,
}

impl ComputationEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, grid: (usize, usize)) -> Result<Self> {
        let dim = cfg.dim;
        let split = cfg.branch.is_split();
        let d_mix = if split { dim / 2 } else { dim };
        let head_dim = cfg.head_dim;
        Ok(ComputationEncoder {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            mixer: Mixer::build(store, name, cfg, dim, d_mix, |w| AttentionConfig::vanilla(w, head_dim))?,
            expand: split.then(|| Linear::new(store, &format!("{name}.conv1x1"), d_mix, dim, true)),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, cfg.mlp_dim_c)?,
            dim,
            grid,
            has_class: cfg.has_class_token(),
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, t: TokenTensor) -> Result<TokenTensor> {
        if t.has_class != self.has_class || t.spatial != Some(self.grid) {
            return Err(shape_err!(
                "computation encoder expects a {:?} grid with class token = {}",
                self.grid,
                self.has_class
            ));
        }
        let n = self.grid.0 * self.grid.1;
        let lead = usize::from(self.has_class);
        let y = self.norm1.forward(ctx, t.data)?;
        let mixed = match &self.mixer {
            Mixer::Split { conv_width, attn_width, attn, conv, fusion } => {
                let parts = ctx.tape.split(y, 2, &[*conv_width, *attn_width])?;
                let attn_out = attn.forward(ctx, parts[1])?;
                let conv_rows = ctx.tape.narrow(parts[0], 1, lead, n)?;
                let a = conv_tokens(ctx, conv, conv_rows, self.grid)?;
                let b = ctx.tape.narrow(attn_out, 1, lead, n)?;
                let fused = fusion.forward(ctx, a, b)?;
                let rows = if self.has_class {
                    let cls = ctx.tape.narrow(attn_out, 1, 0, 1)?;
                    let cls = fusion.fuse_attention_only(ctx, &fused, cls)?;
                    ctx.tape.concat(&[cls, fused.out], 1)?
                } else {
                    fused.out
                };
                match &self.expand {
                    Some(l) => l.forward(ctx, rows)?,
                    None => rows,
                }
            }
            Mixer::AttentionOnly(attn) => attn.forward(ctx, y)?,
            Mixer::ConvOnly(conv) => {
                if self.has_class {
                    return Err(shape_err!("conv-only encoder cannot carry a class token"));
                }
                conv_tokens(ctx, conv, y, self.grid)?
            }
        };
        let x = ctx.tape.add(t.data, mixed)?;
        let out = mlp_residual(ctx, &self.norm2, &self.mlp, x)?;
        Ok(TokenTensor { data: out, spatial: t.spatial, has_class: t.has_class })
    }

    pub fn parts(&self, prefix: &str) -> Vec<Part> {
        let rows = self.grid.0 * self.grid.1 + usize::from(self.has_class);
        let mut p = vec![Part::new(format!("{prefix}.norm1"), self.norm1.params(), 0)];
        p.extend(self.mixer.parts(prefix, rows, self.grid));
        if let Some(l) = &self.expand {
            p.push(Part::new(format!("{prefix}.conv1x1"), l.params(), l.macs(rows)));
        }
        p.push(Part::new(format!("{prefix}.norm2"), self.norm2.params(), 0));
        p.push(Part::new(format!("{prefix}.mlp"), self.mlp.params(), self.mlp.macs(rows)));
        p
    }
}
