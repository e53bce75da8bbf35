use super::ctx::Ctx;
use super::layers::Linear;
use super::params::{ParamId, ParamStore};
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Scalar, Var};

/// Channel width of query/key/value in single-head token-to-token attention.
pub const T2T_QKV_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    /// Multi-head scaled dot-product attention.
    Vanilla,
    /// Single head with a fixed 64-wide query/key/value space.
    T2t,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub dim_in: usize,
    pub dim_qkv: usize,
    pub dim_out: usize,
    pub num_heads: usize,
    pub variant: AttentionVariant,
}

impl AttentionConfig {
    pub fn vanilla(dim: usize, head_dim: usize) -> Self {
        AttentionConfig {
            dim_in: dim,
            dim_qkv: dim,
            dim_out: dim,
            num_heads: (dim / head_dim.max(1)).max(1),
            variant: AttentionVariant::Vanilla,
        }
    }

    pub fn t2t(dim_in: usize) -> Self {
        AttentionConfig {
            dim_in,
            dim_qkv: T2T_QKV_DIM,
            dim_out: T2T_QKV_DIM,
            num_heads: 1,
            variant: AttentionVariant::T2t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim_in == 0 || self.dim_qkv == 0 || self.dim_out == 0 || self.num_heads == 0 {
            return Err(config_err!("attention dimensions must be positive: {:?}", self));
        }
        match self.variant {
            AttentionVariant::T2t if self.num_heads != 1 || self.dim_qkv != T2T_QKV_DIM => Err(config_err!(
                "t2t attention is single-head with {T2T_QKV_DIM} query/key/value channels, got {:?}",
                self
            )),
            AttentionVariant::Vanilla if !self.dim_qkv.is_multiple_of(self.num_heads) => Err(config_err!(
                "{} query/key/value channels do not divide into {} heads",
                self.dim_qkv,
                self.num_heads
            )),
            _ => Ok(()),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim_qkv / self.num_heads
    }
}

/// Self-attention with a fused qkv projection and an output projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub cfg: AttentionConfig,
    pub qkv: Linear,
    pub proj: Linear,
}

impl Attention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Attention {
            cfg,
            qkv: Linear::new(store, &format!("{name}.qkv"), cfg.dim_in, 3 * cfg.dim_qkv, true),
            proj: Linear::new(store, &format!("{name}.proj"), cfg.dim_qkv, cfg.dim_out, true),
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(ctx, x)?.0)
    }

    /// Output `[B, N, dim_out]` and the attention matrix `[B, heads, N, N]`.
    pub fn forward_with_weights<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.dim_in {
            return Err(shape_err!("attention expects [B, N, {}], got {:?}", self.cfg.dim_in, shape));
        }
        let (b, n) = (shape[0], shape[1]);
        let (h, hd, dq) = (self.cfg.num_heads, self.cfg.head_dim(), self.cfg.dim_qkv);
        let qkv = self.qkv.forward(ctx, x)?;
        let parts = ctx.tape.split(qkv, 2, &[dq, dq, dq])?;
        let t = &mut ctx.tape;
        let heads = |t: &mut crate::tensor::Tape<T>, v: Var, perm: &[usize]| -> Result<Var> {
            let r = t.reshape(v, &[b, n, h, hd])?;
            t.permute(r, perm)
        };
        let q = heads(t, parts[0], &[0, 2, 1, 3])?;
        let kt = heads(t, parts[1], &[0, 2, 3, 1])?;
        let v = heads(t, parts[2], &[0, 2, 1, 3])?;
        let scores = t.matmul(q, kt)?;
        let scores = t.scale(scores, T::of(1.0 / (hd as f64).sqrt()))?;
        let attn = t.softmax(scores, 3)?;
        let out = t.matmul(attn, v)?;
        let out = t.permute(out, &[0, 2, 1, 3])?;
        let out = t.reshape(out, &[b, n, dq])?;
        let out = self.proj.forward(ctx, out)?;
        Ok((out, attn))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.qkv.params();
        p.extend(self.proj.params());
        p
    }

    /// Projections plus `QKᵀ` and `attn · V` for `n` tokens.
    pub fn macs(&self, n: usize) -> u64 {
        self.qkv.macs(n) + 2 * (n * n * self.cfg.dim_qkv) as u64 + self.proj.macs(n)
    }
}
