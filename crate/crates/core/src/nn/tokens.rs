//! Token sequences, their spatial re-arrangement, soft-split tokenization and
//! the class/position prefix of the computation stage.

use super::ctx::Ctx;
use super::params::{Init, ParamId, ParamStore};
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// `[B, N, D]` token sequence with optional spatial layout of its patch rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenTensor {
    pub data: Var,
    /// `(H_t, W_t)` of the patch rows.
    pub spatial: Option<(usize, usize)>,
    /// Row 0 is the class token.
    pub has_class: bool,
}

impl TokenTensor {
    pub fn patches(data: Var, grid: (usize, usize)) -> Self {
        TokenTensor { data, spatial: Some(grid), has_class: false }
    }

    pub fn patch_rows(&self) -> Option<usize> {
        self.spatial.map(|(h, w)| h * w)
    }
}

/// Soft-split geometry: kernel `k`, overlap `o`, padding `p`; stride is `k − o`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SoftSplit {
    pub kernel: usize,
    pub overlap: usize,
    pub padding: usize,
}

impl SoftSplit {
    pub const fn new(kernel: usize, overlap: usize, padding: usize) -> Self {
        SoftSplit { kernel, overlap, padding }
    }

    pub fn stride(&self) -> Result<usize> {
        if self.kernel == 0 || self.kernel <= self.overlap {
            return Err(config_err!("soft split needs kernel > overlap, got k={} o={}", self.kernel, self.overlap));
        }
        Ok(self.kernel - self.overlap)
    }

    /// Output grid `(⌊(H+2p−k)/(k−o)+1⌋, ⌊(W+2p−k)/(k−o)+1⌋)`.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.stride()?;
        let side = |x: usize| {
            let padded = x + 2 * self.padding;
            if padded < self.kernel {
                Err(config_err!("kernel {} exceeds padded extent {padded}", self.kernel))
            } else {
                Ok((padded - self.kernel) / s + 1)
            }
        };
        Ok((side(h)?, side(w)?))
    }

    /// Channel width after splitting `c` input channels.
    pub fn out_dim(&self, c: usize) -> usize {
        c * self.kernel * self.kernel
    }
}

/// Token count of a soft split over an `h × w` map.
pub fn patch_count(h: usize, w: usize, k: usize, o: usize, p: usize) -> Result<usize> {
    let (gh, gw) = SoftSplit::new(k, o, p).grid(h, w)?;
    Ok(gh * gw)
}

/// `[B, N, C]` → `[B, C, H_t, W_t]`, tokens placed in raster order.
pub fn seq2img<T: Scalar>(tape: &mut Tape<T>, t: TokenTensor) -> Result<Var> {
    let (h, w) = t.spatial.ok_or_else(|| shape_err!("seq2img needs spatial metadata"))?;
    if t.has_class {
        return Err(shape_err!("seq2img on a sequence that still holds the class token"));
    }
    let shape = tape.shape(t.data).to_vec();
    if shape.len() != 3 || shape[1] != h * w {
        return Err(shape_err!("seq2img: {:?} tokens do not tile a {h}x{w} grid", shape));
    }
    let x = tape.transpose(t.data, 1, 2)?;
    tape.reshape(x, &[shape[0], shape[2], h, w])
}

/// `[B, C, H, W]` → `[B, H·W, C]`, exact inverse of [`seq2img`].
pub fn img2seq<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<TokenTensor> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(shape_err!("img2seq expects [B, C, H, W], got {:?}", shape));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let r = tape.reshape(x, &[b, c, h * w])?;
    let data = tape.transpose(r, 1, 2)?;
    Ok(TokenTensor::patches(data, (h, w)))
}

/// Unfolds an image `[B, C, H, W]` into `[B, N, C·k²]` tokens.
pub fn patch_embed<T: Scalar>(tape: &mut Tape<T>, image: Var, split: SoftSplit) -> Result<TokenTensor> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 4 {
        return Err(shape_err!("patch_embed expects [B, C, H, W], got {:?}", shape));
    }
    let grid = split.grid(shape[2], shape[3])?;
    let data = tape.unfold(image, split.kernel, split.stride()?, split.padding)?;
    Ok(TokenTensor::patches(data, grid))
}

/// Re-tokenizes a patch sequence: back to image layout, then unfold.
pub fn soft_split<T: Scalar>(tape: &mut Tape<T>, t: TokenTensor, split: SoftSplit) -> Result<TokenTensor> {
    let img = seq2img(tape, t)?;
    patch_embed(tape, img, split)
}

/// Fixed sinusoidal table `[n, d]`: even channels sine, odd channels cosine.
pub fn sinusoid_table<T: Scalar>(n: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let angle = pos / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Learnable class token (optional) and the sinusoidal position signal.
#[derive(Clone, Debug)]
pub struct ClassAndPosition {
    pub cls: Option<ParamId>,
    pub dim: usize,
}

impl ClassAndPosition {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, with_class: bool) -> Self {
        let cls = with_class.then(|| store.register(format!("{name}.cls_token"), &[1, dim], Init::TruncNormal(0.02)));
        ClassAndPosition { cls, dim }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, t: TokenTensor) -> Result<TokenTensor> {
        self.forward_scaled(ctx, t, 1.0)
    }

    /// As [`forward`](Self::forward) with the position table multiplied by `pos_scale`.
    pub fn forward_scaled<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, t: TokenTensor, pos_scale: f64) -> Result<TokenTensor> {
        if t.has_class {
            return Err(shape_err!("class token already present"));
        }
        let shape = ctx.tape.shape(t.data).to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(shape_err!("expected [B, N, {}], got {:?}", self.dim, shape));
        }
        let (b, n) = (shape[0], shape[1]);
        let (x, rows) = match self.cls {
            Some(id) => {
                let cls = ctx.param(id);
                let zeros = ctx.input(Tensor::zeros(&[b, 1, self.dim]));
                let cls_b = ctx.tape.add(zeros, cls)?;
                (ctx.tape.concat(&[cls_b, t.data], 1)?, n + 1)
            }
            None => (t.data, n),
        };
        let pos = sinusoid_table::<T>(rows, self.dim).map(|v| v * T::of(pos_scale));
        let pos = ctx.input(pos);
        let data = ctx.tape.add(x, pos)?;
        Ok(TokenTensor { data, spatial: t.spatial, has_class: self.cls.is_some() })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.cls.into_iter().collect()
    }
}
